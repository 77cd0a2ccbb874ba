//! Subcommand bodies: each reads a resolved configuration and writes its
//! artifacts under an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serkd_core::models::ToyModel;
use serkd_core::superpixel::SuperpixelState;

use crate::config::RunConfig;
use crate::data::{gen_synthetic, Dataset};
use crate::dump::{as_batch, patch_tokens, superpixels_of, write_state};
use crate::error::{io_err, HarnessError, Result};
use crate::format::{encode_u32, load_archive, read_tensor, save_archive, write_bytes, write_tensor};
use crate::train::{
    compare, compare_text, distill, load_teacher, store_entries, train_teacher, DistillReport, TeacherReport,
};

pub const CONFIG_FILE: &str = "config.resolved";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher_metrics.log";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_LOG: &str = "metrics.log";
pub const COMPARE_FILE: &str = "compare.txt";

pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.render()).map_err(io_err(path))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(io_err(path))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    prepare_out(out, cfg)?;
    let data = gen_synthetic(&cfg.data, cfg.seed)?;
    let s = cfg.data.image_size;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let idx: Vec<usize> = (0..split.len()).collect();
        let (x, _) = split.batch(&idx)?;
        debug_assert_eq!(x.shape(), &[split.len(), s, s, 3]);
        write_tensor(&out.join(format!("{name}_images.srkd")), &x)?;
        let labels: Vec<u32> = split.labels.iter().map(|&l| l as u32).collect();
        write_bytes(
            &out.join(format!("{name}_labels.srkd")),
            &encode_u32(&[labels.len()], &labels)?,
        )?;
    }
    Ok(data)
}

pub fn train_teacher_cmd(cfg: &RunConfig, out: &Path) -> Result<TeacherReport> {
    prepare_out(out, cfg)?;
    let data = gen_synthetic(&cfg.data, cfg.seed)?;
    let (model, report, log) = train_teacher(cfg, &data)?;
    write_text(out.join(TEACHER_LOG), &log)?;
    save_archive(&out.join(TEACHER_CKPT), &store_entries(model.params()))?;
    Ok(report)
}

pub fn load_teacher_ckpt(cfg: &RunConfig, path: &Path) -> Result<ToyModel> {
    load_teacher(cfg, &load_archive(path)?)
}

pub struct DistillOutcome {
    pub report: DistillReport,
    pub compare: Option<String>,
    /// Teacher parameters re-read from the checkpoint match the ones used.
    pub checkpoint_unchanged: bool,
}

pub fn distill_cmd(cfg: &RunConfig, out: &Path, teacher_ckpt: &Path, with_compare: bool) -> Result<DistillOutcome> {
    prepare_out(out, cfg)?;
    let data = gen_synthetic(&cfg.data, cfg.seed)?;
    let teacher = load_teacher_ckpt(cfg, teacher_ckpt)?;
    let (setup, report, log) = distill(cfg, &data, &teacher)?;
    write_text(out.join(METRICS_LOG), &log)?;
    save_archive(&out.join(STUDENT_CKPT), &store_entries(&setup.trainable))?;
    let reread = load_teacher_ckpt(cfg, teacher_ckpt)?;
    let checkpoint_unchanged = reread.params().bit_identical(setup.teacher.params());
    let compare = if with_compare {
        let text = compare_text(&compare(cfg, &data, &teacher)?);
        write_text(out.join(COMPARE_FILE), &text)?;
        Some(text)
    } else {
        None
    };
    Ok(DistillOutcome {
        report,
        compare,
        checkpoint_unchanged,
    })
}

/// Superpixels of an image tensor file, of a synthetic validation image
/// otherwise. With a teacher checkpoint the teacher's visual tokens are
/// clustered, else mean-colour patch tokens.
pub fn dump_cmd(
    cfg: &RunConfig,
    out: &Path,
    input: Option<&Path>,
    teacher_ckpt: Option<&Path>,
) -> Result<(SuperpixelState, Vec<PathBuf>)> {
    prepare_out(out, cfg)?;
    let images = match input {
        Some(p) => as_batch(read_tensor(p)?)?,
        None => gen_synthetic(&cfg.data, cfg.seed)?.val.batch(&[0])?.0,
    };
    let tg = match teacher_ckpt {
        Some(p) => match load_teacher_ckpt(cfg, p)? {
            ToyModel::Vit(m) => {
                let o = m.forward(&images)?;
                serkd_core::superpixel::TokenGrid::new(
                    o.visual_tokens,
                    o.grid.0,
                    o.grid.1,
                    serkd_core::superpixel::TokenSource::VitTokens,
                )?
            }
            ToyModel::Cnn(_) => {
                return Err(HarnessError::Config(
                    "dump from a teacher checkpoint needs model.arch = vit".into(),
                ))
            }
        },
        None => patch_tokens(&images, cfg.patch)?,
    };
    let d = &cfg.distill;
    let state = superpixels_of(&tg, d.grid, d.iterations, d.kernel)?;
    let files = write_state(out, &state)?;
    Ok((state, files))
}
