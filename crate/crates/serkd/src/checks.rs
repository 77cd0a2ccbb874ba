//! Finite-difference checks over every loss and the full objective.

use serkd_core::gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
use serkd_core::models::ToyModel;
use serkd_core::objective::{loss_cls, loss_feat, loss_kd};
use serkd_core::relational::{loss_ra_sp, loss_rd_sp, AngleLossPlan};
use serkd_core::rng::SeededRng;
use serkd_core::superpixel::{associate_attention, init_superpixels, TokenGrid, TokenSource};
use serkd_core::Tensor;

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::{build_teacher, DistillSetup, Streams};

pub const STEP: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const SAMPLED_PARAMS: usize = 32;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn row(name: &'static str, r: GradCheckReport, tol: f64) -> CheckRow {
    CheckRow {
        name,
        coords: r.analytic.len(),
        max_rel_error: r.max_rel_error,
        tol,
    }
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.uniform_vec(n, -1.0, 1.0), shape).expect("positive dims")
}

/// Run every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    let (b, l, c) = (2, 6, 4);

    let s = rand_tensor(&mut rng, &[b, l, c]);
    let t = rand_tensor(&mut rng, &[b, l, c]);
    let r = finite_diff_check(|x| loss_rd_sp(x, &t), &s, STEP)?;
    rows.push(row("loss_rd_sp", r, LOSS_TOL));
    for (name, plan) in [
        ("loss_ra_sp (naive)", AngleLossPlan::naive()),
        ("loss_ra_sp (vectorized)", AngleLossPlan::vectorized()),
        ("loss_ra_sp (tiled)", AngleLossPlan::tiled(4)),
    ] {
        let r = finite_diff_check(|x| loss_ra_sp(x, &t, &plan), &s, STEP)?;
        rows.push(row(name, r, LOSS_TOL));
    }

    let lt = rand_tensor(&mut rng, &[3, 5]).mul_scalar(2.0);
    let ls = rand_tensor(&mut rng, &[3, 5]).mul_scalar(2.0);
    let r = finite_diff_check(|x| loss_kd(x, &lt, 2.0), &ls, STEP)?;
    rows.push(row("loss_kd", r, LOSS_TOL));

    let proj = rand_tensor(&mut rng, &[c, 3]);
    let ft = rand_tensor(&mut rng, &[b, l, 3]);
    let r = finite_diff_check(|x| loss_feat(x, &ft, Some(&proj)), &s, STEP)?;
    rows.push(row("loss_feat", r, LOSS_TOL));
    let r = finite_diff_check(|w| loss_feat(&s, &ft, Some(w)), &proj, STEP)?;
    rows.push(row("loss_feat (projection)", r, LOSS_TOL));

    let r = finite_diff_check(|x| loss_cls(x, &[0, 4, 2]), &ls, STEP)?;
    rows.push(row("loss_cls", r, LOSS_TOL));

    let tokens = rand_tensor(&mut rng, &[2, 16, 3]);
    let r = finite_diff_check(
        |x| {
            let tg = TokenGrid::new(x.clone(), 4, 4, TokenSource::VitTokens)?;
            let st = associate_attention(&tg, &init_superpixels(&tg, 2, 2)?)?;
            Ok(st.s.sum_all())
        },
        &tokens,
        STEP,
    )?;
    rows.push(row("superpixel attention step", r, LOSS_TOL));

    rows.push(end_to_end(seed)?);
    Ok(rows)
}

/// Configuration for the end-to-end check: a tiny ViT pair on 8×8 images.
pub fn end_to_end_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    for (k, v) in [
        ("data.image_size", "8"),
        ("data.classes", "3"),
        ("model.patch", "2"),
        ("teacher.dim", "8"),
        ("teacher.depth", "2"),
        ("student.dim", "6"),
        ("student.depth", "1"),
    ] {
        cfg.set(k, v).expect("valid key");
    }
    cfg
}

/// L_dis with respect to a seeded sample of student-side parameters.
pub fn end_to_end(seed: u64) -> Result<CheckRow> {
    let cfg = end_to_end_config(seed);
    let mut streams = Streams::new(seed);
    let teacher: ToyModel = build_teacher(&cfg, &mut streams.teacher_init)?;
    let setup = DistillSetup::new(&cfg, &teacher, &mut streams)?;
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let size = cfg.data.image_size;
    let x = Tensor::new(rng.uniform_vec(3 * size * size * 3, -1.0, 1.0), &[3, size, size, 3])?;
    let y = [0usize, 2, 1];

    let params: Vec<Tensor> = setup.trainable.iter().map(|(_, t)| t.clone()).collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut coords = Vec::with_capacity(SAMPLED_PARAMS);
    for _ in 0..SAMPLED_PARAMS.min(total) {
        let mut flat = rng.below(total);
        for p in &params {
            if flat < p.numel() {
                coords.push((p.clone(), flat));
                break;
            }
            flat -= p.numel();
        }
    }
    let r = finite_diff_check_params(|| Ok(setup.objective(&x, &y).map_err(core_err)?.total), &coords, STEP)?;
    Ok(row("end-to-end L_dis", r, END_TO_END_TOL))
}

fn core_err(e: crate::error::HarnessError) -> serkd_core::Error {
    match e {
        crate::error::HarnessError::Core(c) => c,
        other => serkd_core::Error::Contract(other.to_string()),
    }
}

pub fn table(rows: &[CheckRow]) -> String {
    let mut s = format!(
        "{:<28} {:>6} {:>12} {:>8}  result\n",
        "check", "coords", "max_rel_err", "tol"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>6} {:>12.3e} {:>8.0e}  {}\n",
            r.name,
            r.coords,
            r.max_rel_error,
            r.tol,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
