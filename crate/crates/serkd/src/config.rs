//! Run configuration as flat `key = value` lines with dotted section prefixes.
//!
//! `#` starts a comment. Every key is optional (defaults apply), unknown or
//! repeated keys are errors. [`RunConfig::render`] writes every key in a fixed
//! order, and parsing that output yields the same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serkd_core::models::{ToyCnnConfig, ToyVitConfig};
use serkd_core::objective::{Clustering, DistillConfig};
use serkd_core::optim::{OptimizerKind, OptimizerSpec};
use serkd_core::relational::{AngleLossPlan, AngleStrategy};
use serkd_core::superpixel::Kernel;
use serkd_core::tokenizer::TokenizerKind;

use crate::data::DataSpec;
use crate::error::{HarnessError, Result};
use crate::format::read_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Vit,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    Random,
    /// Copy the teacher's weights; needs identical architectures.
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub cnn_width: usize,
    pub cnn_convs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimizerSpec,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub arch: Arch,
    pub patch: usize,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub train: TrainSpec,
    pub distill_train: TrainSpec,
    pub distill: DistillConfig,
    pub student_init: StudentInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSpec::default(),
            arch: Arch::Vit,
            patch: 4,
            teacher: ModelSpec {
                dim: 64,
                depth: 4,
                mlp_ratio: 2,
                cnn_width: 8,
                cnn_convs: 2,
            },
            student: ModelSpec {
                dim: 32,
                depth: 2,
                mlp_ratio: 2,
                cnn_width: 8,
                cnn_convs: 1,
            },
            train: TrainSpec {
                epochs: 12,
                batch_size: 32,
                optim: OptimizerSpec {
                    lr: 2e-3,
                    ..OptimizerSpec::default()
                },
            },
            distill_train: TrainSpec {
                epochs: 10,
                batch_size: 32,
                optim: OptimizerSpec {
                    lr: 2e-3,
                    ..OptimizerSpec::default()
                },
            },
            distill: DistillConfig::default(),
            student_init: StudentInit::Random,
        }
    }
}

fn kw<T: Copy + PartialEq>(table: &[(&'static str, T)], v: T) -> &'static str {
    table
        .iter()
        .find(|(_, x)| *x == v)
        .map(|(n, _)| *n)
        .expect("table covers every variant")
}

fn from_kw<T: Copy>(table: &[(&'static str, T)], s: &str) -> std::result::Result<T, String> {
    table.iter().find(|(n, _)| *n == s).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got {s:?}", names.join(" | "))
    })
}

const ARCHES: &[(&str, Arch)] = &[("vit", Arch::Vit), ("cnn", Arch::Cnn)];
const INITS: &[(&str, StudentInit)] = &[("random", StudentInit::Random), ("teacher", StudentInit::Teacher)];
const KERNELS: &[(&str, Kernel)] = &[("attention", Kernel::Attention), ("rbf", Kernel::Rbf)];
const TOKENIZERS: &[(&str, TokenizerKind)] = &[
    ("max-pool", TokenizerKind::MaxPool),
    ("avg-pool", TokenizerKind::AvgPool),
    ("strided-conv", TokenizerKind::StridedConv),
];
const CLUSTERINGS: &[(&str, Clustering)] = &[
    ("direct", Clustering::Direct),
    ("max-pool", Clustering::MaxPool),
    ("avg-pool", Clustering::AvgPool),
    ("superpixel", Clustering::Superpixel),
];
const STRATEGIES: &[(&str, AngleStrategy)] = &[
    ("naive", AngleStrategy::Naive),
    ("vectorized", AngleStrategy::Vectorized),
    ("tiled", AngleStrategy::Tiled),
];
const OPTIMIZERS: &[(&str, OptimizerKind)] = &[("adamw", OptimizerKind::AdamW), ("rmsprop", OptimizerKind::RmsProp)];

pub fn clustering_name(c: Clustering) -> &'static str {
    kw(CLUSTERINGS, c)
}

pub fn strategy_from_name(s: &str) -> std::result::Result<AngleStrategy, String> {
    from_kw(STRATEGIES, s)
}

pub fn strategy_name(s: AngleStrategy) -> &'static str {
    kw(STRATEGIES, s)
}

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| format!("{s:?}: {e}"))
}

fn flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true | false, got {s:?}")),
    }
}

/// Keys of the optimizer section shared by `train.` and `distill.`.
fn optim_entries(prefix: &str, t: &TrainSpec, out: &mut Vec<(String, String)>) {
    let o = &t.optim;
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("epochs", t.epochs.to_string());
    put("batch_size", t.batch_size.to_string());
    put("optimizer", kw(OPTIMIZERS, o.kind).to_string());
    put("lr", o.lr.to_string());
    put("weight_decay", o.weight_decay.to_string());
    put("beta1", o.beta1.to_string());
    put("beta2", o.beta2.to_string());
    put("cosine", o.cosine.to_string());
    put("warmup", o.warmup.to_string());
}

fn set_optim(t: &mut TrainSpec, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let r = (|| -> std::result::Result<bool, String> {
        match key {
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "optimizer" => t.optim.kind = from_kw(OPTIMIZERS, v)?,
            "lr" => t.optim.lr = num(v)?,
            "weight_decay" => t.optim.weight_decay = num(v)?,
            "beta1" => t.optim.beta1 = num(v)?,
            "beta2" => t.optim.beta2 = num(v)?,
            "cosine" => t.optim.cosine = flag(v)?,
            "warmup" => t.optim.warmup = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    })();
    match r {
        Ok(true) => Some(Ok(())),
        Ok(false) => None,
        Err(e) => Some(Err(e)),
    }
}

fn model_entries(prefix: &str, m: &ModelSpec, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: usize| out.push((format!("{prefix}.{k}"), v.to_string()));
    put("dim", m.dim);
    put("depth", m.depth);
    put("mlp_ratio", m.mlp_ratio);
    put("cnn_width", m.cnn_width);
    put("cnn_convs", m.cnn_convs);
}

fn set_model(m: &mut ModelSpec, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let slot = match key {
        "dim" => &mut m.dim,
        "depth" => &mut m.depth,
        "mlp_ratio" => &mut m.mlp_ratio,
        "cnn_width" => &mut m.cnn_width,
        "cnn_convs" => &mut m.cnn_convs,
        _ => return None,
    };
    Some(num(v).map(|n| *slot = n))
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("seed", self.seed.to_string());
        let d = &self.data;
        put("data.classes", d.classes.to_string());
        put("data.train_per_class", d.train_per_class.to_string());
        put("data.val_per_class", d.val_per_class.to_string());
        put("data.image_size", d.image_size.to_string());
        put("data.blobs", d.blobs.to_string());
        put("data.blob_sigma", d.blob_sigma.to_string());
        put("data.jitter", d.jitter.to_string());
        put("data.noise", d.noise.to_string());
        put("model.arch", kw(ARCHES, self.arch).to_string());
        put("model.patch", self.patch.to_string());
        model_entries("teacher", &self.teacher, &mut out);
        model_entries("student", &self.student, &mut out);
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("student.init", kw(INITS, self.student_init).to_string());
        optim_entries("train", &self.train, &mut out);
        optim_entries("distill", &self.distill_train, &mut out);
        let c = &self.distill;
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("distill.tau", c.tau.to_string());
        put("distill.lambda_kd", c.lambda_kd.to_string());
        put("distill.lambda_feat", c.lambda_feat.to_string());
        put("distill.lambda_rd", c.lambda_rd.to_string());
        put("distill.lambda_ra", c.lambda_ra.to_string());
        put("distill.grid_h", c.grid.0.to_string());
        put("distill.grid_w", c.grid.1.to_string());
        put("distill.iterations", c.iterations.to_string());
        put("distill.kernel", kw(KERNELS, c.kernel).to_string());
        put("distill.tokenizer", kw(TOKENIZERS, c.tokenizer).to_string());
        put("distill.clustering", kw(CLUSTERINGS, c.clustering).to_string());
        put(
            "distill.angle_strategy",
            kw(STRATEGIES, c.angle_plan.strategy).to_string(),
        );
        put("distill.angle_tile", c.angle_plan.tile.to_string());
        put("distill.angle_budget", c.angle_plan.budget.to_string());
        out
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (section, rest) = key.split_once('.').unwrap_or((key, ""));
        let handled = match section {
            "train" => set_optim(&mut self.train, rest, v),
            "teacher" => set_model(&mut self.teacher, rest, v),
            "student" if rest == "init" => Some(from_kw(INITS, v).map(|x| self.student_init = x)),
            "student" => set_model(&mut self.student, rest, v),
            "distill" => set_optim(&mut self.distill_train, rest, v),
            _ => None,
        };
        if let Some(r) = handled {
            return r;
        }
        let d = &mut self.data;
        let c = &mut self.distill;
        match key {
            "seed" => self.seed = num(v)?,
            "data.classes" => d.classes = num(v)?,
            "data.train_per_class" => d.train_per_class = num(v)?,
            "data.val_per_class" => d.val_per_class = num(v)?,
            "data.image_size" => d.image_size = num(v)?,
            "data.blobs" => d.blobs = num(v)?,
            "data.blob_sigma" => d.blob_sigma = num(v)?,
            "data.jitter" => d.jitter = num(v)?,
            "data.noise" => d.noise = num(v)?,
            "model.arch" => self.arch = from_kw(ARCHES, v)?,
            "model.patch" => self.patch = num(v)?,
            "distill.tau" => c.tau = num(v)?,
            "distill.lambda_kd" => c.lambda_kd = num(v)?,
            "distill.lambda_feat" => c.lambda_feat = num(v)?,
            "distill.lambda_rd" => c.lambda_rd = num(v)?,
            "distill.lambda_ra" => c.lambda_ra = num(v)?,
            "distill.grid_h" => c.grid.0 = num(v)?,
            "distill.grid_w" => c.grid.1 = num(v)?,
            "distill.iterations" => c.iterations = num(v)?,
            "distill.kernel" => c.kernel = from_kw(KERNELS, v)?,
            "distill.tokenizer" => c.tokenizer = from_kw(TOKENIZERS, v)?,
            "distill.clustering" => c.clustering = from_kw(CLUSTERINGS, v)?,
            "distill.angle_strategy" => c.angle_plan.strategy = from_kw(STRATEGIES, v)?,
            "distill.angle_tile" => c.angle_plan.tile = num(v)?,
            "distill.angle_budget" => c.angle_plan.budget = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigLine {
                line: line_no,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(HarnessError::ConfigLine {
                    line: line_no,
                    msg: format!("key {k:?} given twice"),
                });
            }
            self.set(k, v)
                .map_err(|msg| HarnessError::ConfigLine { line: line_no, msg })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = read_bytes(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| HarnessError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.distill.validate()?;
        self.train.optim.validate()?;
        self.distill_train.optim.validate()?;
        for (name, t) in [("train", &self.train), ("distill", &self.distill_train)] {
            if t.batch_size == 0 {
                return Err(HarnessError::Config(format!("{name}.batch_size must be positive")));
            }
        }
        self.teacher_vit().validate()?;
        self.student_vit().validate()?;
        if self.arch == Arch::Cnn {
            self.teacher_cnn().validate()?;
            self.student_cnn().validate()?;
        }
        if self.student_init == StudentInit::Teacher && self.teacher != self.student {
            return Err(HarnessError::Config(
                "student.init = teacher needs identical teacher and student settings".into(),
            ));
        }
        Ok(())
    }

    fn vit(&self, m: &ModelSpec, distill_token: bool) -> ToyVitConfig {
        ToyVitConfig {
            image_size: self.data.image_size,
            patch: self.patch,
            dim: m.dim,
            depth: m.depth,
            mlp_ratio: m.mlp_ratio,
            classes: self.data.classes,
            distill_token,
        }
    }

    /// The teacher carries no distillation token.
    pub fn teacher_vit(&self) -> ToyVitConfig {
        self.vit(&self.teacher, self.student_init == StudentInit::Teacher)
    }

    pub fn student_vit(&self) -> ToyVitConfig {
        self.vit(&self.student, true)
    }

    fn cnn(&self, m: &ModelSpec) -> ToyCnnConfig {
        ToyCnnConfig {
            image_size: self.data.image_size,
            width: m.cnn_width,
            convs_per_stage: m.cnn_convs,
            classes: self.data.classes,
        }
    }

    pub fn teacher_cnn(&self) -> ToyCnnConfig {
        self.cnn(&self.teacher)
    }

    pub fn student_cnn(&self) -> ToyCnnConfig {
        self.cnn(&self.student)
    }

    /// Angle plan with the configured strategy, tile and budget.
    pub fn angle_plan(&self) -> AngleLossPlan {
        self.distill.angle_plan.clone()
    }
}
