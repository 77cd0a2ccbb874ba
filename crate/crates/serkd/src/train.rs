//! Teacher pre-training and the distillation loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serkd_core::models::{ParamStore, ToyCnn, ToyModel, ToyVit};
use serkd_core::objective::{loss_cls, total_loss, Branch, DistillConfig, LossReport};
use serkd_core::optim::Optimizer;
use serkd_core::rng::SeededRng;
use serkd_core::tokenizer::{stage_plan, TokenizerKind, TokenizerSpec};
use serkd_core::{Error as CoreError, Tensor};

use crate::config::{Arch, RunConfig, StudentInit, TrainSpec};
use crate::data::{Dataset, Split};
use crate::error::{HarnessError, Result};

/// Independent random streams derived from the run seed.
pub struct Streams {
    pub teacher_init: SeededRng,
    pub student_init: SeededRng,
    pub teacher_order: SeededRng,
    pub student_order: SeededRng,
    pub projection: SeededRng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let mut master = SeededRng::new(seed);
        Streams {
            teacher_init: master.fork(),
            student_init: master.fork(),
            teacher_order: master.fork(),
            student_order: master.fork(),
            projection: master.fork(),
        }
    }
}

/// One `LossReport` as a metrics line, 9 significant digits per value.
pub fn report_line(prefix: &str, r: &LossReport) -> String {
    format!(
        "{prefix} cls={:.8e} kd={:.8e} feat={:.8e} rd_sp={:.8e} ra_sp={:.8e} total={:.8e}",
        r.cls, r.kd, r.feat, r.rd_sp, r.ra_sp, r.total
    )
}

pub fn build_teacher(cfg: &RunConfig, rng: &mut SeededRng) -> Result<ToyModel> {
    Ok(match cfg.arch {
        Arch::Vit => ToyModel::Vit(ToyVit::new(cfg.teacher_vit(), rng)?),
        Arch::Cnn => ToyModel::Cnn(ToyCnn::new(cfg.teacher_cnn(), rng)?),
    })
}

pub fn build_student(cfg: &RunConfig, rng: &mut SeededRng) -> Result<ToyModel> {
    Ok(match cfg.arch {
        Arch::Vit => ToyModel::Vit(ToyVit::new(cfg.student_vit(), rng)?),
        Arch::Cnn => ToyModel::Cnn(ToyCnn::new(cfg.student_cnn(), rng)?),
    })
}

/// Shuffled mini-batches covering the split once; the last may be short.
fn epoch_batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &ToyModel, split: &Split, batch: usize) -> Result<f64> {
    let frozen = model.with_requires_grad(false);
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = split.batch(chunk)?;
        let pred = argmax_rows(&frozen.predict(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

fn new_optimizer(spec: &TrainSpec, batches_per_epoch: usize) -> Result<Optimizer> {
    Ok(Optimizer::new(spec.optim.clone(), spec.epochs * batches_per_epoch)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReport {
    pub steps: usize,
    pub val_acc: f64,
}

/// Train the teacher on the classification loss alone. Returns the model
/// and the metrics log text.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset) -> Result<(ToyModel, TeacherReport, String)> {
    cfg.validate()?;
    let mut streams = Streams::new(cfg.seed);
    let model = build_teacher(cfg, &mut streams.teacher_init)?;
    let spec = &cfg.train;
    let per_epoch = data.train.len().div_ceil(spec.batch_size);
    let mut opt = new_optimizer(spec, per_epoch)?;
    let mut log = String::new();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        for batch in epoch_batches(data.train.len(), spec.batch_size, &mut streams.teacher_order) {
            let (x, y) = data.train.batch(&batch)?;
            model.params().zero_grad();
            let loss = loss_cls(&model.predict(&x)?, &y)?;
            let v = loss.item()?;
            if !v.is_finite() {
                return Err(HarnessError::NonFiniteLoss { step });
            }
            loss.backward()?;
            opt.step(model.params()).map_err(|e| nonfinite(e, step))?;
            writeln!(log, "step={step} cls={v:.8e}").expect("writing to a String");
            step += 1;
        }
        let acc = accuracy(&model, &data.val, spec.batch_size)?;
        writeln!(log, "epoch={} val_acc={acc:.6}", epoch + 1).expect("writing to a String");
    }
    let val_acc = accuracy(&model, &data.val, spec.batch_size)?;
    Ok((model, TeacherReport { steps: step, val_acc }, log))
}

fn nonfinite(e: CoreError, step: usize) -> HarnessError {
    match e {
        CoreError::Numerical(_) | CoreError::NonFinite { .. } => HarnessError::NonFiniteLoss { step },
        other => other.into(),
    }
}

/// Teacher model with parameters taken from a checkpoint.
pub fn load_teacher(cfg: &RunConfig, entries: &BTreeMap<String, Tensor>) -> Result<ToyModel> {
    let mut rng = SeededRng::new(0);
    let model = build_teacher(cfg, &mut rng)?;
    let mut store = ParamStore::new();
    for (k, v) in entries {
        store.insert(k.clone(), v.clone());
    }
    model.params().load_from(&store)?;
    Ok(model)
}

pub fn store_entries(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Everything the distillation loop trains or reads.
pub struct DistillSetup {
    pub teacher: ToyModel,
    pub student: ToyModel,
    /// Student→teacher channel maps for the feature term, per token stage.
    pub projections: Vec<Option<Tensor>>,
    /// Tokenizers shared by both models (CNN path only).
    pub tokenizers: Vec<TokenizerSpec>,
    /// Student parameters, projections and learnable tokenizer kernels.
    pub trainable: ParamStore,
    pub config: DistillConfig,
}

impl DistillSetup {
    pub fn new(cfg: &RunConfig, teacher: &ToyModel, streams: &mut Streams) -> Result<Self> {
        cfg.validate()?;
        let teacher = teacher.with_requires_grad(false);
        let student = match cfg.student_init {
            StudentInit::Random => build_student(cfg, &mut streams.student_init)?,
            StudentInit::Teacher => teacher.with_requires_grad(true),
        };
        let mut trainable = student.params().clone();
        let (mut projections, mut tokenizers) = (Vec::new(), Vec::new());
        let channel_pairs: Vec<(usize, usize)> = match (&student, &teacher) {
            (ToyModel::Vit(s), ToyModel::Vit(t)) => vec![(s.config.dim, t.config.dim)],
            (ToyModel::Cnn(s), ToyModel::Cnn(t)) => (0..3)
                .map(|st| (s.config.stage_channels(st), t.config.stage_channels(st)))
                .collect(),
            _ => return Err(HarnessError::Config("teacher and student architectures differ".into())),
        };
        for (st, &(cs, ct)) in channel_pairs.iter().enumerate() {
            projections.push(if cs == ct {
                None
            } else {
                let std = 1.0 / (cs as f64).sqrt();
                let w = Tensor::leaf(streams.projection.normal_vec(cs * ct, 0.0, std), &[cs, ct], true)?;
                trainable.insert(format!("proj.{st}.w"), w.clone());
                Some(w)
            });
            if cfg.arch == Arch::Cnn {
                let kind = cfg.distill.tokenizer;
                if kind == TokenizerKind::StridedConv && cs != ct {
                    return Err(HarnessError::Config(format!(
                        "a shared strided-conv tokenizer needs equal stage widths, stage {st} has {cs} vs {ct}"
                    )));
                }
                let s = stage_plan(st + 1)?;
                let spec = TokenizerSpec::build(kind, (s, s), cs);
                if let Some(theta) = &spec.theta {
                    trainable.insert(format!("tokenizer.{st}.theta"), theta.clone());
                }
                tokenizers.push(spec);
            }
        }
        Ok(DistillSetup {
            teacher,
            student,
            projections,
            tokenizers,
            trainable,
            config: cfg.distill.clone(),
        })
    }

    fn branch(&self, model: &ToyModel, x: &Tensor, is_teacher: bool) -> Result<Branch> {
        Ok(match model {
            ToyModel::Vit(m) => Branch::from_vit(&m.forward(x)?)?,
            ToyModel::Cnn(m) => Branch::from_cnn(&m.forward(x)?, &self.tokenizers, is_teacher)?,
        })
    }

    pub fn student_branch(&self, x: &Tensor) -> Result<Branch> {
        self.branch(&self.student, x, false)
    }

    pub fn teacher_branch(&self, x: &Tensor) -> Result<Branch> {
        self.branch(&self.teacher, x, true)
    }

    pub fn objective(&self, x: &Tensor, y: &[usize]) -> Result<serkd_core::objective::Objective> {
        let s = self.student_branch(x)?;
        let t = self.teacher_branch(x)?;
        Ok(total_loss(&s, &t, y, &self.projections, &self.config)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub steps: usize,
    /// Objective on the fixed probe batch before the first update.
    pub initial: LossReport,
    /// Objective on the same probe batch after the last update.
    pub fin: LossReport,
    pub val_acc: Vec<f64>,
    pub teacher_unchanged: bool,
}

/// Run the distillation loop. The probe batch is the first `batch_size`
/// validation samples.
pub fn distill(cfg: &RunConfig, data: &Dataset, teacher: &ToyModel) -> Result<(DistillSetup, DistillReport, String)> {
    let reference = teacher.params().with_requires_grad(false);
    let mut streams = Streams::new(cfg.seed);
    let setup = DistillSetup::new(cfg, teacher, &mut streams)?;
    let spec = &cfg.distill_train;
    let per_epoch = data.train.len().div_ceil(spec.batch_size);
    let mut opt = new_optimizer(spec, per_epoch)?;

    let probe: Vec<usize> = (0..spec.batch_size.min(data.val.len())).collect();
    let (px, py) = data.val.batch(&probe)?;
    let initial = setup.objective(&px, &py).map_err(|e| harness_nonfinite(e, 0))?.report;

    let mut log = String::new();
    writeln!(log, "{}", report_line("probe=initial", &initial)).expect("writing to a String");
    let mut step = 0;
    let mut val_acc = Vec::new();
    for epoch in 0..spec.epochs {
        for batch in epoch_batches(data.train.len(), spec.batch_size, &mut streams.student_order) {
            let (x, y) = data.train.batch(&batch)?;
            setup.trainable.zero_grad();
            let obj = setup.objective(&x, &y).map_err(|e| harness_nonfinite(e, step))?;
            obj.total.backward()?;
            opt.step(&setup.trainable).map_err(|e| nonfinite(e, step))?;
            writeln!(log, "{}", report_line(&format!("step={step}"), &obj.report)).expect("writing to a String");
            step += 1;
        }
        let acc = accuracy(&setup.student, &data.val, spec.batch_size)?;
        writeln!(log, "epoch={} val_acc={acc:.6}", epoch + 1).expect("writing to a String");
        val_acc.push(acc);
    }
    let fin = setup
        .objective(&px, &py)
        .map_err(|e| harness_nonfinite(e, step))?
        .report;
    writeln!(log, "{}", report_line("probe=final", &fin)).expect("writing to a String");
    let teacher_unchanged = setup.teacher.params().bit_identical(&reference);
    Ok((
        setup,
        DistillReport {
            steps: step,
            initial,
            fin,
            val_acc,
            teacher_unchanged,
        },
        log,
    ))
}

fn harness_nonfinite(e: HarnessError, step: usize) -> HarnessError {
    match e {
        HarnessError::Core(c) => nonfinite(c, step),
        other => other,
    }
}

/// One row of the comparison between objective variants.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: &'static str,
    pub val_acc: f64,
    pub initial_total: f64,
    pub final_total: f64,
}

/// The configured objective against the no-relation baseline
/// (`λ_D = λ_A = 0`) and average-pooling relation tokens.
pub fn compare(cfg: &RunConfig, data: &Dataset, teacher: &ToyModel) -> Result<Vec<CompareRow>> {
    let mut baseline = cfg.clone();
    baseline.distill.lambda_rd = 0.0;
    baseline.distill.lambda_ra = 0.0;
    let mut pooled = cfg.clone();
    pooled.distill.clustering = serkd_core::objective::Clustering::AvgPool;
    let variants = [("configured", cfg), ("baseline", &baseline), ("avg-pool", &pooled)];
    let mut rows = Vec::new();
    for (name, c) in variants {
        let (_, r, _) = distill(c, data, teacher)?;
        rows.push(CompareRow {
            name,
            val_acc: r.val_acc.last().copied().unwrap_or(f64::NAN),
            initial_total: r.initial.total,
            final_total: r.fin.total,
        });
    }
    Ok(rows)
}

pub fn compare_text(rows: &[CompareRow]) -> String {
    let mut s = String::from("variant      val_acc   initial_total   final_total\n");
    for r in rows {
        writeln!(
            s,
            "{:<12} {:<9.6} {:<15.8e} {:.8e}",
            r.name, r.val_acc, r.initial_total, r.final_total
        )
        .expect("writing to a String");
    }
    s
}
