//! The composite distillation objective
//! `L_dis = L_cls + λ_K·L_KD + λ_F·L_F + λ_D·L_RD + λ_A·L_RA`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::models::{CnnOutputs, ModelOutputs};
use crate::relational::{loss_ra_sp, loss_rd_sp, AngleLossPlan};
use crate::superpixel::{sample_superpixels, Kernel, TokenGrid, TokenSource};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_with, TokenizerKind, TokenizerSpec};

/// How relation tokens are built from a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clustering {
    /// Relations over every visual token.
    Direct,
    /// `H_t × W_t` max pooling of the grid.
    MaxPool,
    /// `H_t × W_t` average pooling of the grid.
    AvgPool,
    /// Superpixel tokens from iterative soft clustering.
    Superpixel,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda_kd: f64,
    pub lambda_feat: f64,
    pub lambda_rd: f64,
    pub lambda_ra: f64,
    /// Superpixel cell `(H_t, W_t)` in tokens.
    pub grid: (usize, usize),
    pub iterations: usize,
    pub kernel: Kernel,
    pub tokenizer: TokenizerKind,
    pub clustering: Clustering,
    pub angle_plan: AngleLossPlan,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 1.0,
            lambda_kd: 1.0,
            lambda_feat: 1.0,
            lambda_rd: 0.5,
            lambda_ra: 1.0,
            grid: (2, 2),
            iterations: 1,
            kernel: Kernel::Attention,
            tokenizer: TokenizerKind::StridedConv,
            clustering: Clustering::Superpixel,
            angle_plan: AngleLossPlan::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_feat", self.lambda_feat),
            ("lambda_rd", self.lambda_rd),
            ("lambda_ra", self.lambda_ra),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config(format!(
                "superpixel grid {:?} must be positive",
                self.grid
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("superpixel iteration count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of every objective term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub kd: f64,
    pub feat: f64,
    pub rd_sp: f64,
    pub ra_sp: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the five terms, accumulated in the objective's order.
    pub fn recompose(&self, cfg: &DistillConfig) -> f64 {
        self.cls
            + cfg.lambda_kd * self.kd
            + cfg.lambda_feat * self.feat
            + cfg.lambda_rd * self.rd_sp
            + cfg.lambda_ra * self.ra_sp
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.kd, self.feat, self.rd_sp, self.ra_sp, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean `KL(softmax(t/τ) ‖ softmax(s/τ))` over the batch; the teacher is a constant.
pub fn loss_kd(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let b = check_logits("loss_kd", student)?.0;
    if student.shape() != teacher.shape() {
        return Err(Error::shape("loss_kd", student.shape(), teacher.shape()));
    }
    check_finite("teacher logits", teacher)?;
    check_finite("student logits", student)?;
    let log_p = teacher.detach().mul_scalar(1.0 / tau).log_softmax(1)?;
    let p = log_p.exp();
    let log_q = student.mul_scalar(1.0 / tau).log_softmax(1)?;
    Ok(p.mul(&log_p.sub(&log_q)?)?.sum_all().mul_scalar(1.0 / b as f64))
}

/// Mean squared error between (projected) student tokens and teacher tokens.
pub fn loss_feat(student: &Tensor, teacher: &Tensor, projection: Option<&Tensor>) -> Result<Tensor> {
    let s = match projection {
        Some(w) => student.matmul(w)?,
        None => student.clone(),
    };
    if s.shape() != teacher.shape() {
        return Err(Error::shape("loss_feat", s.shape(), teacher.shape()));
    }
    Ok(s.sub(&teacher.detach())?.square().mean_all())
}

/// Mean cross-entropy of the true class.
pub fn loss_cls(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = check_logits("loss_cls", logits)?;
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut onehot = vec![0.0; b * k];
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        onehot[row * k + y] = 1.0;
    }
    let onehot = Tensor::new(onehot, &[b, k])?;
    Ok(logits
        .log_softmax(1)?
        .mul(&onehot)?
        .sum_all()
        .mul_scalar(-1.0 / b as f64))
}

fn check_logits(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, k] => Ok((b, k)),
        _ => Err(Error::Contract(format!(
            "{op}: logits must be (B,K), got {:?}",
            t.shape()
        ))),
    }
}

fn check_finite(what: &str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("{what}: non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

/// Relation tokens `(B, M, C)` for one token grid under the configured clustering.
pub fn relation_tokens(tg: &TokenGrid, cfg: &DistillConfig) -> Result<Tensor> {
    let (ht, wt) = cfg.grid;
    let pooled = |max: bool| -> Result<Tensor> {
        if !tg.rows.is_multiple_of(ht) || !tg.cols.is_multiple_of(wt) {
            return Err(Error::Config(format!(
                "token grid {}x{} is not divisible by cell {ht}x{wt}",
                tg.rows, tg.cols
            )));
        }
        let (b, c) = (tg.batch(), tg.channels());
        let map = tg.tokens.reshape(&[b, tg.rows, tg.cols, c])?;
        let map = if max {
            map.max_pool2d((ht, wt), (ht, wt))?
        } else {
            map.avg_pool2d((ht, wt), (ht, wt))?
        };
        map.reshape(&[b, (tg.rows / ht) * (tg.cols / wt), c])
    };
    match cfg.clustering {
        Clustering::Direct => Ok(tg.tokens.clone()),
        Clustering::MaxPool => pooled(true),
        Clustering::AvgPool => pooled(false),
        Clustering::Superpixel => Ok(sample_superpixels(tg, ht, wt, cfg.iterations, cfg.kernel)?.s),
    }
}

/// What the objective needs from one model's forward pass.
#[derive(Debug, Clone)]
pub struct Branch {
    pub cls_logits: Tensor,
    /// Logits compared against the teacher (distillation head when present).
    pub kd_logits: Tensor,
    /// Token grids the feature and relational terms act on, one per stage.
    pub grids: Vec<TokenGrid>,
}

impl Branch {
    pub fn from_vit(out: &ModelOutputs) -> Result<Branch> {
        let (rows, cols) = out.grid;
        Ok(Branch {
            cls_logits: out.cls_logits.clone(),
            kd_logits: out.dist_logits.clone().unwrap_or_else(|| out.cls_logits.clone()),
            grids: vec![TokenGrid::new(
                out.visual_tokens.clone(),
                rows,
                cols,
                TokenSource::VitTokens,
            )?],
        })
    }

    /// Tokenize every stage map with its spec. The teacher passes
    /// `detach_theta` so no gradient reaches a learnable tokenizer from it.
    pub fn from_cnn(out: &CnnOutputs, specs: &[TokenizerSpec], detach_theta: bool) -> Result<Branch> {
        if specs.len() != out.stages.len() {
            return Err(Error::Config(format!(
                "{} tokenizer specs for {} stages",
                specs.len(),
                out.stages.len()
            )));
        }
        let grids = out
            .stages
            .iter()
            .zip(specs)
            .map(|(f, spec)| tokenize_with(f, spec, detach_theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Branch {
            cls_logits: out.logits.clone(),
            kd_logits: out.logits.clone(),
            grids,
        })
    }
}

/// The weighted objective and its per-term report.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

/// Assemble the objective. `projections[s]` maps student stage `s` channels
/// to the teacher's for the feature term (`None` when they already agree).
/// Stage terms are summed with equal weight.
pub fn total_loss(
    student: &Branch,
    teacher: &Branch,
    labels: &[usize],
    projections: &[Option<Tensor>],
    cfg: &DistillConfig,
) -> Result<Objective> {
    cfg.validate()?;
    if student.grids.len() != teacher.grids.len() {
        return Err(Error::Contract(format!(
            "student has {} token stages, teacher {}",
            student.grids.len(),
            teacher.grids.len()
        )));
    }
    if !projections.is_empty() && projections.len() != student.grids.len() {
        return Err(Error::Contract(format!(
            "{} projections for {} stages",
            projections.len(),
            student.grids.len()
        )));
    }
    let cls = loss_cls(&student.cls_logits, labels)?;
    let kd = loss_kd(&student.kd_logits, &teacher.kd_logits, cfg.tau)?;

    let mut feat: Option<Tensor> = None;
    let mut rd: Option<Tensor> = None;
    let mut ra: Option<Tensor> = None;
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&t)?,
            None => t,
        });
        Ok(())
    };
    for (s, (sg, tg)) in student.grids.iter().zip(&teacher.grids).enumerate() {
        if (sg.rows, sg.cols) != (tg.rows, tg.cols) {
            return Err(Error::Config(format!(
                "stage {s}: student grid {}x{} vs teacher grid {}x{}",
                sg.rows, sg.cols, tg.rows, tg.cols
            )));
        }
        let proj = projections.get(s).and_then(Option::as_ref);
        acc(&mut feat, loss_feat(&sg.tokens, &tg.tokens, proj)?)?;
        if cfg.lambda_rd == 0.0 && cfg.lambda_ra == 0.0 {
            continue;
        }
        let s_rel = relation_tokens(sg, cfg)?;
        let t_rel = relation_tokens(tg, cfg)?.detach();
        if cfg.lambda_rd != 0.0 {
            acc(&mut rd, loss_rd_sp(&s_rel, &t_rel)?)?;
        }
        if cfg.lambda_ra != 0.0 {
            acc(&mut ra, loss_ra_sp(&s_rel, &t_rel, &cfg.angle_plan)?)?;
        }
    }
    let zero = || Tensor::scalar(0.0);
    let feat = feat.unwrap_or_else(zero);
    let rd = rd.unwrap_or_else(zero);
    let ra = ra.unwrap_or_else(zero);

    let total = cls
        .add(&kd.mul_scalar(cfg.lambda_kd))?
        .add(&feat.mul_scalar(cfg.lambda_feat))?
        .add(&rd.mul_scalar(cfg.lambda_rd))?
        .add(&ra.mul_scalar(cfg.lambda_ra))?;
    let report = LossReport {
        cls: cls.item()?,
        kd: kd.item()?,
        feat: feat.item()?,
        rd_sp: rd.item()?,
        ra_sp: ra.item()?,
        total: total.item()?,
    };
    if !report.is_finite() {
        return Err(Error::Numerical(format!("non-finite objective {report:?}")));
    }
    Ok(Objective { total, report })
}
