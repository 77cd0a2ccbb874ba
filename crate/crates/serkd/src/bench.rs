//! Timing and memory of the three angle-loss strategies.

use std::time::Instant;

use serkd_core::meter::AllocMeter;
use serkd_core::relational::{angle_memory_model, format_gb, loss_ra_sp, AngleLossPlan, AngleStrategy};
use serkd_core::rng::SeededRng;
use serkd_core::Tensor;

use crate::config::strategy_name;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub b: usize,
    pub l: usize,
    pub c: usize,
    /// Bytes per element for the memory model.
    pub bytes: usize,
    pub tile: usize,
    pub strategies: Vec<AngleStrategy>,
    /// Skip a strategy whose modeled f64 scratch exceeds this.
    pub max_bytes: u64,
    /// Skip the naive loop above this many `B·L³·C` multiply-adds.
    pub max_naive_ops: u64,
    /// Skip the other strategies above this many multiply-adds.
    pub max_ops: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: AngleStrategy,
    pub seconds: Option<f64>,
    pub peak_aux_bytes: Option<usize>,
    pub loss: Option<f64>,
    pub skipped: Option<String>,
}

/// Figures quoted for the two reference shapes at two bytes per element.
pub fn reference_gb(b: usize, l: usize, c: usize, bytes: usize) -> Option<f64> {
    match (b, l, c, bytes) {
        (128, 49, 768, 2) => Some(0.95),
        (128, 196, 768, 2) => Some(17.73),
        _ => None,
    }
}

pub fn run(spec: &BenchSpec) -> Result<(u64, Vec<BenchRow>)> {
    let modeled = angle_memory_model(spec.b, spec.l, spec.c, spec.bytes)?;
    let f64_model = angle_memory_model(spec.b, spec.l, spec.c, 8)?;
    let cube = (spec.b as u64) * (spec.l as u64).pow(3);
    let mut rows = Vec::new();
    let mut inputs: Option<(Tensor, Tensor)> = None;
    for &strategy in &spec.strategies {
        let ops = cube.saturating_mul(spec.c as u64);
        let (l, c, t) = (spec.l as u64, spec.c as u64, spec.tile as u64);
        let (estimate, op_limit) = match strategy {
            AngleStrategy::Naive => (0, spec.max_naive_ops),
            AngleStrategy::Vectorized => (f64_model, spec.max_ops),
            // per-tile units, norms and angle blocks for both sides
            AngleStrategy::Tiled => (8 * 2 * t * l * (c + 1 + l), spec.max_ops),
        };
        let skipped = if estimate > spec.max_bytes {
            Some(format!("needs ~{} of f64 scratch", format_gb(estimate)))
        } else if ops > op_limit {
            Some(format!("{ops} multiply-adds exceed the limit"))
        } else {
            None
        };
        if let Some(reason) = skipped {
            rows.push(BenchRow {
                strategy,
                seconds: None,
                peak_aux_bytes: None,
                loss: None,
                skipped: Some(reason),
            });
            continue;
        }
        let (s, t) = inputs.get_or_insert_with(|| {
            let mut rng = SeededRng::new(spec.seed);
            let n = spec.b * spec.l * spec.c;
            let shape = [spec.b, spec.l, spec.c];
            let s = Tensor::leaf(rng.uniform_vec(n, -1.0, 1.0), &shape, true).expect("positive dims");
            let t = Tensor::new(rng.uniform_vec(n, -1.0, 1.0), &shape).expect("positive dims");
            (s, t)
        });
        let meter = AllocMeter::new();
        let plan = AngleLossPlan {
            strategy,
            tile: spec.tile,
            budget: usize::MAX,
            meter: Some(meter.clone()),
        };
        let start = Instant::now();
        let loss = loss_ra_sp(s, t, &plan)?;
        let seconds = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            strategy,
            seconds: Some(seconds),
            peak_aux_bytes: Some(meter.peak_bytes()),
            loss: Some(loss.item()?),
            skipped: None,
        });
    }
    Ok((modeled, rows))
}

pub fn table(spec: &BenchSpec, modeled: u64, rows: &[BenchRow]) -> String {
    let reference = reference_gb(spec.b, spec.l, spec.c, spec.bytes)
        .map(|g| format!("{g:.2} GB"))
        .unwrap_or_else(|| "-".into());
    let mut s = format!(
        "modeled memory ({} bytes/element): {} ({modeled} bytes), reference: {reference}\n",
        spec.bytes,
        format_gb(modeled)
    );
    s.push_str(&format!(
        "{:<11} {:>5} {:>5} {:>5} {:>10} {:>16} {:>16}  loss\n",
        "strategy", "B", "L", "C", "seconds", "modeled_bytes", "peak_aux_bytes"
    ));
    for r in rows {
        let name = strategy_name(r.strategy);
        match &r.skipped {
            Some(reason) => s.push_str(&format!(
                "{name:<11} {:>5} {:>5} {:>5} {:>10} {modeled:>16} {:>16}  skipped: {reason}\n",
                spec.b, spec.l, spec.c, "-", "-"
            )),
            None => s.push_str(&format!(
                "{name:<11} {:>5} {:>5} {:>5} {:>10.4} {modeled:>16} {:>16}  {:.12e}\n",
                spec.b,
                spec.l,
                spec.c,
                r.seconds.unwrap_or(f64::NAN),
                r.peak_aux_bytes.unwrap_or(0),
                r.loss.unwrap_or(f64::NAN)
            )),
        }
    }
    s
}
