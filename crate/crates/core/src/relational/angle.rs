//! Angle-wise relational loss over token sets.
//!
//! For a token set `f` of shape `(B, L, C)` the angle potential is the
//! `(B, L, L, L)` tensor `A[b,i,j,k] = ⟨û(b,i,j), û(b,i,k)⟩` with
//! `û(b,i,j) = (f_i − f_j) / max(‖f_i − f_j‖, eps)`, i.e. cosines at vertex
//! `i`. The loss is smooth-L1 between student and teacher potentials averaged
//! over all `B·L³` entries.
//!
//! Three interchangeable kernels compute it:
//! * `Naive`: one scalar evaluation per `(b, i, j, k)` triple, no buffers.
//! * `Vectorized`: materializes every unit difference and both angle
//!   tensors, keeping them for the backward pass.
//! * `Tiled`: walks the vertex axis in tiles of `tile` vertices, holding only
//!   one tile of differences and angles at a time and recomputing them in the
//!   backward pass.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_pair, huber_delta, huber_grad};
use crate::error::{Error, Result};
use crate::meter::{AllocMeter, MeteredBuf};
use crate::tensor::{Tensor, DEFAULT_EPS};

/// Upper bound on `B·L³` entries a materializing strategy may allocate.
pub const DEFAULT_ANGLE_BUDGET: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleStrategy {
    Naive,
    Vectorized,
    Tiled,
}

#[derive(Debug, Clone)]
pub struct AngleLossPlan {
    pub strategy: AngleStrategy,
    /// Vertices per tile (tiled strategy only).
    pub tile: usize,
    /// Maximum `B·L³` entries for the vectorized strategy.
    pub budget: usize,
    /// Where auxiliary buffers are charged; a private meter when `None`.
    pub meter: Option<AllocMeter>,
}

impl Default for AngleLossPlan {
    fn default() -> Self {
        AngleLossPlan {
            strategy: AngleStrategy::Vectorized,
            tile: 1,
            budget: DEFAULT_ANGLE_BUDGET,
            meter: None,
        }
    }
}

impl AngleLossPlan {
    pub fn naive() -> Self {
        AngleLossPlan {
            strategy: AngleStrategy::Naive,
            ..Self::default()
        }
    }

    pub fn vectorized() -> Self {
        Self::default()
    }

    pub fn tiled(tile: usize) -> Self {
        AngleLossPlan {
            strategy: AngleStrategy::Tiled,
            tile,
            ..Self::default()
        }
    }

    pub fn with_meter(mut self, meter: AllocMeter) -> Self {
        self.meter = Some(meter);
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    /// Check the plan against a problem of `b` batches and `l` tokens.
    pub fn validate(&self, b: usize, l: usize) -> Result<()> {
        match self.strategy {
            AngleStrategy::Tiled if self.tile == 0 || self.tile > l => {
                Err(Error::Plan(format!("tile size {} must lie in [1, {l}]", self.tile)))
            }
            AngleStrategy::Vectorized => check_budget(b, l, self.budget),
            _ => Ok(()),
        }
    }
}

fn check_budget(b: usize, l: usize, budget: usize) -> Result<()> {
    let entries = l
        .checked_pow(3)
        .and_then(|c| c.checked_mul(b))
        .ok_or_else(|| Error::Plan("angle tensor size overflows".into()))?;
    if entries > budget {
        return Err(Error::Plan(format!(
            "angle tensor needs {entries} entries (B={b}, L={l}) but the budget is {budget}; use the tiled strategy"
        )));
    }
    Ok(())
}

/// Full `(B, L, L, L)` angle potential composed from differentiable
/// primitives. Fails with a plan error when `B·L³` exceeds `budget`.
pub fn angle_tensor(feat: &Tensor, budget: usize) -> Result<Tensor> {
    let (b, l, c) = super::check_btc("angle_tensor", feat)?;
    if l < 2 {
        return Err(Error::Contract(format!("angle potentials need L >= 2, got {l}")));
    }
    check_budget(b, l, budget)?;
    let full = [b, l, l, c];
    let vertex = feat.reshape(&[b, l, 1, c])?.broadcast_to(&full)?;
    let other = feat.reshape(&[b, 1, l, c])?.broadcast_to(&full)?;
    let diff = vertex.sub(&other)?;
    let norm = diff
        .square()
        .sum_axes(&[3], true)?
        .clamp_min(DEFAULT_EPS * DEFAULT_EPS)
        .sqrt();
    let unit = diff.div(&norm.broadcast_to(&full)?)?.reshape(&[b * l, l, c])?;
    unit.matmul(&unit.transpose(1, 2)?)?.reshape(&[b, l, l, l])
}

/// Angle-wise relational loss between `(B, L, C_s)` student and
/// `(B, L, C_t)` teacher tokens; the teacher side is detached.
pub fn loss_ra_sp(student: &Tensor, teacher: &Tensor, plan: &AngleLossPlan) -> Result<Tensor> {
    let (b, l) = check_pair("loss_ra_sp", student, teacher)?;
    if l < 2 {
        return Err(Error::Contract(format!("angle potentials need L >= 2, got {l}")));
    }
    plan.validate(b, l)?;
    let meter = plan.meter.clone().unwrap_or_default();
    let s = Tokens::of(student);
    let t = Tokens::of(teacher);
    let scale = 1.0 / (b * l * l * l) as f64;
    let (value, backward): (f64, crate::tensor::BackwardFn) = match plan.strategy {
        AngleStrategy::Naive => {
            let value = naive_forward(&s, &t) * scale;
            (
                value,
                Box::new(move |ctx| {
                    if !ctx.needs[0] {
                        return vec![None];
                    }
                    vec![Some(naive_backward(&s, &t, ctx.grad[0] * scale))]
                }),
            )
        }
        AngleStrategy::Vectorized => {
            let saved = vectorized_forward(&s, &t, &meter);
            let value = saved.loss * scale;
            (
                value,
                Box::new(move |ctx| {
                    if !ctx.needs[0] {
                        return vec![None];
                    }
                    vec![Some(vectorized_backward(&s, &saved, ctx.grad[0] * scale, &meter))]
                }),
            )
        }
        AngleStrategy::Tiled => {
            let tile = plan.tile;
            let value = tiled_forward(&s, &t, tile, &meter) * scale;
            (
                value,
                Box::new(move |ctx| {
                    if !ctx.needs[0] {
                        return vec![None];
                    }
                    vec![Some(tiled_backward(&s, &t, tile, ctx.grad[0] * scale, &meter))]
                }),
            )
        }
    };
    Ok(Tensor::from_op(
        "loss_ra_sp",
        vec![1],
        vec![value],
        vec![student.clone()],
        backward,
    ))
}

/// Snapshot of a `(B, L, C)` token set.
struct Tokens {
    data: Vec<f64>,
    b: usize,
    l: usize,
    c: usize,
}

impl Tokens {
    fn of(t: &Tensor) -> Self {
        let s = t.shape();
        Tokens {
            data: t.to_vec(),
            b: s[0],
            l: s[1],
            c: s[2],
        }
    }

    fn row(&self, b: usize, i: usize) -> &[f64] {
        let o = (b * self.l + i) * self.c;
        &self.data[o..o + self.c]
    }

    /// Write `û(b,i,j)` for all `j` into `out` (`L×C`) and the clamped norms
    /// `max(‖f_i − f_j‖, eps)` into `norms` (`L`).
    fn units_at(&self, b: usize, i: usize, out: &mut [f64], norms: &mut [f64]) {
        let c = self.c;
        let fi = self.row(b, i);
        for j in 0..self.l {
            let fj = self.row(b, j);
            let u = &mut out[j * c..(j + 1) * c];
            let mut sq = 0.0;
            for ((u, a), bb) in u.iter_mut().zip(fi).zip(fj) {
                *u = a - bb;
                sq += *u * *u;
            }
            let n = libm::sqrt(sq).max(DEFAULT_EPS);
            norms[j] = n;
            u.iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scatter the gradient w.r.t. the unit vectors at vertex `i` back onto the
/// tokens: through the normalization, then through `f_i − f_j`.
fn scatter_unit_grads(s: &Tokens, b: usize, i: usize, units: &[f64], norms: &[f64], gu: &mut [f64], grad: &mut [f64]) {
    let c = s.c;
    for j in 0..s.l {
        let u = &units[j * c..(j + 1) * c];
        let g = &mut gu[j * c..(j + 1) * c];
        let n = norms[j];
        // above the floor the map is d/|d| with Jacobian (I − uuᵀ)/|d|;
        // at the floor it is d/eps
        if n > DEFAULT_EPS {
            let proj = dot(g, u);
            for (gv, uv) in g.iter_mut().zip(u) {
                *gv = (*gv - proj * uv) / n;
            }
        } else {
            g.iter_mut().for_each(|gv| *gv /= n);
        }
        let (oi, oj) = ((b * s.l + i) * c, (b * s.l + j) * c);
        for t in 0..c {
            grad[oi + t] += g[t];
            grad[oj + t] -= g[t];
        }
    }
}

fn naive_forward(s: &Tokens, t: &Tokens) -> f64 {
    let mut total = 0.0;
    let (mut us, mut ut) = (vec![0.0; s.c * 2], vec![0.0; t.c * 2]);
    for b in 0..s.b {
        for i in 0..s.l {
            for j in 0..s.l {
                for k in 0..s.l {
                    let a_s = vertex_cosine(s, b, i, j, k, &mut us);
                    let a_t = vertex_cosine(t, b, i, j, k, &mut ut);
                    total += huber_delta(a_s - a_t, 1.0);
                }
            }
        }
    }
    total
}

/// `⟨û(b,i,j), û(b,i,k)⟩`, using `scratch` (`2C`) for the two unit vectors.
fn vertex_cosine(x: &Tokens, b: usize, i: usize, j: usize, k: usize, scratch: &mut [f64]) -> f64 {
    let c = x.c;
    let mut norms = [0.0; 2];
    unit_pair(x, b, i, j, k, scratch, &mut norms);
    dot(&scratch[..c], &scratch[c..])
}

fn unit_pair(x: &Tokens, b: usize, i: usize, j: usize, k: usize, scratch: &mut [f64], norms: &mut [f64; 2]) {
    let c = x.c;
    let fi = x.row(b, i);
    for (slot, other) in [j, k].into_iter().enumerate() {
        let fo = x.row(b, other);
        let u = &mut scratch[slot * c..(slot + 1) * c];
        let mut sq = 0.0;
        for ((u, a), bb) in u.iter_mut().zip(fi).zip(fo) {
            *u = a - bb;
            sq += *u * *u;
        }
        let n = libm::sqrt(sq).max(DEFAULT_EPS);
        norms[slot] = n;
        u.iter_mut().for_each(|v| *v /= n);
    }
}

fn naive_backward(s: &Tokens, t: &Tokens, upstream: f64) -> Vec<f64> {
    let c = s.c;
    let mut grad = vec![0.0; s.data.len()];
    let (mut us, mut ut) = (vec![0.0; c * 2], vec![0.0; t.c * 2]);
    let mut norms = [0.0; 2];
    let mut gd = vec![0.0; c];
    for b in 0..s.b {
        for i in 0..s.l {
            for j in 0..s.l {
                for k in 0..s.l {
                    unit_pair(s, b, i, j, k, &mut us, &mut norms);
                    let a_s = dot(&us[..c], &us[c..]);
                    let a_t = vertex_cosine(t, b, i, j, k, &mut ut);
                    let w = upstream * huber_grad(a_s - a_t);
                    if w == 0.0 {
                        continue;
                    }
                    // ∂⟨u_j,u_k⟩/∂u_j = u_k and vice versa
                    for (slot, target) in [(0usize, j), (1usize, k)] {
                        let (u, partner) = if slot == 0 {
                            (&us[..c], &us[c..])
                        } else {
                            (&us[c..], &us[..c])
                        };
                        let n = norms[slot];
                        if n > DEFAULT_EPS {
                            let proj = dot(partner, u);
                            for q in 0..c {
                                gd[q] = w * (partner[q] - proj * u[q]) / n;
                            }
                        } else {
                            for q in 0..c {
                                gd[q] = w * partner[q] / n;
                            }
                        }
                        let (oi, oo) = ((b * s.l + i) * c, (b * s.l + target) * c);
                        for q in 0..c {
                            grad[oi + q] += gd[q];
                            grad[oo + q] -= gd[q];
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Buffers the vectorized kernel keeps alive for its backward pass.
struct VectorizedSaved {
    loss: f64,
    /// û for every (b, i, j), student side.
    units: MeteredBuf,
    norms: MeteredBuf,
    /// huber'(A_s − A_t) for every (b, i, j, k).
    dloss: MeteredBuf,
}

fn vectorized_forward(s: &Tokens, t: &Tokens, meter: &AllocMeter) -> VectorizedSaved {
    let (bsz, l) = (s.b, s.l);
    let ll = l * l;
    let lll = ll * l;
    let mut units_s = meter.alloc(bsz * ll * s.c);
    let mut norms_s = meter.alloc(bsz * ll);
    let mut angle_s = meter.alloc(bsz * lll);
    let mut angle_t = meter.alloc(bsz * lll);
    {
        // teacher units live only until its angle tensor exists
        let mut units_t = meter.alloc(bsz * ll * t.c);
        let mut norms_t = meter.alloc(bsz * ll);
        for b in 0..bsz {
            for i in 0..l {
                let o = b * l + i;
                s.units_at(
                    b,
                    i,
                    &mut units_s[o * l * s.c..(o + 1) * l * s.c],
                    &mut norms_s[o * l..(o + 1) * l],
                );
                t.units_at(
                    b,
                    i,
                    &mut units_t[o * l * t.c..(o + 1) * l * t.c],
                    &mut norms_t[o * l..(o + 1) * l],
                );
            }
        }
        for bi in 0..bsz * l {
            gram(
                &units_s[bi * l * s.c..(bi + 1) * l * s.c],
                l,
                s.c,
                &mut angle_s[bi * ll..(bi + 1) * ll],
            );
            gram(
                &units_t[bi * l * t.c..(bi + 1) * l * t.c],
                l,
                t.c,
                &mut angle_t[bi * ll..(bi + 1) * ll],
            );
        }
    }
    let mut loss = 0.0;
    for (a, bt) in angle_s.iter_mut().zip(angle_t.iter()) {
        let d = *a - bt;
        loss += huber_delta(d, 1.0);
        *a = huber_grad(d);
    }
    drop(angle_t);
    VectorizedSaved {
        loss,
        units: units_s,
        norms: norms_s,
        dloss: angle_s,
    }
}

/// `out = U Uᵀ` for `U` of shape `L×C`.
fn gram(u: &[f64], l: usize, c: usize, out: &mut [f64]) {
    for j in 0..l {
        let uj = &u[j * c..(j + 1) * c];
        for k in j..l {
            let v = dot(uj, &u[k * c..(k + 1) * c]);
            out[j * l + k] = v;
            out[k * l + j] = v;
        }
    }
}

/// `gu[j] = Σ_k (g[j,k] + g[k,j]) · u[k]`, the gradient of `Σ g ∘ (U Uᵀ)`
/// w.r.t. `U`.
fn gram_backward(g: &[f64], u: &[f64], l: usize, c: usize, gu: &mut [f64]) {
    gu.iter_mut().for_each(|x| *x = 0.0);
    for j in 0..l {
        let out = &mut gu[j * c..(j + 1) * c];
        for k in 0..l {
            let w = g[j * l + k] + g[k * l + j];
            if w == 0.0 {
                continue;
            }
            for (o, uv) in out.iter_mut().zip(&u[k * c..(k + 1) * c]) {
                *o += w * uv;
            }
        }
    }
}

fn vectorized_backward(s: &Tokens, saved: &VectorizedSaved, upstream: f64, meter: &AllocMeter) -> Vec<f64> {
    let (l, c) = (s.l, s.c);
    let ll = l * l;
    let mut grad = vec![0.0; s.data.len()];
    let mut g = meter.alloc(ll);
    let mut gu = meter.alloc(l * c);
    for b in 0..s.b {
        for i in 0..l {
            let o = b * l + i;
            for (dst, src) in g.iter_mut().zip(&saved.dloss[o * ll..(o + 1) * ll]) {
                *dst = src * upstream;
            }
            let units = &saved.units[o * l * c..(o + 1) * l * c];
            gram_backward(&g, units, l, c, &mut gu);
            scatter_unit_grads(s, b, i, units, &saved.norms[o * l..(o + 1) * l], &mut gu, &mut grad);
        }
    }
    grad
}

struct TileScratch {
    units_s: MeteredBuf,
    norms_s: MeteredBuf,
    units_t: MeteredBuf,
    norms_t: MeteredBuf,
    angle_s: MeteredBuf,
    angle_t: MeteredBuf,
}

impl TileScratch {
    fn new(tile: usize, l: usize, cs: usize, ct: usize, meter: &AllocMeter) -> Self {
        TileScratch {
            units_s: meter.alloc(tile * l * cs),
            norms_s: meter.alloc(tile * l),
            units_t: meter.alloc(tile * l * ct),
            norms_t: meter.alloc(tile * l),
            angle_s: meter.alloc(tile * l * l),
            angle_t: meter.alloc(tile * l * l),
        }
    }

    /// Fill units and angle blocks for vertices `i0..i0+n` of batch `b`.
    fn fill(&mut self, s: &Tokens, t: &Tokens, b: usize, i0: usize, n: usize) {
        let l = s.l;
        for v in 0..n {
            let i = i0 + v;
            s.units_at(
                b,
                i,
                &mut self.units_s[v * l * s.c..(v + 1) * l * s.c],
                &mut self.norms_s[v * l..(v + 1) * l],
            );
            t.units_at(
                b,
                i,
                &mut self.units_t[v * l * t.c..(v + 1) * l * t.c],
                &mut self.norms_t[v * l..(v + 1) * l],
            );
            gram(
                &self.units_s[v * l * s.c..(v + 1) * l * s.c],
                l,
                s.c,
                &mut self.angle_s[v * l * l..(v + 1) * l * l],
            );
            gram(
                &self.units_t[v * l * t.c..(v + 1) * l * t.c],
                l,
                t.c,
                &mut self.angle_t[v * l * l..(v + 1) * l * l],
            );
        }
    }
}

/// Vertex tiles in a fixed order: (batch, first vertex, vertex count).
fn tiles(b: usize, l: usize, tile: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..b).flat_map(move |bi| (0..l).step_by(tile).map(move |i0| (bi, i0, tile.min(l - i0))))
}

fn tiled_forward(s: &Tokens, t: &Tokens, tile: usize, meter: &AllocMeter) -> f64 {
    let l = s.l;
    let mut scratch = TileScratch::new(tile, l, s.c, t.c, meter);
    // per-tile partial sums reduced in tile order
    let partials: Vec<f64> = tiles(s.b, l, tile)
        .map(|(b, i0, n)| {
            scratch.fill(s, t, b, i0, n);
            let m = n * l * l;
            scratch.angle_s[..m]
                .iter()
                .zip(&scratch.angle_t[..m])
                .map(|(a, bt)| huber_delta(a - bt, 1.0))
                .sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

fn tiled_backward(s: &Tokens, t: &Tokens, tile: usize, upstream: f64, meter: &AllocMeter) -> Vec<f64> {
    let (l, c) = (s.l, s.c);
    let ll = l * l;
    let mut grad = vec![0.0; s.data.len()];
    let mut scratch = TileScratch::new(tile, l, s.c, t.c, meter);
    let mut g = meter.alloc(ll);
    let mut gu = meter.alloc(l * c);
    for (b, i0, n) in tiles(s.b, l, tile) {
        scratch.fill(s, t, b, i0, n);
        for v in 0..n {
            let blk = v * ll..(v + 1) * ll;
            for ((dst, a), bt) in g
                .iter_mut()
                .zip(&scratch.angle_s[blk.clone()])
                .zip(&scratch.angle_t[blk])
            {
                *dst = upstream * huber_grad(a - bt);
            }
            let units = &scratch.units_s[v * l * c..(v + 1) * l * c];
            gram_backward(&g, units, l, c, &mut gu);
            scatter_unit_grads(
                s,
                b,
                i0 + v,
                units,
                &scratch.norms_s[v * l..(v + 1) * l],
                &mut gu,
                &mut grad,
            );
        }
    }
    grad
}
