//! Differentiable primitives.
//!
//! Binary elementwise ops require identical shapes, except that a
//! one-element operand broadcasts as a scalar. Any other expansion goes
//! through the explicit [`Tensor::broadcast_to`].

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{broadcast_map, gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Floor applied to sqrt/log/normalization denominators.
pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Bin, name: &'static str) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = if ls == rs || rhs.numel() == 1 {
            ls.to_vec()
        } else if self.numel() == 1 {
            rs.to_vec()
        } else {
            return Err(Error::shape(name, ls, rs));
        };
        let n = numel(&out_shape);
        let (a, b) = (self.data(), rhs.data());
        let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
        let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(i), bt(i));
                match op {
                    Bin::Add => x + y,
                    Bin::Sub => x - y,
                    Bin::Mul => x * y,
                    Bin::Div => x / y,
                }
            })
            .collect();
        drop((a, b));
        let (l, r) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let (a, b) = (l.data(), r.data());
                let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
                let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
                let reduce = |len: usize, g: Vec<f64>| -> Vec<f64> {
                    if len == 1 && g.len() != 1 {
                        vec![g.iter().sum()]
                    } else {
                        g
                    }
                };
                let n = ctx.grad.len();
                let ga = ctx.needs[0].then(|| {
                    let g: Vec<f64> = (0..n)
                        .map(|i| match op {
                            Bin::Add | Bin::Sub => ctx.grad[i],
                            Bin::Mul => ctx.grad[i] * bt(i),
                            Bin::Div => ctx.grad[i] / bt(i),
                        })
                        .collect();
                    reduce(a.len(), g)
                });
                let gb = ctx.needs[1].then(|| {
                    let g: Vec<f64> = (0..n)
                        .map(|i| match op {
                            Bin::Add => ctx.grad[i],
                            Bin::Sub => -ctx.grad[i],
                            Bin::Mul => ctx.grad[i] * at(i),
                            Bin::Div => -ctx.grad[i] * at(i) / (bt(i) * bt(i)),
                        })
                        .collect();
                    reduce(b.len(), g)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Bin::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Bin::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Bin::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Bin::Div, "div")
    }

    /// Elementwise op whose derivative is expressed from (input, output).
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = input.data();
                let g = x
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", libm::exp, |_, y| y)
    }

    /// Natural log with the default epsilon floor on its argument.
    pub fn log(&self) -> Tensor {
        self.log_eps(DEFAULT_EPS)
    }

    /// `ln(max(x, eps))`; the gradient vanishes where the floor is active.
    pub fn log_eps(&self, eps: f64) -> Tensor {
        self.unary(
            "log",
            move |x| libm::log(x.max(eps)),
            move |x, _| if x > eps { 1.0 / x } else { 0.0 },
        )
    }

    /// Square root of `max(x, 0)` with the derivative denominator floored at
    /// [`DEFAULT_EPS`].
    pub fn sqrt(&self) -> Tensor {
        self.unary(
            "sqrt",
            |x| libm::sqrt(x.max(0.0)),
            |x, y| if x > 0.0 { 0.5 / y.max(DEFAULT_EPS) } else { 0.0 },
        )
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary("powf", move |x| libm::pow(x, p), move |x, _| p * libm::pow(x, p - 1.0))
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(
            "clamp_min",
            move |x| x.max(min),
            move |x, _| if x > min { 1.0 } else { 0.0 },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.clamp_min(0.0)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", libm::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + libm::tanh(K * (x + A * x * x * x))),
            |x, _| {
                let u = K * (x + A * x * x * x);
                let t = libm::tanh(u);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    /// Elementwise Huber penalty of the value itself: `x²/2` inside
    /// `|x| ≤ delta`, `delta·(|x| − delta/2)` outside. With `delta = 1` this
    /// is smooth-L1.
    pub fn huber(&self, delta: f64) -> Tensor {
        self.unary(
            "huber",
            move |x| crate::relational::huber_delta(x, delta),
            move |x, _| {
                if x.abs() <= delta {
                    x
                } else {
                    delta * x.signum()
                }
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Insert a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::Contract(format!("unsqueeze axis {axis} out of range")));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(Error::Contract(format!(
                "transpose axes ({a},{b}) out of range for rank {rank}"
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Reorder axes; output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || core::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let map = permute_map(&in_shape, perm);
        let src = self.data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        drop(src);
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for (o, &i) in map.iter().enumerate() {
                    g[i] = ctx.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Explicit expansion: align trailing axes, dims of size 1 repeat.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() < self.rank() {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        let mut small = vec![1usize; shape.len() - self.rank()];
        small.extend_from_slice(self.shape());
        for (s, b) in small.iter().zip(shape) {
            if *s != 1 && s != b {
                return Err(Error::shape("broadcast_to", self.shape(), shape));
            }
        }
        if small.as_slice() == shape {
            return self.reshape(shape);
        }
        let map = broadcast_map(&small, shape);
        let src = self.data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        drop(src);
        let in_len = self.numel();
        Ok(Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; in_len];
                for (o, &i) in map.iter().enumerate() {
                    g[i] += ctx.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Gather entries `indices` along `axis`; repeated indices are allowed and
    /// their gradients add.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!("index_select axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "index {bad} out of bounds for axis {axis} of size {n}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Contract("index_select with no indices".into()));
        }
        let k = indices.len();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = k;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "index_select",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * n + i) * inner;
                        for t in 0..inner {
                            g[dst + t] += ctx.grad[src + t];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                let src = p.data();
                data.extend_from_slice(&src[o * s * inner..(o + 1) * s * inner]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &s) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&ctx.grad[pos..pos + s * inner]);
                        pos += s * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Matrix product over the last two axes. Leading (batch) axes must match
    /// exactly; a rank-2 right operand is shared across the batch of the left.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape().to_vec(), rhs.shape().to_vec());
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::shape("matmul", &ls, &rs));
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let shared_rhs = rs.len() == 2;
        if k != k2 || (!shared_rhs && ls[..ls.len() - 2] != rs[..rs.len() - 2]) {
            return Err(Error::shape("matmul", &ls, &rs));
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);

        let (a, b) = (self.data(), rhs.data());
        let mut data = vec![0.0; batch * m * n];
        if shared_rhs {
            // fold the batch into rows
            gemm_nn(&a, &b, &mut data, batch * m, k, n);
        } else {
            for t in 0..batch {
                gemm_nn(
                    &a[t * m * k..(t + 1) * m * k],
                    &b[t * k * n..(t + 1) * k * n],
                    &mut data[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        drop((a, b));
        let (l, r) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let (a, b) = (l.data(), r.data());
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; a.len()];
                    if shared_rhs {
                        gemm_nt(g, &b, &mut ga, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &b[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; b.len()];
                    if shared_rhs {
                        gemm_tn(&a, g, &mut gb, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            gemm_tn(
                                &a[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Sum over `axes`. With `keepdim` reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let rank = self.rank();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::Contract(format!(
                "sum axes {axes:?} out of range for rank {rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let kept: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
            .collect();
        let map = broadcast_map(&kept, &in_shape);
        let mut data = vec![0.0; numel(&kept)];
        for (x, &o) in self.data().iter().zip(&map) {
            data[o] += x;
        }
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            let s: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &s)| s)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(Tensor::from_op(
            "sum",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(map.iter().map(|&o| ctx.grad[o]).collect())]),
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().filter_map(|&a| self.shape().get(a)).product();
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, None, "softmax")
    }

    /// Softmax over the last axis where `mask[row][col] == false` entries
    /// are excluded and come out exactly 0. `mask` is `(rows, cols)` and
    /// repeats over every leading axis.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::Contract("masked_softmax needs rank >= 2".into()));
        }
        let plane = self.shape()[rank - 2] * self.shape()[rank - 1];
        if mask.len() != plane {
            return Err(Error::shape("masked_softmax", self.shape(), &[mask.len()]));
        }
        self.softmax_impl(rank - 1, Some(mask.to_vec()), "masked_softmax")
    }

    fn softmax_impl(&self, axis: usize, mask: Option<Vec<bool>>, name: &'static str) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        let plane = mask.as_ref().map_or(1, Vec::len);
        for o in 0..outer {
            for t in 0..inner {
                let at = |j: usize| (o * n + j) * inner + t;
                // mask is only used with the last axis, so inner == 1 there
                let live = |j: usize| mask.as_ref().is_none_or(|m| m[(o * n + j) % plane]);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    if live(j) {
                        mx = mx.max(src[at(j)]);
                    }
                }
                if !mx.is_finite() {
                    return Err(Error::Numerical(format!("{name}: no finite entry in row {o}")));
                }
                let mut z = 0.0;
                for j in 0..n {
                    if live(j) {
                        let e = libm::exp(src[at(j)] - mx);
                        data[at(j)] = e;
                        z += e;
                    }
                }
                for j in 0..n {
                    data[at(j)] /= z;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let (y, g) = (ctx.out, ctx.grad);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for t in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + t;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!("log_softmax axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for t in 0..inner {
                let at = |j: usize| (o * n + j) * inner + t;
                let mx = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if !mx.is_finite() {
                    return Err(Error::Numerical("log_softmax: non-finite logits".into()));
                }
                let lse = mx + libm::log((0..n).map(|j| libm::exp(src[at(j)] - mx)).sum::<f64>());
                for j in 0..n {
                    data[at(j)] = src[at(j)] - lse;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let (y, g) = (ctx.out, ctx.grad);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for t in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + t;
                        let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = g[at(j)] - libm::exp(y[at(j)]) * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Average pooling over an NHWC tensor (no padding).
    pub fn avg_pool2d(&self, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        self.pool2d(window, stride, false)
    }

    /// Max pooling over an NHWC tensor (no padding). Ties go to the lowest
    /// flat index inside the window.
    pub fn max_pool2d(&self, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        self.pool2d(window, stride, true)
    }

    fn pool2d(&self, (kh, kw): (usize, usize), (sh, sw): (usize, usize), max: bool) -> Result<Tensor> {
        let name = if max { "max_pool2d" } else { "avg_pool2d" };
        if self.rank() != 4 {
            return Err(Error::Contract(format!(
                "{name} expects (B,H,W,C), got {:?}",
                self.shape()
            )));
        }
        let s = self.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return Err(Error::Config(format!(
                "{name}: window {kh}x{kw} stride {sh}x{sw} invalid for {h}x{w} input"
            )));
        }
        let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let src = self.data();
        let mut data = vec![0.0; b * oh * ow * c];
        // argmax source index per output element (max) or unused (avg)
        let mut arg = if max { vec![0usize; data.len()] } else { Vec::new() };
        let scale = 1.0 / (kh * kw) as f64;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let o = ((bi * oh + oy) * ow + ox) * c + ch;
                        let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                        let mut best = 0;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let i = ((bi * h + oy * sh + dy) * w + ox * sw + dx) * c + ch;
                                if max {
                                    if src[i] > acc {
                                        acc = src[i];
                                        best = i;
                                    }
                                } else {
                                    acc += src[i];
                                }
                            }
                        }
                        if max {
                            data[o] = acc;
                            arg[o] = best;
                        } else {
                            data[o] = acc * scale;
                        }
                    }
                }
            }
        }
        drop(src);
        let in_len = self.numel();
        Ok(Tensor::from_op(
            name,
            vec![b, oh, ow, c],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; in_len];
                if max {
                    for (o, &i) in arg.iter().enumerate() {
                        g[i] += ctx.grad[o];
                    }
                } else {
                    for bi in 0..b {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for ch in 0..c {
                                    let go = ctx.grad[((bi * oh + oy) * ow + ox) * c + ch] * scale;
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            g[((bi * h + oy * sh + dy) * w + ox * sw + dx) * c + ch] += go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// 2-D convolution, NHWC input and `(kh, kw, c_in, c_out)` kernel,
    /// zero padding `pad` on every side.
    pub fn conv2d(&self, kernel: &Tensor, stride: (usize, usize), pad: usize) -> Result<Tensor> {
        if self.rank() != 4 || kernel.rank() != 4 || self.shape()[3] != kernel.shape()[2] {
            return Err(Error::shape("conv2d", self.shape(), kernel.shape()));
        }
        let s = self.shape();
        let (b, h, w, ci) = (s[0], s[1], s[2], s[3]);
        let ks = kernel.shape();
        let (kh, kw, co) = (ks[0], ks[1], ks[3]);
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw} stride {sh}x{sw} pad {pad} invalid for {h}x{w} input"
            )));
        }
        let oh = (h + 2 * pad - kh) / sh + 1;
        let ow = (w + 2 * pad - kw) / sw + 1;
        // input pixel feeding output (oy,ox) through tap (dy,dx), if inside
        let src_pixel = move |oy: usize, ox: usize, dy: usize, dx: usize| -> Option<(usize, usize)> {
            let y = (oy * sh + dy).checked_sub(pad)?;
            let x = (ox * sw + dx).checked_sub(pad)?;
            (y < h && x < w).then_some((y, x))
        };
        let (x, k) = (self.data(), kernel.data());
        let mut data = vec![0.0; b * oh * ow * co];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let orow = &mut data[((bi * oh + oy) * ow + ox) * co..][..co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let Some((y, xx)) = src_pixel(oy, ox, dy, dx) else {
                                continue;
                            };
                            let xin = &x[((bi * h + y) * w + xx) * ci..][..ci];
                            let ktap = &k[(dy * kw + dx) * ci * co..][..ci * co];
                            gemm_nn(xin, ktap, orow, 1, ci, co);
                        }
                    }
                }
            }
        }
        drop((x, k));
        let (inp, ker) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            "conv2d",
            vec![b, oh, ow, co],
            data,
            vec![self.clone(), kernel.clone()],
            Box::new(move |ctx| {
                let (x, k) = (inp.data(), ker.data());
                let mut gx = ctx.needs[0].then(|| vec![0.0; x.len()]);
                let mut gk = ctx.needs[1].then(|| vec![0.0; k.len()]);
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &ctx.grad[((bi * oh + oy) * ow + ox) * co..][..co];
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let Some((y, xx)) = src_pixel(oy, ox, dy, dx) else {
                                        continue;
                                    };
                                    let xo = ((bi * h + y) * w + xx) * ci;
                                    let ko = (dy * kw + dx) * ci * co;
                                    if let Some(gx) = gx.as_mut() {
                                        gemm_nt(go, &k[ko..ko + ci * co], &mut gx[xo..xo + ci], 1, co, ci);
                                    }
                                    if let Some(gk) = gk.as_mut() {
                                        gemm_tn(&x[xo..xo + ci], go, &mut gk[ko..ko + ci * co], 1, ci, co);
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gk]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// of shape `(C,)`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on rank 0".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / c;
        let (x, gm, bt) = (self.data(), gamma.data(), beta.data());
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                data[r * c + j] = xh * gm[j] + bt[j];
            }
        }
        drop((x, gm, bt));
        let g_t = gamma.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let gm = g_t.data();
                let g = ctx.grad;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let go = &g[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = go[j] * gm[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                        gg[j] += go[j] * xh[j];
                        gb[j] += go[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = go[j] * gm[j];
                        gx[r * c + j] = inv_std[r] / cf * (cf * d - sum_d - xh[j] * sum_dx);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }
}

/// For each output flat index of `permute(perm)`, the input flat index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
