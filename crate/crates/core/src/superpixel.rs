//! Superpixel tokens: soft clustering of a token grid into a coarser grid of
//! superpixel tokens.
//!
//! Superpixels start as the average of each `H_t × W_t` block of tokens and
//! are refined by alternating a token→superpixel association with a
//! re-aggregation of tokens. Each token only associates with the superpixels
//! in the 3×3 block around the cell it started in (fewer at the borders).
//!
//! Two association kernels are provided:
//! * attention: softmax of `⟨T_i, S_j⟩/√C` over the token's neighborhood,
//!   then `S = Q̂ᵀ T` with `Q̂` the column-normalized association;
//! * RBF: `Q_ij = exp(−‖F_i − S_j‖²)` on the neighborhood and
//!   `S_j = Σ_i Q_ij F_i / Σ_i Q_ij`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    VitTokens,
    CnnTokens,
}

/// A batch of tokens `(B, L, C)` laid out row-major on a `rows × cols` grid.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub source: TokenSource,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, rows: usize, cols: usize, source: TokenSource) -> Result<Self> {
        match *tokens.shape() {
            [_, l, _] if l == rows * cols => Ok(TokenGrid {
                tokens,
                rows,
                cols,
                source,
            }),
            _ => Err(Error::Contract(format!(
                "token grid {rows}x{cols} does not match tokens of shape {:?}",
                tokens.shape()
            ))),
        }
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Attention,
    Rbf,
}

/// Token grid and superpixel grid geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpGeometry {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_rows: usize,
    pub cell_cols: usize,
    pub sp_rows: usize,
    pub sp_cols: usize,
}

impl SpGeometry {
    pub fn new(grid_rows: usize, grid_cols: usize, cell_rows: usize, cell_cols: usize) -> Result<Self> {
        if cell_rows == 0 || !grid_rows.is_multiple_of(cell_rows) {
            return Err(Error::Config(format!(
                "token grid height {grid_rows} is not divisible by superpixel cell height {cell_rows}"
            )));
        }
        if cell_cols == 0 || !grid_cols.is_multiple_of(cell_cols) {
            return Err(Error::Config(format!(
                "token grid width {grid_cols} is not divisible by superpixel cell width {cell_cols}"
            )));
        }
        Ok(SpGeometry {
            grid_rows,
            grid_cols,
            cell_rows,
            cell_cols,
            sp_rows: grid_rows / cell_rows,
            sp_cols: grid_cols / cell_cols,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn superpixels(&self) -> usize {
        self.sp_rows * self.sp_cols
    }

    /// Superpixel cell that initially contains `token`.
    pub fn cell_of(&self, token: usize) -> usize {
        let (y, x) = (token / self.grid_cols, token % self.grid_cols);
        (y / self.cell_rows) * self.sp_cols + x / self.cell_cols
    }

    /// `tokens × superpixels` admissibility mask, row-major.
    pub fn mask(&self) -> Vec<bool> {
        let m = self.superpixels();
        let mut mask = vec![false; self.tokens() * m];
        for i in 0..self.tokens() {
            for j in neighborhood(i, self) {
                mask[i * m + j] = true;
            }
        }
        mask
    }
}

/// Superpixels in the 3×3 block around the cell containing `token`,
/// clipped at the grid border, in row-major order.
pub fn neighborhood(token: usize, geom: &SpGeometry) -> Vec<usize> {
    let cell = geom.cell_of(token);
    let (r, c) = (cell / geom.sp_cols, cell % geom.sp_cols);
    let rows = r.saturating_sub(1)..=(r + 1).min(geom.sp_rows - 1);
    let mut out = Vec::with_capacity(9);
    for rr in rows {
        for cc in c.saturating_sub(1)..=(c + 1).min(geom.sp_cols - 1) {
            out.push(rr * geom.sp_cols + cc);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SuperpixelState {
    /// Superpixel tokens `(B, M, C)`.
    pub s: Tensor,
    /// Association `(B, L, M)`; unset at iteration 0.
    pub q: Option<Tensor>,
    /// Column-normalized association `(B, L, M)`; unset at iteration 0.
    pub q_hat: Option<Tensor>,
    pub geometry: SpGeometry,
    pub iteration: usize,
    /// `(batch, superpixel)` pairs whose RBF normalizer fell below the floor
    /// in the last iteration; those kept their previous value.
    pub starved: Vec<(usize, usize)>,
}

/// Average-pool each `H_t × W_t` block of tokens into one superpixel.
pub fn init_superpixels(tg: &TokenGrid, cell_rows: usize, cell_cols: usize) -> Result<SuperpixelState> {
    let geometry = SpGeometry::new(tg.rows, tg.cols, cell_rows, cell_cols)?;
    let (b, c) = (tg.batch(), tg.channels());
    let s = tg
        .tokens
        .reshape(&[b, tg.rows, tg.cols, c])?
        .avg_pool2d((cell_rows, cell_cols), (cell_rows, cell_cols))?
        .reshape(&[b, geometry.superpixels(), c])?;
    Ok(SuperpixelState {
        s,
        q: None,
        q_hat: None,
        geometry,
        iteration: 0,
        starved: Vec::new(),
    })
}

fn check_state(tg: &TokenGrid, state: &SuperpixelState) -> Result<()> {
    let g = &state.geometry;
    if g.grid_rows != tg.rows || g.grid_cols != tg.cols {
        return Err(Error::Contract(format!(
            "state built for a {}x{} grid, tokens are {}x{}",
            g.grid_rows, g.grid_cols, tg.rows, tg.cols
        )));
    }
    if state.s.shape() != [tg.batch(), g.superpixels(), tg.channels()] {
        return Err(Error::shape("superpixel state", state.s.shape(), tg.tokens.shape()));
    }
    Ok(())
}

/// One attention-style association and aggregation step.
pub fn associate_attention(tg: &TokenGrid, state: &SuperpixelState) -> Result<SuperpixelState> {
    check_state(tg, state)?;
    let (b, l, c) = (tg.batch(), tg.len(), tg.channels());
    let m = state.geometry.superpixels();
    let logits = tg
        .tokens
        .matmul(&state.s.transpose(1, 2)?)?
        .mul_scalar(1.0 / libm::sqrt(c as f64));
    if let Some(bad) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite association logit at flat index {bad}"
        )));
    }
    let q = logits.masked_softmax(&state.geometry.mask())?;
    let col = q.sum_axes(&[1], true)?.clamp_min(DEFAULT_EPS);
    let q_hat = q.div(&col.broadcast_to(&[b, l, m])?)?;
    let s = q_hat.transpose(1, 2)?.matmul(&tg.tokens)?;
    Ok(SuperpixelState {
        s,
        q: Some(q),
        q_hat: Some(q_hat),
        geometry: state.geometry,
        iteration: state.iteration + 1,
        starved: Vec::new(),
    })
}

/// One RBF association and center update step.
pub fn associate_rbf(features: &TokenGrid, state: &SuperpixelState) -> Result<SuperpixelState> {
    check_state(features, state)?;
    let (b, l, c) = (features.batch(), features.len(), features.channels());
    let m = state.geometry.superpixels();
    let full = [b, l, m, c];
    let diff = features
        .tokens
        .reshape(&[b, l, 1, c])?
        .broadcast_to(&full)?
        .sub(&state.s.reshape(&[b, 1, m, c])?.broadcast_to(&full)?)?;
    let mask: Vec<f64> = state
        .geometry
        .mask()
        .into_iter()
        .map(|on| if on { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::new(mask, &[l, m])?.broadcast_to(&[b, l, m])?;
    let q = diff.square().sum_axes(&[3], false)?.neg().exp().mul(&mask)?;

    let z = q.sum_axes(&[1], true)?; // (B,1,M)
    let mut keep = vec![0.0; b * m];
    let mut starved = Vec::new();
    for (idx, &zv) in z.data().iter().enumerate() {
        if zv < DEFAULT_EPS {
            keep[idx] = 1.0;
            starved.push((idx / m, idx % m));
        }
    }
    let q_hat = q.div(&z.clamp_min(DEFAULT_EPS).broadcast_to(&[b, l, m])?)?;
    let aggregated = q_hat.transpose(1, 2)?.matmul(&features.tokens)?;
    let s = if starved.is_empty() {
        aggregated
    } else {
        let keep_t = Tensor::new(keep.clone(), &[b, m, 1])?.broadcast_to(&[b, m, c])?;
        let take: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let take_t = Tensor::new(take, &[b, m, 1])?.broadcast_to(&[b, m, c])?;
        aggregated.mul(&take_t)?.add(&state.s.mul(&keep_t)?)?
    };
    Ok(SuperpixelState {
        s,
        q: Some(q),
        q_hat: Some(q_hat),
        geometry: state.geometry,
        iteration: state.iteration + 1,
        starved,
    })
}

/// Grid initialization followed by `iterations` association steps.
pub fn sample_superpixels(
    tg: &TokenGrid,
    cell_rows: usize,
    cell_cols: usize,
    iterations: usize,
    kernel: Kernel,
) -> Result<SuperpixelState> {
    if iterations == 0 {
        return Err(Error::Config("superpixel iteration count must be at least 1".into()));
    }
    let mut state = init_superpixels(tg, cell_rows, cell_cols)?;
    for _ in 0..iterations {
        state = match kernel {
            Kernel::Attention => associate_attention(tg, &state)?,
            Kernel::Rbf => associate_rbf(tg, &state)?,
        };
    }
    Ok(state)
}

/// `argmax_j Q[b, i, j]` per token (lowest index on ties).
pub fn hard_assignment(q: &Tensor) -> Result<Vec<u32>> {
    let m = match *q.shape() {
        [_, _, m] => m,
        _ => {
            return Err(Error::Contract(format!(
                "association must be (B,L,M), got {:?}",
                q.shape()
            )))
        }
    };
    Ok(q.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::SeededRng;

    fn grid(data: Vec<f64>, b: usize, rows: usize, cols: usize, c: usize) -> TokenGrid {
        TokenGrid::new(
            Tensor::new(data, &[b, rows * cols, c]).unwrap(),
            rows,
            cols,
            TokenSource::VitTokens,
        )
        .unwrap()
    }

    fn random_grid(seed: u64, b: usize, rows: usize, cols: usize, c: usize) -> TokenGrid {
        let mut rng = SeededRng::new(seed);
        grid(rng.uniform_vec(b * rows * cols * c, -1.0, 1.0), b, rows, cols, c)
    }

    #[test]
    fn init_counts_and_block_means() {
        let tg = random_grid(1, 1, 14, 14, 2);
        assert_eq!(init_superpixels(&tg, 2, 2).unwrap().s.shape(), &[1, 49, 2]);

        let tg = grid((0..64).map(|v| v as f64).collect(), 1, 8, 8, 1);
        let s = init_superpixels(&tg, 2, 2).unwrap().s.to_vec();
        for (m, &got) in s.iter().enumerate() {
            let (r, c) = (m / 4, m % 4);
            let idx = [
                (2 * r) * 8 + 2 * c,
                (2 * r) * 8 + 2 * c + 1,
                (2 * r + 1) * 8 + 2 * c,
                (2 * r + 1) * 8 + 2 * c + 1,
            ];
            let want = idx.iter().sum::<usize>() as f64 / 4.0;
            assert_eq!(got, want);
        }

        let tg = grid(vec![0.75; 2 * 16 * 3], 2, 4, 4, 3);
        assert!(init_superpixels(&tg, 2, 2).unwrap().s.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn init_rejects_non_divisible() {
        let tg = random_grid(2, 1, 6, 6, 1);
        let err = init_superpixels(&tg, 4, 2).unwrap_err();
        assert!(
            matches!(&err, Error::Config(msg) if msg.contains('6') && msg.contains('4')),
            "{err}"
        );
    }

    #[test]
    fn neighborhood_sizes() {
        // 8x8 tokens, 2x2 cells -> 4x4 superpixels
        let g = SpGeometry::new(8, 8, 2, 2).unwrap();
        // token (2,2) sits in cell (1,1): interior
        assert_eq!(neighborhood(2 * 8 + 2, &g).len(), 9);
        // enumerate the clamped window for the corner
        let corner = neighborhood(0, &g);
        assert_eq!(corner, vec![0, 1, 4, 5]);
        // edge (top row, interior column)
        assert_eq!(neighborhood(2, &g).len(), 6);
        let one = SpGeometry::new(4, 4, 4, 4).unwrap();
        assert!((0..16).all(|i| neighborhood(i, &one) == vec![0]));
    }

    #[test]
    fn attention_identical_tokens() {
        let tg = grid([0.5, -1.0, 2.0].repeat(16), 1, 4, 4, 3);
        let st = sample_superpixels(&tg, 2, 2, 1, Kernel::Attention).unwrap();
        let q = st.q.as_ref().unwrap().to_vec();
        let g = st.geometry;
        for i in 0..16 {
            let nb = neighborhood(i, &g);
            for j in 0..4 {
                let want = if nb.contains(&j) { 1.0 / nb.len() as f64 } else { 0.0 };
                assert!((q[i * 4 + j] - want).abs() < 1e-15);
            }
        }
        for row in st.s.to_vec().chunks(3) {
            for (a, b) in row.iter().zip([0.5, -1.0, 2.0]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_single_superpixel() {
        let tg = random_grid(5, 1, 2, 2, 3);
        let st = sample_superpixels(&tg, 2, 2, 1, Kernel::Attention).unwrap();
        assert!(st.q.unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(st.q_hat.unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let t = tg.tokens.to_vec();
        for (ch, s) in st.s.to_vec().iter().enumerate() {
            let mean = (0..4).map(|i| t[i * 3 + ch]).sum::<f64>() / 4.0;
            assert!((s - mean).abs() < 1e-15);
        }
    }

    /// Per-token loop with an explicit neighborhood list.
    fn attention_oracle(tg: &TokenGrid, s_prev: &[f64], g: &SpGeometry) -> Vec<f64> {
        let (b, l, c, m) = (tg.batch(), tg.len(), tg.channels(), g.superpixels());
        let t = tg.tokens.to_vec();
        let mut out = vec![0.0; b * m * c];
        for bi in 0..b {
            let mut q = vec![0.0; l * m];
            for i in 0..l {
                let ti = &t[(bi * l + i) * c..(bi * l + i + 1) * c];
                let nb = neighborhood(i, g);
                let logits: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let sj = &s_prev[(bi * m + j) * c..(bi * m + j + 1) * c];
                        ti.iter().zip(sj).map(|(a, b)| a * b).sum::<f64>() / libm::sqrt(c as f64)
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| libm::exp(v - mx)).sum();
                for (&j, v) in nb.iter().zip(&logits) {
                    q[i * m + j] = libm::exp(v - mx) / z;
                }
            }
            for j in 0..m {
                let col: f64 = (0..l).map(|i| q[i * m + j]).sum();
                for i in 0..l {
                    for ch in 0..c {
                        out[(bi * m + j) * c + ch] += q[i * m + j] / col * t[(bi * l + i) * c + ch];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let tg = random_grid(7, 2, 6, 6, 4);
        let init = init_superpixels(&tg, 2, 2).unwrap();
        let want = attention_oracle(&tg, &init.s.to_vec(), &init.geometry);
        let got = associate_attention(&tg, &init).unwrap().s.to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_invariants() {
        let tg = random_grid(13, 3, 6, 8, 5);
        let st = sample_superpixels(&tg, 2, 2, 2, Kernel::Attention).unwrap();
        let (l, m) = (48, st.geometry.superpixels());
        let (q, qh) = (st.q.unwrap().to_vec(), st.q_hat.unwrap().to_vec());
        for b in 0..3 {
            for i in 0..l {
                let s: f64 = (0..m).map(|j| q[(b * l + i) * m + j]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            for j in 0..m {
                let s: f64 = (0..l).map(|i| qh[(b * l + i) * m + j]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let t = tg.tokens.to_vec();
        let s = st.s.to_vec();
        for b in 0..3 {
            for ch in 0..5 {
                let vals = (0..l).map(|i| t[(b * l + i) * 5 + ch]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                for j in 0..m {
                    let v = s[(b * m + j) * 5 + ch];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_permutation_leaves_init_unchanged() {
        let tg = random_grid(17, 1, 4, 4, 2);
        let mut t = tg.tokens.to_vec();
        // swap tokens (0,0) and (1,1) inside the first 2x2 block
        for ch in 0..2 {
            t.swap(ch, 5 * 2 + ch);
        }
        let permuted = grid(t, 1, 4, 4, 2);
        assert_eq!(
            init_superpixels(&tg, 2, 2).unwrap().s.to_vec(),
            init_superpixels(&permuted, 2, 2).unwrap().s.to_vec()
        );
    }

    #[test]
    fn attention_gradient() {
        let tg = random_grid(19, 1, 4, 4, 3);
        let r = finite_diff_check(
            |x| {
                let g = TokenGrid::new(x.clone(), 4, 4, TokenSource::VitTokens)?;
                Ok(sample_superpixels(&g, 2, 2, 1, Kernel::Attention)?.s.sum_all())
            },
            &tg.tokens,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn fixed_point_on_constant_input() {
        let tg = grid(vec![1.25; 2 * 16 * 2], 2, 4, 4, 2);
        for kernel in [Kernel::Attention, Kernel::Rbf] {
            let one = sample_superpixels(&tg, 2, 2, 1, kernel).unwrap().s.to_vec();
            let two = sample_superpixels(&tg, 2, 2, 2, kernel).unwrap().s.to_vec();
            assert_eq!(one, two);
            assert!(one.iter().all(|&v| (v - 1.25).abs() < 1e-15));
        }
        assert!(matches!(
            sample_superpixels(&tg, 2, 2, 0, Kernel::Rbf),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rbf_one_hot_when_far() {
        // two superpixels side by side; token 0 sits on center 0, center 1 is 6 away
        let tg = random_grid(23, 1, 2, 4, 2);
        let init = init_superpixels(&tg, 2, 2).unwrap();
        let centers = vec![0.0, 0.0, 6.0, 0.0];
        let mut tokens = tg.tokens.to_vec();
        tokens[0] = 0.0;
        tokens[1] = 0.0;
        let tg = grid(tokens, 1, 2, 4, 2);
        let state = SuperpixelState {
            s: Tensor::new(centers, &[1, 2, 2]).unwrap(),
            ..init
        };
        let q = associate_rbf(&tg, &state).unwrap().q.unwrap().to_vec();
        assert!((q[0] - 1.0).abs() < 1e-15);
        assert!(q[1].abs() < 1e-15);
    }

    #[test]
    fn rbf_composition_matches_manual_steps() {
        let tg = random_grid(29, 2, 4, 6, 3);
        let auto = sample_superpixels(&tg, 2, 2, 3, Kernel::Rbf).unwrap();
        let mut manual = init_superpixels(&tg, 2, 2).unwrap();
        for _ in 0..3 {
            manual = associate_rbf(&tg, &manual).unwrap();
        }
        assert_eq!(auto.s.to_vec(), manual.s.to_vec());
        assert_eq!(auto.iteration, 3);
    }

    #[test]
    fn rbf_starvation_keeps_previous_center() {
        let tg = random_grid(31, 1, 2, 4, 1);
        let init = init_superpixels(&tg, 2, 2).unwrap();
        // center 1 far beyond reach of any token
        let s = Tensor::new(vec![0.0, 1e3], &[1, 2, 1]).unwrap();
        let state = SuperpixelState { s, ..init };
        let next = associate_rbf(&tg, &state).unwrap();
        assert_eq!(next.starved, vec![(0, 1)]);
        assert_eq!(next.s.to_vec()[1], 1e3);
    }

    #[test]
    fn hard_assignment_argmax() {
        let q = Tensor::new(vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2], &[1, 2, 3]).unwrap();
        assert_eq!(hard_assignment(&q).unwrap(), vec![1, 0]);
    }
}
