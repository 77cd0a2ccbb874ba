//! Turning CNN feature maps `(B, H, W, C)` into token grids.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::superpixel::{TokenGrid, TokenSource};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    MaxPool,
    AvgPool,
    StridedConv,
}

#[derive(Debug, Clone)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Strided-conv kernel `(H_p, W_p, C, C)`.
    pub theta: Option<Tensor>,
}

impl TokenizerSpec {
    pub fn max_pool(window: (usize, usize)) -> Self {
        TokenizerSpec {
            kind: TokenizerKind::MaxPool,
            window,
            stride: window,
            theta: None,
        }
    }

    pub fn avg_pool(window: (usize, usize)) -> Self {
        TokenizerSpec {
            kind: TokenizerKind::AvgPool,
            window,
            stride: window,
            theta: None,
        }
    }

    /// Learnable strided convolution, initialized to the per-channel
    /// averaging kernel so it starts out equal to average pooling.
    pub fn strided_conv(window: (usize, usize), channels: usize) -> Self {
        let (kh, kw) = window;
        let mut k = vec![0.0; kh * kw * channels * channels];
        let w = 1.0 / (kh * kw) as f64;
        for tap in 0..kh * kw {
            for ch in 0..channels {
                k[(tap * channels + ch) * channels + ch] = w;
            }
        }
        TokenizerSpec {
            kind: TokenizerKind::StridedConv,
            window,
            stride: window,
            theta: Some(Tensor::leaf(k, &[kh, kw, channels, channels], true).expect("positive dims")),
        }
    }

    pub fn build(kind: TokenizerKind, window: (usize, usize), channels: usize) -> Self {
        match kind {
            TokenizerKind::MaxPool => Self::max_pool(window),
            TokenizerKind::AvgPool => Self::avg_pool(window),
            TokenizerKind::StridedConv => Self::strided_conv(window, channels),
        }
    }
}

/// Tokenize a feature map. With `detach_theta` the learnable kernel is used
/// as a constant, so no gradient reaches it through this call.
pub fn tokenize_with(f: &Tensor, spec: &TokenizerSpec, detach_theta: bool) -> Result<TokenGrid> {
    let (b, h, w, c) = match *f.shape() {
        [b, h, w, c] => (b, h, w, c),
        _ => {
            return Err(Error::Contract(format!(
                "tokenize expects (B,H,W,C), got {:?}",
                f.shape()
            )))
        }
    };
    let (sh, sw) = spec.stride;
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(Error::Config(format!(
            "feature map {h}x{w} is not divisible by tokenizer stride {sh}x{sw}"
        )));
    }
    if spec.window.0 > h || spec.window.1 > w {
        return Err(Error::Config(format!(
            "tokenizer window {:?} exceeds feature map {h}x{w}",
            spec.window
        )));
    }
    let map = match spec.kind {
        TokenizerKind::AvgPool => f.avg_pool2d(spec.window, spec.stride)?,
        TokenizerKind::MaxPool => f.max_pool2d(spec.window, spec.stride)?,
        TokenizerKind::StridedConv => {
            let theta = spec
                .theta
                .as_ref()
                .ok_or_else(|| Error::Config("strided-conv tokenizer without a kernel".into()))?;
            if theta.shape()[2] != c {
                return Err(Error::shape("tokenize", f.shape(), theta.shape()));
            }
            let theta = if detach_theta { theta.detach() } else { theta.clone() };
            f.conv2d(&theta, spec.stride, 0)?
        }
    };
    let (rows, cols) = (map.shape()[1], map.shape()[2]);
    let cout = map.shape()[3];
    TokenGrid::new(
        map.reshape(&[b, rows * cols, cout])?,
        rows,
        cols,
        TokenSource::CnnTokens,
    )
}

pub fn tokenize(f: &Tensor, spec: &TokenizerSpec) -> Result<TokenGrid> {
    tokenize_with(f, spec, false)
}

/// Tokenizer stride for CNN stage 1, 2 or 3, chosen so that stages whose
/// resolution halves each time all yield the same token count.
pub fn stage_plan(stage: usize) -> Result<usize> {
    match stage {
        1 => Ok(4),
        2 => Ok(2),
        3 => Ok(1),
        _ => Err(Error::Contract(format!(
            "no tokenizer plan for stage {stage}; stages are 1..=3"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn shapes_and_block_means() {
        let f = Tensor::zeros(&[2, 8, 8, 4]);
        let tg = tokenize(&f, &TokenizerSpec::avg_pool((2, 2))).unwrap();
        assert_eq!(tg.len(), 16);
        assert_eq!(tg.tokens.shape(), &[2, 16, 4]);

        let f = Tensor::new((0..16).map(|v| v as f64).collect(), &[1, 4, 4, 1]).unwrap();
        let tg = tokenize(&f, &TokenizerSpec::avg_pool((2, 2))).unwrap();
        assert_eq!(tg.tokens.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);

        let f = Tensor::full(&[1, 4, 4, 3], -0.5);
        let tg = tokenize(&f, &TokenizerSpec::max_pool((2, 2))).unwrap();
        assert!(tg.tokens.data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn strided_conv_starts_as_avg_pool() {
        let mut rng = SeededRng::new(1);
        let f = Tensor::new(rng.uniform_vec(2 * 8 * 8 * 3, -1.0, 1.0), &[2, 8, 8, 3]).unwrap();
        let a = tokenize(&f, &TokenizerSpec::avg_pool((2, 2))).unwrap().tokens.to_vec();
        let c = tokenize(&f, &TokenizerSpec::strided_conv((2, 2), 3))
            .unwrap()
            .tokens
            .to_vec();
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn non_divisible_is_config_error() {
        let f = Tensor::zeros(&[1, 6, 6, 1]);
        assert!(matches!(
            tokenize(&f, &TokenizerSpec::avg_pool((4, 4))),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_plan_equalizes_counts() {
        assert_eq!(stage_plan(1).unwrap(), 4);
        assert_eq!(stage_plan(3).unwrap(), 1);
        assert!(stage_plan(0).is_err() && stage_plan(4).is_err());
        // 56 -> 28 -> 14 maps with strides 4, 2, 1 give 14x14 tokens each
        for (stage, side) in [(1, 56), (2, 28), (3, 14)] {
            assert_eq!(side / stage_plan(stage).unwrap(), 14);
        }
        // desk scale: 32 -> 16 -> 8
        for (stage, side) in [(1, 32), (2, 16), (3, 8)] {
            let s = stage_plan(stage).unwrap();
            let f = Tensor::zeros(&[1, side, side, 2]);
            let tg = tokenize(&f, &TokenizerSpec::avg_pool((s, s))).unwrap();
            assert_eq!((tg.rows, tg.cols), (8, 8));
        }
    }

    #[test]
    fn pooling_commutes_with_scaling_and_monotone_maps() {
        let mut rng = SeededRng::new(2);
        let f = Tensor::new(rng.uniform_vec(64, -1.0, 1.0), &[1, 4, 4, 4]).unwrap();
        let avg = |x: &Tensor| tokenize(x, &TokenizerSpec::avg_pool((2, 2))).unwrap().tokens.to_vec();
        let mx = |x: &Tensor| tokenize(x, &TokenizerSpec::max_pool((2, 2))).unwrap().tokens.to_vec();
        for (a, b) in avg(&f.mul_scalar(3.0)).iter().zip(avg(&f)) {
            assert!((a - 3.0 * b).abs() < 1e-14);
        }
        // exp is monotone increasing
        for (a, b) in mx(&f.exp()).iter().zip(mx(&f)) {
            assert_eq!(*a, libm::exp(b));
        }
    }

    #[test]
    fn detached_theta_gets_no_gradient() {
        let spec = TokenizerSpec::strided_conv((2, 2), 2);
        let f = Tensor::leaf(vec![0.3; 32], &[1, 4, 4, 2], true).unwrap();
        tokenize_with(&f, &spec, true)
            .unwrap()
            .tokens
            .sum_all()
            .backward()
            .unwrap();
        assert!(spec.theta.as_ref().unwrap().grad().is_none());
        assert!(f.grad().is_some());
        tokenize(&f, &spec).unwrap().tokens.sum_all().backward().unwrap();
        assert!(spec.theta.as_ref().unwrap().grad().is_some());
    }
}
