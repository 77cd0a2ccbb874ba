use alloc::format;
use alloc::vec::Vec;

use super::{linear, Init, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnnConfig {
    pub image_size: usize,
    /// Channels of stage 1; each later stage doubles it.
    pub width: usize,
    /// 3×3 convolutions per stage; the first one has stride 2.
    pub convs_per_stage: usize,
    pub classes: usize,
}

impl ToyCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << STAGES) {
            return Err(Error::Config(format!(
                "CNN image size {} must be divisible by {}",
                self.image_size,
                1 << STAGES
            )));
        }
        if self.width == 0 || self.convs_per_stage == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid CNN config {self:?}")));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.width << stage
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.image_size >> (stage + 1)
    }
}

#[derive(Debug, Clone)]
pub struct CnnOutputs {
    pub logits: Tensor,
    /// `(B, H_s, W_s, C_s)` maps of the three stages.
    pub stages: Vec<Tensor>,
}

/// Three stride-2 convolutional stages, global average pool, linear head.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    pub config: ToyCnnConfig,
    pub params: ParamStore,
}

impl ToyCnn {
    pub fn new(config: ToyCnnConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng,
            store: ParamStore::new(),
            trainable: true,
        };
        let mut cin = 3;
        for s in 0..STAGES {
            let cout = config.stage_channels(s);
            for c in 0..config.convs_per_stage {
                let ci = if c == 0 { cin } else { cout };
                // He-style scale keeps activations alive through the ReLU stack
                let std = libm::sqrt(2.0 / (9 * ci) as f64);
                let v = init.rng.normal_vec(9 * ci * cout, 0.0, std);
                let t = Tensor::leaf(v, &[3, 3, ci, cout], true)?;
                init.store.insert(format!("stage{s}.conv{c}.w"), t);
                init.constant(&format!("stage{s}.conv{c}.b"), &[cout], 0.0);
            }
            cin = cout;
        }
        init.normal("head.w", &[cin, config.classes]);
        init.constant("head.b", &[config.classes], 0.0);
        Ok(ToyCnn {
            config,
            params: init.store,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<CnnOutputs> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
            return Err(Error::Config(format!(
                "images of shape {s:?} do not match a {0}x{0}x3 model",
                cfg.image_size
            )));
        }
        let mut x = images.clone();
        let mut stages = Vec::with_capacity(STAGES);
        for st in 0..STAGES {
            for c in 0..cfg.convs_per_stage {
                let w = self.params.get(&format!("stage{st}.conv{c}.w"))?;
                let b = self.params.get(&format!("stage{st}.conv{c}.b"))?;
                let stride = if c == 0 { 2 } else { 1 };
                let y = x.conv2d(w, (stride, stride), 1)?;
                let shape = y.shape().to_vec();
                x = y.add(&b.broadcast_to(&shape)?)?.relu();
            }
            stages.push(x.clone());
        }
        let b = s[0];
        let pooled = x.mean_axes(&[1, 2], false)?;
        debug_assert_eq!(pooled.shape(), &[b, cfg.stage_channels(STAGES - 1)]);
        let logits = linear(&pooled, self.params.get("head.w")?, self.params.get("head.b")?)?;
        Ok(CnnOutputs { logits, stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ToyCnnConfig {
        ToyCnnConfig {
            image_size: 32,
            width: 4,
            convs_per_stage: 1,
            classes: 3,
        }
    }

    #[test]
    fn stage_shapes_halve() {
        let mut rng = SeededRng::new(0);
        let m = ToyCnn::new(cfg(), &mut rng).unwrap();
        let x = Tensor::new(rng.uniform_vec(2 * 32 * 32 * 3, 0.0, 1.0), &[2, 32, 32, 3]).unwrap();
        let out = m.forward(&x).unwrap();
        let shapes: Vec<Vec<usize>> = out.stages.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, [[2, 16, 16, 4], [2, 8, 8, 8], [2, 4, 4, 16]]);
        assert_eq!(out.logits.shape(), &[2, 3]);
        let again = m.forward(&x).unwrap();
        for (a, b) in out.stages.iter().zip(&again.stages) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let mut rng = SeededRng::new(1);
        let m = ToyCnn::new(cfg(), &mut rng).unwrap();
        for (_, t) in m.params.iter() {
            t.update_leaf(|d| d.fill(0.0)).unwrap();
        }
        let x = Tensor::new(rng.uniform_vec(32 * 32 * 3, 0.0, 1.0), &[1, 32, 32, 3]).unwrap();
        let out = m.forward(&x).unwrap();
        assert!(out.stages.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bad_sizes() {
        let mut rng = SeededRng::new(2);
        assert!(ToyCnn::new(
            ToyCnnConfig {
                image_size: 20,
                ..cfg()
            },
            &mut rng
        )
        .is_err());
        let m = ToyCnn::new(cfg(), &mut rng).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 16, 16, 3])).is_err());
    }
}
