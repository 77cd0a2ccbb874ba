use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{linear, Init, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub distill_token: bool,
}

impl ToyVitConfig {
    pub fn teacher(image_size: usize, patch: usize, classes: usize) -> Self {
        ToyVitConfig {
            image_size,
            patch,
            dim: 64,
            depth: 4,
            mlp_ratio: 2,
            classes,
            distill_token: false,
        }
    }

    pub fn student(image_size: usize, patch: usize, classes: usize) -> Self {
        ToyVitConfig {
            image_size,
            patch,
            dim: 32,
            depth: 2,
            mlp_ratio: 2,
            classes,
            distill_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.dim == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid ViT config {self:?}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Class token plus the optional distillation token.
    pub fn extra_tokens(&self) -> usize {
        1 + usize::from(self.distill_token)
    }

    pub fn sequence_len(&self) -> usize {
        self.visual_tokens() + self.extra_tokens()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub cls_logits: Tensor,
    pub dist_logits: Option<Tensor>,
    /// Final-block tokens without class/distillation rows, `(B, L, C)`.
    pub visual_tokens: Tensor,
    pub grid: (usize, usize),
}

/// Average of the two heads when a distillation head exists.
pub fn predict(out: &ModelOutputs) -> Result<Tensor> {
    match &out.dist_logits {
        Some(d) => Ok(out.cls_logits.add(d)?.mul_scalar(0.5)),
        None => Ok(out.cls_logits.clone()),
    }
}

/// Single-head pre-norm vision transformer.
#[derive(Debug, Clone)]
pub struct ToyVit {
    pub config: ToyVitConfig,
    pub params: ParamStore,
}

impl ToyVit {
    pub fn new(config: ToyVitConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.dim, config.classes);
        let hidden = c * config.mlp_ratio;
        let patch_in = config.patch * config.patch * 3;
        let mut init = Init {
            rng,
            store: ParamStore::new(),
            trainable: true,
        };
        init.normal("patch.w", &[patch_in, c]);
        init.constant("patch.b", &[c], 0.0);
        init.normal("pos", &[config.sequence_len(), c]);
        init.normal("cls_token", &[1, 1, c]);
        if config.distill_token {
            init.normal("dist_token", &[1, 1, c]);
        }
        for i in 0..config.depth {
            let p = |n: &str| format!("blocks.{i}.{n}");
            init.constant(&p("ln1.g"), &[c], 1.0);
            init.constant(&p("ln1.b"), &[c], 0.0);
            for w in ["q", "k", "v", "o"] {
                init.normal(&p(&format!("attn.w{w}")), &[c, c]);
                init.constant(&p(&format!("attn.b{w}")), &[c], 0.0);
            }
            init.constant(&p("ln2.g"), &[c], 1.0);
            init.constant(&p("ln2.b"), &[c], 0.0);
            init.normal(&p("mlp.w1"), &[c, hidden]);
            init.constant(&p("mlp.b1"), &[hidden], 0.0);
            init.normal(&p("mlp.w2"), &[hidden, c]);
            init.constant(&p("mlp.b2"), &[c], 0.0);
        }
        init.constant("norm.g", &[c], 1.0);
        init.constant("norm.b", &[c], 0.0);
        init.normal("head.w", &[c, k]);
        init.constant("head.b", &[k], 0.0);
        if config.distill_token {
            init.normal("dist_head.w", &[c, k]);
            init.constant("dist_head.b", &[k], 0.0);
        }
        Ok(ToyVit {
            config,
            params: init.store,
        })
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// `(B, H, W, 3)` images to `(B, N, P·P·3)` flattened patches.
    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
            return Err(Error::Config(format!(
                "images of shape {s:?} do not match a {0}x{0}x3 model",
                cfg.image_size
            )));
        }
        let (b, g, p) = (s[0], cfg.grid(), cfg.patch);
        images
            .reshape(&[b, g, p, g, p, 3])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, g * g, p * p * 3])
    }

    pub fn forward(&self, images: &Tensor) -> Result<ModelOutputs> {
        let cfg = &self.config;
        let b = images.shape().first().copied().unwrap_or(0);
        let (c, n, extra) = (cfg.dim, cfg.visual_tokens(), cfg.extra_tokens());
        let patches = linear(&self.patchify(images)?, self.p("patch.w")?, self.p("patch.b")?)?;

        let mut seq: Vec<Tensor> = vec![self.p("cls_token")?.broadcast_to(&[b, 1, c])?];
        if cfg.distill_token {
            seq.push(self.p("dist_token")?.broadcast_to(&[b, 1, c])?);
        }
        seq.push(patches);
        let s_len = cfg.sequence_len();
        let mut x = Tensor::concat(&seq, 1)?.add(&self.p("pos")?.broadcast_to(&[b, s_len, c])?)?;

        for i in 0..cfg.depth {
            x = self.block(&x, i)?;
        }
        let x = x.layer_norm(self.p("norm.g")?, self.p("norm.b")?, LN_EPS)?;

        let cls = x.narrow(1, 0, 1)?.reshape(&[b, c])?;
        let cls_logits = linear(&cls, self.p("head.w")?, self.p("head.b")?)?;
        let dist_logits = if cfg.distill_token {
            let d = x.narrow(1, 1, 1)?.reshape(&[b, c])?;
            Some(linear(&d, self.p("dist_head.w")?, self.p("dist_head.b")?)?)
        } else {
            None
        };
        Ok(ModelOutputs {
            cls_logits,
            dist_logits,
            visual_tokens: x.narrow(1, extra, n)?,
            grid: (cfg.grid(), cfg.grid()),
        })
    }

    fn block(&self, x: &Tensor, i: usize) -> Result<Tensor> {
        let p = |n: &str| self.p(&format!("blocks.{i}.{n}"));
        let c = self.config.dim;

        let h = x.layer_norm(p("ln1.g")?, p("ln1.b")?, LN_EPS)?;
        let q = linear(&h, p("attn.wq")?, p("attn.bq")?)?;
        let k = linear(&h, p("attn.wk")?, p("attn.bk")?)?;
        let v = linear(&h, p("attn.wv")?, p("attn.bv")?)?;
        let attn = q
            .matmul(&k.transpose(1, 2)?)?
            .mul_scalar(1.0 / libm::sqrt(c as f64))
            .softmax(2)?;
        let o = linear(&attn.matmul(&v)?, p("attn.wo")?, p("attn.bo")?)?;
        let x = x.add(&o)?;

        let h = x.layer_norm(p("ln2.g")?, p("ln2.b")?, LN_EPS)?;
        let h = linear(&h, p("mlp.w1")?, p("mlp.b1")?)?.gelu();
        x.add(&linear(&h, p("mlp.w2")?, p("mlp.b2")?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(rng: &mut SeededRng, b: usize, size: usize) -> Tensor {
        Tensor::new(rng.uniform_vec(b * size * size * 3, 0.0, 1.0), &[b, size, size, 3]).unwrap()
    }

    #[test]
    fn token_counts() {
        let cfg = ToyVitConfig::student(32, 4, 3);
        assert_eq!(cfg.visual_tokens(), 64);
        assert_eq!(cfg.sequence_len(), 66);
        let big = ToyVitConfig {
            image_size: 224,
            patch: 16,
            ..ToyVitConfig::student(224, 16, 1000)
        };
        assert_eq!(big.sequence_len(), 198);

        let mut rng = SeededRng::new(0);
        let m = ToyVit::new(cfg, &mut rng).unwrap();
        let out = m.forward(&images(&mut rng, 2, 32)).unwrap();
        assert_eq!(out.visual_tokens.shape(), &[2, 64, 32]);
        assert_eq!(out.cls_logits.shape(), &[2, 3]);
        assert_eq!(out.dist_logits.unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn bad_config_and_input() {
        let mut rng = SeededRng::new(0);
        assert!(ToyVit::new(ToyVitConfig::teacher(30, 4, 3), &mut rng).is_err());
        let m = ToyVit::new(ToyVitConfig::teacher(16, 4, 3), &mut rng).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 8, 8, 3])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let mut rng = SeededRng::new(1);
        let m = ToyVit::new(ToyVitConfig::student(16, 4, 4), &mut rng).unwrap();
        for name in ["head.w", "dist_head.w"] {
            m.params.get(name).unwrap().update_leaf(|d| d.fill(0.0)).unwrap();
        }
        let out = m.forward(&images(&mut rng, 3, 16)).unwrap();
        assert!(out.cls_logits.data().iter().all(|&v| v == 0.0));
        assert!(out.dist_logits.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_averages_heads() {
        let cls = Tensor::new(vec![2.0, 0.0], &[1, 2]).unwrap();
        let dist = Tensor::new(vec![0.0, 2.0], &[1, 2]).unwrap();
        let grid = (1, 1);
        let out = ModelOutputs {
            cls_logits: cls.clone(),
            dist_logits: Some(dist),
            visual_tokens: Tensor::zeros(&[1, 1, 1]),
            grid,
        };
        assert_eq!(predict(&out).unwrap().to_vec(), vec![1.0, 1.0]);
        let same = ModelOutputs {
            dist_logits: Some(cls.clone()),
            ..out.clone()
        };
        assert_eq!(predict(&same).unwrap().to_vec(), cls.to_vec());
        let none = ModelOutputs {
            dist_logits: None,
            ..out
        };
        assert_eq!(predict(&none).unwrap().to_vec(), cls.to_vec());
    }

    #[test]
    fn visual_tokens_exclude_extra_rows() {
        // with residual branches zeroed each row reaches the final norm
        // unmixed, so sentinel rows are recognizable if they leak
        let mut rng = SeededRng::new(2);
        let m = ToyVit::new(ToyVitConfig::student(8, 4, 2), &mut rng).unwrap();
        for (name, t) in m.params.iter() {
            if name.contains("attn.wo") || name.contains("mlp.w2") || name == "pos" {
                t.update_leaf(|d| d.fill(0.0)).unwrap();
            }
        }
        let alternating = |d: &mut [f64]| {
            d.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i % 2 == 0 { 1e3 } else { -1e3 })
        };
        m.params.get("cls_token").unwrap().update_leaf(alternating).unwrap();
        m.params.get("dist_token").unwrap().update_leaf(alternating).unwrap();
        let out = m.forward(&images(&mut rng, 1, 8)).unwrap();
        assert_eq!(out.visual_tokens.shape(), &[1, 4, 32]);
        // a normalized sentinel row is exactly +-1 alternating
        for row in out.visual_tokens.data().chunks(32) {
            let sentinel = row.iter().enumerate().all(|(i, v)| {
                let want = if i % 2 == 0 { 1.0 } else { -1.0 };
                (v - want).abs() < 1e-3
            });
            assert!(!sentinel);
        }
    }
}
