//! Desk-scale teacher and student networks.

mod cnn;
mod vit;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use cnn::{CnnOutputs, ToyCnn, ToyCnnConfig};
pub use vit::{predict, ModelOutputs, ToyVit, ToyVitConfig};

/// Named parameters in lexicographic order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies of every parameter with the given tracking flag.
    pub fn with_requires_grad(&self, flag: bool) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.with_requires_grad(flag)))
                .collect(),
        }
    }

    pub fn zero_grad(&self) {
        self.map.values().for_each(Tensor::zero_grad);
    }

    /// Overwrite values from `other`; names and shapes must match exactly.
    pub fn load_from(&self, other: &ParamStore) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, dst) in &self.map {
            let src = other
                .map
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            let values = src.to_vec();
            dst.update_leaf(|d| d.copy_from_slice(&values))?;
        }
        Ok(())
    }

    /// Bit-exact value equality over all parameters.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().all(|(k, v)| {
                other.map.get(k).is_some_and(|o| {
                    o.shape() == v.shape()
                        && o.data()
                            .iter()
                            .zip(v.data().iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

pub(crate) struct Init<'a> {
    pub rng: &'a mut SeededRng,
    pub store: ParamStore,
    pub trainable: bool,
}

impl Init<'_> {
    /// Normal(0, 0.02) weights.
    pub fn normal(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        let v = self.rng.normal_vec(n, 0.0, 0.02);
        self.put(name, v, shape);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        let n = shape.iter().product();
        self.put(name, alloc::vec![value; n], shape);
    }

    fn put(&mut self, name: &str, v: Vec<f64>, shape: &[usize]) {
        let t = Tensor::leaf(v, shape, self.trainable).expect("positive dims");
        self.store.insert(name.to_string(), t);
    }
}

/// `x · W + b` over the last axis; `W` is `(in, out)`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.matmul(w)?;
    let shape = y.shape().to_vec();
    y.add(&b.broadcast_to(&shape)?)
}

/// Either toy architecture behind one interface.
#[derive(Debug, Clone)]
pub enum ToyModel {
    Vit(ToyVit),
    Cnn(ToyCnn),
}

impl ToyModel {
    pub fn params(&self) -> &ParamStore {
        match self {
            ToyModel::Vit(m) => &m.params,
            ToyModel::Cnn(m) => &m.params,
        }
    }

    /// Same architecture with parameters copied and (un)frozen.
    pub fn with_requires_grad(&self, flag: bool) -> ToyModel {
        match self {
            ToyModel::Vit(m) => ToyModel::Vit(ToyVit {
                config: m.config.clone(),
                params: m.params.with_requires_grad(flag),
            }),
            ToyModel::Cnn(m) => ToyModel::Cnn(ToyCnn {
                config: m.config.clone(),
                params: m.params.with_requires_grad(flag),
            }),
        }
    }

    /// Final class logits for prediction.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            ToyModel::Vit(m) => predict(&m.forward(images)?),
            ToyModel::Cnn(m) => Ok(m.forward(images)?.logits),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_store_roundtrip_and_identity() {
        let mut a = ParamStore::new();
        a.insert("b", Tensor::leaf(alloc::vec![1.0, 2.0], &[2], true).unwrap());
        a.insert("a", Tensor::leaf(alloc::vec![3.0], &[1], true).unwrap());
        assert_eq!(a.names(), alloc::vec!["a", "b"]);
        let frozen = a.with_requires_grad(false);
        assert!(frozen.iter().all(|(_, t)| !t.requires_grad()));
        assert!(a.bit_identical(&frozen));
        a.get("a").unwrap().update_leaf(|d| d[0] = 4.0).unwrap();
        assert!(!a.bit_identical(&frozen));
        a.load_from(&frozen).unwrap();
        assert!(a.bit_identical(&frozen));
        assert!(a.get("zzz").is_err());
    }
}
