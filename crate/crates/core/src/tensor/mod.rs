//! Dense row-major `f64` tensors with a reverse-mode gradient record.
//!
//! A [`Tensor`] is a cheap handle (reference counted) onto a node holding its
//! values, shape and, for results of differentiable ops, the parents and
//! backward rule that produced it. Calling [`Tensor::backward`] on a scalar
//! walks that record once in reverse topological order and accumulates
//! gradients into every leaf created with `requires_grad`.

mod kernels;
mod ops;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::fmt;

use crate::error::{Error, Result};

pub use ops::DEFAULT_EPS;

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a> {
    /// Forward value of the node being differentiated.
    pub out: &'a [f64],
    /// Gradient of the root with respect to that value.
    pub grad: &'a [f64],
    /// Which parents want a gradient; rules may skip work for the others.
    pub needs: &'a [bool],
}

/// Backward rule: returns one optional gradient per parent, in parent order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(alloc::rc::Rc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Contract(format!("shape {shape:?} has a zero dimension")));
    }
    if numel(shape) != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} holds {} values but {len} were given",
            numel(shape)
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor; with `requires_grad` it receives gradients on backward.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = numel(shape);
        Self::new(vec![value; n], shape).expect("full: shape must have positive dims")
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::raw(vec![1], vec![value], false, None)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        Tensor(alloc::rc::Rc::new(Node {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    /// Build the result of a differentiable op. The backward rule is only
    /// recorded when at least one parent requires a gradient.
    ///
    /// Kernels outside this module (fused losses) use this to register their
    /// own forward values and vector-Jacobian products.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: bad output length");
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward,
        });
        Self::raw(shape, data, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it is recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// New constant leaf with bit-identical values and no gradient history.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Leaf copy of the current values with the given tracking flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::raw(self.0.shape.clone(), self.to_vec(), requires_grad, None)
    }

    /// Mutate the values of a leaf in place (optimizer steps, finite differences).
    pub fn update_leaf(&self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("only leaf tensors can be updated in place".into()));
        }
        f(&mut self.0.data.borrow_mut());
        Ok(())
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        alloc::rc::Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        alloc::rc::Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a one-element root.
    ///
    /// Leaf gradients accumulate across calls; use [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            self.accumulate_leaf(&[1.0]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else {
                continue;
            };
            let gf = node.0.grad_fn.as_ref().expect("topo order only holds interior nodes");
            let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
            let out = node.0.data.borrow();
            let grads = (gf.backward)(&BackwardCtx {
                out: &out,
                grad: &grad,
                needs: &needs,
            });
            debug_assert_eq!(grads.len(), gf.parents.len(), "{}: gradient arity", gf.name);
            for (parent, g) in gf.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel(), "{}: gradient length", gf.name);
                if parent.is_leaf() {
                    parent.accumulate_leaf(&g);
                } else {
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate_leaf(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Interior nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: BTreeMap<usize, ()> = BTreeMap::new();
        // (node, children expanded?)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.insert(node.key(), ()).is_some() {
                continue;
            }
            let Some(gf) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let parents: Vec<Tensor> = gf
                .parents
                .iter()
                .filter(|p| p.requires_grad() && !p.is_leaf())
                .cloned()
                .collect();
            stack.push((node, true));
            for p in parents {
                if !visited.contains_key(&p.key()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
