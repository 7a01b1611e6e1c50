//! Dense N-D tensors with optional gradient-tape participation, trainable
//! parameters, and the real-valued neural ops everything else builds on.

pub mod kernels;
pub mod ops;
mod tape;

pub use tape::{backward, BackwardReport, Tape};

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use tape::GradSink;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Immutable N-D array; activations carry (N, C, H, W) shapes.
///
/// Cloning is cheap (the buffer is shared). A tensor produced by a
/// differentiable op holds a reference to its tape node; constants and
/// detached tensors do not.
pub struct Tensor<E: Scalar> {
    data: Arc<Vec<E>>,
    shape: Vec<usize>,
    node: Option<(Tape<E>, usize)>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node.clone(),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    /// Constant (untracked) tensor.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: Arc::new(vec![E::ZERO; numel(shape)]),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            data: Arc::new(vec![value; numel(shape)]),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            data: Arc::new(vec![value]),
            shape: vec![1],
            node: None,
        }
    }

    pub(crate) fn tracked(data: Vec<E>, shape: Vec<usize>, tape: Tape<E>, index: usize) -> Self {
        Self::tracked_arc(Arc::new(data), shape, tape, index)
    }

    pub(crate) fn tracked_arc(
        data: Arc<Vec<E>>,
        shape: Vec<usize>,
        tape: Tape<E>,
        index: usize,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            data,
            shape,
            node: Some((tape, index)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<(Tape<E>, usize)> {
        self.node.clone()
    }

    pub(crate) fn node_index(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i)
    }

    /// Same buffer, not on the tape.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Run backward from this scalar, accumulating parameter gradients.
    pub fn backward(&self) -> Result<BackwardReport> {
        tape::backward(self)
    }
}

/// Trainable parameter: a value buffer plus a persistent gradient
/// accumulator. Handles are cheap to clone and shared between the model,
/// the optimizer, and the tape leaves they spawn.
pub struct Param<E: Scalar> {
    inner: Rc<ParamInner<E>>,
}

struct ParamInner<E: Scalar> {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Arc<Vec<E>>>,
    grad: GradSink<E>,
    /// Bumped on every value mutation; consumers (packed-weight caches)
    /// use it to invalidate derived data.
    version: Cell<u64>,
    /// Latent weight of a binary layer: clipped to [-1, 1] after steps.
    latent_unit_clip: Cell<bool>,
}

impl<E: Scalar> Clone for Param<E> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Param<E> {
    pub fn new(name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "param shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let n = data.len();
        Ok(Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                shape: shape.to_vec(),
                value: RefCell::new(Arc::new(data)),
                grad: Rc::new(RefCell::new(vec![E::ZERO; n])),
                version: Cell::new(0),
                latent_unit_clip: Cell::new(false),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn version(&self) -> u64 {
        self.inner.version.get()
    }

    pub fn set_latent_unit_clip(&self, on: bool) {
        self.inner.latent_unit_clip.set(on);
    }

    pub fn latent_unit_clip(&self) -> bool {
        self.inner.latent_unit_clip.get()
    }

    /// Current value as a shared buffer.
    pub fn value(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.inner.value.borrow())
    }

    /// Copy of the accumulated gradient.
    pub fn grad(&self) -> Vec<E> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_norm(&self) -> f64 {
        self.inner
            .grad
            .borrow()
            .iter()
            .map(|g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grad(&self) {
        for g in self.inner.grad.borrow_mut().iter_mut() {
            *g = E::ZERO;
        }
    }

    /// Register this parameter on `tape` as a leaf and return the tracked
    /// value tensor. Each registration creates a new leaf; gradients from
    /// all leaves of one parameter accumulate into the same buffer.
    pub fn tracked(&self, tape: &Tape<E>) -> Tensor<E> {
        let idx = tape.push_leaf(self.numel(), Rc::clone(&self.inner.grad));
        Tensor::tracked_arc(self.value(), self.inner.shape.clone(), tape.clone(), idx)
    }

    /// Leaf when a tape is given (training), constant view otherwise.
    pub fn tracked_or_const(&self, tape: Option<&Tape<E>>) -> Tensor<E> {
        match tape {
            Some(t) => self.tracked(t),
            None => self.as_tensor(),
        }
    }

    /// Untracked view of the current value.
    pub fn as_tensor(&self) -> Tensor<E> {
        Tensor {
            data: self.value(),
            shape: self.inner.shape.clone(),
            node: None,
        }
    }

    /// Mutate the value in place given `(value, grad)`; bumps the version.
    pub fn update(&self, f: impl FnOnce(&mut [E], &[E])) {
        let grad = self.inner.grad.borrow();
        let mut value = self.inner.value.borrow_mut();
        f(Arc::make_mut(&mut value).as_mut_slice(), &grad);
        self.inner.version.set(self.inner.version.get() + 1);
    }

    /// Replace the value (checkpoint restore); bumps the version.
    pub fn set_value(&self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_value on {}: expected {} elements, got {}",
                self.name(),
                self.numel(),
                data.len()
            )));
        }
        *self.inner.value.borrow_mut() = Arc::new(data);
        self.inner.version.set(self.inner.version.get() + 1);
        Ok(())
    }
}

/// Tape shared by all tracked operands, if any; errors if two operands
/// live on different tapes.
pub(crate) fn common_tape<E: Scalar>(operands: &[&Tensor<E>]) -> Result<Option<Tape<E>>> {
    let mut found: Option<Tape<E>> = None;
    for t in operands {
        if let Some((tape, _)) = t.node() {
            match &found {
                None => found = Some(tape),
                Some(existing) => {
                    if !existing.same_tape(&tape) {
                        return Err(Error::Contract(
                            "operands recorded on different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_shape_check() {
        assert!(Tensor::from_vec(vec![1.0f32, 2.0], &[3]).is_err());
        let t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn param_grad_accumulates_across_leaves() {
        let tape = Tape::new();
        let p = Param::new("w", vec![2.0f64, -1.0], &[2]).unwrap();
        let a = p.tracked(&tape);
        let b = p.tracked(&tape);
        let s = ops::sum(&ops::add(&a, &b).unwrap()).unwrap();
        s.backward().unwrap();
        assert_eq!(p.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let p = Param::new("w", vec![1.0f64, 2.0], &[2]).unwrap();
        let t = p.tracked(&tape);
        assert!(t.backward().is_err());
    }

    #[test]
    fn update_bumps_version() {
        let p = Param::new("w", vec![1.0f32], &[1]).unwrap();
        assert_eq!(p.version(), 0);
        p.update(|v, _| v[0] = 3.0);
        assert_eq!(p.version(), 1);
        assert_eq!(p.value()[0], 3.0);
    }
}
