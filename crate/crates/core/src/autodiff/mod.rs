//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Covers exactly the operation set needed by the encoder, generator, and
//! losses: dense linear algebra, 1-D/2-D convolution, pointwise
//! nonlinearities, reductions, the fixed linear maps of the DSP generator
//! (control upsampling, noise-filter construction, overlap-add), and a
//! magnitude STFT. A [`Tape`] records operations in insertion order;
//! [`Tape::backward`] walks them in strict reverse order accumulating
//! gradients.
//!
//! A tape is single-threaded. Parameters train in `f32`; gradient
//! verification re-runs the same graph code in `f64` (see [`grad_check`]).

mod gemm;
mod ops;

use std::fmt::Display;
use std::iter::Sum;

use num_traits::{Float, FloatConst};
use rustfft::FftNum;

use crate::{Error, Result};

pub use ops::{FixedMatrix, Op};

/// Element type of tensors: `f32` for training, `f64` for verification.
pub trait Real: FftNum + Float + FloatConst + Sum<Self> + Display {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor data of {} values does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::of_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, op_name: &str) -> Result<()> {
    if let Some(bad) = t.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{op_name} produced non-finite value at flat index {bad}"
        )));
    }
    Ok(())
}

/// Handle to a node on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations; topological order equals insertion
/// order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are accumulated for it only
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant (non-differentiable) input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Re-registers the value of `v` as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = ops::forward(self, &op)?;
        check_finite(&value, op.name())?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// `requires_grad` leaf; leaves the loss does not touch get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss node has shape {:?}, expected a scalar",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad_out);
                continue;
            }
            ops::backward(self, idx, &grad_out, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

/// Gradient map produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a node; zero-filled if the loss never touched it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Non-allocating view; `None` means an all-zero gradient.
    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub(crate) fn accumulate(&mut self, v: Var, add: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(add.data()) {
                    *dst = *dst + *src;
                }
            }
            None => self.grads[v.0] = Some(add),
        }
    }
}

// Sharing the accumulate logic between Gradients and backward's worklist.
pub(crate) fn accumulate_grad<T: Real>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.shape(), add.shape());
            for (dst, src) in g.data_mut().iter_mut().zip(add.data()) {
                *dst = *dst + *src;
            }
        }
        None => *slot = Some(add),
    }
}

/// Verifies an analytic gradient against central finite differences.
///
/// `f` builds a scalar-valued graph from the leaf handed to it; the check
/// runs in whatever precision `T` is (use `f64`). Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |t: &Tensor<T>| -> Result<(f64, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), true);
        let loss = f(&mut tape, x)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "grad_check: f returned shape {:?}, expected a scalar",
                tape.value(loss).shape()
            )));
        }
        Ok((tape.value(loss).item().as_f64(), Some(tape.backward(loss)?.get(x))))
    };
    let forward_only = |t: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let (_, analytic) = eval(point)?;
    let analytic = analytic.expect("gradient for checked leaf");
    let mut max_err = 0.0f64;
    let mut probe = point.clone();
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of_f64(eps);
        let plus = forward_only(&probe)?;
        probe.data_mut()[i] = orig - T::of_f64(eps);
        let minus = forward_only(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
