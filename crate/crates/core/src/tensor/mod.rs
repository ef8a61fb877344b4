//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every primitive records a node on the tape of its tracked inputs. Adjoint
//! rules are written in terms of the same primitives, so a backward pass run
//! with `create_graph` is itself differentiable (needed for second-order
//! meta-gradients).

mod array;
mod kernels;
mod rules;
mod tape;

use std::rc::Rc;

pub use array::Array;
pub use tape::{grad, grad_report, Gradients, Tape};

use crate::error::{contract, Error, Result};
use tape::NodeRef;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    SumAll,
    SumAxis { axis: usize },
    MeanAll,
    MeanAxis { axis: usize },
    Exp,
    Log,
    Sqrt,
    Power(f64),
    Softmax,
    Relu,
    Gelu,
    LayerNorm { eps: f64 },
    Embedding { indices: Rc<[usize]> },
    MaskedFill { mask: Rc<[bool]> },
}

struct Inner {
    shape: Vec<usize>,
    values: Rc<[f64]>,
    node: Option<NodeRef>,
}

/// N-dimensional differentiable array.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("values", &&self.0.values[..])
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

impl Tensor {
    fn with_node(shape: Vec<usize>, values: Rc<[f64]>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor(Rc::new(Inner {
            shape,
            values,
            node,
        }))
    }

    fn constant(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self::with_node(shape, values.into(), None)
    }

    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self::constant(shape.to_vec(), values))
    }

    pub fn from_array(a: &Array) -> Self {
        Self::constant(a.shape().to_vec(), a.data().to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Vec::new(), vec![v])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::constant(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::constant(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    fn shared_values(&self) -> Rc<[f64]> {
        self.0.values.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.values.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.values[0])
    }

    pub fn to_array(&self) -> Array {
        Array::new(self.shape().to_vec(), self.values().to_vec()).expect("consistent tensor")
    }

    /// Same values, no tape connection.
    pub fn detach(&self) -> Tensor {
        Self::with_node(self.0.shape.clone(), self.0.values.clone(), None)
    }

    /// True when the tensor is connected to a live tape.
    pub fn is_tracked(&self) -> bool {
        self.node_ref().is_some()
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef> {
        self.0.node.as_ref().filter(|n| n.tape.strong_count() > 0)
    }

    /// Records `op` on the tape shared by the tracked inputs, or returns a
    /// constant when no input is tracked.
    fn record(op: Op, inputs: &[&Tensor], shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let mut tape = None;
        for t in inputs {
            if let Some(r) = t.node_ref() {
                match &tape {
                    None => tape = Some(r.tape.clone()),
                    Some(w) if std::rc::Weak::ptr_eq(w, &r.tape) => {}
                    Some(_) => {
                        return Err(contract("operands belong to different tapes"));
                    }
                }
            }
        }
        match tape.and_then(|w| w.upgrade()) {
            Some(t) => Ok(tape::push_node(
                &t,
                op,
                inputs.iter().map(|x| (*x).clone()).collect(),
                shape,
                values.into(),
            )),
            None => Ok(Self::constant(shape, values)),
        }
    }

    // Elementwise binary primitives (numpy-style broadcasting over singleton axes).

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, v) = kernels::broadcast_zip("add", self, other, |a, b| a + b)?;
        Self::record(Op::Add, &[self, other], shape, v)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, v) = kernels::broadcast_zip("sub", self, other, |a, b| a - b)?;
        Self::record(Op::Sub, &[self, other], shape, v)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, v) = kernels::broadcast_zip("mul", self, other, |a, b| a * b)?;
        Self::record(Op::Mul, &[self, other], shape, v)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, v) = kernels::broadcast_zip("div", self, other, |a, b| a / b)?;
        Self::record(Op::Div, &[self, other], shape, v)
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let v = kernels::matmul(self.values(), other.values(), a[0], a[1], b[1]);
        Self::record(Op::MatMul, &[self, other], vec![a[0], b[1]], v)
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(contract(format!("transpose expects a matrix, got {s:?}")));
        }
        let v = kernels::transpose(self.values(), s[0], s[1]);
        Self::record(Op::Transpose, &[self], vec![s[1], s[0]], v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::record(Op::Reshape, &[self], shape.to_vec(), self.values().to_vec())
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(contract(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let v = kernels::concat(parts, axis);
        Self::record(Op::Concat { axis }, parts, shape, v)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(contract(format!(
                "slice {start}..{end} on axis {axis} of shape {s:?}"
            )));
        }
        if start == 0 && end == s[axis] {
            return Ok(self.clone());
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let v = kernels::slice(self.values(), s, axis, start, end);
        Self::record(Op::Slice { axis, start, end }, &[self], shape, v)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let v = kernels::pairwise_sum(self.values());
        Self::record(Op::SumAll, &[self], Vec::new(), vec![v])
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(contract(format!("sum axis {axis} of shape {s:?}")));
        }
        let v = kernels::sum_axis(self.values(), s, axis);
        Self::record(
            Op::SumAxis { axis },
            &[self],
            reduced_shape(s, axis, keepdim),
            v,
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let v = kernels::pairwise_sum(self.values()) / self.numel() as f64;
        Self::record(Op::MeanAll, &[self], Vec::new(), vec![v])
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(contract(format!("mean axis {axis} of shape {s:?}")));
        }
        let n = s[axis] as f64;
        let v = kernels::sum_axis(self.values(), s, axis)
            .into_iter()
            .map(|x| x / n)
            .collect();
        Self::record(
            Op::MeanAxis { axis },
            &[self],
            reduced_shape(s, axis, keepdim),
            v,
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let v = self.values().iter().map(|x| x.exp()).collect();
        Self::record(Op::Exp, &[self], self.shape().to_vec(), v)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.values().iter().find(|x| **x < 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative input {bad}"),
            });
        }
        let v = self.values().iter().map(|x| x.ln()).collect();
        Self::record(Op::Log, &[self], self.shape().to_vec(), v)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(bad) = self.values().iter().find(|x| **x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let v = self.values().iter().map(|x| x.sqrt()).collect();
        Self::record(Op::Sqrt, &[self], self.shape().to_vec(), v)
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        let integral = p.fract() == 0.0;
        if !integral {
            if let Some(bad) = self.values().iter().find(|x| **x < 0.0) {
                return Err(Error::Domain {
                    op: "power",
                    detail: format!("negative base {bad} with exponent {p}"),
                });
            }
        }
        let v = self
            .values()
            .iter()
            .map(|x| if integral { x.powi(p as i32) } else { x.powf(p) })
            .collect();
        Self::record(Op::Power(p), &[self], self.shape().to_vec(), v)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| contract("softmax of a scalar"))?;
        let v = kernels::softmax_rows(self.values(), n);
        Self::record(Op::Softmax, &[self], self.shape().to_vec(), v)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let v = self.values().iter().map(|x| x.max(0.0)).collect();
        Self::record(Op::Relu, &[self], self.shape().to_vec(), v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let v = self.values().iter().map(|&x| kernels::gelu(x)).collect();
        Self::record(Op::Gelu, &[self], self.shape().to_vec(), v)
    }

    /// Normalizes over the last axis: `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| contract("layer_norm of a scalar"))?;
        if n == 0 {
            return Err(Error::Degenerate("layer_norm over an empty axis".into()));
        }
        let v = kernels::layer_norm_rows(self.values(), n, eps);
        Self::record(Op::LayerNorm { eps }, &[self], self.shape().to_vec(), v)
    }

    /// Row gather from a `[vocab, dim]` table.
    pub fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(contract(format!("embedding table must be a matrix, got {s:?}")));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(contract(format!("embedding index {bad} >= vocab {vocab}")));
        }
        let mut v = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            v.extend_from_slice(&table.values()[i * dim..(i + 1) * dim]);
        }
        Self::record(
            Op::Embedding {
                indices: indices.into(),
            },
            &[table],
            vec![indices.len(), dim],
            v,
        )
    }

    /// Replaces entries where `mask` is true with `value`. `mask` is either
    /// full-size or broadcast along the leading axes (length = last dims).
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        let n = self.numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let full: Rc<[bool]> = if mask.len() == n {
            mask.into()
        } else {
            mask.iter().copied().cycle().take(n).collect()
        };
        let v = self
            .values()
            .iter()
            .zip(full.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Self::record(
            Op::MaskedFill { mask: full },
            &[self],
            self.shape().to_vec(),
            v,
        )
    }

    // Composites built from primitives.

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        // 1 - 2 / (exp(2x) + 1)
        let e = self.scale(2.0)?.exp()?.add_scalar(1.0)?;
        Tensor::scalar(2.0).div(&e)?.neg()?.add_scalar(1.0)
    }

    /// Log-softmax over the last axis. The row maximum is a constant shift,
    /// which leaves the derivative unchanged.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| contract("log_softmax of a scalar"))?;
        let rows = self.numel() / n.max(1);
        let mut maxes = Vec::with_capacity(rows);
        for r in self.values().chunks(n) {
            maxes.push(r.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut kshape = self.shape().to_vec();
        *kshape.last_mut().unwrap() = 1;
        let shift = Tensor::new(&kshape, maxes)?;
        let z = self.sub(&shift)?;
        let lse = z.exp()?.sum_axis(self.rank() - 1, true)?.log()?;
        z.sub(&lse)
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

fn reduced_shape(s: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = s.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}
