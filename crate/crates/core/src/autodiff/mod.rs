//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Operations record onto a [`Tape`] as they run (define-by-run); a backward
//! pass walks the tape in reverse creation order, which is a reverse
//! topological order by construction, and accumulates gradients additively.
//! Values are generic over [`Element`]: training runs in `f32`, gradient
//! checks in `f64` where central differences are trustworthy.

pub mod conv;
pub mod gradcheck;
pub mod param;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use param::{Parameter, ParameterSet};

/// Scalar element of a tensor; implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Errors from tensor-graph construction and backward passes.
#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Same shapes on both sides.
    None,
    /// Right operand is channel-shaped `[N, C]`, spread over the left's spatial axes.
    RightChannel,
    /// Left operand is channel-shaped.
    LeftChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Abs,
    Relu,
    LeakyRelu,
    Sigmoid,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Recorded operation of a tape node; holds parent ids and saved attributes.
enum Op<E: Element> {
    Const,
    Var,
    Param(Rc<RefCell<Parameter<E>>>),
    Detach,
    Binary { kind: BinKind, a: usize, b: usize, bcast: Bcast },
    Unary { kind: UnaryKind, a: usize, slope: E },
    AddScalar { a: usize },
    Scale { a: usize, c: E },
    Reshape { a: usize },
    Concat { a: usize, b: usize, axis: usize },
    UpsampleNearest { a: usize, factor: usize },
    Conv3d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    Linear { input: usize, weight: usize, bias: usize },
    Softmax { a: usize, dim: usize },
    InstanceMean { a: usize },
    InstanceVar { a: usize },
    Reduce { kind: ReduceKind, a: usize, axes: Vec<usize> },
    /// Forward hard one-hot of the argmax along `dim`; backward passes the
    /// gradient through unchanged (straight-through).
    HardOneHotSt { a: usize, dim: usize },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    values: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Recording tape; cloning shares the underlying node storage.
pub struct Tape<E: Element> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
    param_ids: Rc<RefCell<HashMap<usize, usize>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Self { nodes: Rc::clone(&self.nodes), param_ids: Rc::clone(&self.param_ids) }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
pub struct Tensor<E: Element> {
    tape: Tape<E>,
    id: usize,
    shape: Vec<usize>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Self { tape: self.tape.clone(), id: self.id, shape: self.shape.clone() }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
            param_ids: Rc::new(RefCell::new(HashMap::new())),
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<E>, requires_grad: bool, op: Op<E>) -> Tensor<E> {
        debug_assert_eq!(numel(&shape), values.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape: shape.clone(), values, grad: None, requires_grad, op });
        Tensor { tape: self.clone(), id, shape }
    }

    /// Constant leaf: data that never receives gradients.
    pub fn constant(&self, shape: &[usize], values: Vec<E>) -> Tensor<E> {
        self.push(shape.to_vec(), values, false, Op::Const)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<E> {
        self.constant(shape, vec![E::ZERO; numel(shape)])
    }

    pub fn scalar(&self, v: E) -> Tensor<E> {
        self.constant(&[1], vec![v])
    }

    /// Differentiable leaf whose gradient is read back from the node.
    pub fn var(&self, shape: &[usize], values: Vec<E>) -> Tensor<E> {
        self.push(shape.to_vec(), values, true, Op::Var)
    }

    /// Bind a parameter to the tape; repeated binds of the same parameter
    /// return the same node so its gradient accumulates once.
    pub fn param(&self, p: &Rc<RefCell<Parameter<E>>>) -> Tensor<E> {
        let key = Rc::as_ptr(p) as usize;
        if let Some(&id) = self.param_ids.borrow().get(&key) {
            let shape = self.nodes.borrow()[id].shape.clone();
            return Tensor { tape: self.clone(), id, shape };
        }
        let (shape, values) = {
            let pb = p.borrow();
            (pb.shape.clone(), pb.values.clone())
        };
        let t = self.push(shape, values, true, Op::Param(Rc::clone(p)));
        self.param_ids.borrow_mut().insert(key, t.id);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// The tape this tensor is recorded on.
    pub fn tape_handle(&self) -> Tape<E> {
        self.tape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn values(&self) -> Vec<E> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    /// Gradient accumulated by backward passes, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].values.len(), 1);
        nodes[self.id].values[0]
    }

    fn same_tape(&self, other: &Tensor<E>) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            return Err(TensorError::TapeMismatch);
        }
        Ok(())
    }

    fn binary(&self, other: &Tensor<E>, kind: BinKind) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let bcast = broadcast_kind(&self.shape, &other.shape)?;
        let out_shape = match bcast {
            Bcast::LeftChannel => other.shape.clone(),
            _ => self.shape.clone(),
        };
        let (values, requires_grad) = {
            let nodes = self.tape.nodes.borrow();
            let va = &nodes[self.id].values;
            let vb = &nodes[other.id].values;
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            let out = match bcast {
                Bcast::None => va
                    .iter()
                    .zip(vb.iter())
                    .map(|(&x, &y)| apply_bin(kind, x, y))
                    .collect::<Vec<E>>(),
                Bcast::RightChannel => {
                    broadcast_apply(va, &self.shape, vb, |x, y| apply_bin(kind, x, y))
                }
                Bcast::LeftChannel => {
                    broadcast_apply(vb, &other.shape, va, |y, x| apply_bin(kind, x, y))
                }
            };
            (out, rg)
        };
        Ok(self.tape.push(
            out_shape,
            values,
            requires_grad,
            Op::Binary { kind, a: self.id, b: other.id, bcast },
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, kind: UnaryKind, slope: E) -> Tensor<E> {
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let out = v.iter().map(|&x| apply_unary(kind, x, slope)).collect();
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push(self.shape.clone(), values, rg, Op::Unary { kind, a: self.id, slope })
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor<E> {
        self.unary(UnaryKind::Abs, E::ZERO)
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(UnaryKind::Relu, E::ZERO)
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        self.unary(UnaryKind::LeakyRelu, slope)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sigmoid, E::ZERO)
    }

    /// Elementwise square root; backward treats the derivative at 0 as 0.
    pub fn sqrt(&self) -> Tensor<E> {
        self.unary(UnaryKind::Sqrt, E::ZERO)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let out = nodes[self.id].values.iter().map(|&x| x + c).collect();
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push(self.shape.clone(), values, rg, Op::AddScalar { a: self.id })
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let out = nodes[self.id].values.iter().map(|&x| x * c).collect();
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push(self.shape.clone(), values, rg, Op::Scale { a: self.id, c })
    }

    /// Value-equal tensor with no backward edge.
    pub fn detach(&self) -> Tensor<E> {
        let values = self.values();
        self.tape.push(self.shape.clone(), values, false, Op::Detach)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].values.clone(), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), values, rg, Op::Reshape { a: self.id }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&self, other: &Tensor<E>, axis: usize) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: self.shape.len() });
        }
        if self.shape.len() != other.shape.len()
            || self
                .shape
                .iter()
                .zip(other.shape.iter())
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(TensorError::ShapeMismatch(format!(
                "concat shapes {:?} and {:?} on axis {axis}",
                self.shape, other.shape
            )));
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] += other.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let (na, nb) = (self.shape[axis], other.shape[axis]);
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let va = &nodes[self.id].values;
            let vb = &nodes[other.id].values;
            let mut out = Vec::with_capacity(va.len() + vb.len());
            for o in 0..outer {
                out.extend_from_slice(&va[o * na * inner..(o + 1) * na * inner]);
                out.extend_from_slice(&vb[o * nb * inner..(o + 1) * nb * inner]);
            }
            (out, nodes[self.id].requires_grad || nodes[other.id].requires_grad)
        };
        Ok(self.tape.push(
            out_shape,
            values,
            rg,
            Op::Concat { a: self.id, b: other.id, axis },
        ))
    }

    /// Replicate every spatial cell `factor^3` times; axes 2.. are spatial.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<E>, TensorError> {
        if self.shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "upsample expects [N,C,D,H,W], got {:?}",
                self.shape
            )));
        }
        if factor == 1 {
            return self.reshape(&self.shape.clone());
        }
        let (n, c, d, h, w) = dims5(&self.shape);
        let out_shape = vec![n, c, d * factor, h * factor, w * factor];
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let mut out = vec![E::ZERO; numel(&out_shape)];
            let (od, oh, ow) = (d * factor, h * factor, w * factor);
            for nc in 0..n * c {
                let src = &v[nc * d * h * w..(nc + 1) * d * h * w];
                let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            dst[(zd * oh + zh) * ow + zw] =
                                src[((zd / factor) * h + zh / factor) * w + zw / factor];
                        }
                    }
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            out_shape,
            values,
            rg,
            Op::UpsampleNearest { a: self.id, factor },
        ))
    }

    /// Numerically stabilized softmax along `dim`.
    pub fn softmax(&self, dim: usize) -> Result<Tensor<E>, TensorError> {
        if dim >= self.shape.len() {
            return Err(TensorError::InvalidAxis { axis: dim, rank: self.shape.len() });
        }
        let (outer, axis, inner) = fiber_dims(&self.shape, dim);
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let mut out = vec![E::ZERO; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis * inner + i;
                    let mut mx = v[base];
                    for k in 1..axis {
                        mx = mx.maximum(v[base + k * inner]);
                    }
                    let mut sum = E::ZERO;
                    for k in 0..axis {
                        let e = (v[base + k * inner] - mx).exp();
                        out[base + k * inner] = e;
                        sum += e;
                    }
                    for k in 0..axis {
                        out[base + k * inner] = out[base + k * inner] / sum;
                    }
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(self.shape.clone(), values, rg, Op::Softmax { a: self.id, dim }))
    }

    /// Hard one-hot of the argmax along `dim` in forward; straight-through
    /// (identity) gradient in backward. Ties break to the lowest index.
    pub fn hard_one_hot_st(&self, dim: usize) -> Result<Tensor<E>, TensorError> {
        if dim >= self.shape.len() {
            return Err(TensorError::InvalidAxis { axis: dim, rank: self.shape.len() });
        }
        let (outer, axis, inner) = fiber_dims(&self.shape, dim);
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let mut out = vec![E::ZERO; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis * inner + i;
                    let mut best = 0usize;
                    for k in 1..axis {
                        if v[base + k * inner] > v[base + best * inner] {
                            best = k;
                        }
                    }
                    out[base + best * inner] = E::ONE;
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            self.shape.clone(),
            values,
            rg,
            Op::HardOneHotSt { a: self.id, dim },
        ))
    }

    /// Per-(sample, channel) population mean and variance over spatial axes.
    pub fn instance_stats(&self) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
        if self.shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "instance_stats expects [N,C,D,H,W], got {:?}",
                self.shape
            )));
        }
        let (n, c, d, h, w) = dims5(&self.shape);
        let m = d * h * w;
        let inv = E::from_f64(1.0 / m as f64);
        let (means, vars, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let mut means = vec![E::ZERO; n * c];
            let mut vars = vec![E::ZERO; n * c];
            for nc in 0..n * c {
                let src = &v[nc * m..(nc + 1) * m];
                let mut s = E::ZERO;
                for &x in src {
                    s += x;
                }
                let mu = s * inv;
                let mut q = E::ZERO;
                for &x in src {
                    let dx = x - mu;
                    q += dx * dx;
                }
                means[nc] = mu;
                vars[nc] = q * inv;
            }
            (means, vars, nodes[self.id].requires_grad)
        };
        let mean = self.tape.push(vec![n, c], means, rg, Op::InstanceMean { a: self.id });
        let var = self.tape.push(vec![n, c], vars, rg, Op::InstanceVar { a: self.id });
        Ok((mean, var))
    }

    /// Sum or mean over `axes`; reduced axes are removed from the shape
    /// (reducing every axis yields a `[1]` scalar).
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Tensor<E>, TensorError> {
        let rank = self.shape.len();
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if let Some(&bad) = ax.iter().find(|&&a| a >= rank) {
            return Err(TensorError::InvalidAxis { axis: bad, rank });
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !ax.contains(i))
            .map(|(_, &s)| s)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = ax.iter().map(|&a| self.shape[a]).product();
        let inv = E::from_f64(1.0 / count as f64);
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].values;
            let mut out = vec![E::ZERO; numel(&out_shape)];
            let map = ReduceMap::new(&self.shape, &ax);
            for (i, &x) in v.iter().enumerate() {
                out[map.out_index(i)] += x;
            }
            if kind == ReduceKind::Mean {
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out_shape, values, rg, Op::Reduce { kind, a: self.id, axes: ax }))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("axes in range")
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("axes in range")
    }

    /// Affine map `input [N,m] x weight [out,m]^T + bias [out]`.
    pub fn linear(&self, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        if self.shape.len() != 2 || weight.shape.len() != 2 || bias.shape.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "linear expects [N,m], [out,m], [out]; got {:?}, {:?}, {:?}",
                self.shape, weight.shape, bias.shape
            )));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let (out, wm) = (weight.shape[0], weight.shape[1]);
        if wm != m || bias.shape[0] != out {
            return Err(TensorError::ShapeMismatch(format!(
                "linear dims: input m={m}, weight {:?}, bias {:?}",
                weight.shape, bias.shape
            )));
        }
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let vi = &nodes[self.id].values;
            let vw = &nodes[weight.id].values;
            let vb = &nodes[bias.id].values;
            let mut y = vec![E::ZERO; n * out];
            for r in 0..n {
                let row = &vi[r * m..(r + 1) * m];
                for o in 0..out {
                    let wrow = &vw[o * m..(o + 1) * m];
                    let mut acc = vb[o];
                    for k in 0..m {
                        acc += row[k] * wrow[k];
                    }
                    y[r * out + o] = acc;
                }
            }
            let rg = nodes[self.id].requires_grad
                || nodes[weight.id].requires_grad
                || nodes[bias.id].requires_grad;
            (y, rg)
        };
        Ok(self.tape.push(
            vec![n, out],
            values,
            rg,
            Op::Linear { input: self.id, weight: weight.id, bias: bias.id },
        ))
    }

    /// 3D cross-correlation, `input [N,Cin,D,H,W] * weight [Cout,Cin,k,k,k] + bias`.
    pub fn conv3d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<E>, TensorError> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let out_shape = conv::conv3d_out_shape(&self.shape, &weight.shape, &bias.shape, stride, padding)?;
        let (values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let y = conv::conv3d_forward(
                &nodes[self.id].values,
                &self.shape,
                &nodes[weight.id].values,
                &weight.shape,
                &nodes[bias.id].values,
                stride,
                padding,
                &out_shape,
            );
            let rg = nodes[self.id].requires_grad
                || nodes[weight.id].requires_grad
                || nodes[bias.id].requires_grad;
            (y, rg)
        };
        Ok(self.tape.push(
            out_shape,
            values,
            rg,
            Op::Conv3d { input: self.id, weight: weight.id, bias: bias.id, stride, padding },
        ))
    }

    /// Cosine similarity of the flattened tensors:
    /// `<a,b> / (|a| * |b| + 1e-8)`, recorded through primitive ops.
    pub fn cosine_similarity(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        if self.numel() != other.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "cosine over {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let a = self.reshape(&[self.numel()])?;
        let b = other.reshape(&[other.numel()])?;
        let dot = a.mul(&b)?.sum_all();
        let na = a.mul(&a)?.sum_all().sqrt();
        let nb = b.mul(&b)?.sum_all().sqrt();
        let denom = na.mul(&nb)?.add_scalar(E::from_f64(1e-8));
        dot.div(&denom)
    }

    /// Reverse-mode pass from a scalar loss; gradients accumulate additively
    /// into every `requires_grad` node and bound parameter.
    ///
    /// Each call propagates from a fresh unit seed through call-local buffers
    /// and then folds the result into the persistent node gradients, so two
    /// backward calls without zeroing exactly double them.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.numel()));
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        let mut local: Vec<Option<Vec<E>>> = vec![None; self.id + 1];
        if nodes[self.id].requires_grad {
            local[self.id] = Some(vec![E::ONE]);
        }
        for id in (0..=self.id).rev() {
            let g = match local[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_node(&mut nodes, id, &g, &mut local);
            local[id] = Some(g);
        }
        for (id, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                match nodes[id].grad {
                    Some(ref mut acc) => {
                        for (a, gi) in acc.iter_mut().zip(g.iter()) {
                            *a += *gi;
                        }
                    }
                    None => nodes[id].grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn dims5(shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3], shape[4])
}

/// Split a shape around `dim` into (outer, axis, inner) extents.
fn fiber_dims(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Bcast, TensorError> {
    if a == b {
        return Ok(Bcast::None);
    }
    let channel_over = |full: &[usize], ch: &[usize]| {
        full.len() == 5 && ch.len() == 2 && full[0] == ch[0] && full[1] == ch[1]
    };
    if channel_over(a, b) {
        Ok(Bcast::RightChannel)
    } else if channel_over(b, a) {
        Ok(Bcast::LeftChannel)
    } else {
        Err(TensorError::ShapeMismatch(format!(
            "incompatible shapes {a:?} and {b:?} (only [N,C] over [N,C,D,H,W] broadcasts)"
        )))
    }
}

fn apply_bin<E: Element>(kind: BinKind, x: E, y: E) -> E {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

fn apply_unary<E: Element>(kind: UnaryKind, x: E, slope: E) -> E {
    match kind {
        UnaryKind::Abs => x.abs(),
        UnaryKind::Relu => x.maximum(E::ZERO),
        UnaryKind::LeakyRelu => {
            if x > E::ZERO {
                x
            } else {
                slope * x
            }
        }
        UnaryKind::Sigmoid => E::ONE / (E::ONE + (-x).exp()),
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// Apply `f(full, channel)` with the `[N,C]` operand spread over spatial axes.
fn broadcast_apply<E: Element>(
    full: &[E],
    full_shape: &[usize],
    chan: &[E],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let (n, c, d, h, w) = dims5(full_shape);
    let m = d * h * w;
    let mut out = vec![E::ZERO; full.len()];
    for nc in 0..n * c {
        let cv = chan[nc];
        let src = &full[nc * m..(nc + 1) * m];
        let dst = &mut out[nc * m..(nc + 1) * m];
        for (o, &x) in dst.iter_mut().zip(src.iter()) {
            *o = f(x, cv);
        }
    }
    out
}

/// Maps a flat input index to the flat output index of a reduction.
struct ReduceMap {
    in_strides: Vec<usize>,
    out_strides: Vec<usize>,
    dims: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let rank = shape.len();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank - 1).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        // Output strides with reduced axes contributing stride 0.
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            if !axes.contains(&i) {
                out_strides[i] = acc;
                acc *= shape[i];
            }
        }
        Self { in_strides, out_strides, dims: shape.to_vec() }
    }

    #[inline]
    fn out_index(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut out = 0usize;
        for i in 0..self.dims.len() {
            let coord = rem / self.in_strides[i];
            rem %= self.in_strides[i];
            out += coord * self.out_strides[i];
        }
        out
    }
}

fn accumulate<E: Element>(
    nodes: &[Node<E>],
    local: &mut [Option<Vec<E>>],
    id: usize,
    contrib: Vec<E>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match local[id] {
        Some(ref mut g) => {
            for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
                *gi += *ci;
            }
        }
        None => local[id] = Some(contrib),
    }
}

/// Per-op vector-Jacobian products; each arm mirrors its forward kernel.
fn backward_node<E: Element>(
    nodes: &mut [Node<E>],
    id: usize,
    g: &[E],
    local: &mut [Option<Vec<E>>],
) {
    // Clone the small op descriptor so `nodes` can be reborrowed below.
    let op: Op<E> = match &nodes[id].op {
        Op::Const | Op::Var | Op::Detach => return,
        Op::Param(p) => {
            let mut pb = p.borrow_mut();
            for (pg, &gi) in pb.grad.iter_mut().zip(g.iter()) {
                *pg += gi;
            }
            return;
        }
        Op::Binary { kind, a, b, bcast } => Op::Binary { kind: *kind, a: *a, b: *b, bcast: *bcast },
        Op::Unary { kind, a, slope } => Op::Unary { kind: *kind, a: *a, slope: *slope },
        Op::AddScalar { a } => Op::AddScalar { a: *a },
        Op::Scale { a, c } => Op::Scale { a: *a, c: *c },
        Op::Reshape { a } => Op::Reshape { a: *a },
        Op::Concat { a, b, axis } => Op::Concat { a: *a, b: *b, axis: *axis },
        Op::UpsampleNearest { a, factor } => Op::UpsampleNearest { a: *a, factor: *factor },
        Op::Conv3d { input, weight, bias, stride, padding } => Op::Conv3d {
            input: *input,
            weight: *weight,
            bias: *bias,
            stride: *stride,
            padding: *padding,
        },
        Op::Linear { input, weight, bias } => {
            Op::Linear { input: *input, weight: *weight, bias: *bias }
        }
        Op::Softmax { a, dim } => Op::Softmax { a: *a, dim: *dim },
        Op::InstanceMean { a } => Op::InstanceMean { a: *a },
        Op::InstanceVar { a } => Op::InstanceVar { a: *a },
        Op::Reduce { kind, a, axes } => Op::Reduce { kind: *kind, a: *a, axes: axes.clone() },
        Op::HardOneHotSt { a, dim } => Op::HardOneHotSt { a: *a, dim: *dim },
    };
    match op {
        Op::Const | Op::Var | Op::Detach | Op::Param(_) => unreachable!(),
        Op::Binary { kind, a, b, bcast } => {
            let (ga, gb) = {
                let va = &nodes[a].values;
                let vb = &nodes[b].values;
                binary_backward(kind, bcast, va, &nodes[a].shape, vb, &nodes[b].shape, g)
            };
            accumulate(nodes, local, a, ga);
            accumulate(nodes, local, b, gb);
        }
        Op::Unary { kind, a, slope } => {
            let ga = {
                let va = &nodes[a].values;
                let vy = &nodes[id].values;
                va.iter()
                    .zip(vy.iter())
                    .zip(g.iter())
                    .map(|((&x, &y), &gi)| unary_grad(kind, x, y, slope) * gi)
                    .collect()
            };
            accumulate(nodes, local, a, ga);
        }
        Op::AddScalar { a } => accumulate(nodes, local, a, g.to_vec()),
        Op::Scale { a, c } => {
            let ga = g.iter().map(|&gi| gi * c).collect();
            accumulate(nodes, local, a, ga);
        }
        Op::Reshape { a } => accumulate(nodes, local, a, g.to_vec()),
        Op::Concat { a, b, axis } => {
            let (ga, gb) = {
                let sa = &nodes[a].shape;
                let sb = &nodes[b].shape;
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (na, nb) = (sa[axis], sb[axis]);
                let mut ga = Vec::with_capacity(numel(sa));
                let mut gb = Vec::with_capacity(numel(sb));
                for o in 0..outer {
                    let base = o * (na + nb) * inner;
                    ga.extend_from_slice(&g[base..base + na * inner]);
                    gb.extend_from_slice(&g[base + na * inner..base + (na + nb) * inner]);
                }
                (ga, gb)
            };
            accumulate(nodes, local, a, ga);
            accumulate(nodes, local, b, gb);
        }
        Op::UpsampleNearest { a, factor } => {
            let ga = {
                let sa = &nodes[a].shape;
                let (n, c, d, h, w) = dims5(sa);
                let (od, oh, ow) = (d * factor, h * factor, w * factor);
                let mut ga = vec![E::ZERO; numel(sa)];
                for nc in 0..n * c {
                    let gsrc = &g[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                    let gdst = &mut ga[nc * d * h * w..(nc + 1) * d * h * w];
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                gdst[((zd / factor) * h + zh / factor) * w + zw / factor] +=
                                    gsrc[(zd * oh + zh) * ow + zw];
                            }
                        }
                    }
                }
                ga
            };
            accumulate(nodes, local, a, ga);
        }
        Op::Conv3d { input, weight, bias, stride, padding } => {
            let (gi, gw, gb) = {
                let vi = &nodes[input].values;
                let vw = &nodes[weight].values;
                conv::conv3d_backward(
                    vi,
                    &nodes[input].shape,
                    vw,
                    &nodes[weight].shape,
                    g,
                    &nodes[id].shape,
                    stride,
                    padding,
                )
            };
            accumulate(nodes, local, input, gi);
            accumulate(nodes, local, weight, gw);
            accumulate(nodes, local, bias, gb);
        }
        Op::Linear { input, weight, bias } => {
            let (gi, gw, gb) = {
                let vi = &nodes[input].values;
                let vw = &nodes[weight].values;
                let n = nodes[input].shape[0];
                let m = nodes[input].shape[1];
                let out = nodes[weight].shape[0];
                let mut gi_v = vec![E::ZERO; n * m];
                let mut gw_v = vec![E::ZERO; out * m];
                let mut gb_v = vec![E::ZERO; out];
                for r in 0..n {
                    for o in 0..out {
                        let go = g[r * out + o];
                        gb_v[o] += go;
                        for k in 0..m {
                            gi_v[r * m + k] += go * vw[o * m + k];
                            gw_v[o * m + k] += go * vi[r * m + k];
                        }
                    }
                }
                (gi_v, gw_v, gb_v)
            };
            accumulate(nodes, local, input, gi);
            accumulate(nodes, local, weight, gw);
            accumulate(nodes, local, bias, gb);
        }
        Op::Softmax { a, dim } => {
            let ga = {
                let y = &nodes[id].values;
                let (outer, axis, inner) = fiber_dims(&nodes[id].shape, dim);
                let mut ga = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis * inner + i;
                        let mut dot = E::ZERO;
                        for k in 0..axis {
                            dot += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..axis {
                            let idx = base + k * inner;
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                ga
            };
            accumulate(nodes, local, a, ga);
        }
        Op::InstanceMean { a } => {
            let ga = {
                let sa = &nodes[a].shape;
                let (n, c, d, h, w) = dims5(sa);
                let m = d * h * w;
                let inv = E::from_f64(1.0 / m as f64);
                let mut ga = vec![E::ZERO; numel(sa)];
                for nc in 0..n * c {
                    let gv = g[nc] * inv;
                    for x in ga[nc * m..(nc + 1) * m].iter_mut() {
                        *x = gv;
                    }
                }
                ga
            };
            accumulate(nodes, local, a, ga);
        }
        Op::InstanceVar { a } => {
            let ga = {
                let va = &nodes[a].values;
                let sa = &nodes[a].shape;
                let (n, c, d, h, w) = dims5(sa);
                let m = d * h * w;
                let inv = E::from_f64(1.0 / m as f64);
                let two = E::from_f64(2.0);
                let mut ga = vec![E::ZERO; numel(sa)];
                for nc in 0..n * c {
                    let src = &va[nc * m..(nc + 1) * m];
                    let mut s = E::ZERO;
                    for &x in src {
                        s += x;
                    }
                    let mu = s * inv;
                    let gv = g[nc] * two * inv;
                    for (o, &x) in ga[nc * m..(nc + 1) * m].iter_mut().zip(src.iter()) {
                        *o = gv * (x - mu);
                    }
                }
                ga
            };
            accumulate(nodes, local, a, ga);
        }
        Op::Reduce { kind, a, axes } => {
            let ga = {
                let sa = &nodes[a].shape;
                let count: usize = axes.iter().map(|&x| sa[x]).product();
                let scale = match kind {
                    ReduceKind::Sum => E::ONE,
                    ReduceKind::Mean => E::from_f64(1.0 / count as f64),
                };
                let map = ReduceMap::new(sa, &axes);
                (0..numel(sa)).map(|i| g[map.out_index(i)] * scale).collect()
            };
            accumulate(nodes, local, a, ga);
        }
        Op::HardOneHotSt { a, .. } => accumulate(nodes, local, a, g.to_vec()),
    }
}

fn unary_grad<E: Element>(kind: UnaryKind, x: E, y: E, slope: E) -> E {
    match kind {
        UnaryKind::Abs => {
            if x > E::ZERO {
                E::ONE
            } else if x < E::ZERO {
                -E::ONE
            } else {
                E::ZERO
            }
        }
        UnaryKind::Relu => {
            if x > E::ZERO {
                E::ONE
            } else {
                E::ZERO
            }
        }
        UnaryKind::LeakyRelu => {
            if x > E::ZERO {
                E::ONE
            } else {
                slope
            }
        }
        UnaryKind::Sigmoid => y * (E::ONE - y),
        UnaryKind::Sqrt => {
            // Subgradient 0 at the origin keeps zero-norm cosine inputs finite.
            if y > E::ZERO {
                E::ONE / (E::from_f64(2.0) * y)
            } else {
                E::ZERO
            }
        }
    }
}

fn binary_backward<E: Element>(
    kind: BinKind,
    bcast: Bcast,
    va: &[E],
    sa: &[usize],
    vb: &[E],
    sb: &[usize],
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    // d/da and d/db of the elementwise op at paired (x, y).
    let dpair = |x: E, y: E| -> (E, E) {
        match kind {
            BinKind::Add => (E::ONE, E::ONE),
            BinKind::Sub => (E::ONE, -E::ONE),
            BinKind::Mul => (y, x),
            BinKind::Div => (E::ONE / y, -x / (y * y)),
        }
    };
    match bcast {
        Bcast::None => {
            let mut ga = vec![E::ZERO; va.len()];
            let mut gb = vec![E::ZERO; vb.len()];
            for i in 0..va.len() {
                let (da, db) = dpair(va[i], vb[i]);
                ga[i] = da * g[i];
                gb[i] = db * g[i];
            }
            (ga, gb)
        }
        Bcast::RightChannel => {
            // a full [N,C,D,H,W], b channel [N,C]; channel grads sum over spatial.
            let (n, c, d, h, w) = dims5(sa);
            let m = d * h * w;
            let mut ga = vec![E::ZERO; va.len()];
            let mut gb = vec![E::ZERO; vb.len()];
            for nc in 0..n * c {
                let y = vb[nc];
                let mut acc = E::ZERO;
                for j in 0..m {
                    let i = nc * m + j;
                    let (da, db) = dpair(va[i], y);
                    ga[i] = da * g[i];
                    acc += db * g[i];
                }
                gb[nc] = acc;
            }
            (ga, gb)
        }
        Bcast::LeftChannel => {
            let (n, c, d, h, w) = dims5(sb);
            let m = d * h * w;
            let mut ga = vec![E::ZERO; va.len()];
            let mut gb = vec![E::ZERO; vb.len()];
            for nc in 0..n * c {
                let x = va[nc];
                let mut acc = E::ZERO;
                for j in 0..m {
                    let i = nc * m + j;
                    let (da, db) = dpair(x, vb[i]);
                    acc += da * g[i];
                    gb[i] = db * g[i];
                }
                ga[nc] = acc;
            }
            (ga, gb)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_gives_ones() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[2, 3], vec![1.0; 6]);
        let loss = p.sum_all();
        assert_eq!(loss.item(), 6.0);
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_sum_backward() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[2], vec![1.0, 2.0]);
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[2], vec![3.0, -1.0]);
        let loss = p.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn fanout_grads_sum_over_paths() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[1], vec![3.0]);
        // loss = p*p + 2p -> d = 2p + 2 = 8
        let loss = p.mul(&p).unwrap().add(&p.scale(2.0)).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[2], vec![1.0, 2.0]);
        assert!(matches!(p.backward(), Err(TensorError::NonScalarLoss(2))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 3], vec![0.1, 0.5, 0.4]);
        let y = x.softmax(1).unwrap();
        let v = y.values();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // closed-form softmax of [0.1, 0.5, 0.4]
        let e: Vec<f64> = [0.1f64, 0.5, 0.4].iter().map(|t| t.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in v.iter().zip(e.iter()) {
            assert!((a - b / s).abs() < 1e-12);
        }
        let shifted = tape.var(&[1, 3], vec![100.1, 100.5, 100.4]);
        let v2 = shifted.softmax(1).unwrap().values();
        for (a, b) in v.iter().zip(v2.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_uniform_on_ties() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 3], vec![2.5, 2.5, 2.5]);
        let v = x.softmax(1).unwrap().values();
        for &a in &v {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_one_hot_picks_argmax_lowest_tie() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 3, 1, 1, 1], vec![0.1, 0.5, 0.4]);
        let y = x.softmax(1).unwrap().hard_one_hot_st(1).unwrap();
        assert_eq!(y.values(), vec![0.0, 1.0, 0.0]);
        let t = tape.var(&[1, 3, 1, 1, 1], vec![0.7, 0.7, 0.7]);
        let yt = t.softmax(1).unwrap().hard_one_hot_st(1).unwrap();
        assert_eq!(yt.values(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn instance_stats_of_pair() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 1, 1, 1, 2], vec![1.0, 3.0]);
        let (mu, var) = x.instance_stats().unwrap();
        assert_eq!(mu.values(), vec![2.0]);
        assert_eq!(var.values(), vec![1.0]);
    }

    #[test]
    fn instance_stats_constant_channel() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 2, 1, 2, 2], vec![0.4; 8]);
        let (mu, var) = x.instance_stats().unwrap();
        assert_eq!(mu.values(), vec![0.4, 0.4]);
        assert_eq!(var.values(), vec![0.0, 0.0]);
    }

    #[test]
    fn relu_and_abs_values() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().values(), vec![0.0, 0.0, 2.0]);
        assert_eq!(x.abs().values(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[4], vec![0.3, -0.7, 2.0, 5.5]);
        assert!(x.sub(&x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_of_self_is_one() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[3], vec![0.3, -0.7, 2.0]);
        let c = x.cosine_similarity(&x).unwrap().item();
        assert!((c - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_orthogonal_and_known_angle() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(&[2], vec![1.0, 0.0]);
        let b = tape.var(&[2], vec![0.0, 1.0]);
        assert!(a.cosine_similarity(&b).unwrap().item().abs() < 1e-7);
        let c = tape.var(&[2], vec![1.0, 1.0]);
        let got = a.cosine_similarity(&c).unwrap().item();
        assert!((got - 1.0 / 2.0f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 2], vec![0.5, -1.5]);
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero_b = tape.zeros(&[2]);
        assert_eq!(x.linear(&eye, &zero_b).unwrap().values(), vec![0.5, -1.5]);
        let zero_w = tape.zeros(&[2, 2]);
        let b = tape.constant(&[2], vec![0.7, 0.2]);
        assert_eq!(x.linear(&zero_w, &b).unwrap().values(), vec![0.7, 0.2]);
    }

    #[test]
    fn upsample_replicates_and_identity() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 1, 1, 1, 1], vec![0.9]);
        let up = x.upsample_nearest(2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 2, 2]);
        assert!(up.values().iter().all(|&v| v == 0.9));
        let same = x.upsample_nearest(1).unwrap();
        assert_eq!(same.values(), vec![0.9]);
    }

    #[test]
    fn reduce_mean_of_two() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[2], vec![2.0, 4.0]);
        assert_eq!(x.mean_all().item(), 3.0);
    }

    #[test]
    fn reduce_over_one_axis() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = x.reduce(ReduceKind::Sum, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.values(), vec![6.0, 15.0]);
        let s0 = x.reduce(ReduceKind::Sum, &[0]).unwrap();
        assert_eq!(s0.values(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn concat_along_channel() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(&[1, 1, 1, 1, 2], vec![1.0, 2.0]);
        let b = tape.var(&[1, 2, 1, 1, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = a.concat(&b, 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 1, 2]);
        assert_eq!(c.values(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.var(&[2], vec![1.0, 2.0]);
        let loss = p.detach().mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        // only the non-detached factor contributes: d/dp (const * p) = const
        assert_eq!(p.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn channel_broadcast_add() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(&[1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.var(&[1, 2], vec![10.0, 20.0]);
        let y = x.add(&c).unwrap();
        assert_eq!(y.values(), vec![11.0, 12.0, 23.0, 24.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(c.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn different_tapes_rejected() {
        let t1: Tape<f64> = Tape::new();
        let t2: Tape<f64> = Tape::new();
        let a = t1.var(&[1], vec![1.0]);
        let b = t2.var(&[1], vec![1.0]);
        assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
    }
}
