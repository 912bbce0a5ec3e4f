use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, BilinearTaps};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Sqr,
    Abs,
    LeakyRelu(f64),
}

enum Op<T: Float> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary),
    SumAll(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample2x(usize),
    AvgPool2x(usize),
    Softmax(usize, usize),
    MaxAxis { x: usize, axis: usize, arg: Vec<u32> },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Sample(usize, Arc<BilinearTaps<T>>),
}

impl<T: Float> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Unary(x, _)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Upsample2x(x)
            | Op::AvgPool2x(x)
            | Op::Softmax(x, _)
            | Op::Sample(x, _) => vec![*x],
            Op::Narrow { x, .. } | Op::MaxAxis { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
        }
    }
}

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a define-by-run computation for reverse-mode differentiation.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    pub(crate) fn leaf_arc(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.leaf(value, requires_grad)
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need = |p: usize| nodes[p].requires_grad;
            let acc = |p: usize, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| match &mut grads[p] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for &p in &[*a, *b] {
                        if need(p) {
                            acc(p, kernels::reduce_to_shape(&g, nodes[p].value.shape()), &mut grads);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(*a, kernels::reduce_to_shape(&g, nodes[*a].value.shape()), &mut grads);
                    }
                    if need(*b) {
                        let r = kernels::reduce_to_shape(&g, nodes[*b].value.shape());
                        acc(*b, r.map(|v| -v), &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if need(*a) {
                        let t = kernels::binary(&g, vb, |x, y| x * y);
                        acc(*a, kernels::reduce_to_shape(&t, va.shape()), &mut grads);
                    }
                    if need(*b) {
                        let t = kernels::binary(&g, va, |x, y| x * y);
                        acc(*b, kernels::reduce_to_shape(&t, vb.shape()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if need(*a) {
                        let t = kernels::binary(&g, vb, |x, y| x / y);
                        acc(*a, kernels::reduce_to_shape(&t, va.shape()), &mut grads);
                    }
                    if need(*b) {
                        // d(a/b)/db = -out / b
                        let t = kernels::binary(&g, &node.value, |x, y| x * y);
                        let t = kernels::binary(&t, vb, |x, y| -x / y);
                        acc(*b, kernels::reduce_to_shape(&t, vb.shape()), &mut grads);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(*x, g.map(|v| v * s), &mut grads);
                }
                Op::AddScalar(x) => acc(*x, g, &mut grads),
                Op::Unary(x, kind) => {
                    let xv = &nodes[*x].value;
                    let yv = &node.value;
                    let d = match *kind {
                        Unary::Tanh => g.zip_map(yv, |gi, y| gi * (T::one() - y * y)),
                        Unary::Sigmoid => g.zip_map(yv, |gi, y| gi * y * (T::one() - y)),
                        Unary::Exp => g.zip_map(yv, |gi, y| gi * y),
                        Unary::Sqr => g.zip_map(xv, |gi, x| gi * (x + x)),
                        Unary::Abs => g.zip_map(xv, |gi, x| {
                            if x > T::zero() {
                                gi
                            } else if x < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::LeakyRelu(alpha) => {
                            let alpha = T::of(alpha);
                            g.zip_map(xv, |gi, x| if x > T::zero() { gi } else { gi * alpha })
                        }
                    };
                    acc(*x, d, &mut grads);
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    acc(*x, Tensor::full(nodes[*x].value.shape().to_vec(), gv), &mut grads);
                }
                Op::SumAxis(x, axis) => {
                    let dim = nodes[*x].value.shape()[*axis];
                    acc(*x, kernels::expand_axis(&g, *axis, dim), &mut grads);
                }
                Op::Reshape(x) => {
                    let shape = nodes[*x].value.shape().to_vec();
                    acc(*x, g.reshape(shape), &mut grads);
                }
                Op::Permute(x, perm) => {
                    let d = kernels::permute(&g, &kernels::inverse_permutation(perm));
                    acc(*x, d, &mut grads);
                }
                Op::Narrow { x, axis, start } => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let len = g.shape()[*axis];
                    let mut parts: Vec<Tensor<T>> = Vec::new();
                    let mut pre = xs.clone();
                    pre[*axis] = *start;
                    let mut post = xs.clone();
                    post[*axis] = xs[*axis] - start - len;
                    if *start > 0 {
                        parts.push(Tensor::zeros(pre));
                    }
                    parts.push(g);
                    if post[*axis] > 0 {
                        parts.push(Tensor::zeros(post));
                    }
                    let refs: Vec<&Tensor<T>> = parts.iter().collect();
                    acc(*x, Tensor::concat(&refs, *axis), &mut grads);
                }
                Op::Concat { xs, axis } => {
                    let mut start = 0;
                    for &p in xs {
                        let len = nodes[p].value.shape()[*axis];
                        if need(p) {
                            acc(p, g.narrow(*axis, start, len), &mut grads);
                        }
                        start += len;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *stride,
                        *pad,
                        (need(*x), need(*w), b.is_some_and(need)),
                    );
                    if let Some(dx) = cg.dx {
                        acc(*x, dx, &mut grads);
                    }
                    if let Some(dw) = cg.dw {
                        acc(*w, dw, &mut grads);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(&g), &mut grads),
                Op::AvgPool2x(x) => acc(*x, kernels::avgpool2x_backward(&g), &mut grads),
                Op::Softmax(x, axis) => {
                    acc(*x, kernels::softmax_backward(&node.value, &g, *axis), &mut grads);
                }
                Op::MaxAxis { x, axis, arg } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    acc(*x, kernels::max_axis_backward(&g, arg, &shape, *axis), &mut grads);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    // C = op(A) op(B)
                    if need(*a) {
                        let d = if *ta {
                            // A = (op A)^T, dA = op(B) dC^T
                            kernels::matmul(vb, &g, *tb, true)
                        } else {
                            kernels::matmul(&g, vb, false, !*tb)
                        };
                        acc(*a, d, &mut grads);
                    }
                    if need(*b) {
                        let d = if *tb {
                            kernels::matmul(&g, va, true, *ta)
                        } else {
                            kernels::matmul(va, &g, !*ta, false)
                        };
                        acc(*b, d, &mut grads);
                    }
                }
                Op::Sample(x, taps) => acc(*x, taps.apply_backward(&g), &mut grads),
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_arc(self.value())
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'t, T> {
        self.same_tape(&other);
        let v = kernels::binary(&self.value(), &other.value(), f);
        self.tape.push(v, op)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().map(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().map(|x| x + s);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t, T> {
        self.scale(-1.0).add_scalar(1.0)
    }

    fn unary(self, kind: Unary) -> Var<'t, T> {
        let x = self.value();
        let v = match kind {
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Sqr => x.map(|v| v * v),
            Unary::Abs => x.map(|v| v.abs()),
            Unary::LeakyRelu(a) => {
                let a = T::of(a);
                x.map(|v| if v > T::zero() { v } else { v * a })
            }
        };
        self.tape.push(v, Op::Unary(self.id, kind))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn sqr(self) -> Var<'t, T> {
        self.unary(Unary::Sqr)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(Unary::Abs)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::LeakyRelu(0.0))
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t, T> {
        self.unary(Unary::LeakyRelu(alpha))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let v = kernels::sum_axis(&self.value(), axis);
        self.tape.push(v, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        let dim = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / dim)
    }

    /// Maximum along `axis`, keeping it with size 1.
    pub fn max_axis(self, axis: usize) -> Var<'t, T> {
        let (v, arg) = kernels::max_axis(&self.value(), axis);
        self.tape.push(v, Op::MaxAxis { x: self.id, axis, arg })
    }

    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let v = kernels::softmax(&self.value(), axis);
        self.tape.push(v, Op::Softmax(self.id, axis))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t, T> {
        let v = (*self.value()).clone().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let v = kernels::permute(&self.value(), perm);
        self.tape.push(v, Op::Permute(self.id, perm.to_vec()))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let v = self.value().narrow(axis, start, len);
        self.tape.push(v, Op::Narrow { x: self.id, axis, start })
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of zero variables");
        let tape = parts[0].tape;
        for p in parts {
            parts[0].same_tape(p);
        }
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis);
        tape.push(v, Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis })
    }

    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        self.same_tape(&w);
        let bv = b.map(|b| b.value());
        let v = kernels::conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        self.tape.push(v, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad })
    }

    pub fn upsample2x(self) -> Var<'t, T> {
        let v = kernels::upsample2x(&self.value());
        self.tape.push(v, Op::Upsample2x(self.id))
    }

    pub fn avgpool2x(self) -> Var<'t, T> {
        let v = kernels::avgpool2x(&self.value());
        self.tape.push(v, Op::AvgPool2x(self.id))
    }

    /// Batched matrix product of rank-3 operands with optional transposes.
    pub fn matmul(self, other: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        self.same_tape(&other);
        let v = kernels::matmul(&self.value(), &other.value(), ta, tb);
        self.tape.push(v, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    /// Bilinear resampling with fixed taps; differentiable in the input values.
    pub fn sample(self, taps: Arc<BilinearTaps<T>>) -> Var<'t, T> {
        let v = taps.apply(&self.value());
        self.tape.push(v, Op::Sample(self.id, taps))
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t, T: Float> std::ops::$trait for Var<'t, T> {
            type Output = Var<'t, T>;
            fn $method(self, rhs: Var<'t, T>) -> Var<'t, T> {
                let (a, b) = (self.id, rhs.id);
                self.binary(rhs, $f, Op::$op(a, b))
            }
        }
    };
}

binop!(Add, add, Add, |x, y| x + y);
binop!(Sub, sub, Sub, |x, y| x - y);
binop!(Mul, mul, Mul, |x, y| x * y);
binop!(Div, div, Div, |x, y| x / y);

impl<'t, T: Float> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }
}
