use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{matmul_into, Tensor};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a row vector repeated over every row of a matrix lhs.
    Row,
    /// rhs holds a single value.
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        let rhs_n: usize = rhs.iter().product();
        if rhs_n == 1 {
            return Ok(Bcast::Scalar);
        }
        if lhs.len() == 2 && (rhs == [lhs[1]] || rhs == [1, lhs[1]]) {
            return Ok(Bcast::Row);
        }
        Err(Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryKind, usize, usize, Bcast),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Log(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    IndexSelect(usize, Rc<[usize]>),
    Reshape(usize),
    Clamp(usize, T, T),
    CrossEntropyRows(usize, Rc<[usize]>),
}

impl<T> Op<T> {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Binary(_, a, b, _) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Log(a)
            | SoftmaxRows(a)
            | Sum(a)
            | Mean(a)
            | IndexSelect(a, _)
            | Reshape(a)
            | Clamp(a, _, _)
            | CrossEntropyRows(a, _) => [Some(a), None],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The differentiable primitives, for callers that dispatch by name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    Log,
    Sum,
    Mean,
    IndexSelect(Vec<usize>),
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => 2,
            _ => 1,
        }
    }
}

/// Wengert list of primitive applications.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = op
            .parents()
            .iter()
            .flatten()
            .any(|&p| self.requires_grad(p));
        self.push(value, op, rg)
    }

    fn check(&self, v: &Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(v.tape, self) || v.id >= self.len() {
            return Err(invalid("variable does not belong to this tape"));
        }
        Ok(())
    }

    /// Applies a primitive by name.
    pub fn forward_primitive<'t>(
        &'t self,
        prim: &Primitive,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if inputs.len() != prim.arity() {
            return Err(invalid(format!(
                "{prim:?} takes {} inputs, got {}",
                prim.arity(),
                inputs.len()
            )));
        }
        for v in inputs {
            self.check(v)?;
        }
        let a = inputs[0];
        match prim {
            Primitive::MatMul => a.matmul(inputs[1]),
            Primitive::Add => a.add(inputs[1]),
            Primitive::Mul => a.mul(inputs[1]),
            Primitive::Relu => Ok(a.relu()),
            Primitive::Tanh => Ok(a.tanh()),
            Primitive::Sigmoid => Ok(a.sigmoid()),
            Primitive::Softplus => Ok(a.softplus()),
            Primitive::SoftmaxRows => a.softmax_rows(),
            Primitive::Log => Ok(a.log()),
            Primitive::Sum => Ok(a.sum()),
            Primitive::Mean => Ok(a.mean()),
            Primitive::IndexSelect(idx) => a.index_select(idx),
        }
    }

    /// Reverse sweep from a scalar root.
    ///
    /// The tape is not modified, so repeated calls return identical results.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        self.check(&root)?;
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.id + 1];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![T::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}

fn unary<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    g: &[T],
    local: impl Fn(usize) -> T,
) {
    accumulate(nodes, grads, a, |acc| {
        for (i, (s, &gi)) in acc.iter_mut().zip(g).enumerate() {
            *s += gi * local(i);
        }
    });
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(nodes, grads, *a, |acc| {
                let bt = bv.transpose().expect("2-d");
                matmul_into(g, bt.data(), acc, n, m, k);
            });
            accumulate(nodes, grads, *b, |acc| {
                let at = av.transpose().expect("2-d");
                matmul_into(at.data(), g, acc, k, n, m);
            });
        }
        Op::Binary(kind, a, b, bc) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let cols = out.cols();
            let bc = *bc;
            accumulate(nodes, grads, *a, |acc| {
                for i in 0..acc.len() {
                    let r = bv[bc.index(i, cols)];
                    acc[i] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[i],
                        BinaryKind::Mul => g[i] * r,
                        BinaryKind::Div => g[i] / r,
                    };
                }
            });
            accumulate(nodes, grads, *b, |acc| {
                for i in 0..g.len() {
                    let j = bc.index(i, cols);
                    let r = bv[j];
                    acc[j] += match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * av[i],
                        BinaryKind::Div => -g[i] * av[i] / (r * r),
                    };
                }
            });
        }
        Op::Scale(a, c) => unary(nodes, grads, *a, g, |_| *c),
        Op::AddScalar(a) | Op::Reshape(a) => unary(nodes, grads, *a, g, |_| T::one()),
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            unary(nodes, grads, *a, g, |i| {
                if x[i] >= *lo && x[i] <= *hi {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            unary(nodes, grads, *a, g, |i| {
                if x[i] > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::Tanh(a) => {
            let y = out.data();
            unary(nodes, grads, *a, g, |i| T::one() - y[i] * y[i])
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            unary(nodes, grads, *a, g, |i| y[i] * (T::one() - y[i]))
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            unary(nodes, grads, *a, g, |i| sigmoid(x[i]))
        }
        Op::Log(a) => {
            let x = val(*a).data();
            unary(nodes, grads, *a, g, |i| T::one() / x[i])
        }
        Op::SoftmaxRows(a) => {
            let y = out.data();
            let c = out.cols();
            accumulate(nodes, grads, *a, |acc| {
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        acc[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Sum(a) => unary(nodes, grads, *a, &vec![g[0]; val(*a).numel()], |_| T::one()),
        Op::Mean(a) => {
            let n = val(*a).numel();
            let scale = g[0] / T::from_count(n);
            accumulate(nodes, grads, *a, |acc| acc.iter_mut().for_each(|s| *s += scale));
        }
        Op::IndexSelect(a, idx) => {
            let width = out.numel() / idx.len();
            accumulate(nodes, grads, *a, |acc| {
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..width {
                        acc[row * width + j] += g[k * width + j];
                    }
                }
            });
        }
        Op::CrossEntropyRows(a, labels) => {
            let z = val(*a);
            let c = z.cols();
            accumulate(nodes, grads, *a, |acc| {
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax(z.row(r));
                    for j in 0..c {
                        let t = if j == y { T::one() } else { T::zero() };
                        acc[r * c + j] += g[r] * (p[j] - t);
                    }
                }
            });
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

// Fallible, so the arithmetic cannot live in the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value as a new constant leaf; cuts the gradient path.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid("operands live on different tapes"))
        }
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.tape.record(v, Op::MatMul(self.id, rhs.id)))
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        kind: BinaryKind,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let bc = Bcast::resolve(name, a.shape(), b.shape())?;
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[bc.index(i, cols)]))
            .collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(v, Op::Binary(kind, self.id, rhs.id, bc)))
    }

    /// Elementwise sum; `rhs` may be a matching tensor, a row vector, or a scalar.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Mul, "mul", |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Div, "div", |a, b| a / b)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.record(v, op)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), T::tanh)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(invalid(format!("softmax_rows needs a matrix, got {:?}", x.shape())));
        }
        let data = x.data().chunks(x.cols()).flat_map(softmax).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(v, Op::SoftmaxRows(self.id)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let m = s / T::from_count(x.numel());
        self.tape.record(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Gathers rows (leading-dimension slices); repeated indices are allowed.
    pub fn index_select(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().select_rows(idx)?;
        Ok(self.tape.record(v, Op::IndexSelect(self.id, idx.into())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        Ok(self.tape.record(v, Op::Reshape(self.id)))
    }

    /// Per-row softmax cross-entropy `logsumexp(zᵢ) − zᵢ[yᵢ]`, shape `[batch]`.
    pub fn cross_entropy_rows(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        if z.shape().len() != 2 || z.rows() != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = z.cols();
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| log_sum_exp(z.row(r)) - z.row(r)[y])
            .collect();
        Ok(self
            .tape
            .record(Tensor::vector(data), Op::CrossEntropyRows(self.id, labels.into())))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        Ok(self.cross_entropy_rows(labels)?.mean())
    }
}

/// Adjoints of every node that lies on a path from a `param` leaf to the root.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}
