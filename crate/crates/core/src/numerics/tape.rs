//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! execution order, so the record list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse. A tape is built
//! per training step and thrown away afterwards; there is no graph reuse.
//!
//! Shape mismatches between `Var`s are programming errors and panic.
//! Out-of-domain inputs (log of a non-positive value, division by zero) do
//! not panic: the offending value propagates as NaN/inf and the first fault
//! is remembered, so that [`Tape::backward`] and [`Tape::check`] report it.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use super::tensor::{broadcast_shape, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    /// Reduction to a keepdim shape; backward broadcasts.
    SumTo(usize),
    Broadcast(usize),
    Reshape(usize),
    LogSumExp(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    PickLast(usize, Rc<Vec<usize>>),
    /// Elementwise map whose partial derivatives were computed in the
    /// forward pass; every input has the output's shape.
    Fused(Vec<usize>, Vec<Tensor>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<(&'static str, String)>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.fault.borrow().is_none() && !value.all_finite() {
            let name = op_name(&op);
            *self.fault.borrow_mut() = Some((name, "non-finite result".to_string()));
        }
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

    fn record_domain_fault(&self, op: &'static str, detail: &str) {
        let mut fault = self.fault.borrow_mut();
        if fault.is_none() {
            *fault = Some((op, detail.to_string()));
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// First domain or non-finite fault seen while recording, if any.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            None => Ok(()),
            Some((op, detail)) => Err(Error::Domain {
                op,
                detail: detail.clone(),
            }),
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, rg)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis).expect("concat");
        let rg = parts.iter().any(|p| self.requires_grad(p.id));
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
    }

    /// Records an elementwise function of `inputs` given its value and the
    /// partial derivative of the output with respect to each input.
    pub fn fused<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, partials: Vec<Tensor>) -> Var<'t> {
        assert_eq!(inputs.len(), partials.len(), "fused: one partial per input");
        for (v, p) in inputs.iter().zip(&partials) {
            assert_eq!(v.shape(), value.shape(), "fused: input shape");
            assert_eq!(p.shape(), value.shape(), "fused: partial shape");
        }
        let rg = inputs.iter().any(|p| self.requires_grad(p.id));
        self.push(value, Op::Fused(inputs.iter().map(|v| v.id).collect(), partials), rg)
    }

    /// Reverse sweep from a scalar `loss`. The tape may be differentiated
    /// only once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("backward: loss belongs to a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract("backward: tape already consumed"));
        }
        self.check()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = local_backward(&nodes, node, &g);
            grads[id] = Some(g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::MatMul(..) => "matmul",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Softplus(..) => "softplus",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::Clamp(..) => "clamp",
        Op::SumTo(..) => "sum",
        Op::Broadcast(..) => "broadcast",
        Op::Reshape(..) => "reshape",
        Op::LogSumExp(..) => "logsumexp",
        Op::Concat(..) => "concat",
        Op::Narrow(..) => "narrow",
        Op::PickLast(..) => "pick",
        Op::Fused(..) => "fused",
    }
}

fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).expect("backward broadcast")
}

fn local_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| nodes[i].value.as_ref();
    let reduce = |t: Tensor, i: usize| t.sum_to_shape(val(i).shape()).expect("backward reduce");
    let y = node.value.as_ref();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, reduce(g.clone(), *a)), (*b, reduce(g.clone(), *b))],
        Op::Sub(a, b) => vec![
            (*a, reduce(g.clone(), *a)),
            (*b, reduce(g.map(|v| -v), *b)),
        ],
        Op::Mul(a, b) => vec![
            (*a, reduce(mul_elem(g, val(*b)), *a)),
            (*b, reduce(mul_elem(g, val(*a)), *b)),
        ],
        Op::Div(a, b) => {
            let ga = g.zip_map(val(*b), |g, b| g / b).unwrap();
            // d(a/b)/db = -y/b
            let gb = mul_elem(g, y).zip_map(val(*b), |gy, b| -gy / b).unwrap();
            vec![(*a, reduce(ga, *a)), (*b, reduce(gb, *b))]
        }
        Op::Neg(a) => vec![(*a, g.map(|v| -v))],
        Op::Scale(a, s) => {
            let s = *s;
            vec![(*a, g.map(|v| v * s))]
        }
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => vec![
            (*a, g.matmul_nt(val(*b)).unwrap()),
            (*b, val(*a).matmul_tn(g).unwrap()),
        ],
        Op::Exp(a) => vec![(*a, mul_elem(g, y))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x).unwrap())],
        Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x)).unwrap())],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap())],
        Op::Tanh(a) => vec![(*a, g.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap())],
        Op::Relu(a) => vec![(
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap(),
        )],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), |g, x| 2.0 * g * x).unwrap())],
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![(
                *a,
                g.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 })
                    .unwrap(),
            )]
        }
        Op::SumTo(a) => vec![(*a, g.broadcast_to(val(*a).shape()).unwrap())],
        Op::Broadcast(a) => vec![(*a, reduce(g.clone(), *a))],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::LogSumExp(a) => {
            let x = val(*a);
            let last = *x.shape().last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for ((row, &lse), &gr) in x.data().chunks(last).zip(y.data()).zip(g.data()) {
                out.extend(row.iter().map(|&v| gr * (v - lse).exp()));
            }
            vec![(*a, Tensor::from_vec(x.shape(), out))]
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).shape()[*axis];
                    let piece = g.narrow(*axis, start, len).unwrap();
                    start += len;
                    (p, piece)
                })
                .collect()
        }
        Op::Narrow(a, axis, start) => {
            let full = val(*a).shape().to_vec();
            let len = g.shape()[*axis];
            let mut parts = Vec::new();
            let mut before = full.clone();
            before[*axis] = *start;
            let mut after = full.clone();
            after[*axis] = full[*axis] - start - len;
            let zb = Tensor::zeros(&before);
            let za = Tensor::zeros(&after);
            if *start > 0 {
                parts.push(&zb);
            }
            parts.push(g);
            if after[*axis] > 0 {
                parts.push(&za);
            }
            vec![(*a, Tensor::concat(&parts, *axis).unwrap())]
        }
        Op::PickLast(a, idx) => {
            let x = val(*a);
            let last = *x.shape().last().unwrap();
            let mut out = Tensor::zeros(x.shape());
            for (row, (&k, &gr)) in idx.iter().zip(g.data()).enumerate() {
                out.data_mut()[row * last + k] += gr;
            }
            vec![(*a, out)]
        }
        Op::Fused(inputs, partials) => inputs
            .iter()
            .zip(partials)
            .map(|(&i, p)| (i, mul_elem(g, p)))
            .collect(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        a.zip_map(&b, f)
            .unwrap_or_else(|_| panic!("{}: shapes {:?} and {:?} do not broadcast", name, a.shape(), b.shape()))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.elementwise(other, "add", |a, b| a + b);
        self.tape.binary(self.id, other.id, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.elementwise(other, "sub", |a, b| a - b);
        self.tape.binary(self.id, other.id, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.elementwise(other, "mul", |a, b| a * b);
        self.tape.binary(self.id, other.id, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        if other.value().data().contains(&0.0) {
            self.tape.record_domain_fault("div", "division by zero");
        }
        let v = self.elementwise(other, "div", |a, b| a / b);
        self.tape.binary(self.id, other.id, v, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.tape.unary(self.id, v, Op::Neg(self.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.tape.unary(self.id, v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.unary(self.id, v, Op::Offset(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self
            .value()
            .matmul(&other.value())
            .unwrap_or_else(|e| panic!("{e}"));
        self.tape.binary(self.id, other.id, v, Op::MatMul(self.id, other.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.unary(self.id, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= 0.0) {
            self.tape.record_domain_fault("log", "non-positive input");
        }
        let v = x.map(f64::ln);
        self.tape.unary(self.id, v, Op::Log(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.tape.unary(self.id, v, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.tape.unary(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.unary(self.id, v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.unary(self.id, v, Op::Relu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.unary(self.id, v, Op::Square(self.id))
    }

    /// Hard clamp into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.tape.unary(self.id, v, Op::Clamp(self.id, lo, hi))
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let x = self.value();
        let kept = x.sum_axes_keepdim(axes).unwrap_or_else(|e| panic!("{e}"));
        let summed = self.tape.unary(self.id, kept, Op::SumTo(self.id));
        if keepdim {
            summed
        } else {
            let shape: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            summed.reshape(&shape)
        }
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / count as f64)
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        if x.shape() == shape {
            return self;
        }
        let v = x.broadcast_to(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.unary(self.id, v, Op::Broadcast(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.unary(self.id, v, Op::Reshape(self.id))
    }

    /// `ln Σ exp` over the last axis, which is dropped.
    pub fn logsumexp_last(self) -> Var<'t> {
        let v = self.value().logsumexp_last().unwrap_or_else(|e| panic!("{e}"));
        self.tape.unary(self.id, v, Op::LogSumExp(self.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self
            .value()
            .narrow(axis, start, len)
            .unwrap_or_else(|e| panic!("{e}"));
        self.tape.unary(self.id, v, Op::Narrow(self.id, axis, start))
    }

    /// Selects one entry along the last axis for every leading index; the
    /// last axis is dropped.
    pub fn pick_last(self, indices: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        let last = *shape.last().expect("pick_last on scalar");
        let rows = x.len() / last.max(1);
        assert_eq!(indices.len(), rows, "pick_last: one index per row");
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                assert!(k < last, "pick_last: index {} out of range {}", k, last);
                x.data()[r * last + k]
            })
            .collect();
        let v = Tensor::from_vec(&shape[..shape.len() - 1], data);
        self.tape.unary(self.id, v, Op::PickLast(self.id, indices))
    }

    /// Broadcast shape of two vars, if compatible.
    pub fn broadcast_shape_with(&self, other: &Var<'t>) -> Option<Vec<usize>> {
        broadcast_shape(&self.shape(), &other.shape())
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $inherent:ident) => {
        impl<'t> ops::$trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$inherent(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}
