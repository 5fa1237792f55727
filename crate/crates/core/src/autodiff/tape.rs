use std::collections::BTreeMap;

use super::tensor::{broadcast_index, broadcast_shape, matmul_nt, matmul_raw, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Scale(f64),
    Offset(f64),
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    GaussianCdf,
    Clamp(f64, f64),
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Bound(Var, f64, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Every node is created from nodes that already exist, so the node list is
/// a topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn gaussian_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Scale(a) => a * x,
            Unary::Offset(a) => x + a,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::GaussianCdf => gaussian_cdf(x),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Abs => x.abs(),
        }
    }

    /// d(out)/d(in) given the input and output values.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(a) => a,
            Unary::Offset(_) => 1.0,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::GaussianCdf => gaussian_pdf(x),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Gradients from one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a registered parameter, if it influenced the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to any node, including constant leaves.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient but no parameter update.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ia = broadcast_index(ta.shape(), &shape);
            let ib = broadcast_index(tb.shape(), &shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        self.push(value, Op::Unary(kind, a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Unary::Scale(k), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Scale(-1.0), a)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(Unary::Offset(k), a)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(Unary::LeakyRelu(alpha), a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn gaussian_cdf(&mut self, a: Var) -> Var {
        self.unary(Unary::GaussianCdf, a)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    /// `max(x, lo)`. Below the bound the gradient still flows when it
    /// points towards increasing `x`, so floored entries can recover.
    pub fn lower_bound(&mut self, a: Var, lo: f64) -> Var {
        self.bound(a, lo, f64::INFINITY)
    }

    /// Clamp to `[lo, hi]` whose gradient outside the interval is kept
    /// only when a descent step would move the value back inside.
    pub fn bound(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Bound(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x W + b` with `x: [N, I]`, `W: [I, O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (i2, o) = self.value(w).dims2()?;
        if i != i2 || self.shape(b) != [o] {
            return Err(Error::shape(format!(
                "affine x{:?} W{:?} b{:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut data = matmul_raw(self.value(x).data(), self.value(w).data(), n, i, o);
        let bias = self.value(b).data();
        for row in data.chunks_exact_mut(o) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let value = Tensor::new(vec![n, o], data)?;
        Ok(self.push(value, Op::Affine(x, w, b)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat {s:?} with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1).max(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.sweep(loss, false)
    }

    /// Like [`Tape::backward`], but bounds use the true clamp derivative
    /// (zero outside the interval). This is the derivative finite
    /// differences measure.
    pub fn backward_exact(&self, loss: Var) -> Result<Gradients> {
        self.sweep(loss, true)
    }

    fn sweep(&self, loss: Var, exact_bounds: bool) -> Result<Gradients> {
        let n_loss = self.value(loss).len();
        if n_loss != 1 {
            return Err(Error::NonScalarLoss(n_loss));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let out = node.value.shape();
                    let ia = broadcast_index(ta.shape(), out);
                    let ib = broadcast_index(tb.shape(), out);
                    let mut ga = vec![0.0; ta.len()];
                    let mut gb = vec![0.0; tb.len()];
                    for (k, &gv) in g.data().iter().enumerate() {
                        let (i, j) = (ia[k], ib[k]);
                        let (x, y) = (ta.data()[i], tb.data()[j]);
                        let (da, db) = match kind {
                            Binary::Add => (1.0, 1.0),
                            Binary::Sub => (1.0, -1.0),
                            Binary::Mul => (y, x),
                            Binary::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga[i] += gv * da;
                        gb[j] += gv * db;
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = ta.dims2()?;
                    let m = tb.shape()[1];
                    let ga = matmul_nt(g.data(), tb.data(), n, m, k);
                    let gb = matmul_tn(ta.data(), g.data(), n, k, m);
                    accumulate(&mut grads, *a, Tensor::new(vec![n, k], ga)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, m], gb)?);
                }
                Op::Affine(x, w, b) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, i) = tx.dims2()?;
                    let o = tw.shape()[1];
                    let gx = matmul_nt(g.data(), tw.data(), n, o, i);
                    let gw = matmul_tn(tx.data(), g.data(), n, i, o);
                    let mut gbias = vec![0.0; o];
                    for row in g.data().chunks_exact(o) {
                        for (acc, v) in gbias.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, i], gx)?);
                    accumulate(&mut grads, *w, Tensor::new(vec![i, o], gw)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![o], gbias)?);
                }
                Op::Concat(xs, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &v in xs {
                        let s = self.shape(v).to_vec();
                        let len = s[*axis];
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(&mut grads, v, Tensor::new(s, data)?);
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut data = vec![0.0; shape.iter().product()];
                    for o in 0..outer {
                        let dst = (o * shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        data[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, data)?);
                }
                Op::Bound(x, lo, hi) => {
                    let tx = self.value(*x);
                    let data = tx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            let pass = if exact_bounds {
                                xv >= *lo && xv <= *hi
                            } else {
                                (xv >= *lo || gv < 0.0) && (xv <= *hi || gv > 0.0)
                            };
                            if pass {
                                gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, g.clone().reshaped(shape)?);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::SumAxis(x, axis) => {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let n = shape[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        for _ in 0..n {
                            data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, data)?);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (idx, g) in grads.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[idx].op, g) {
                match params.get_mut(id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
