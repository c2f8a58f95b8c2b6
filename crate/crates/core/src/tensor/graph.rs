use super::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    LogSoftmax(usize),
    AddBias(usize, usize),
    Clamp { x: usize, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an append-only list of primitive applications.
///
/// Entries are stored in creation order, so every input precedes the entry
/// that consumes it. A graph supports exactly one [`Graph::backward`] call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok(Broadcast::Same)
        } else if sa.len() == 1 {
            Ok(Broadcast::LhsScalar)
        } else if sb.len() == 1 {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.shape().to_vec(),
                rhs: sb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match mode {
            Broadcast::Same => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::LhsScalar => {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            }
            Broadcast::RhsScalar => {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            }
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// `x · c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(x, k)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    /// Natural logarithm; every input value must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x.0), f64::ln))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x.0), rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::Shape {
                op: "log_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        debug_assert_eq!(out.len(), t.rows() * c);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::LogSoftmax(x.0), rg))
    }

    /// `(m, n) + (n)`: adds `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tb.len() != tx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(value, Op::AddBias(x.0, bias.0), rg))
    }

    /// Clamps into `[lo, hi]`. The gradient is 1 inside the closed range and
    /// 0 outside it.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Contract(format!("clamp range [{lo}, {hi}]")));
        }
        Ok(self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi)))
    }

    /// Records `forward` as the output while differentiating as
    /// `clamp(x, lo, hi)`. This is the straight-through form used by the
    /// channel quantizer.
    pub fn clamp_straight_through(
        &mut self,
        x: Var,
        lo: f64,
        hi: f64,
        forward: Tensor,
    ) -> Result<Var> {
        if forward.shape() != self.value(x).shape() {
            return Err(Error::Shape {
                op: "clamp",
                lhs: self.value(x).shape().to_vec(),
                rhs: forward.shape().to_vec(),
            });
        }
        if !(lo <= hi) {
            return Err(Error::Contract(format!("clamp range [{lo}, {hi}]")));
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(forward, Op::Clamp { x: x.0, lo, hi }, rg))
    }

    /// Reverse pass from a scalar `loss`. Populates gradients for every
    /// entry that depends on a `requires_grad` leaf. Can run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this computation record".into(),
            ));
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        op: Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(op, Op::Mul(..));
                // d out / d a and d out / d b, elementwise, before any reduction.
                let da = |k: usize| {
                    if is_mul {
                        scalar_or(tb, k)
                    } else {
                        1.0
                    }
                };
                let db = |k: usize| {
                    if is_mul {
                        scalar_or(ta, k)
                    } else {
                        sign
                    }
                };
                for (idx, t, d) in [(a, ta, &da as &dyn Fn(usize) -> f64), (b, tb, &db)] {
                    if !wants(idx) {
                        continue;
                    }
                    let contrib: Vec<f64> = g.data().iter().enumerate().map(|(k, gv)| gv * d(k)).collect();
                    let contrib = if t.len() == 1 && g.len() != 1 {
                        Tensor::new(t.shape().to_vec(), vec![contrib.iter().sum()])?
                    } else {
                        Tensor::new(t.shape().to_vec(), contrib)?
                    };
                    accumulate(grads, idx, contrib);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut da, 0.0);
                    accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, 0.0);
                    accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Relu(x) => {
                let tx = &nodes[x].value;
                let d = zip_map(g, tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, out, |gv, s| gv * s * (1.0 - s));
                accumulate(grads, x, d);
            }
            Op::Exp(x) => {
                let d = zip_map(g, out, |gv, e| gv * e);
                accumulate(grads, x, d);
            }
            Op::Log(x) => {
                let d = zip_map(g, &nodes[x].value, |gv, xv| gv / xv);
                accumulate(grads, x, d);
            }
            Op::Square(x) => {
                let d = zip_map(g, &nodes[x].value, |gv, xv| 2.0 * gv * xv);
                accumulate(grads, x, d);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, x, Tensor::full(nodes[x].value.shape(), gv));
            }
            Op::Mean(x) => {
                let t = &nodes[x].value;
                let gv = g.data()[0] / t.len() as f64;
                accumulate(grads, x, Tensor::full(t.shape(), gv));
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yr = out.row(r);
                    let gs: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * gs));
                }
                accumulate(grads, x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    accumulate(grads, x, g.clone());
                }
                if wants(bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, bias, Tensor::vector(db));
                }
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(g, &nodes[x].value, |gv, xv| {
                    if (lo..=hi).contains(&xv) {
                        gv
                    } else {
                        0.0
                    }
                });
                accumulate(grads, x, d);
            }
        }
        Ok(())
    }
}

fn scalar_or(t: &Tensor, k: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[k]
    }
}

fn zip_map(g: &Tensor, t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(t.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, contrib: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(m(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0]));
        let y = g.relu(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn log_softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 10]));
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v + 10f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let s = g.square(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0, 4.0]));
        let l = g.mean(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn clamp_gradient_boundaries_count_as_inside() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-2.0, -1.0, 0.0, 1.0, 2.0]));
        let y = g.clamp(x, -1.0, 1.0).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -1.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
        let c = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
        let z = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(z), Err(Error::Domain { op: "log", .. })));
        // non-scalar loss
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn add_zeros_and_identity_matmul_are_exact() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin() * 1e3).collect();
        let a = g.constant(Tensor::matrix(3, 4, vals.clone()).unwrap());
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), &vals[..]);
        let id = g.constant(Tensor::identity(4));
        let p = g.matmul(a, id).unwrap();
        assert_eq!(g.value(p).data(), &vals[..]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let k = g.constant(Tensor::vector(vec![5.0]));
        let y = g.mul(x, k).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(k).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
    }
}
