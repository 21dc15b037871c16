//! Reverse-mode differentiation over a per-forward-pass recording.
//!
//! A [`Tape`] is created for one forward pass, ops append nodes to it, and
//! [`Tape::backward`] walks the nodes in reverse. Tapes hold no global state,
//! so networks recorded on different tapes never interfere.

use crate::error::{shape_err, Error, Result};
use crate::nn::activation::{sigmoid, softplus, Activation};
use crate::nn::params::ParamSet;
use crate::nn::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { owner: u64, index: usize },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Affine(Var, f64),
    Act(Var, Activation),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    Mean(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics computed by a train-mode BatchNorm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is wanted (e.g. the action fed to a critic).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Records parameter `index` of `set`. With `track == false` the value is
    /// treated as a constant and no gradient is routed back to the set.
    pub fn param(&mut self, set: &ParamSet, index: usize, track: bool) -> Var {
        let value = set.value(index).clone();
        if track && set.get(index).trainable {
            self.push(
                value,
                Op::Param {
                    owner: set.id(),
                    index,
                },
                true,
            )
        } else {
            self.push(value, Op::Input, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `[batch × n] + [n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        if b.len() != n {
            return shape_err(format!("bias of {} for width {}", b.len(), n));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return shape_err(format!("{what}: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |p, q| p * q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let x = self.value(a);
        if !x.same_shape(&c) {
            return shape_err(format!("mul_const: {:?} vs {:?}", x.shape(), c.shape()));
        }
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(&[a]);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a).map(|x| kind.apply(x));
        let ng = self.ng(&[a]);
        self.push(v, Op::Act(a, kind), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(v, Op::Softplus(a), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let ts: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let v = Tensor::concat_cols(&ts)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    /// Row sums, `[batch × n] → [batch × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let data: Vec<f64> = (0..r).map(|i| x.row(i).iter().sum()).collect();
        let v = Tensor::matrix(r, 1, data).expect("row sums");
        let _ = c;
        let ng = self.ng(&[a]);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Mean of all elements as a 1-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.sum() / x.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "min", f64::min)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Min(a, b), ng))
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Elementwise Huber penalty (no reduction).
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let v = self.value(a).map(|x| huber_scalar(x, delta));
        let ng = self.ng(&[a]);
        self.push(v, Op::Huber(a, delta), ng)
    }

    /// Train-mode batch normalization. Returns the output and the batch
    /// statistics (biased variance) for the caller's running-stat update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xt = self.value(x);
        let (b, u) = (xt.rows(), xt.cols());
        if b < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in train mode needs at least 2 rows, got {b}"
            )));
        }
        let mut mean = vec![0.0; u];
        for i in 0..b {
            for (m, v) in mean.iter_mut().zip(xt.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; u];
        for i in 0..b {
            for ((s, v), m) in var.iter_mut().zip(xt.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean, var };
        let v = self.bn_apply(x, gamma, beta, &stats.mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let xt = self.value(x);
        let u = xt.cols();
        let (g, bt) = (self.value(gamma), self.value(beta));
        if g.len() != u || bt.len() != u || mean.len() != u || inv_std.len() != u {
            return shape_err(format!("batch norm width {u} vs parameters {}", g.len()));
        }
        let mut xhat = xt.clone();
        for row in xhat.data_mut().chunks_mut(u) {
            for j in 0..u {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(u) {
            for j in 0..u {
                row[j] = g.data()[j] * row[j] + bt.data()[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a node that was never recorded".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let same = |v: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let x = &self.nodes[v.0].value;
            let data = g.data().iter().enumerate().map(|(k, &gv)| f(k, gv)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("grad shape")
        };
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                if self.needs_grad(*a) {
                    // dx = g · wᵀ
                    let mut dx = Tensor::zeros(x.shape());
                    gemm(m, n, k, 1.0, (g.data(), n as isize, 1), (w.data(), 1, n as isize), 0.0, dx.data_mut());
                    acc(*a, dx);
                }
                if self.needs_grad(*b) {
                    // dw = xᵀ · g
                    let mut dw = Tensor::zeros(w.shape());
                    gemm(k, m, n, 1.0, (x.data(), 1, k as isize), (g.data(), n as isize, 1), 0.0, dw.data_mut());
                    acc(*b, dw);
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone());
                if self.needs_grad(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, db).expect("bias grad"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, same(*a, &|k, gv| gv * y.data()[k]));
                }
                if self.needs_grad(*b) {
                    acc(*b, same(*b, &|k, gv| gv * x.data()[k]));
                }
            }
            Op::MulConst(a, c) => acc(*a, same(*a, &|k, gv| gv * c.data()[k])),
            Op::Affine(a, scale) => acc(*a, g.map(|v| v * scale)),
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                acc(*a, same(*a, &|k, gv| gv * kind.derivative(x.data()[k], y.data()[k])));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, same(*a, &|k, gv| gv * y.data()[k]));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, same(*a, &|k, gv| 2.0 * gv * x.data()[k]));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(*a, same(*a, &|k, gv| gv * sigmoid(x.data()[k])));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs_grad(*p) {
                        acc(*p, g.slice_cols(start, start + w).expect("concat grad"));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs_grad(*a) {
                    let x = self.value(*a);
                    let (r, c, w) = (x.rows(), x.cols(), g.cols());
                    let mut dx = Tensor::zeros(x.shape());
                    for i in 0..r {
                        dx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, dx);
                }
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let data = (0..x.len()).map(|k| g.data()[k / c]).collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data).expect("sum grad"));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / x.len() as f64;
                acc(*a, Tensor::full(x.shape(), gv));
            }
            Op::Min(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                // ties route the gradient to the first operand
                if self.needs_grad(*a) {
                    acc(*a, same(*a, &|k, gv| if x.data()[k] <= y.data()[k] { gv } else { 0.0 }));
                }
                if self.needs_grad(*b) {
                    acc(*b, same(*b, &|k, gv| if x.data()[k] <= y.data()[k] { 0.0 } else { gv }));
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(*a, same(*a, &|k, gv| {
                    let v = x.data()[k];
                    if v < *lo || v > *hi {
                        0.0
                    } else {
                        gv
                    }
                }));
            }
            Op::Huber(a, delta) => {
                let x = self.value(*a);
                acc(*a, same(*a, &|k, gv| gv * x.data()[k].clamp(-delta, *delta)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let u = xhat.cols();
                let b = xhat.rows();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; u];
                let mut dbeta = vec![0.0; u];
                for (grow, hrow) in g.data().chunks(u).zip(xhat.data().chunks(u)) {
                    for j in 0..u {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    let bf = b as f64;
                    for ((drow, grow), hrow) in dx
                        .data_mut()
                        .chunks_mut(u)
                        .zip(g.data().chunks(u))
                        .zip(xhat.data().chunks(u))
                    {
                        for j in 0..u {
                            drow[j] = if *batch_stats {
                                gam[j] * inv_std[j] / bf
                                    * (bf * grow[j] - dbeta[j] - hrow[j] * dgamma[j])
                            } else {
                                gam[j] * inv_std[j] * grow[j]
                            };
                        }
                    }
                    acc(*x, dx);
                }
                let gshape = self.value(*gamma).shape().to_vec();
                acc(*gamma, Tensor::new(gshape.clone(), dgamma).expect("gamma grad"));
                acc(*beta, Tensor::new(gshape, dbeta).expect("beta grad"));
            }
        }
    }

    /// Adds this tape's parameter gradients into `set` (only nodes recorded from it).
    pub fn accumulate(&self, grads: &Grads, set: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { owner, index } = node.op {
                if owner != set.id() {
                    continue;
                }
                if let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) {
                    let p = set.get_mut(index);
                    for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Like [`Tape::accumulate`] but writes into a flat buffer laid out as
    /// [`ParamSet::flatten`], leaving the set untouched.
    pub fn accumulate_flat(&self, grads: &Grads, set: &ParamSet, flat: &mut [f64]) {
        let mut offsets = Vec::with_capacity(set.len());
        let mut off = 0;
        for p in set.iter() {
            offsets.push(off);
            off += p.value.len();
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { owner, index } = node.op {
                if owner != set.id() {
                    continue;
                }
                if let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) {
                    let o = offsets[index];
                    for (dst, src) in flat[o..o + g.len()].iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

pub fn huber_scalar(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_unrecorded_node() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_of_affine_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let y = tape.affine(x, 3.0, 1.0);
        let m = tape.mean(y);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn train_bn_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            tape.batch_norm_train(x, g, b, 1e-3),
            Err(Error::DegenerateBatch(_))
        ));
    }
}
