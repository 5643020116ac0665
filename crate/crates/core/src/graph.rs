//! Reverse-mode automatic differentiation over a recorded operation tape,
//! with segment recomputation (gradient checkpointing).
//!
//! A [`Graph`] is a single-owner, single-threaded object. Operations execute
//! eagerly and are recorded as nodes; [`Graph::backward`] walks the tape in
//! reverse exactly once. A checkpointed segment stores only its boundary
//! value: the enclosed operations are re-executed on a scratch graph during
//! backward, and the recomputed output is compared bit-for-bit against the
//! recorded one so that non-replayable segments are rejected instead of
//! silently producing wrong gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, matmul, reduce_to_shape, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Re-executable segment body: pure function of its graph inputs. Any
/// stochastic draw inside must come from captured (replayable) data.
pub type SegmentFn<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Matmul(Var, Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        /// Row-wise softmax cached by the forward pass.
        softmax: Tensor<T>,
    },
    Checkpoint {
        inputs: Vec<Var>,
        f: Rc<SegmentFn<T>>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recorded compute graph (Wengert tape).
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    live_values: usize,
    peak_values: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            live_values: 0,
            peak_values: 0,
        }
    }

    /// Number of value tensors currently stored on the tape.
    pub fn stored_values(&self) -> usize {
        self.live_values
    }

    /// High-water mark of stored values, including scratch graphs spawned by
    /// checkpointed segments.
    pub fn peak_stored_values(&self) -> usize {
        self.peak_values
    }

    fn fold_scratch_peak(&mut self, scratch: &Graph<T>) {
        self.peak_values = self.peak_values.max(self.live_values + scratch.peak_values);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        self.live_values += 1;
        self.peak_values = self.peak_values.max(self.live_values);
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Graph(
                "graph already consumed by backward; build a new graph".into(),
            ))
        } else {
            Ok(())
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after backward; `None` when the leaf does not
    /// require gradients or backward never reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: impl Fn(Var, Var) -> Op<T>,
        f: impl Fn(T, T) -> T,
        name: &str,
    ) -> Result<Var> {
        self.check_open()?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, f)?;
        value.assert_finite(name)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(op(a, b), value, rg))
    }

    fn unary(
        &mut self,
        a: Var,
        op: impl Fn(Var) -> Op<T>,
        f: impl Fn(T) -> T,
        name: &str,
    ) -> Result<Var> {
        self.check_open()?;
        let value = self.nodes[a.0].value.map(f);
        value.assert_finite(name)?;
        let rg = self.needs(a);
        Ok(self.push(op(a), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        // Underflow guard: every divisor element must clear machine epsilon.
        for &v in self.nodes[b.0].value.data() {
            if v.abs() < T::eps() {
                return Err(Error::numeric(format!(
                    "division by {} (magnitude below machine epsilon)",
                    v
                )));
            }
        }
        self.binary(a, b, Op::Div, |x, y| x / y, "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg, |x| -x, "neg")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, |x| x.exp(), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        for &v in self.nodes[a.0].value.data() {
            if v <= T::ZERO {
                return Err(Error::numeric(format!("log of non-positive value {}", v)));
            }
        }
        self.unary(a, Op::Log, |x| x.ln(), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        for &v in self.nodes[a.0].value.data() {
            if v < T::ZERO {
                return Err(Error::numeric(format!("sqrt of negative value {}", v)));
            }
        }
        self.unary(a, Op::Sqrt, |x| x.sqrt(), "sqrt")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, |x| x.tanh(), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| x.max(T::ZERO), "relu")
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::config(format!("clamp bounds inverted: {} > {}", lo, hi)));
        }
        self.unary(a, |v| Op::Clamp(v, lo, hi), |x| x.max(lo).min(hi), "clamp")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        value.assert_finite("matmul")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc);
        value.assert_finite("sum")?;
        let rg = self.needs(a);
        Ok(self.push(Op::SumAll(a), value, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::from_f64(n as f64));
        value.assert_finite("mean")?;
        let rg = self.needs(a);
        Ok(self.push(Op::MeanAll(a), value, rg))
    }

    /// Multiply by a host scalar (records a constant leaf).
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar_const(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar_const(c);
        self.add(a, s)
    }

    /// Sum of squared elements as a rank-0 tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum_all(sq)
    }

    /// Mean squared error between two tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Fused stable softmax + cross-entropy, averaged over rows.
    /// `logits` must be `[batch, classes]` and `labels.len() == batch`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let lv = &self.nodes[logits.0].value;
        if lv.ndim() != 2 {
            return Err(Error::shape(format!(
                "softmax_cross_entropy expects [batch, classes], got {:?}",
                lv.shape()
            )));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                b
            )));
        }
        let mut softmax = vec![T::ZERO; b * c];
        let mut loss = T::ZERO;
        for i in 0..b {
            let y = labels[i];
            if y >= c {
                return Err(Error::config(format!("label {} out of {} classes", y, c)));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut z = T::ZERO;
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                softmax[i * c + j] = (row[j] - m).exp() / z;
            }
        }
        let value = Tensor::scalar(loss / T::from_f64(b as f64));
        value.assert_finite("softmax_cross_entropy")?;
        let rg = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax: Tensor::new(vec![b, c], softmax)?,
            },
            value,
            rg,
        ))
    }

    /// Record a checkpointed segment. The segment runs on a scratch graph
    /// whose intermediates are discarded; only the boundary output is stored.
    /// Backward re-executes `f` and verifies the replayed output bit-for-bit.
    pub fn checkpoint_segment(&mut self, inputs: &[Var], f: Rc<SegmentFn<T>>) -> Result<Var> {
        self.check_open()?;
        let mut scratch = Graph::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| scratch.leaf(self.nodes[v.0].value.clone(), false))
            .collect();
        let out = f(&mut scratch, &leaves)?;
        let value = scratch.value(out).clone();
        self.fold_scratch_peak(&scratch);
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                f,
            },
            value,
            rg,
        ))
    }

    /// Backpropagate from a one-element loss. Populates gradients of every
    /// reachable leaf that requires them and consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let seed = Tensor::full(self.nodes[loss.0].value.shape(), T::ONE);
        self.backward_seeded(loss, seed)
    }

    /// Backward pass with an externally supplied output gradient. Used by
    /// checkpoint replay; also the entry point for `backward`.
    fn backward_seeded(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        self.check_open()?;
        self.consumed = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::shape("seed gradient shape mismatch"));
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if !is_leaf {
                let contribs = self.vjp(i, &g)?;
                for (parent, contrib) in contribs {
                    self.accumulate(parent, contrib)?;
                }
            } else {
                // Leaf gradients stay readable after backward.
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        contrib.assert_finite("backward")?;
        match self.nodes[v.0].grad.take() {
            Some(g) => self.nodes[v.0].grad = Some(g.add_t(&contrib)?),
            None => self.nodes[v.0].grad = Some(contrib),
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `i`: contributions to its parents.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, reduce_to_shape(g, val(*a).shape())?));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_to_shape(g, val(*b).shape())?));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, reduce_to_shape(g, val(*a).shape())?));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_to_shape(g, val(*b).shape())?.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let gb = broadcast_zip(g, val(*b), |x, y| x * y)?;
                    out.push((*a, reduce_to_shape(&gb, val(*a).shape())?));
                }
                if self.needs(*b) {
                    let ga = broadcast_zip(g, val(*a), |x, y| x * y)?;
                    out.push((*b, reduce_to_shape(&ga, val(*b).shape())?));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let gb = broadcast_zip(g, val(*b), |x, y| x / y)?;
                    out.push((*a, reduce_to_shape(&gb, val(*a).shape())?));
                }
                if self.needs(*b) {
                    // d/db (a/b) = -a / b^2
                    let coef = broadcast_zip(val(*a), val(*b), |a, b| -a / (b * b))?;
                    let gb = broadcast_zip(g, &coef, |x, y| x * y)?;
                    out.push((*b, reduce_to_shape(&gb, val(*b).shape())?));
                }
            }
            Op::Neg(a) => {
                if self.needs(*a) {
                    out.push((*a, g.map(|x| -x)));
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    out.push((*a, g.zip(&node.value, |x, y| x * y)?));
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    out.push((*a, g.zip(val(*a), |x, y| x / y)?));
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let half = T::from_f64(0.5);
                    out.push((*a, g.zip(&node.value, |x, y| x * half / y)?));
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    out.push((*a, g.zip(&node.value, |x, y| x * (T::ONE - y * y))?));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    out.push((
                        *a,
                        g.zip(val(*a), |x, y| if y > T::ZERO { x } else { T::ZERO })?,
                    ));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let (lo, hi) = (*lo, *hi);
                    out.push((
                        *a,
                        g.zip(val(*a), |x, y| {
                            if y > lo && y < hi {
                                x
                            } else {
                                T::ZERO
                            }
                        })?,
                    ));
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, matmul(g, &val(*b).transpose2()?)?));
                }
                if self.needs(*b) {
                    out.push((*b, matmul(&val(*a).transpose2()?, g)?));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    out.push((*a, g.reshape(val(*a).shape())?));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    out.push((*a, Tensor::full(val(*a).shape(), g.item()?)));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = T::from_f64(val(*a).numel() as f64);
                    out.push((*a, Tensor::full(val(*a).shape(), g.item()? / n)));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                if self.needs(*logits) {
                    let (b, c) = (softmax.shape()[0], softmax.shape()[1]);
                    let scale = g.item()? / T::from_f64(b as f64);
                    let mut d = softmax.data().to_vec();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] = d[i * c + y] - T::ONE;
                    }
                    for v in &mut d {
                        *v = *v * scale;
                    }
                    out.push((*logits, Tensor::new(vec![b, c], d)?));
                }
            }
            Op::Checkpoint { inputs, f } => {
                let mut scratch = Graph::new();
                let leaves: Vec<Var> = inputs
                    .iter()
                    .map(|&v| scratch.leaf(val(v).clone(), self.needs(v)))
                    .collect();
                let seg_out = f(&mut scratch, &leaves)?;
                if !bitwise_eq(scratch.value(seg_out), &node.value) {
                    return Err(Error::determinism(
                        "checkpointed segment did not replay to identical values; \
                         segments must be pure functions of their inputs",
                    ));
                }
                scratch.backward_seeded(seg_out, g.clone())?;
                for (&inp, &leaf) in inputs.iter().zip(&leaves) {
                    if let Some(gi) = scratch.grad(leaf) {
                        out.push((inp, gi.clone()));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Exact bit equality (shape and payload).
fn bitwise_eq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_le_bytes_vec() == y.to_le_bytes_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn add_example() {
        let mut g = Graph::new();
        let a = g.constant(t1(&[1.0, 2.0]));
        let b = g.constant(t1(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn square_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0, 2.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn clamp_example() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[-2.0, 0.5, 3.0]));
        let y = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[5.0, 6.0, 7.0]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_leaf_has_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0]), true);
        let z = g.constant(t1(&[2.0]));
        let s = g.sum_all(z).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn double_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        assert!(matches!(g.sum_all(x), Err(Error::Graph(_))));
    }

    #[test]
    fn div_guard() {
        let mut g = Graph::new();
        let a = g.constant(t1(&[1.0]));
        let b = g.constant(t1(&[0.0]));
        assert!(matches!(g.div(a, b), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_domain_guard() {
        let mut g = Graph::new();
        let a = g.constant(t1(&[-1.0]));
        assert!(matches!(g.log(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_1x1() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::<f64>::zeros(&[1, 4]));
        let ce = g.softmax_cross_entropy(logits, &[2]).unwrap();
        let expect = (4.0f64).ln();
        assert!((g.value(ce).item().unwrap() - expect).abs() < 1e-12);
    }

    /// Five-step chain: checkpointed and plain gradients are bit-identical.
    #[test]
    fn checkpoint_matches_plain_bitwise() {
        let build_step = |c: f64| {
            Rc::new(move |g: &mut Graph<f64>, ins: &[Var]| {
                let x = ins[0];
                let y = g.mul(x, x)?;
                let s = g.mul_scalar(y, c)?;
                let t = g.tanh(s)?;
                g.add(t, x)
            }) as Rc<SegmentFn<f64>>
        };
        let x0 = t1(&[0.3, -0.7, 1.1]);

        let run = |checkpointed: bool| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let mut cur = x;
            for k in 0..5 {
                let f = build_step(0.2 + 0.1 * k as f64);
                cur = if checkpointed {
                    g.checkpoint_segment(&[cur], f).unwrap()
                } else {
                    f(&mut g, &[cur]).unwrap()
                };
            }
            let loss = g.sum_squares(cur).unwrap();
            let out = g.value(cur).data().to_vec();
            g.backward(loss).unwrap();
            (out, g.grad(x).unwrap().data().to_vec())
        };

        let (out_plain, grad_plain) = run(false);
        let (out_ck, grad_ck) = run(true);
        assert_eq!(
            out_plain
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            out_ck.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            grad_plain
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            grad_ck.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    /// A segment boundary groups the gradient sum of everything inside it,
    /// so the like-for-like comparison for nesting is: inner checkpoint on
    /// the main tape vs the same inner checkpoint wrapped in an outer one.
    /// Against the fully plain graph the result agrees to rounding.
    #[test]
    fn nested_checkpoints_compose() {
        let inner_fn = |g: &mut Graph<f64>, ins: &[Var]| {
            let y = g.mul(ins[0], ins[0])?;
            g.tanh(y)
        };
        let outer: Rc<SegmentFn<f64>> = Rc::new(move |g, ins| {
            let inner = Rc::new(|g: &mut Graph<f64>, ins: &[Var]| {
                let y = g.mul(ins[0], ins[0])?;
                g.tanh(y)
            }) as Rc<SegmentFn<f64>>;
            let h = g.checkpoint_segment(&[ins[0]], inner)?;
            g.add(h, ins[0])
        });
        let x0 = t1(&[0.4, -0.9]);

        // plain reference
        let mut g0 = Graph::new();
        let xp = g0.leaf(x0.clone(), true);
        let hp = inner_fn(&mut g0, &[xp]).unwrap();
        let op = g0.add(hp, xp).unwrap();
        let lp = g0.sum_all(op).unwrap();
        g0.backward(lp).unwrap();
        let plain = g0.grad(xp).unwrap().data().to_vec();

        // inner checkpoint only
        let mut g1 = Graph::new();
        let x = g1.leaf(x0.clone(), true);
        let inner: Rc<SegmentFn<f64>> = Rc::new(inner_fn);
        let h = g1.checkpoint_segment(&[x], inner).unwrap();
        let o = g1.add(h, x).unwrap();
        let l = g1.sum_all(o).unwrap();
        g1.backward(l).unwrap();
        let want = g1.grad(x).unwrap().data().to_vec();

        // outer checkpoint wrapping the inner one
        let mut g2 = Graph::new();
        let x2 = g2.leaf(x0, true);
        let o2 = g2.checkpoint_segment(&[x2], outer).unwrap();
        let l2 = g2.sum_all(o2).unwrap();
        g2.backward(l2).unwrap();
        let got = g2.grad(x2).unwrap().data().to_vec();

        assert_eq!(
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            got.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for (a, b) in plain.iter().zip(&got) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    /// 100-step chain: with per-step checkpoints the tape stores one boundary
    /// value per step, versus every internal intermediate without them.
    #[test]
    fn checkpoint_memory_counter() {
        let step: Rc<SegmentFn<f64>> = Rc::new(|g, ins| {
            let x = ins[0];
            let a = g.mul(x, x)?;
            let b = g.tanh(a)?;
            let c = g.mul_scalar(b, 0.5)?;
            let d = g.add(c, x)?;
            g.mul_scalar(d, 0.99)
        });
        let x0 = t1(&[0.1, 0.2]);
        let steps = 100;

        let mut plain = Graph::new();
        let mut cur = plain.leaf(x0.clone(), true);
        for _ in 0..steps {
            cur = step(&mut plain, &[cur]).unwrap();
        }
        let plain_peak = plain.peak_stored_values();

        let mut ck = Graph::new();
        let mut cur = ck.leaf(x0, true);
        for _ in 0..steps {
            cur = ck.checkpoint_segment(&[cur], step.clone()).unwrap();
        }
        let l = ck.sum_all(cur).unwrap();
        ck.backward(l).unwrap();
        let ck_peak = ck.peak_stored_values();

        // Plain stores every internal op (>= 5 per step); checkpointed stores
        // one boundary per step plus one transient segment.
        assert!(plain_peak >= 5 * steps, "plain peak {}", plain_peak);
        assert!(ck_peak <= steps + 16, "checkpointed peak {}", ck_peak);
        assert!(ck_peak * 3 < plain_peak);
    }

    #[test]
    fn unreplayable_segment_detected() {
        use std::cell::Cell;
        let counter = Rc::new(Cell::new(0.0f64));
        let c2 = counter.clone();
        let f: Rc<SegmentFn<f64>> = Rc::new(move |g, ins| {
            c2.set(c2.get() + 1.0);
            let bias = g.constant(Tensor::scalar(c2.get()));
            g.add(ins[0], bias)
        });
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0]), true);
        let y = g.checkpoint_segment(&[x], f).unwrap();
        let l = g.sum_all(y).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Determinism(_))));
    }

    #[test]
    fn broadcast_backward_reduces() {
        // [2,3] + [1,3]: bias grad sums over rows.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = g.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), true);
        let y = g.add(x, b).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
