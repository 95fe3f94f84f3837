//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse scan.
//! Each node owns its forward value; [`Var`] is a plain index into the tape.

use super::tensor::{self, Tensor};
use crate::error::{CcaError, Result};

/// Lower clamp on the arguments of the logarithms inside [`Tape::bce_with_logits`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        labels: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for one forward pass.
///
/// A tape built with [`Tape::inference`] keeps values only; nothing on it
/// requires a gradient and [`Tape::backward`] is rejected.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    /// Node count at the last backward sweep; a repeat sweep needs new nodes.
    swept_at: Option<usize>,
    visits: Vec<u32>,
    track_kinks: bool,
    kink_sig: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
}

fn reshaped(t: Tensor, dims: &[usize]) -> Tensor {
    Tensor::new(dims.to_vec(), t.into_data()).expect("adjoint has the element count of its input")
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            swept_at: None,
            visits: Vec::new(),
            track_kinks: false,
            kink_sig: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fold the sign pattern of every ReLU input into [`Tape::kink_signature`].
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    /// Hash of all ReLU activation patterns seen so far; two evaluations with
    /// equal signatures took the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_sig
    }

    /// Per-node visit counts from the most recent backward sweep.
    pub fn backward_visits(&self) -> &[u32] {
        &self.visits
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// bound parameters can be reused for many forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.swept_at = None;
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for rank-2 operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::gemm(self.value(a), false, self.value(b), true)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x` plus `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_row(self.value(x), self.value(bias))?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x` times a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(CcaError::Shape {
                op: "scale_by",
                left: self.value(x).dims().to_vec(),
                right: self.value(s).dims().to_vec(),
            });
        }
        let k = self.value(s).data()[0];
        let value = self.value(x).scale(k);
        Ok(self.push(value, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        self.push(value, Op::OneMinus(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.track_kinks {
            for &v in self.nodes[x.0].value.data() {
                self.kink_sig = (self.kink_sig ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = tensor::softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = tensor::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (value, norms) = tensor::l2_normalize_parts(self.value(x));
        self.push(value, Op::L2NormRows { x, norms }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft `labels`,
    /// with both log arguments clamped at [`LOG_CLAMP`].
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let a = self.value(logits);
        if a.len() != labels.len() {
            return Err(CcaError::Shape {
                op: "bce",
                left: a.dims().to_vec(),
                right: labels.dims().to_vec(),
            });
        }
        let value = Tensor::scalar(bce_value(a.data(), labels.data()));
        Ok(self.push(
            value,
            Op::Bce {
                logits,
                labels: labels.clone(),
            },
            &[logits],
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(CcaError::Tape("backward on an inference tape".into()));
        }
        if self.swept_at == Some(self.nodes.len()) {
            return Err(CcaError::Tape("backward already ran; record a new forward pass first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(CcaError::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visits[idx] += 1;
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.swept_at = Some(self.nodes.len());
        self.visits = visits;
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    let ga = tensor::gemm(g, false, bv, true)?;
                    acc(*a, reshaped(ga, av.dims()));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = tensor::gemm(av, true, g, false)?;
                    acc(*b, reshaped(gb, bv.dims()));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = tensor::gemm(g, false, self.value(*b), false)?;
                    acc(*a, reshaped(ga, self.value(*a).dims()));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = tensor::gemm(g, true, self.value(*a), false)?;
                    acc(*b, reshaped(gb, self.value(*b).dims()));
                }
            }
            Op::Add(a, b) => {
                acc(*a, reshaped(g.clone(), self.value(*a).dims()));
                acc(*b, reshaped(g.clone(), self.value(*b).dims()));
            }
            Op::Sub(a, b) => {
                acc(*a, reshaped(g.clone(), self.value(*a).dims()));
                acc(*b, reshaped(g.scale(-1.0), self.value(*b).dims()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, reshaped(g.zip_map(bv, "mul", |x, y| x * y)?, av.dims()));
                acc(*b, reshaped(g.zip_map(av, "mul", |x, y| x * y)?, bv.dims()));
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for i in 0..g.rows() {
                    for (s, v) in gb.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                acc(*bias, reshaped(Tensor::vector(gb), self.value(*bias).dims()));
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).data()[0];
                acc(*x, g.scale(k));
                let gs = g.dot(self.value(*x))?;
                acc(*s, Tensor::new(self.value(*s).dims().to_vec(), vec![gs])?);
            }
            Op::OneMinus(x) => acc(*x, g.scale(-1.0)),
            Op::Relu(x) => {
                // adjoint at exactly 0 is 0
                acc(*x, g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s))?);
            }
            Op::Tanh(x) => {
                acc(*x, g.zip_map(&node.value, "tanh", |gv, t| gv * (1.0 - t * t))?);
            }
            Op::SoftmaxRows(x) => {
                let s = &node.value;
                let mut out = g.clone();
                let c = s.cols();
                for i in 0..s.rows() {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let inner: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for (j, o) in out.row_mut(i).iter_mut().enumerate().take(c) {
                        *o = srow[j] * (grow[j] - inner);
                    }
                }
                acc(*x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let c = xhat.cols();
                let n = c as f64;
                let mut dx = g.clone();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for (i, &istd) in inv_std.iter().enumerate() {
                    let xr = xhat.row(i);
                    let gr = g.row(i);
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = istd / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                }
                acc(*x, dx);
                acc(*gain, reshaped(Tensor::vector(dgain), self.value(*gain).dims()));
                acc(*bias, reshaped(Tensor::vector(dbias), self.value(*bias).dims()));
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let row_out = dx.row_mut(i);
                    if n > tensor::NORM_FLOOR {
                        let yr = y.row(i);
                        let inner: f64 = yr.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                        for (j, o) in row_out.iter_mut().enumerate() {
                            *o = (g.row(i)[j] - yr[j] * inner) / n;
                        }
                    } else {
                        row_out.iter_mut().for_each(|o| *o = 0.0);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let rows = pv.rows();
                    let piece = g.slice_rows(start, start + rows)?;
                    acc(*p, reshaped(piece, pv.dims()));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let cols = pv.cols();
                    let piece = g.slice_cols(start, start + cols)?;
                    acc(*p, reshaped(piece, pv.dims()));
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut full = Tensor::zeros(xv.dims());
                let c = xv.cols();
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, full);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut full = Tensor::zeros(xv.dims());
                let w = g.cols();
                for i in 0..g.rows() {
                    full.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                acc(*x, full);
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                acc(*x, reshaped(g.transpose(), xv.dims()));
            }
            Op::Reshape(x) => acc(*x, reshaped(g.clone(), self.value(*x).dims())),
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).dims(), g.data()[0])),
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.dims(), g.data()[0] / xv.len() as f64));
            }
            Op::Bce { logits, labels } => {
                let a = self.value(*logits);
                let n = a.len() as f64;
                let upstream = g.data()[0];
                let grad: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(labels.data())
                    .map(|(&ai, &yi)| {
                        let s = tensor::sigmoid(ai);
                        let mut d = 0.0;
                        if -tensor::softplus(-ai) > LOG_CLAMP.ln() {
                            d -= yi * (1.0 - s);
                        }
                        if -tensor::softplus(ai) > LOG_CLAMP.ln() {
                            d += (1.0 - yi) * s;
                        }
                        upstream * d / n
                    })
                    .collect();
                acc(*logits, reshaped(Tensor::vector(grad), a.dims()));
            }
        }
        Ok(())
    }
}

/// `-(1/N) Σ [y log σ(a) + (1-y) log(1-σ(a))]`, logs clamped below at `ln 1e-12`.
pub fn bce_value(logits: &[f64], labels: &[f64]) -> f64 {
    let floor = LOG_CLAMP.ln();
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&a, &y)| {
            let log_p = (-tensor::softplus(-a)).max(floor);
            let log_q = (-tensor::softplus(a)).max(floor);
            y * log_p + (1.0 - y) * log_q
        })
        .sum();
    -total / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let loss = tape.scale(x, 3.0);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(CcaError::Tape(_))));
        // a fresh forward re-enables the sweep
        let loss2 = tape.scale(x, 2.0);
        assert!(tape.backward(loss2).is_ok());
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0);
        assert!(!tape.requires_grad(y));
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn each_node_visited_once() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let h = tape.matmul(x, w).unwrap();
        let h2 = tape.matmul(h, w).unwrap();
        let r = tape.relu(h2);
        let s = tape.add(r, h).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        for (i, &n) in tape.backward_visits().iter().enumerate() {
            assert!(n <= 1, "node {i} visited {n} times");
            if tape.requires_grad(Var(i)) {
                assert_eq!(n, 1, "node {i} on the gradient path was skipped");
            }
        }
    }

    #[test]
    fn relu_kink_adjoint_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_value(&[0.0; 4], &[0.5; 4]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(&[30.0], &[1.0]) < 1e-12);
    }
}
