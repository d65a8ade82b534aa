use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{kernels, memory, GradCell, NodeRef, Precision, Storage, Tensor};
use crate::error::{Error, Result};

/// Backward rule: maps the gradient of the output to one optional gradient
/// per recorded input, in input order.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    leaf: Option<GradCell>,
}

// Logical bookkeeping cost per recorded node.
const NODE_BYTES: usize = std::mem::size_of::<Node>();

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// How a hard quantizer participates in differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerGrad {
    /// Output is an integer cast: never recorded, gradient flow stops.
    Cut,
    /// Output stays on the tape with its true derivative, which is zero.
    Zero,
}

/// Wengert list for one forward pass.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order and backward visits each node once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    peak_nodes: usize,
    scopes: Vec<bool>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        memory::track_free(self.nodes.len() * NODE_BYTES);
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            peak_nodes: 0,
            scopes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Most nodes held at any one time.
    pub fn peak_len(&self) -> usize {
        self.peak_nodes
    }

    /// Releases every node from index `len` on, with whatever its backward
    /// rule holds. Tensors attached to those nodes must already be gone or
    /// detached.
    pub(crate) fn truncate(&mut self, len: usize) {
        if len < self.nodes.len() {
            memory::track_free((self.nodes.len() - len) * NODE_BYTES);
            self.nodes.truncate(len);
        }
    }

    fn push(&mut self, node: Node) -> usize {
        memory::track_alloc(NODE_BYTES);
        self.nodes.push(node);
        self.peak_nodes = self.peak_nodes.max(self.nodes.len());
        self.nodes.len() - 1
    }

    pub fn is_recording(&self) -> bool {
        self.scopes.last().copied().unwrap_or(true)
    }

    /// Runs `body` with recording switched on or off. Scopes nest and the
    /// innermost setting wins.
    pub fn grad_scope<R>(&mut self, enabled: bool, body: impl FnOnce(&mut Tape) -> R) -> R {
        self.scopes.push(enabled);
        let out = body(self);
        self.scopes.pop();
        out
    }

    /// Whether an operand would be recorded as a differentiable input.
    pub fn tracks(&self, t: &Tensor) -> bool {
        self.is_recording() && t.requires_grad()
    }

    /// Wraps freshly computed values as an output of this tape's precision.
    pub fn constant(&self, shape: &[usize], mut data: Vec<f64>) -> Tensor {
        self.precision.round_all(&mut data);
        Tensor::from_parts(shape.to_vec(), data, self.precision)
    }

    fn input_slot(&mut self, t: &Tensor) -> Option<usize> {
        if !t.requires_grad() {
            return None;
        }
        match t.node() {
            Some(n) if n.tape == self.id => Some(n.index),
            _ => {
                // A parameter (or a tensor recorded elsewhere) enters as a leaf.
                Some(self.push(Node {
                    inputs: Vec::new(),
                    backward: None,
                    leaf: t.grad_cell().map(Arc::clone),
                }))
            }
        }
    }

    /// Records a custom operation. The output is attached to the tape only if
    /// recording is on and some input requires a gradient; `backward` must
    /// return one entry per input.
    pub fn record(
        &mut self,
        inputs: &[&Tensor],
        shape: &[usize],
        data: Vec<f64>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let out = self.constant(shape, data);
        self.record_output(inputs, out, backward)
    }

    /// Like [`Tape::record`] for an output that was already materialised,
    /// so a backward rule can share its storage.
    pub fn record_output(
        &mut self,
        inputs: &[&Tensor],
        out: Tensor,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        if !self.is_recording() || !inputs.iter().any(|t| t.requires_grad()) {
            return out;
        }
        let slots = inputs.iter().map(|t| self.input_slot(t)).collect();
        let index = self.push(Node {
            inputs: slots,
            backward: Some(Box::new(backward)),
            leaf: None,
        });
        out.attach(NodeRef {
            tape: self.id,
            index,
        })
    }

    /// Records a hard (piecewise-constant) operation.
    pub fn quantizer(
        &mut self,
        inputs: &[&Tensor],
        shape: &[usize],
        data: Vec<f64>,
        grad: QuantizerGrad,
    ) -> Tensor {
        match grad {
            QuantizerGrad::Cut => self.constant(shape, data),
            QuantizerGrad::Zero => {
                let lens: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
                self.record(inputs, shape, data, move |_| {
                    lens.iter().map(|&n| Some(vec![0.0; n])).collect()
                })
            }
        }
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// their buffers; the caller resets them with [`Tensor::zero_grad`].
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => {
                return Err(Error::Contract(
                    "loss is not recorded on this tape".to_string(),
                ))
            }
        };
        let mut grads: Vec<Option<Storage>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Storage::new(vec![1.0], Precision::F64));
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.backward {
                None => {
                    if let Some(cell) = &node.leaf {
                        let mut slot = cell.lock().expect("gradient lock poisoned");
                        match slot.as_mut() {
                            Some(acc) => add_into(acc.data_mut(), g.data()),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(rule) => {
                    let input_grads = rule(g.data());
                    drop(g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (slot, gi) in node.inputs.iter().zip(input_grads) {
                        let (Some(j), Some(gi)) = (slot, gi) else {
                            continue;
                        };
                        match grads[*j].as_mut() {
                            Some(acc) => add_into(acc.data_mut(), &gi),
                            None => grads[*j] = Some(Storage::new(gi, Precision::F64)),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // ----- linear algebra ------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix("matmul", a)?;
        let (k2, n) = matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let (need_a, need_b) = (self.tracks(a), self.tracks(b));
        let (sa, sb) = (a.detach(), b.detach());
        Ok(self.record(&[a, b], &[m, n], data, move |g| {
            vec![
                need_a.then(|| kernels::matmul_nt(g, sb.data(), m, n, k)),
                need_b.then(|| kernels::matmul_tn(sa.data(), g, m, k, n)),
            ]
        }))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer's weight.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix("matmul_nt", a)?;
        let (n, k2) = matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
        }
        let data = kernels::matmul_nt(a.data(), b.data(), m, k, n);
        let (need_a, need_b) = (self.tracks(a), self.tracks(b));
        let (sa, sb) = (a.detach(), b.detach());
        Ok(self.record(&[a, b], &[m, n], data, move |g| {
            vec![
                need_a.then(|| kernels::matmul(g, sb.data(), m, n, k)),
                need_b.then(|| kernels::matmul_tn(g, sa.data(), m, n, k)),
            ]
        }))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = matrix("transpose", a)?;
        let data = kernels::transpose(a.data(), r, c);
        Ok(self.record(&[a], &[c, r], data, move |g| {
            vec![Some(kernels::transpose(g, c, r))]
        }))
    }

    /// Adds `bias[n]` to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = matrix("add_bias", a)?;
        if bias.numel() != n {
            return Err(Error::dim("add_bias", a.shape(), bias.shape()));
        }
        let data = kernels::add_row(a.data(), bias.data());
        let need_b = self.tracks(bias);
        Ok(self.record(&[a, bias], a.shape(), data, move |g| {
            vec![Some(g.to_vec()), need_b.then(|| kernels::sum_rows(g, n))]
        }))
    }

    /// `x · wᵀ + bias`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_bias(&y, b),
            None => Ok(y),
        }
    }

    // ----- element-wise ------------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("div", BinOp::Div, a, b)
    }

    fn binary(&mut self, name: &'static str, op: BinOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = if a.shape() == b.shape() {
            Broadcast::Same
        } else if a.numel() == 1 && (b.numel() > 1 || b.rank() > a.rank()) {
            // between two one-element tensors the higher rank wins
            Broadcast::ScalarLhs
        } else if b.numel() == 1 {
            Broadcast::ScalarRhs
        } else {
            return Err(Error::dim(name, a.shape(), b.shape()));
        };
        let shape = match bc {
            Broadcast::ScalarLhs => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        let n: usize = shape.iter().product();
        let ia = move |i: usize| {
            if matches!(bc, Broadcast::ScalarLhs) {
                0
            } else {
                i
            }
        };
        let ib = move |i: usize| {
            if matches!(bc, Broadcast::ScalarRhs) {
                0
            } else {
                i
            }
        };
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ad[ia(i)], bd[ib(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let (need_a, need_b) = (self.tracks(a), self.tracks(b));
        let keep = matches!(op, BinOp::Mul | BinOp::Div) && (need_a || need_b);
        let (sa, sb) = if keep {
            (Some(a.detach()), Some(b.detach()))
        } else {
            (None, None)
        };
        let (na, nb) = (a.numel(), b.numel());
        Ok(self.record(&[a, b], &shape, data, move |g| {
            let val = |s: &Option<Tensor>, i: usize| s.as_ref().map_or(0.0, |t| t.data()[i]);
            let mut ga = need_a.then(|| vec![0.0; na]);
            let mut gb = need_b.then(|| vec![0.0; nb]);
            for (i, gi) in g.iter().enumerate() {
                let (x, y) = (val(&sa, ia(i)), val(&sb, ib(i)));
                let (da, db) = match op {
                    BinOp::Add => (*gi, *gi),
                    BinOp::Sub => (*gi, -gi),
                    BinOp::Mul => (gi * y, gi * x),
                    BinOp::Div => (gi / y, -gi * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia(i)] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib(i)] += db;
                }
            }
            vec![ga, gb]
        }))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|v| v * c).collect();
        self.record(&[a], a.shape(), data, move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|v| v + c).collect();
        self.record(&[a], a.shape(), data, |g| vec![Some(g.to_vec())])
    }

    /// Takes its value from `forward` and its gradient from `clean`: the
    /// composition `clean + detach(forward - clean)` without the rounding the
    /// round trip would introduce.
    pub fn straight_through(&mut self, clean: &Tensor, forward: &Tensor) -> Result<Tensor> {
        if clean.shape() != forward.shape() {
            return Err(Error::dim(
                "straight_through",
                clean.shape(),
                forward.shape(),
            ));
        }
        Ok(self.record_output(&[clean], forward.detach(), |g| vec![Some(g.to_vec())]))
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let input = a.detach();
        self.record(&[a], a.shape(), data, move |g| {
            let x = input.data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|v| v.tanh()).collect();
        let out = self.constant(a.shape(), data);
        let keep = out.detach();
        self.record_output(&[a], out, move |g| {
            vec![Some(
                g.iter()
                    .zip(keep.data())
                    .map(|(gi, t)| gi * (1.0 - t * t))
                    .collect(),
            )]
        })
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total = a.data().iter().sum();
        let n = a.numel();
        self.record(&[a], &[1], vec![total], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel();
        let total: f64 = a.data().iter().sum();
        self.record(&[a], &[1], vec![total / n as f64], move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// `max |a|` as a one-element tensor; the gradient goes to the first
    /// maximiser with its sign.
    pub fn max_abs(&mut self, a: &Tensor) -> Tensor {
        let idx = kernels::argmax_abs(a.data());
        let v = a.data()[idx];
        let n = a.numel();
        self.record(&[a], &[1], vec![v.abs()], move |g| {
            let mut ga = vec![0.0; n];
            ga[idx] = g[0] * v.signum() * f64::from(u8::from(v != 0.0));
            vec![Some(ga)]
        })
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
