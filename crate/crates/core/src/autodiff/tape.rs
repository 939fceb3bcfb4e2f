use std::cell::{Cell, Ref, RefCell};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{HfatError, Result};

/// Recorded operation. Input ids always refer to earlier nodes, so the
/// node vector is a topological order by construction.
#[derive(Debug)]
enum Op {
    Input,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: usize,
        q: usize,
        probs_p: Vec<f64>,
        probs_q: Vec<f64>,
        log_ratio: Vec<f64>,
        row_kl: Vec<f64>,
    },
    Margin {
        logits: usize,
        labels: Vec<usize>,
        // (true class, best other class) for rows above the -kappa floor
        active: Vec<Option<(usize, usize)>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Define-by-run gradient tape.
///
/// Every forward pass builds a fresh tape. Once [`Tape::backward`] has run
/// the tape is consumed; a second call fails with a lifecycle error until
/// [`Tape::reset`] starts a new generation, which also invalidates every
/// outstanding [`Var`].
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    state: Cell<TapeState>,
    generation: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

/// Gradients of the requires-grad leaves, produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            state: Cell::new(TapeState::Recording),
            generation: Cell::new(0),
        }
    }

    /// Drops every recorded node and starts a new generation.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.state.set(TapeState::Recording);
        self.generation.set(self.generation.get() + 1);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Input, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Input, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    fn check_live(&self, var: &Var<'_>) -> Result<()> {
        if var.generation != self.generation.get() {
            return Err(HfatError::Lifecycle(
                "variable belongs to a tape generation that was reset".into(),
            ));
        }
        if self.state.get() == TapeState::Consumed {
            return Err(HfatError::Lifecycle(
                "tape already consumed by backward; reset before recording".into(),
            ));
        }
        Ok(())
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(HfatError::Numeric(format!(
                "non-finite result in {}",
                op_name(&op)
            )));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.generation != self.generation.get() {
            return Err(HfatError::Lifecycle(
                "loss belongs to a tape generation that was reset".into(),
            ));
        }
        if self.state.get() == TapeState::Consumed {
            return Err(HfatError::Lifecycle(
                "backward already ran on this tape; reset before reuse".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(HfatError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.state.set(TapeState::Consumed);

        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut adj[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    leaf_grads[id] = Some(t);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[*a].requires_grad {
                        send(*a, kernels::matmul_bt(&g, bv.data(), m, k, n));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, kernels::matmul_at(av.data(), &g, m, k, n));
                    }
                }
                Op::AddBias(a, bias) => {
                    let n = nodes[*bias].value.numel();
                    if nodes[*bias].requires_grad {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        send(*bias, gb);
                    }
                    send(*a, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    send(*a, vec![g[0]; n]);
                }
                Op::Relu(a) => {
                    let av = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(*a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = nodes[*logits].value.cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    send(*logits, gl);
                }
                Op::KlDiv {
                    p,
                    q,
                    probs_p,
                    probs_q,
                    log_ratio,
                    row_kl,
                } => {
                    let c = nodes[*p].value.cols();
                    let scale = g[0] / row_kl.len() as f64;
                    if nodes[*p].requires_grad {
                        let gp = probs_p
                            .iter()
                            .zip(log_ratio)
                            .enumerate()
                            .map(|(i, (&pp, &lr))| scale * pp * (lr - row_kl[i / c]))
                            .collect();
                        send(*p, gp);
                    }
                    if nodes[*q].requires_grad {
                        let gq = probs_q
                            .iter()
                            .zip(probs_p)
                            .map(|(&qq, &pp)| scale * (qq - pp))
                            .collect();
                        send(*q, gq);
                    }
                }
                Op::Margin {
                    logits,
                    labels,
                    active,
                } => {
                    let c = nodes[*logits].value.cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl = vec![0.0; labels.len() * c];
                    for (r, a) in active.iter().enumerate() {
                        if let Some((y, other)) = a {
                            gl[r * c + y] += scale;
                            gl[r * c + other] -= scale;
                        }
                    }
                    send(*logits, gl);
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            generation: loss.generation,
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(..) => "sum",
        Op::Relu(..) => "relu",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_divergence",
        Op::Margin { .. } => "margin_loss",
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(HfatError::dim("labels", &[rows], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(HfatError::Index {
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(HfatError::dim(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn binary(
        &self,
        other: &Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        self.tape.check_live(self)?;
        self.tape.check_live(other)?;
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.record(value, op, &[self.id, other.id])
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        self.tape.check_live(self)?;
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        self.tape.record(value, op, &[self.id])
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            require_matrix("matmul", a)?;
            require_matrix("matmul", b)?;
            if a.cols() != b.rows() {
                return Err(HfatError::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
            Ok((out, Op::MatMul(ia, ib)))
        })
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, bias.id);
        self.binary(bias, |a, b| {
            require_matrix("add_bias", a)?;
            if b.numel() != a.cols() {
                return Err(HfatError::dim("add_bias", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(b.numel()) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok((out, Op::AddBias(ia, ib)))
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| Ok((a.add(b)?, Op::Add(ia, ib))))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| Ok((a.sub(b)?, Op::Sub(ia, ib))))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            Ok((a.zip_map(b, |x, y| x * y)?, Op::Mul(ia, ib)))
        })
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let ia = self.id;
        self.unary(|a| Ok((a.map(|v| v * s), Op::Scale(ia, s))))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let ia = self.id;
        self.unary(|a| Ok((Tensor::scalar(a.data().iter().sum()), Op::Sum(ia))))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Var<'t>> {
        let ia = self.id;
        self.unary(|a| Ok((a.map(|v| if v > 0.0 { v } else { 0.0 }), Op::Relu(ia))))
    }

    /// Batch-mean cross-entropy of `B × C` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let ia = self.id;
        self.unary(|z| {
            require_matrix("cross_entropy", z)?;
            let (b, c) = (z.rows(), z.cols());
            check_labels(labels, b, c)?;
            let mut logp = vec![0.0; c];
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                kernels::log_softmax_row(z.row(r), &mut logp);
                total -= logp[y];
            }
            let probs = kernels::softmax_rows(z.data(), c);
            let op = Op::CrossEntropy {
                logits: ia,
                labels: labels.to_vec(),
                probs,
            };
            Ok((Tensor::scalar(total / b as f64), op))
        })
    }

    /// Batch-mean `KL(softmax(self) ‖ softmax(q))`, differentiable in both.
    pub fn kl_divergence(&self, q: &Var<'t>) -> Result<Var<'t>> {
        let (ip, iq) = (self.id, q.id);
        self.binary(q, |p, q| {
            require_matrix("kl_divergence", p)?;
            if p.shape() != q.shape() {
                return Err(HfatError::dim("kl_divergence", p.shape(), q.shape()));
            }
            let (b, c) = (p.rows(), p.cols());
            let mut log_ratio = vec![0.0; b * c];
            let mut row_kl = vec![0.0; b];
            let mut lp = vec![0.0; c];
            let mut lq = vec![0.0; c];
            let probs_p = kernels::softmax_rows(p.data(), c);
            let probs_q = kernels::softmax_rows(q.data(), c);
            for r in 0..b {
                kernels::log_softmax_row(p.row(r), &mut lp);
                kernels::log_softmax_row(q.row(r), &mut lq);
                let mut kl = 0.0;
                for k in 0..c {
                    let d = lp[k] - lq[k];
                    log_ratio[r * c + k] = d;
                    kl += probs_p[r * c + k] * d;
                }
                row_kl[r] = kl;
            }
            let mean = row_kl.iter().sum::<f64>() / b as f64;
            let op = Op::KlDiv {
                p: ip,
                q: iq,
                probs_p,
                probs_q,
                log_ratio,
                row_kl,
            };
            Ok((Tensor::scalar(mean), op))
        })
    }

    /// Batch mean of `max(z_y − max_{c≠y} z_c, −kappa)`.
    ///
    /// The runner-up class is the smallest index among ties. Rows sitting
    /// exactly on the `−kappa` floor get a zero subgradient.
    pub fn margin_loss(&self, labels: &[usize], kappa: f64) -> Result<Var<'t>> {
        let ia = self.id;
        self.unary(|z| {
            require_matrix("margin_loss", z)?;
            let (b, c) = (z.rows(), z.cols());
            if c < 2 {
                return Err(HfatError::Contract(
                    "margin loss needs at least two classes".into(),
                ));
            }
            check_labels(labels, b, c)?;
            let mut total = 0.0;
            let mut active = Vec::with_capacity(b);
            for (r, &y) in labels.iter().enumerate() {
                let row = z.row(r);
                let other = (0..c)
                    .filter(|&k| k != y)
                    .fold(None::<usize>, |best, k| match best {
                        Some(bk) if row[bk] >= row[k] => Some(bk),
                        _ => Some(k),
                    })
                    .unwrap();
                let margin = row[y] - row[other];
                if margin > -kappa {
                    total += margin;
                    active.push(Some((y, other)));
                } else {
                    total += -kappa;
                    active.push(None);
                }
            }
            let op = Op::Margin {
                logits: ia,
                labels: labels.to_vec(),
                active,
            };
            Ok((Tensor::scalar(total / b as f64), op))
        })
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self)
    }
}
