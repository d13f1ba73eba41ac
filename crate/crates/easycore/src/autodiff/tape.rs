//! Reverse-mode differentiation over a linear operation tape.
//!
//! A `Tape` owns every intermediate of one forward pass. Nodes are appended
//! in execution order, so operands always precede their results and the
//! backward pass is a single reverse scan that touches each node exactly
//! once. Gradients accumulate: each `backward` call propagates its own
//! scratch adjoints seeded at the loss and then folds them into the
//! persistent per-variable gradients, so running backward twice doubles
//! every gradient exactly.
//!
//! Tapes are rebuilt per forward pass and confined to one thread; the only
//! internal parallelism is inside the dense kernels, which are bitwise
//! deterministic for any thread count.

use crate::error::{Error, Result};
use crate::linalg;
use crate::Tensor;

/// Index of a variable on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Node {
    Leaf,
    /// out[m,n] = a[m,k] * b[k,n]
    Matmul {
        a: VarId,
        b: VarId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Elementwise sum of two same-shape variables (also the residual skip).
    Add { a: VarId, b: VarId },
    /// out[m,n] = a[m,n] + bias[n] broadcast over rows.
    AddRowBias { a: VarId, bias: VarId },
    Relu { x: VarId },
    /// Elementwise x^2.
    Square { x: VarId },
    Scale { x: VarId, c: f64 },
    /// Full reduction to a scalar.
    Sum { x: VarId },
    /// Per-row softmax cross-entropy against integer labels; output is [rows].
    SoftmaxCrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Per-row KL(softmax(p_logits) || softmax(q_logits)); output is [rows].
    KlDiv {
        p_logits: VarId,
        q_logits: VarId,
        p: Vec<f64>,
        q: Vec<f64>,
        /// log softmax(p_logits) - log softmax(q_logits), saved at forward time
        log_ratio: Vec<f64>,
        /// the per-row KL values themselves
        rows: Vec<f64>,
    },
}

struct Var {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Persistent accumulated gradient; zero until a backward pass reaches it.
    grad: Vec<f64>,
    requires_grad: bool,
    node: Node,
}

/// Row-wise numerically stable log-softmax. Returns (log_probs, probs).
pub(crate) fn log_softmax_rows(values: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut logp = vec![0.0; rows * cols];
    let mut p = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for c in 0..cols {
            let lp = row[c] - lse;
            logp[r * cols + c] = lp;
            p[r * cols + c] = lp.exp();
        }
    }
    (logp, p)
}

#[derive(Default)]
pub struct Tape {
    vars: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        node: Node,
    ) -> VarId {
        let grad = vec![0.0; values.len()];
        self.vars.push(Var {
            shape,
            values,
            grad,
            requires_grad,
            node,
        });
        VarId(self.vars.len() - 1)
    }

    /// Insert a tensor as a leaf, copying its values and requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Node::Leaf,
        )
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(shape, values, requires_grad, Node::Leaf)
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.vars[v.0].shape
    }

    pub fn values(&self, v: VarId) -> &[f64] {
        &self.vars[v.0].values
    }

    /// Accumulated gradient of `v` (zeros until backward reaches it).
    pub fn grad(&self, v: VarId) -> &[f64] {
        &self.vars[v.0].grad
    }

    pub fn scalar_value(&self, v: VarId) -> Result<f64> {
        let var = &self.vars[v.0];
        if var.values.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: var.shape.clone(),
            });
        }
        Ok(var.values[0])
    }

    /// Add this variable's accumulated gradient into the tensor it was
    /// created from.
    pub fn add_grad_to(&self, v: VarId, t: &mut Tensor) {
        t.accumulate_grad(&self.vars[v.0].grad);
    }

    fn rows_cols(&self, v: VarId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.vars[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let values = linalg::matmul(self.values(a), self.values(b), m, ka, n);
        let rg = self.vars[a.0].requires_grad || self.vars[b.0].requires_grad;
        Ok(self.push(vec![m, n], values, rg, Node::Matmul { a, b, m, k: ka, n }))
    }

    /// Elementwise sum; shapes must match exactly. The residual skip
    /// `x + f(x)` is this op, with gradient accumulation on `x` giving the
    /// direct and through-f paths automatically.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.vars[a.0].requires_grad || self.vars[b.0].requires_grad;
        Ok(self.push(self.vars[a.0].shape.clone(), values, rg, Node::Add { a, b }))
    }

    pub fn add_row_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (m, n) = self.rows_cols(a, "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(a),
                self.shape(bias),
            ));
        }
        let mut values = self.values(a).to_vec();
        let bvals = self.values(bias).to_vec();
        for row in values.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bvals) {
                *v += b;
            }
        }
        let rg = self.vars[a.0].requires_grad || self.vars[bias.0].requires_grad;
        Ok(self.push(vec![m, n], values, rg, Node::AddRowBias { a, bias }))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.vars[x.0].requires_grad;
        self.push(self.vars[x.0].shape.clone(), values, rg, Node::Relu { x })
    }

    /// Elementwise square; handy for building norms on the tape.
    pub fn square(&mut self, x: VarId) -> VarId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v * v).collect();
        let rg = self.vars[x.0].requires_grad;
        self.push(self.vars[x.0].shape.clone(), values, rg, Node::Square { x })
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| c * v).collect();
        let rg = self.vars[x.0].requires_grad;
        self.push(self.vars[x.0].shape.clone(), values, rg, Node::Scale { x, c })
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: f64 = self.values(x).iter().sum();
        let rg = self.vars[x.0].requires_grad;
        self.push(vec![1], vec![total], rg, Node::Sum { x })
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.values(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-sample softmax cross-entropy; output shape [rows].
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(logits, "softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::config(format!(
                    "label {y} at row {i} out of range for {cols} classes"
                )));
            }
        }
        let (logp, probs) = log_softmax_rows(self.values(logits), rows, cols);
        let values: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -logp[r * cols + y])
            .collect();
        let rg = self.vars[logits.0].requires_grad;
        Ok(self.push(
            vec![rows],
            values,
            rg,
            Node::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row KL(softmax(p_logits) || softmax(q_logits)); output shape [rows].
    /// Gradients flow into both logit operands.
    pub fn kl_divergence(&mut self, p_logits: VarId, q_logits: VarId) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(p_logits, "kl_divergence")?;
        if self.shape(p_logits) != self.shape(q_logits) {
            return Err(Error::shape(
                "kl_divergence",
                self.shape(p_logits),
                self.shape(q_logits),
            ));
        }
        let (logp, p) = log_softmax_rows(self.values(p_logits), rows, cols);
        let (logq, q) = log_softmax_rows(self.values(q_logits), rows, cols);
        let log_ratio: Vec<f64> = logp.iter().zip(&logq).map(|(a, b)| a - b).collect();
        let mut values = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += p[r * cols + c] * log_ratio[r * cols + c];
            }
            values[r] = acc;
        }
        let rg = self.vars[p_logits.0].requires_grad || self.vars[q_logits.0].requires_grad;
        Ok(self.push(
            vec![rows],
            values.clone(),
            rg,
            Node::KlDiv {
                p_logits,
                q_logits,
                p,
                q,
                log_ratio,
                rows: values,
            },
        ))
    }

    /// Smallest |input| seen by any relu on this tape, if there is one.
    /// Gradient-check harnesses use this to stay away from the kink.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for var in &self.vars {
            if let Node::Relu { x } = var.node {
                for &v in &self.vars[x.0].values {
                    let a = v.abs();
                    min = Some(min.map_or(a, |m: f64| m.min(a)));
                }
            }
        }
        min
    }

    /// Reverse pass from a scalar loss. Every variable on a requires_grad
    /// path reachable from the loss gets its gradient accumulated; all
    /// other gradients stay zero.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.vars[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.vars[loss.0].shape.clone(),
            });
        }
        if !self.vars[loss.0].requires_grad {
            // Nothing on the tape can receive a gradient.
            return Ok(());
        }
        // Scratch adjoints for this pass only. Processing order is strictly
        // reverse, so by the time node i is visited nothing can add to its
        // adjoint anymore; it is folded into the persistent gradient right
        // there and then propagated to the operands.
        let mut adj: Vec<Vec<f64>> = self
            .vars
            .iter()
            .map(|v| {
                if v.requires_grad {
                    vec![0.0; v.values.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        adj[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.vars[i].requires_grad {
                continue;
            }
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            for (acc, &gv) in self.vars[i].grad.iter_mut().zip(&g) {
                *acc += gv;
            }
            match &self.vars[i].node {
                Node::Leaf => {}
                Node::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if self.vars[a.0].requires_grad {
                        let da = linalg::matmul_nt(&g, &self.vars[b.0].values, m, n, k);
                        axpy(&mut adj[a.0], &da);
                    }
                    if self.vars[b.0].requires_grad {
                        let db = linalg::matmul_tn(&self.vars[a.0].values, &g, m, k, n);
                        axpy(&mut adj[b.0], &db);
                    }
                }
                Node::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.vars[a.0].requires_grad {
                        axpy(&mut adj[a.0], &g);
                    }
                    if self.vars[b.0].requires_grad {
                        axpy(&mut adj[b.0], &g);
                    }
                }
                Node::AddRowBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    if self.vars[a.0].requires_grad {
                        axpy(&mut adj[a.0], &g);
                    }
                    if self.vars[bias.0].requires_grad {
                        let n = adj[bias.0].len();
                        for chunk in g.chunks(n) {
                            axpy(&mut adj[bias.0], chunk);
                        }
                    }
                }
                Node::Relu { x } => {
                    let x = *x;
                    if self.vars[x.0].requires_grad {
                        let xa = &mut adj[x.0];
                        for (j, (&gv, &v)) in g.iter().zip(&self.vars[x.0].values).enumerate() {
                            if v > 0.0 {
                                xa[j] += gv;
                            }
                        }
                    }
                }
                Node::Square { x } => {
                    let x = *x;
                    if self.vars[x.0].requires_grad {
                        let xv = &self.vars[x.0].values;
                        for ((acc, &gv), &v) in adj[x.0].iter_mut().zip(&g).zip(xv) {
                            *acc += 2.0 * v * gv;
                        }
                    }
                }
                Node::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.vars[x.0].requires_grad {
                        for (acc, &gv) in adj[x.0].iter_mut().zip(&g) {
                            *acc += c * gv;
                        }
                    }
                }
                Node::Sum { x } => {
                    let x = *x;
                    if self.vars[x.0].requires_grad {
                        let gv = g[0];
                        for acc in adj[x.0].iter_mut() {
                            *acc += gv;
                        }
                    }
                }
                Node::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    if self.vars[logits.0].requires_grad {
                        let cols = self.vars[logits.0].shape[1];
                        let la = &mut adj[logits.0];
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let y = labels[r];
                            for c in 0..cols {
                                let onehot = if c == y { 1.0 } else { 0.0 };
                                la[r * cols + c] += gr * (probs[r * cols + c] - onehot);
                            }
                        }
                    }
                }
                Node::KlDiv {
                    p_logits,
                    q_logits,
                    p,
                    q,
                    log_ratio,
                    rows,
                } => {
                    let (pl, ql) = (*p_logits, *q_logits);
                    let cols = self.vars[pl.0].shape[1];
                    if self.vars[pl.0].requires_grad {
                        let pa = &mut adj[pl.0];
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            for c in 0..cols {
                                let idx = r * cols + c;
                                pa[idx] += gr * p[idx] * (log_ratio[idx] - rows[r]);
                            }
                        }
                    }
                    if self.vars[ql.0].requires_grad {
                        let qa = &mut adj[ql.0];
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            for c in 0..cols {
                                let idx = r * cols + c;
                                qa[idx] += gr * (q[idx] - p[idx]);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(acc: &mut [f64], add: &[f64]) {
    debug_assert_eq!(acc.len(), add.len());
    for (a, &b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}
