//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and whatever the backward rule needs. [`Tape::backward`] walks the
//! nodes in reverse and returns a [`Gradients`] set. Nodes that do not depend
//! on any differentiable leaf are skipped during the backward sweep.
//!
//! ```
//! use mrgsrec::numerics::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
//! let half_sq = tape.sum_squares(x);
//! let loss = tape.scale(half_sq, 0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().as_slice(), &[1.0, -2.0, 0.5]);
//! ```

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{dot, log_sigmoid, sigmoid};
use super::{Csr, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a recorded value. Only meaningful on the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Which key positions each query position may attend to, for a batch of
/// equal-length sequences. `allowed[b][i][j]` is stored flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    seq_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, seq_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * seq_len * seq_len {
            return Err(Error::dim(
                "AttentionMask::new",
                format!("{} flags for {batch}x{seq_len}x{seq_len}", allowed.len()),
            ));
        }
        Ok(AttentionMask {
            batch,
            seq_len,
            allowed,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn allows(&self, b: usize, query: usize, key: usize) -> bool {
        self.allowed[(b * self.seq_len + query) * self.seq_len + key]
    }

    /// Allowed keys for one query row.
    pub fn row(&self, b: usize, query: usize) -> &[bool] {
        let start = (b * self.seq_len + query) * self.seq_len;
        &self.allowed[start..start + self.seq_len]
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Matrix),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<Option<usize>>),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        mask: Rc<AttentionMask>,
        probs: Vec<f64>,
    },
    SpMM(Rc<Csr>, usize),
    SumSquares(usize),
    SoftmaxCe {
        logits: usize,
        targets: Vec<Option<usize>>,
        divisor: f64,
        probs: Matrix,
    },
    CandidateCe {
        logits: usize,
        candidates: Vec<Vec<usize>>,
        divisor: f64,
        probs: Vec<Vec<f64>>,
    },
    InfoNce {
        local: usize,
        global: usize,
        seq_len: usize,
        valid: Vec<bool>,
        divisor: f64,
        probs: Vec<f64>,
    },
    Bpr {
        user: usize,
        pos: usize,
        neg: usize,
        divisor: f64,
        margins: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.check(v).expect("var belongs to a different tape");
        &self.nodes[v.id].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "value {} was not recorded on this tape",
                v.id
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { id, tape: self.id }
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn val(&self, v: Var) -> &Matrix {
        debug_assert_eq!(v.tape, self.id, "var belongs to a different tape");
        &self.nodes[v.id].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).matmul(self.val(b))?;
        let ng = self.ng(&[a.id, b.id]);
        Ok(self.push(value, Op::MatMul(a.id, b.id), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).matmul_t(self.val(b))?;
        let ng = self.ng(&[a.id, b.id]);
        Ok(self.push(value, Op::MatMulT(a.id, b.id), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).add(self.val(b))?;
        let ng = self.ng(&[a.id, b.id]);
        Ok(self.push(value, Op::Add(a.id, b.id), ng))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xm, rm) = (self.val(x), self.val(row));
        if rm.rows() != 1 || rm.cols() != xm.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", xm.shape(), rm.shape()),
            ));
        }
        let mut value = xm.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        let ng = self.ng(&[x.id, row.id]);
        Ok(self.push(value, Op::AddRow(x.id, row.id), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.val(x).scale(s);
        let ng = self.ng(&[x.id]);
        self.push(value, Op::Scale(x.id, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Matrix) -> Result<Var> {
        let xm = self.val(x);
        if xm.shape() != factor.shape() {
            return Err(Error::dim(
                "mul_const",
                format!("{:?} vs {:?}", xm.shape(), factor.shape()),
            ));
        }
        let data = xm
            .as_slice()
            .iter()
            .zip(factor.as_slice())
            .map(|(a, b)| a * b)
            .collect();
        let value = Matrix::from_vec(xm.rows(), xm.cols(), data)?;
        let ng = self.ng(&[x.id]);
        Ok(self.push(value, Op::MulConst(x.id, factor), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.val(*p).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.val(*p);
            if m.rows() != rows {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.ng(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.val(*p).cols())
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.val(*p);
            if m.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.ng(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), ng))
    }

    /// Row gather; `None` yields a zero row that carries no gradient.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let xm = self.val(x);
        let mut value = Matrix::zeros(index.len(), xm.cols());
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= xm.rows() {
                    return Err(Error::Index {
                        what: "gather row",
                        index: i,
                        size: xm.rows(),
                    });
                }
                value.row_mut(r).copy_from_slice(xm.row(i));
            }
        }
        let ng = self.ng(&[x.id]);
        Ok(self.push(value, Op::Gather(x.id, index.to_vec()), ng))
    }

    /// ReLU with derivative 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(&[x.id]);
        self.push(value, Op::Relu(x.id), ng)
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xm, gm, bm) = (self.val(x), self.val(gain), self.val(bias));
        let d = xm.cols();
        if gm.shape() != (1, d) || bm.shape() != (1, d) {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xm.shape(), gm.shape(), bm.shape()),
            ));
        }
        let mut xhat = Matrix::zeros(xm.rows(), d);
        let mut value = Matrix::zeros(xm.rows(), d);
        let mut rstd = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                value.set(r, c, h * gm.as_slice()[c] + bm.as_slice()[c]);
            }
        }
        let ng = self.ng(&[x.id, gain.id, bias.id]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `(batch·L) × d`. Masked keys are excluded from the
    /// softmax outright; a query with no allowed key outputs a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttentionMask>) -> Result<Var> {
        let (qm, km, vm) = (self.val(q), self.val(k), self.val(v));
        let (batch, len) = (mask.batch(), mask.seq_len());
        let d = qm.cols();
        if qm.shape() != (batch * len, d) || km.shape() != qm.shape() || vm.shape() != qm.shape() {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} for batch {batch} length {len}",
                    qm.shape(),
                    km.shape(),
                    vm.shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut value = Matrix::zeros(batch * len, d);
        let mut logits = vec![0.0; len];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let allowed = mask.row(b, i);
                    let qi = &qm.row(b * len + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if allowed[j] {
                            logits[j] = dot(qi, &km.row(b * len + j)[cols.clone()]) * scale;
                            max = max.max(logits[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let mut total = 0.0;
                    for j in 0..len {
                        if allowed[j] {
                            p[j] = (logits[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let out = &mut value.row_mut(b * len + i)[cols.clone()];
                    for j in 0..len {
                        if allowed[j] {
                            p[j] /= total;
                            for (o, x) in out.iter_mut().zip(&vm.row(b * len + j)[cols.clone()]) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q.id, k.id, v.id]);
        Ok(self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                mask,
                probs,
            },
            ng,
        ))
    }

    /// Sparse constant times dense value.
    pub fn spmm(&mut self, a: Rc<Csr>, x: Var) -> Result<Var> {
        let value = a.spmm(self.val(x))?;
        let ng = self.ng(&[x.id]);
        Ok(self.push(value, Op::SpMM(a, x.id), ng))
    }

    /// `Σ x²` as a `1 × 1` value.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.val(x).sum_squares());
        let ng = self.ng(&[x.id]);
        self.push(value, Op::SumSquares(x.id), ng)
    }

    /// `Σ_rows (logsumexp(row) − row[target]) / divisor` over rows with a target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], divisor: f64) -> Result<Var> {
        let lm = self.val(logits);
        if targets.len() != lm.rows() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), lm.rows()),
            ));
        }
        let mut probs = Matrix::zeros(lm.rows(), lm.cols());
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= lm.cols() {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    size: lm.cols(),
                });
            }
            let row = lm.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = probs.row_mut(r);
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += max + z.ln() - row[t];
        }
        let ng = self.ng(&[logits.id]);
        Ok(self.push(
            Matrix::scalar(total / divisor),
            Op::SoftmaxCe {
                logits: logits.id,
                targets: targets.to_vec(),
                divisor,
                probs,
            },
            ng,
        ))
    }

    /// Cross-entropy restricted to a candidate column list per row, whose
    /// first entry is the positive: `Σ_rows (logsumexp(cands) − row[cands[0]]) / divisor`.
    pub fn candidate_cross_entropy(&mut self, logits: Var, candidates: &[Vec<usize>], divisor: f64) -> Result<Var> {
        let lm = self.val(logits);
        if candidates.len() != lm.rows() {
            return Err(Error::dim(
                "candidate_cross_entropy",
                format!("{} candidate lists for {} rows", candidates.len(), lm.rows()),
            ));
        }
        let mut probs = Vec::with_capacity(candidates.len());
        let mut total = 0.0;
        for (r, cands) in candidates.iter().enumerate() {
            let row = lm.row(r);
            if let Some(&bad) = cands.iter().find(|&&c| c >= lm.cols()) {
                return Err(Error::Index {
                    what: "candidate column",
                    index: bad,
                    size: lm.cols(),
                });
            }
            if cands.is_empty() {
                probs.push(Vec::new());
                continue;
            }
            let max = cands.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = cands.iter().map(|&c| (row[c] - max).exp()).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            total += max + z.ln() - row[cands[0]];
            probs.push(p);
        }
        let ng = self.ng(&[logits.id]);
        Ok(self.push(
            Matrix::scalar(total / divisor),
            Op::CandidateCe {
                logits: logits.id,
                candidates: candidates.to_vec(),
                divisor,
                probs,
            },
            ng,
        ))
    }

    /// In-sequence InfoNCE between aligned `(batch·L) × d` blocks: for each valid
    /// position `i` of a sequence, the positive is `global_i` and the other valid
    /// positions of the same sequence are the negatives.
    pub fn in_sequence_info_nce(
        &mut self,
        local: Var,
        global: Var,
        seq_len: usize,
        valid: &[bool],
        divisor: f64,
    ) -> Result<Var> {
        let (lm, gm) = (self.val(local), self.val(global));
        if lm.shape() != gm.shape() || seq_len == 0 || lm.rows() % seq_len != 0 || valid.len() != lm.rows() {
            return Err(Error::dim(
                "in_sequence_info_nce",
                format!(
                    "local {:?}, global {:?}, length {seq_len}, {} validity flags",
                    lm.shape(),
                    gm.shape(),
                    valid.len()
                ),
            ));
        }
        let batch = lm.rows() / seq_len;
        let mut probs = vec![0.0; batch * seq_len * seq_len];
        let mut total = 0.0;
        let mut logits = vec![0.0; seq_len];
        for b in 0..batch {
            let base = b * seq_len;
            for i in 0..seq_len {
                if !valid[base + i] {
                    continue;
                }
                let li = lm.row(base + i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq_len {
                    if valid[base + j] {
                        logits[j] = dot(li, gm.row(base + j));
                        max = max.max(logits[j]);
                    }
                }
                let p = &mut probs[(base + i) * seq_len..][..seq_len];
                let mut z = 0.0;
                for j in 0..seq_len {
                    if valid[base + j] {
                        p[j] = (logits[j] - max).exp();
                        z += p[j];
                    }
                }
                for j in 0..seq_len {
                    p[j] /= z;
                }
                total += max + z.ln() - logits[i];
            }
        }
        let ng = self.ng(&[local.id, global.id]);
        Ok(self.push(
            Matrix::scalar(total / divisor),
            Op::InfoNce {
                local: local.id,
                global: global.id,
                seq_len,
                valid: valid.to_vec(),
                divisor,
                probs,
            },
            ng,
        ))
    }

    /// `Σ_rows −ln σ(u·p − u·n) / divisor` over aligned `batch × d` blocks.
    pub fn bpr(&mut self, user: Var, pos: Var, neg: Var, divisor: f64) -> Result<Var> {
        let (um, pm, nm) = (self.val(user), self.val(pos), self.val(neg));
        if um.shape() != pm.shape() || um.shape() != nm.shape() {
            return Err(Error::dim(
                "bpr",
                format!("{:?}, {:?}, {:?}", um.shape(), pm.shape(), nm.shape()),
            ));
        }
        let margins: Vec<f64> = (0..um.rows())
            .map(|r| dot(um.row(r), pm.row(r)) - dot(um.row(r), nm.row(r)))
            .collect();
        let total: f64 = margins.iter().map(|&x| -log_sigmoid(x)).sum();
        let ng = self.ng(&[user.id, pos.id, neg.id]);
        Ok(self.push(
            Matrix::scalar(total / divisor),
            Op::Bpr {
                user: user.id,
                pos: pos.id,
                neg: neg.id,
                divisor,
                margins,
            },
            ng,
        ))
    }

    /// Gradients of a `1 × 1` value with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.id].value;
        if lv.shape() != (1, 1) {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let v = |id: usize| &self.nodes[id].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_t(v(*b)).expect("shapes checked in forward"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, v(*a).t_matmul(g).expect("shapes checked in forward"));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(v(*b)).expect("shapes checked in forward"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.t_matmul(v(*a)).expect("shapes checked in forward"));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.scale(*s));
                }
            }
            Op::MulConst(x, factor) => {
                if self.wants(*x) {
                    let data = g.as_slice().iter().zip(factor.as_slice()).map(|(a, b)| a * b).collect();
                    accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape"));
                }
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &id in ids {
                    let cols = v(id).cols();
                    if self.wants(id) {
                        let mut part = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(grads, id, part);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &id in ids {
                    let (rows, cols) = v(id).shape();
                    if self.wants(id) {
                        let slice = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, id, Matrix::from_vec(rows, cols, slice).expect("slice size"));
                    }
                    offset += rows;
                }
            }
            Op::Gather(x, index) => {
                if self.wants(*x) {
                    let src = v(*x);
                    let slot = grads[*x].get_or_insert_with(|| Matrix::zeros(src.rows(), src.cols()));
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            for (o, x) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let input = v(*x);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(input.as_slice())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape"));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = xhat.cols();
                let gm = v(*gain);
                if self.wants(*x) {
                    let mut gx = Matrix::zeros(xhat.rows(), d);
                    for r in 0..xhat.rows() {
                        let gy = g.row(r);
                        let h = xhat.row(r);
                        let dh: Vec<f64> = (0..d).map(|c| gy[c] * gm.as_slice()[c]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    let mut gg = Matrix::zeros(1, d);
                    for r in 0..xhat.rows() {
                        for c in 0..d {
                            gg.as_mut_slice()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, d);
                    for r in 0..xhat.rows() {
                        for c in 0..d {
                            gb.as_mut_slice()[c] += g.get(r, c);
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Attention {
                q,
                k,
                v: vid,
                heads,
                mask,
                probs,
            } => {
                let (qm, km, vm) = (v(*q), v(*k), v(*vid));
                let (batch, len) = (mask.batch(), mask.seq_len());
                let d = qm.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Matrix::zeros(qm.rows(), d);
                let mut gk = Matrix::zeros(km.rows(), d);
                let mut gv = Matrix::zeros(vm.rows(), d);
                let mut dp = vec![0.0; len];
                for b in 0..batch {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..len {
                            let allowed = mask.row(b, i);
                            let p = &probs[((b * heads + h) * len + i) * len..][..len];
                            let go = &g.row(b * len + i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..len {
                                if allowed[j] {
                                    dp[j] = dot(go, &vm.row(b * len + j)[cols.clone()]);
                                    weighted += p[j] * dp[j];
                                    for (o, x) in gv.row_mut(b * len + j)[cols.clone()].iter_mut().zip(go) {
                                        *o += p[j] * x;
                                    }
                                }
                            }
                            for j in 0..len {
                                if !allowed[j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &km.row(b * len + j)[cols.clone()];
                                for (o, x) in gq.row_mut(b * len + i)[cols.clone()].iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let qi = &qm.row(b * len + i)[cols.clone()];
                                for (o, x) in gk.row_mut(b * len + j)[cols.clone()].iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.wants(*vid) {
                    accumulate(grads, *vid, gv);
                }
            }
            Op::SpMM(a, x) => {
                if self.wants(*x) {
                    let at = a.transpose();
                    accumulate(grads, *x, at.spmm(g).expect("shapes checked in forward"));
                }
            }
            Op::SumSquares(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, v(*x).scale(2.0 * g.item()));
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                divisor,
                probs,
            } => {
                if self.wants(*logits) {
                    let s = g.item() / divisor;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * s;
                        }
                        gl.row_mut(r)[t] -= s;
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            Op::CandidateCe {
                logits,
                candidates,
                divisor,
                probs,
            } => {
                if self.wants(*logits) {
                    let s = g.item() / divisor;
                    let lm = v(*logits);
                    let mut gl = Matrix::zeros(lm.rows(), lm.cols());
                    for (r, (cands, p)) in candidates.iter().zip(probs).enumerate() {
                        let row = gl.row_mut(r);
                        for (idx, (&c, &pj)) in cands.iter().zip(p).enumerate() {
                            row[c] += s * (pj - if idx == 0 { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            Op::InfoNce {
                local,
                global,
                seq_len,
                valid,
                divisor,
                probs,
            } => {
                let (lm, gm) = (v(*local), v(*global));
                let s = g.item() / divisor;
                let len = *seq_len;
                let mut gl = Matrix::zeros(lm.rows(), lm.cols());
                let mut gg = Matrix::zeros(gm.rows(), gm.cols());
                for b in 0..lm.rows() / len {
                    let base = b * len;
                    for i in 0..len {
                        if !valid[base + i] {
                            continue;
                        }
                        let p = &probs[(base + i) * len..][..len];
                        for j in 0..len {
                            if !valid[base + j] {
                                continue;
                            }
                            let ds = s * (p[j] - if i == j { 1.0 } else { 0.0 });
                            for (o, x) in gl.row_mut(base + i).iter_mut().zip(gm.row(base + j)) {
                                *o += ds * x;
                            }
                            for (o, x) in gg.row_mut(base + j).iter_mut().zip(lm.row(base + i)) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                if self.wants(*local) {
                    accumulate(grads, *local, gl);
                }
                if self.wants(*global) {
                    accumulate(grads, *global, gg);
                }
            }
            Op::Bpr {
                user,
                pos,
                neg,
                divisor,
                margins,
            } => {
                let (um, pm, nm) = (v(*user), v(*pos), v(*neg));
                let s = g.item() / divisor;
                let d = um.cols();
                let mut gu = Matrix::zeros(um.rows(), d);
                let mut gp = Matrix::zeros(um.rows(), d);
                let mut gn = Matrix::zeros(um.rows(), d);
                for (r, &m) in margins.iter().enumerate() {
                    // d/dm of −ln σ(m) is −σ(−m)
                    let coef = -sigmoid(-m) * s;
                    for c in 0..d {
                        gu.set(r, c, coef * (pm.get(r, c) - nm.get(r, c)));
                        gp.set(r, c, coef * um.get(r, c));
                        gn.set(r, c, -coef * um.get(r, c));
                    }
                }
                if self.wants(*user) {
                    accumulate(grads, *user, gu);
                }
                if self.wants(*pos) {
                    accumulate(grads, *pos, gp);
                }
                if self.wants(*neg) {
                    accumulate(grads, *neg, gn);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Matrix> {
        if v.tape != self.tape || v.id >= self.grads.len() {
            return Err(Error::Graph(format!(
                "gradient requested for value {} not recorded before the loss",
                v.id
            )));
        }
        Ok(self.grads[v.id].clone().unwrap_or_else(|| Matrix::zeros(0, 0)))
    }

    /// Like [`Gradients::wrt`] but with the shape of `like` when no gradient flowed.
    pub fn wrt_or_zeros(&self, v: Var, like: &Matrix) -> Result<Matrix> {
        let g = self.wrt(v)?;
        if g.is_empty() && !like.is_empty() {
            Ok(Matrix::zeros(like.rows(), like.cols()))
        } else {
            Ok(g)
        }
    }
}
