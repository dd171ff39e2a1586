use rand::Rng as _;

use super::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use super::{Rng, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatmulNn { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    MatmulTn { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: S },
    ScaleByScalar { a: Var, s: Var },
    Mul { a: Var, b: Var },
    Gelu { a: Var },
    RowSoftmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, stats: Vec<(S, S)> },
    GatherRows { table: Var, ids: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    WeightedCe { logits: Var, targets: Vec<u32>, weights: Vec<S>, weight_sum: S },
    Dropout { a: Var, mask: Vec<S> },
    Detach,
    Sum { a: Var },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

/// Tape of primitive applications in topological (creation) order.
///
/// Arrays and graphs are confined to one worker at a time; parameter value
/// snapshots enter a graph as leaves via [`Graph::leaf`].
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    released: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            released: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input array. Gradients are produced for it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- primitives ----------------------------------------------------

    /// C = A * B.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (kb, _n) = self.shape(b);
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        let _ = m;
        Ok(self.push(value, rg, Op::MatmulNn { a, b }))
    }

    /// C = A * B^T (B stored row-wise, n x k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_m, k) = self.shape(a);
        let (_n, kb) = self.shape(b);
        if k != kb {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner extents differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = mm_nt(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatmulNt { a, b }))
    }

    /// C = A^T * B (A stored k x m).
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, _m) = self.shape(a);
        let (kb, _n) = self.shape(b);
        if k != kb {
            return Err(Error::shape(
                "matmul_tn",
                format!("inner extents differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = mm_tn(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatmulTn { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut value = self.nodes[a.0].value.clone();
        value.add_assign(&self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Broadcast-add a 1 x n bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not broadcast over {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let mut value = self.nodes[a.0].value.clone();
        let bias_t = &self.nodes[bias.0].value;
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for (x, &b) in row.iter_mut().zip(bias_t.as_slice()) {
                *x += b;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(value, rg, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.scale_assign(factor);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Scale { a, factor })
    }

    /// Multiply all of `a` by a learnable 1 x 1 scalar `s` (gates).
    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].value.is_scalar() {
            return Err(Error::shape(
                "scale_by_scalar",
                format!("scale operand must be 1x1, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.nodes[s.0].value.item();
        let mut value = self.nodes[a.0].value.clone();
        value.scale_assign(sv);
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(value, rg, Op::ScaleByScalar { a, s }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .as_slice()
            .iter()
            .zip(self.nodes[b.0].value.as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(r, c, data), rg, Op::Mul { a, b }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu_forward);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Gelu { a })
    }

    /// Per-row softmax with an optional additive bias mask. A row whose mask
    /// entries are all at the -inf sentinel produces an all-zero output row.
    pub fn row_softmax(&mut self, a: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.shape() != (r, c) {
                return Err(Error::shape(
                    "row_softmax",
                    format!("mask {:?} vs input {:?}", m.shape(), (r, c)),
                ));
            }
        }
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let arow = self.nodes[a.0].value.row(i);
            let out = value.row_mut(i);
            softmax_row_into(arow, mask.map(|m| m.row(i)), out);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::RowSoftmax { a }))
    }

    /// Per-row normalization to zero mean / unit variance, then affine
    /// transform by `gain` and `bias` (both 1 x d).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (r, d) = self.shape(a);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs input {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    (r, d)
                ),
            ));
        }
        if eps <= S::ZERO {
            return Err(Error::invalid("layer_norm eps must be > 0"));
        }
        let inv_d = S::ONE / S::from_f64(d as f64);
        let mut value = Tensor::zeros(r, d);
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = self.nodes[a.0].value.row(i);
            let mut mean = S::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &x in row {
                let dm = x - mean;
                var += dm * dm;
            }
            var *= inv_d;
            let inv_std = S::ONE / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let g = self.nodes[gain.0].value.as_slice();
            let b = self.nodes[bias.0].value.as_slice();
            let out = value.row_mut(i);
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(value, rg, Op::LayerNorm { a, gain, bias, stats }))
    }

    /// Output row i equals `table[ids[i]]`; backward scatter-adds, so
    /// duplicate ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.shape(table);
        let mut value = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::invalid(format!(
                    "gather_rows id {} out of range for table with {} rows",
                    id, v
                )));
            }
            value
                .row_mut(i)
                .copy_from_slice(self.nodes[table.0].value.row(id as usize));
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(value, rg, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero parts"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", c, cols),
                ));
            }
            rows += r;
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for i in 0..t.rows() {
                value.row_mut(at + i).copy_from_slice(t.row(i));
            }
            at += t.rows();
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("range {}..{} out of {} rows", start, start + len, r),
            ));
        }
        let mut value = Tensor::zeros(len, c);
        for i in 0..len {
            value.row_mut(i).copy_from_slice(self.nodes[a.0].value.row(start + i));
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("range {}..{} out of {} cols", start, start + len, c),
            ));
        }
        let mut value = Tensor::zeros(r, len);
        for i in 0..r {
            value
                .row_mut(i)
                .copy_from_slice(&self.nodes[a.0].value.row(i)[start..start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero parts"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", r, rows),
                ));
            }
            cols += c;
        }
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                value.row_mut(i)[at..at + t.cols()].copy_from_slice(t.row(i));
                at += t.cols();
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Weighted mean of per-row negative log-likelihoods:
    /// sum_i w_i * (-log softmax(logits_i)[target_i]) / sum_i w_i.
    /// Zero-weight rows contribute nothing to the value or the gradient.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[S],
    ) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n || weights.len() != n {
            return Err(Error::invalid(format!(
                "weighted_cross_entropy: {} logit rows vs {} targets / {} weights",
                n,
                targets.len(),
                weights.len()
            )));
        }
        let mut weight_sum = S::ZERO;
        for &w in weights {
            if w < S::ZERO {
                return Err(Error::invalid("weighted_cross_entropy: negative weight"));
            }
            weight_sum += w;
        }
        if weight_sum <= S::ZERO {
            return Err(Error::invalid("weighted_cross_entropy: all weights are zero"));
        }
        let mut acc = S::ZERO;
        for i in 0..n {
            if weights[i] == S::ZERO {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(Error::invalid(format!(
                    "weighted_cross_entropy: target {} out of vocab {}",
                    t, v
                )));
            }
            let row = self.nodes[logits.0].value.row(i);
            acc += weights[i] * (log_sum_exp(row) - row[t]);
        }
        let value = Tensor::scalar(acc / weight_sum);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_sum,
            },
        ))
    }

    /// Inverted dropout: in training, zero each entry with probability `rate`
    /// and scale survivors by 1/(1-rate); outside training it is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        self.dropout_with(a, rate, rng, training, None)
    }

    /// Dropout whole rows at once, restricted to rows flagged eligible.
    pub fn dropout_rows(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut Rng,
        training: bool,
        eligible: &[bool],
    ) -> Result<Var> {
        if eligible.len() != self.shape(a).0 {
            return Err(Error::invalid(
                "dropout_rows: eligibility flags do not match row count",
            ));
        }
        self.dropout_with(a, rate, rng, training, Some(eligible))
    }

    fn dropout_with(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut Rng,
        training: bool,
        rows: Option<&[bool]>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {} not in [0, 1)", rate)));
        }
        if !training || rate == 0.0 {
            let value = self.nodes[a.0].value.clone();
            let rg = self.nodes[a.0].requires_grad;
            let mask = vec![S::ONE; value.numel()];
            return Ok(self.push(value, rg, Op::Dropout { a, mask }));
        }
        let (r, c) = self.shape(a);
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mut mask = vec![S::ONE; r * c];
        match rows {
            None => {
                for m in mask.iter_mut() {
                    *m = if rng.gen::<f64>() < rate { S::ZERO } else { keep };
                }
            }
            Some(eligible) => {
                for (i, &e) in eligible.iter().enumerate() {
                    if !e {
                        continue;
                    }
                    let m = if rng.gen::<f64>() < rate { S::ZERO } else { keep };
                    for x in mask[i * c..(i + 1) * c].iter_mut() {
                        *x = m;
                    }
                }
            }
        }
        let mut value = self.nodes[a.0].value.clone();
        for (x, &m) in value.as_mut_slice().iter_mut().zip(&mask) {
            *x *= m;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Dropout { a, mask }))
    }

    /// Same values, no differentiation history: backward through the result
    /// contributes nothing to the inputs that produced it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, false, Op::Detach)
    }

    /// Sum of all entries as a 1 x 1 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.nodes[a.0].value.as_slice().iter().copied().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss with seed 1. Visits each node at most
    /// once in reverse topological order; leaves that the loss does not reach
    /// simply receive no gradient (read them back as zeros).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.backward_seeded(loss, S::ONE)
    }

    /// Reverse sweep with an arbitrary seed on the scalar loss. Used to fold
    /// per-stream losses into a batch objective without a shared graph.
    pub fn backward_seeded(&self, loss: Var, seed: S) -> Result<Gradients<S>> {
        if self.released {
            return Err(Error::GraphReleased);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(seed));
        }
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_op(idx, &g, &mut grads);
            // Internal nodes do not need their buffers after dispatch.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Drop node buffers. Any later backward over this graph is an error.
    pub fn release(&mut self) {
        self.nodes.clear();
        self.released = true;
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Detach => {}
            Op::MatmulNn { a, b } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, mm_nt(g, bt));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, mm_tn(at, g));
                }
            }
            Op::MatmulNt { a, b } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, mm_nn(g, bt));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, mm_tn(g, at));
                }
            }
            Op::MatmulTn { a, b } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, mm_nt(bt, g));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, mm_nn(at, g));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[bias.0].requires_grad {
                    let (r, c) = g.shape();
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        let grow = g.row(i);
                        for (d, &x) in db.row_mut(0).iter_mut().zip(grow) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale { a, factor } => {
                let mut d = g.clone();
                d.scale_assign(*factor);
                self.accumulate(grads, *a, d);
            }
            Op::ScaleByScalar { a, s } => {
                let sv = self.nodes[s.0].value.item();
                if self.nodes[a.0].requires_grad {
                    let mut d = g.clone();
                    d.scale_assign(sv);
                    self.accumulate(grads, *a, d);
                }
                if self.nodes[s.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let ds: S = g
                        .as_slice()
                        .iter()
                        .zip(av.as_slice())
                        .map(|(&gx, &ax)| gx * ax)
                        .sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Mul { a, b } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = g.shape();
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(bt.as_slice())
                        .map(|(&gx, &bx)| gx * bx)
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_vec(r, c, data));
                }
                if self.nodes[b.0].requires_grad {
                    let (r, c) = g.shape();
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(at.as_slice())
                        .map(|(&gx, &ax)| gx * ax)
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_vec(r, c, data));
                }
            }
            Op::Gelu { a } => {
                let at = &self.nodes[a.0].value;
                let (r, c) = g.shape();
                let data = g
                    .as_slice()
                    .iter()
                    .zip(at.as_slice())
                    .map(|(&gx, &ax)| gx * gelu_derivative(ax))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(r, c, data));
            }
            Op::RowSoftmax { a } => {
                let p = &self.nodes[idx].value;
                let (r, c) = p.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let prow = p.row(i);
                    let grow = g.row(i);
                    let dot: S = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                    let drow = d.row_mut(i);
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { a, gain, bias, stats } => {
                let at = &self.nodes[a.0].value;
                let gt = self.nodes[gain.0].value.as_slice();
                let (r, c) = at.shape();
                let inv_c = S::ONE / S::from_f64(c as f64);
                if self.nodes[a.0].requires_grad {
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        let (mean, inv_std) = stats[i];
                        let arow = at.row(i);
                        let grow = g.row(i);
                        let mut sum_gy = S::ZERO;
                        let mut sum_gy_xhat = S::ZERO;
                        for j in 0..c {
                            let gy = grow[j] * gt[j];
                            let xhat = (arow[j] - mean) * inv_std;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        let mean_gy = sum_gy * inv_c;
                        let mean_gy_xhat = sum_gy_xhat * inv_c;
                        let drow = d.row_mut(i);
                        for j in 0..c {
                            let gy = grow[j] * gt[j];
                            let xhat = (arow[j] - mean) * inv_std;
                            drow[j] = inv_std * (gy - mean_gy - xhat * mean_gy_xhat);
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.nodes[gain.0].requires_grad {
                    let mut dg = Tensor::zeros(1, c);
                    for i in 0..r {
                        let (mean, inv_std) = stats[i];
                        let arow = at.row(i);
                        let grow = g.row(i);
                        let dgr = dg.row_mut(0);
                        for j in 0..c {
                            dgr[j] += grow[j] * (arow[j] - mean) * inv_std;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        let grow = g.row(i);
                        let dbr = db.row_mut(0);
                        for j in 0..c {
                            dbr[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.nodes[table.0].value.shape();
                let mut dt = Tensor::zeros(v, d);
                for (i, &id) in ids.iter().enumerate() {
                    let grow = g.row(i);
                    let trow = dt.row_mut(id as usize);
                    for (t, &x) in trow.iter_mut().zip(grow) {
                        *t += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.nodes[p.0].value.shape();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(g.row(at + i));
                        }
                        self.accumulate(grads, p, d);
                    }
                    at += r;
                }
            }
            Op::SliceRows { a, start } => {
                let (ra, c) = self.nodes[a.0].value.shape();
                let mut d = Tensor::zeros(ra, c);
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols { a, start } => {
                let (ra, ca) = self.nodes[a.0].value.shape();
                let mut d = Tensor::zeros(ra, ca);
                for i in 0..ra {
                    d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.nodes[p.0].value.shape();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[at..at + c]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    at += c;
                }
            }
            Op::WeightedCe { logits, targets, weights, weight_sum } => {
                let seed = g.item();
                let lt = &self.nodes[logits.0].value;
                let (n, v) = lt.shape();
                let mut d = Tensor::zeros(n, v);
                let mut prob = vec![S::ZERO; v];
                for i in 0..n {
                    if weights[i] == S::ZERO {
                        continue;
                    }
                    softmax_row_into(lt.row(i), None, &mut prob);
                    let coeff = seed * weights[i] / *weight_sum;
                    let drow = d.row_mut(i);
                    for j in 0..v {
                        drow[j] = coeff * prob[j];
                    }
                    drow[targets[i] as usize] -= coeff;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Dropout { a, mask } => {
                let (r, c) = g.shape();
                let data = g
                    .as_slice()
                    .iter()
                    .zip(mask)
                    .map(|(&gx, &m)| gx * m)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(r, c, data));
            }
            Op::Sum { a } => {
                let (r, c) = self.nodes[a.0].value.shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
        }
    }
}

#[inline]
fn gelu_forward<S: Scalar>(x: S) -> S {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x.powi(3));
    half * x * (S::ONE + inner.tanh())
}

#[inline]
fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x.powi(3));
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * k * x * x)
}

/// Numerically stable softmax of one row into `out`, honoring an optional
/// additive mask row. Fully masked rows become all zeros.
fn softmax_row_into<S: Scalar>(row: &[S], mask: Option<&[S]>, out: &mut [S]) {
    let threshold = S::mask_threshold();
    let mut max = S::mask_neg();
    let mut any_open = false;
    for j in 0..row.len() {
        let m = mask.map_or(S::ZERO, |mm| mm[j]);
        if m > threshold {
            any_open = true;
            let s = row[j] + m;
            if s > max {
                max = s;
            }
        }
    }
    if !any_open {
        for o in out.iter_mut() {
            *o = S::ZERO;
        }
        return;
    }
    let mut denom = S::ZERO;
    for j in 0..row.len() {
        let m = mask.map_or(S::ZERO, |mm| mm[j]);
        if m > threshold {
            let e = (row[j] + m - max).exp();
            out[j] = e;
            denom += e;
        } else {
            out[j] = S::ZERO;
        }
    }
    let inv = S::ONE / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = row[0];
    for &x in row {
        max = max.max_val(x);
    }
    let mut acc = S::ZERO;
    for &x in row {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng as _;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_row_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![0.0, 0.0, 0.0]), true);
        let s = g.row_softmax(a, None).unwrap();
        for &p in g.value(s).as_slice() {
            assert!(close(p, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_mask_forces_zero_weight() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![0.7, 0.3]), true);
        let mask = Tensor::row_vector(vec![0.0, f64::mask_neg()]);
        let s = g.row_softmax(a, Some(&mask)).unwrap();
        assert_eq!(g.value(s).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![0.7, 0.3]), true);
        let mask = Tensor::row_vector(vec![f64::mask_neg(); 2]);
        let s = g.row_softmax(a, Some(&mask)).unwrap();
        assert_eq!(g.value(s).as_slice(), &[0.0, 0.0]);
        // And the gradient through a zero row is zero.
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![5.0, 5.0, 5.0]), true);
        let gain = g.leaf(Tensor::row_vector(vec![1.0, 1.0, 1.0]), true);
        let bias = g.leaf(Tensor::row_vector(vec![0.0, 0.0, 0.0]), true);
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        for &v in g.value(y).as_slice() {
            assert!(close(v, 0.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_unit_variance_row_is_preserved() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![1.0, -1.0]), true);
        let gain = g.leaf(Tensor::row_vector(vec![1.0, 1.0]), true);
        let bias = g.leaf(Tensor::row_vector(vec![0.0, 0.0]), true);
        let y = g.layer_norm(a, gain, bias, 1e-12).unwrap();
        assert!(close(g.value(y).get(0, 0), 1.0, 1e-9));
        assert!(close(g.value(y).get(0, 1), -1.0, 1e-9));
    }

    #[test]
    fn gather_rows_first_row_and_duplicate_accumulation() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.leaf(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]),
            true,
        );
        let picked = g.gather_rows(table, &[0]).unwrap();
        assert_eq!(g.value(picked).as_slice(), &[1.0, 2.0]);

        let dup = g.gather_rows(table, &[2, 2]).unwrap();
        let loss = g.sum(dup);
        let grads = g.backward(loss).unwrap();
        let dt = grads.get(table).unwrap();
        assert_eq!(dt.row(2), &[2.0, 2.0]);
        assert_eq!(dt.row(0), &[0.0, 0.0]);

        assert!(g.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_gives_ln_v() {
        let v = 11;
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(3, v), true);
        let loss = g
            .weighted_cross_entropy(logits, &[0, 5, 10], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!(close(g.value(loss).item(), (v as f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_zero_weight_rows_are_excluded() {
        let mut g: Graph<f64> = Graph::new();
        let rows = vec![vec![0.3, -0.1, 0.9], vec![2.0, -5.0, 0.4]];
        let logits = g.leaf(Tensor::from_rows(&rows), true);
        let both = g.weighted_cross_entropy(logits, &[2, 0], &[1.0, 0.0]).unwrap();

        let mut g1: Graph<f64> = Graph::new();
        let l1 = g1.leaf(Tensor::from_rows(&rows[..1]), true);
        let only0 = g1.weighted_cross_entropy(l1, &[2], &[1.0]).unwrap();
        assert!(close(g.value(both).item(), g1.value(only0).item(), 1e-12));

        // Zero-weight position contributes no gradient either.
        let grads = g.backward(both).unwrap();
        assert_eq!(grads.get(logits).unwrap().row(1), &[0.0, 0.0, 0.0]);

        assert!(g
            .weighted_cross_entropy(logits, &[0, 0], &[0.0, 0.0])
            .is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::seed_from_u64(1);
        let mut g: Graph<f64> = Graph::new();
        let x = Tensor::from_vec(4, 4, (0..16).map(|i| i as f64).collect());
        let a = g.leaf(x.clone(), true);
        let d0 = g.dropout(a, 0.0, &mut rng, true).unwrap();
        assert_eq!(g.value(d0), &x);
        let deval = g.dropout(a, 0.9, &mut rng, false).unwrap();
        assert_eq!(g.value(deval), &x);
        assert!(g.dropout(a, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_survivor_statistics() {
        let n = 100_000;
        let mut rng = Rng::seed_from_u64(42);
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::filled(1, n, 1.0), false);
        let d = g.dropout(a, 0.5, &mut rng, true).unwrap();
        let out = g.value(d).as_slice();
        let survivors = out.iter().filter(|&&x| x != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {}", survivors);
        let mean: f64 = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {}", mean);
    }

    #[test]
    fn detach_preserves_values_and_kills_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![0.25, -1.5]]), true);
        let w = g.leaf(Tensor::from_rows(&[vec![2.0], vec![3.0]]), true);
        let xd = g.detach(x);
        assert_eq!(g.value(xd), g.value(x));
        let y = g.matmul(xd, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none(), "detached input must get no gradient");
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 3), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_released_graphs() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2), true);
        assert!(g.backward(x).is_err());
        let loss = g.sum(x);
        assert!(g.backward(loss).is_ok());
        g.release();
        assert!(matches!(g.backward(loss), Err(Error::GraphReleased)));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = Rng::seed_from_u64(5);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(super::super::gradcheck::well_spread(4, 6, 9), true);
        let w = g.leaf(super::super::gradcheck::well_spread(6, 3, 10), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.dropout(h, 0.2, &mut rng, true).unwrap();
        let p = g.row_softmax(h, None).unwrap();
        let loss = g.weighted_cross_entropy(p, &[0, 2, 1, 0], &[1.0, 0.5, 2.0, 1.0]).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        for v in [x, w] {
            let a = g1.get(v).unwrap().as_slice();
            let b = g2.get(v).unwrap().as_slice();
            assert_eq!(a.len(), b.len());
            for (l, r) in a.iter().zip(b) {
                assert_eq!(l.to_bits(), r.to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3), true);
        let b = g.leaf(Tensor::zeros(2, 3), true);
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn finite_inputs_produce_finite_outputs_through_every_primitive() {
        let mut rng = Rng::seed_from_u64(3);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(super::super::gradcheck::well_spread(4, 6, 1), true);
        let w = g.leaf(super::super::gradcheck::well_spread(6, 4, 2), true);
        let bias = g.leaf(super::super::gradcheck::well_spread(1, 4, 3), true);
        let gain = g.leaf(Tensor::filled(1, 4, 1.0), true);
        let gate = g.leaf(Tensor::scalar(0.7), true);
        let mut outs = Vec::new();
        let h = g.matmul(x, w).unwrap();
        outs.push(h);
        let h = g.add_bias(h, bias).unwrap();
        outs.push(h);
        let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
        outs.push(h);
        let h = g.gelu(h);
        outs.push(h);
        let h = g.scale_by_scalar(h, gate).unwrap();
        outs.push(h);
        let mut mask = Tensor::zeros(4, 4);
        mask.set(0, 3, f64::mask_neg());
        let p = g.row_softmax(h, Some(&mask)).unwrap();
        outs.push(p);
        let d = g.dropout(p, 0.4, &mut rng, true).unwrap();
        outs.push(d);
        let picked = g.gather_rows(w, &[0, 5, 5]).unwrap();
        outs.push(picked);
        let cat = g.concat_rows(&[picked, picked]).unwrap();
        outs.push(cat);
        let sl = g.slice_cols(cat, 1, 2).unwrap();
        outs.push(sl);
        let ce = g.weighted_cross_entropy(d, &[0, 1, 2, 3], &[1.0, 0.5, 0.0, 2.0]).unwrap();
        outs.push(ce);
        for v in outs {
            assert!(g.value(v).all_finite(), "non-finite output at {:?}", v);
        }
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2), true);
        let unused = g.leaf(Tensor::zeros(5, 5), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
    }
}
