//! Tape-based reverse-mode differentiation.
//!
//! A `Tape` records every primitive as it executes. Forward values are
//! computed eagerly; `backward` walks the node list in reverse, accumulating
//! gradients. The primitive set is deliberately small: elementwise add/mul,
//! scalar scale, dense matmul, row softmax / log-softmax, masked attention,
//! embedding lookup, full summation, and a weighted gather-sum used to build
//! masked log-likelihood objectives.
//!
//! Everything is plain `f64` with fixed iteration order, so two runs over the
//! same inputs produce bit-identical values and gradients.

use std::sync::Arc;

use super::mask::AttentionMask;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: bool },
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    MatMul(VarId, VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    MaskedAttention {
        q: VarId,
        k: VarId,
        v: VarId,
        mask: Arc<AttentionMask>,
    },
    Embedding {
        table: VarId,
        indices: Arc<Vec<usize>>,
    },
    Sum(VarId),
    GatherWeightedSum {
        x: VarId,
        picks: Arc<Vec<(usize, usize)>>,
        weight: f64,
    },
}

pub struct Tape {
    seed: u64,
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    param_ids: Vec<VarId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// `seed` is recorded for provenance; the primitives themselves are
    /// deterministic.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            seed,
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            param_ids: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient buffer of a node after `backward`, if it received any.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Ids of all nodes registered as parameters, in registration order.
    pub fn params(&self) -> &[VarId] {
        &self.param_ids
    }

    /// Whether a node is a parameter leaf.
    pub fn is_param(&self, id: VarId) -> bool {
        matches!(self.ops.get(id.0), Some(Op::Leaf { param: true }))
    }

    fn push(&mut self, op: Op, val: Tensor) -> VarId {
        let id = VarId(self.ops.len());
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(None);
        id
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, t: Tensor) -> VarId {
        let id = self.push(Op::Leaf { param: true }, t);
        self.param_ids.push(id);
        id
    }

    /// Register a non-trainable input leaf.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf { param: false }, t)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let val = eval_add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), val))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let val = eval_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), val))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let val = eval_scale(self.value(a), c);
        Ok(self.push(Op::Scale(a, c), val))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let val = eval_matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), val))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let val = eval_softmax_rows(self.value(x))?;
        Ok(self.push(Op::SoftmaxRows(x), val))
    }

    pub fn log_softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let val = eval_log_softmax_rows(self.value(x))?;
        Ok(self.push(Op::LogSoftmaxRows(x), val))
    }

    /// Scaled dot-product attention restricted to the mask. Rows whose mask
    /// is all-zero produce an all-zero output row.
    pub fn masked_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        mask: &AttentionMask,
    ) -> Result<VarId> {
        let mask = Arc::new(mask.clone());
        let val = eval_masked_attention(self.value(q), self.value(k), self.value(v), &mask)?;
        Ok(self.push(Op::MaskedAttention { q, k, v, mask }, val))
    }

    /// Row gather: output row `r` is `table[indices[r]]`.
    pub fn embedding(&mut self, table: VarId, indices: &[usize]) -> Result<VarId> {
        let indices = Arc::new(indices.to_vec());
        let val = eval_embedding(self.value(table), &indices)?;
        Ok(self.push(Op::Embedding { table, indices }, val))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let val = eval_sum(self.value(x));
        Ok(self.push(Op::Sum(x), val))
    }

    /// `weight * sum over picks of x[r][c]`, as a scalar node.
    pub fn gather_weighted_sum(
        &mut self,
        x: VarId,
        picks: &[(usize, usize)],
        weight: f64,
    ) -> Result<VarId> {
        let picks = Arc::new(picks.to_vec());
        let val = eval_gather_weighted_sum(self.value(x), &picks, weight)?;
        Ok(self.push(Op::GatherWeightedSum { x, picks, weight }, val))
    }

    /// Recompute every node's forward value from the recorded leaves, without
    /// touching the tape. Lets callers check that the cached values replay
    /// bit-identically.
    pub fn replay_values(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Leaf { .. } => self.vals[i].clone(),
                Op::Add(a, b) => eval_add(&vals[a.0], &vals[b.0])?,
                Op::Mul(a, b) => eval_mul(&vals[a.0], &vals[b.0])?,
                Op::Scale(a, c) => eval_scale(&vals[a.0], *c),
                Op::MatMul(a, b) => eval_matmul(&vals[a.0], &vals[b.0])?,
                Op::SoftmaxRows(x) => eval_softmax_rows(&vals[x.0])?,
                Op::LogSoftmaxRows(x) => eval_log_softmax_rows(&vals[x.0])?,
                Op::MaskedAttention { q, k, v, mask } => {
                    eval_masked_attention(&vals[q.0], &vals[k.0], &vals[v.0], mask)?
                }
                Op::Embedding { table, indices } => eval_embedding(&vals[table.0], indices)?,
                Op::Sum(x) => eval_sum(&vals[x.0]),
                Op::GatherWeightedSum { x, picks, weight } => {
                    eval_gather_weighted_sum(&vals[x.0], picks, *weight)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Seed the gradient of `output` and propagate through the tape in
    /// reverse node order. Gradients from a previous `backward` call are
    /// discarded.
    pub fn backward(&mut self, output: VarId, output_gradient: &Tensor) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::state("backward called before any forward pass"));
        }
        if output.0 >= self.ops.len() {
            return Err(Error::state("backward output id is not on this tape"));
        }
        if output_gradient.shape() != self.vals[output.0].shape() {
            return Err(Error::dimension(
                "output gradient shape differs from output shape",
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output.0] = Some(output_gradient.values().to_vec());

        for i in (0..self.ops.len()).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            // Nodes past `output` cannot influence it; their seeds stay None.
            self.backprop_node(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Convenience for scalar outputs: seed with gradient 1.
    pub fn backward_scalar(&mut self, output: VarId) -> Result<()> {
        if !self.vals[output.0].is_scalar() {
            return Err(Error::dimension("backward_scalar on non-scalar output"));
        }
        self.backward(output, &Tensor::scalar(1.0))
    }

    fn accum(&mut self, id: VarId, delta: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) -> Result<()> {
        let op = self.ops[i].clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(a, gout);
                self.accum(b, gout);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = self.vals[b.0]
                    .values()
                    .iter()
                    .zip(gout)
                    .map(|(bv, g)| bv * g)
                    .collect();
                let gb: Vec<f64> = self.vals[a.0]
                    .values()
                    .iter()
                    .zip(gout)
                    .map(|(av, g)| av * g)
                    .collect();
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gout.iter().map(|g| c * g).collect();
                self.accum(a, &ga);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, kdim, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC * B^T
                let mut ga = vec![0.0; m * kdim];
                for r in 0..m {
                    for kk in 0..kdim {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += gout[r * n + c] * bv.values()[kk * n + c];
                        }
                        ga[r * kdim + kk] = s;
                    }
                }
                // dB = A^T * dC
                let mut gb = vec![0.0; kdim * n];
                for kk in 0..kdim {
                    for c in 0..n {
                        let mut s = 0.0;
                        for r in 0..m {
                            s += av.values()[r * kdim + kk] * gout[r * n + c];
                        }
                        gb[kk * n + c] = s;
                    }
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.vals[i];
                let (rows, cols) = (y.rows(), y.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yrow = &y.values()[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.accum(x, &gx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &self.vals[i];
                let (rows, cols) = (y.rows(), y.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yrow = &y.values()[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..cols {
                        gx[r * cols + c] = grow[c] - yrow[c].exp() * gsum;
                    }
                }
                self.accum(x, &gx);
            }
            Op::MaskedAttention { q, k, v, mask } => {
                let (gq, gk, gv) = backprop_masked_attention(
                    &self.vals[q.0],
                    &self.vals[k.0],
                    &self.vals[v.0],
                    &mask,
                    gout,
                );
                self.accum(q, &gq);
                self.accum(k, &gk);
                self.accum(v, &gv);
            }
            Op::Embedding { table, indices } => {
                let t = &self.vals[table.0];
                let cols = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gt[idx * cols + c] += gout[r * cols + c];
                    }
                }
                self.accum(table, &gt);
            }
            Op::Sum(x) => {
                let g = gout[0];
                let gx = vec![g; self.vals[x.0].len()];
                self.accum(x, &gx);
            }
            Op::GatherWeightedSum { x, picks, weight } => {
                let xv = &self.vals[x.0];
                let cols = xv.cols();
                let g = gout[0] * weight;
                let mut gx = vec![0.0; xv.len()];
                for &(r, c) in picks.iter() {
                    gx[r * cols + c] += g;
                }
                self.accum(x, &gx);
            }
        }
        Ok(())
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::dimension(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn eval_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "add shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

fn eval_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "mul shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

fn eval_scale(a: &Tensor, c: f64) -> Tensor {
    let values = a.values().iter().map(|x| c * x).collect();
    Tensor::new(a.shape().to_vec(), values).expect("same shape")
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul lhs")?;
    require_matrix(b, "matmul rhs")?;
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul inner dims {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for kk in 0..ka {
            let av = a.values()[r * ka + kk];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out[r * n + c] += av * b.values()[kk * n + c];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn eval_softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_matrix(x, "softmax input")?;
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.values()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            z += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= z;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn eval_log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_matrix(x, "log-softmax input")?;
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.values()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..cols {
            z += (row[c] - m).exp();
        }
        let lse = m + z.ln();
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn eval_masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    require_matrix(q, "attention query")?;
    require_matrix(k, "attention key")?;
    require_matrix(v, "attention value")?;
    if q.cols() != k.cols() {
        return Err(Error::dimension("query/key feature dims differ"));
    }
    if k.rows() != v.rows() {
        return Err(Error::dimension("key/value row counts differ"));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::dimension(format!(
            "mask {}x{} does not fit q rows {} / k rows {}",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let d = q.cols();
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.rows() * dv];
    let mut allowed: Vec<usize> = Vec::with_capacity(k.rows());
    let mut logits: Vec<f64> = Vec::with_capacity(k.rows());
    for i in 0..q.rows() {
        allowed.clear();
        allowed.extend((0..k.rows()).filter(|&j| mask.allows(i, j)));
        if allowed.is_empty() {
            continue; // all-zero mask row yields a zero output row
        }
        logits.clear();
        let mut maxv = f64::NEG_INFINITY;
        for &j in &allowed {
            let mut s = 0.0;
            for c in 0..d {
                s += q.values()[i * d + c] * k.values()[j * d + c];
            }
            let s = s * scale;
            logits.push(s);
            if s > maxv {
                maxv = s;
            }
        }
        let mut z = 0.0;
        for s in logits.iter_mut() {
            *s = (*s - maxv).exp();
            z += *s;
        }
        for (idx, &j) in allowed.iter().enumerate() {
            let w = logits[idx] / z;
            for c in 0..dv {
                out[i * dv + c] += w * v.values()[j * dv + c];
            }
        }
    }
    Tensor::new(vec![q.rows(), dv], out)
}

fn backprop_masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let dv = v.cols();
    let n_keys = k.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut allowed: Vec<usize> = Vec::with_capacity(n_keys);
    let mut weights: Vec<f64> = Vec::with_capacity(n_keys);
    let mut dots: Vec<f64> = Vec::with_capacity(n_keys);
    for i in 0..q.rows() {
        allowed.clear();
        allowed.extend((0..n_keys).filter(|&j| mask.allows(i, j)));
        if allowed.is_empty() {
            continue;
        }
        weights.clear();
        let mut maxv = f64::NEG_INFINITY;
        for &j in &allowed {
            let mut s = 0.0;
            for c in 0..d {
                s += q.values()[i * d + c] * k.values()[j * d + c];
            }
            let s = s * scale;
            weights.push(s);
            if s > maxv {
                maxv = s;
            }
        }
        let mut z = 0.0;
        for s in weights.iter_mut() {
            *s = (*s - maxv).exp();
            z += *s;
        }
        for w in weights.iter_mut() {
            *w /= z;
        }
        // dv, then dlogits = w * (dot(gout, v_j) - sum_l w_l dot(gout, v_l))
        let grow = &gout[i * dv..(i + 1) * dv];
        dots.clear();
        let mut wdot = 0.0;
        for (idx, &j) in allowed.iter().enumerate() {
            let mut s = 0.0;
            for c in 0..dv {
                s += grow[c] * v.values()[j * dv + c];
            }
            dots.push(s);
            wdot += weights[idx] * s;
            for c in 0..dv {
                gv[j * dv + c] += weights[idx] * grow[c];
            }
        }
        for (idx, &j) in allowed.iter().enumerate() {
            let dlogit = weights[idx] * (dots[idx] - wdot) * scale;
            for c in 0..d {
                gq[i * d + c] += dlogit * k.values()[j * d + c];
                gk[j * d + c] += dlogit * q.values()[i * d + c];
            }
        }
    }
    (gq, gk, gv)
}

fn eval_embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    require_matrix(table, "embedding table")?;
    let cols = table.cols();
    let mut out = Vec::with_capacity(indices.len() * cols);
    for &idx in indices {
        if idx >= table.rows() {
            return Err(Error::validation(format!(
                "embedding index {idx} out of range (table has {} rows)",
                table.rows()
            )));
        }
        out.extend_from_slice(&table.values()[idx * cols..(idx + 1) * cols]);
    }
    Tensor::new(vec![indices.len(), cols], out)
}

fn eval_sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.values().iter().sum())
}

fn eval_gather_weighted_sum(
    x: &Tensor,
    picks: &[(usize, usize)],
    weight: f64,
) -> Result<Tensor> {
    require_matrix(x, "gather input")?;
    let (rows, cols) = (x.rows(), x.cols());
    let mut s = 0.0;
    for &(r, c) in picks {
        if r >= rows || c >= cols {
            return Err(Error::validation(format!(
                "gather pick ({r},{c}) out of range for {rows}x{cols}"
            )));
        }
        s += x.values()[r * cols + c];
    }
    Ok(Tensor::scalar(weight * s))
}
