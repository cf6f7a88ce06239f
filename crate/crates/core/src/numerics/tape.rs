use std::collections::BTreeSet;
use std::sync::Arc;

use super::{Rng, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded primitive. Inputs always precede the output on the tape,
/// so a single reverse sweep visits operations in valid order.
enum Op<F> {
    Leaf,
    /// out = a @ b, a: [m x k], b: [k x n]
    Matmul { a: TensorId, b: TensorId },
    /// out = x @ w^T (+ bias per row where the mask is set), w: [out x in]
    Linear {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        bias_mask: Option<Arc<Vec<bool>>>,
    },
    Add { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: F },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    GatherRows { x: TensorId, indices: Arc<Vec<usize>> },
    /// out row g = mean of the rows of x listed in groups[g]; empty group -> zero row
    GroupMeanRows { x: TensorId, groups: Arc<Vec<Vec<usize>>> },
    SumAll { x: TensorId },
    /// Elementwise stable binary cross entropy on logits against 0/1 targets.
    BceWithLogits { logits: TensorId, targets: Arc<Vec<F>> },
    /// Elementwise product with a fixed 0-or-1/(1-rate) mask drawn at record time.
    Dropout { x: TensorId, mask: Arc<Vec<F>> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// The tape owns every intermediate value: recording an operation computes
/// its result immediately and stores it, so [`Tape::backward`] can replay the
/// record in reverse with all forward values at hand. Gradients accumulate at
/// fan-in points; leaves that the loss never touches simply end up with no
/// entry (read back as zeros via [`Gradients::or_zeros`]).
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Record a leaf; whether gradients flow to it follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<F>) -> TensorId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> TensorId {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).unwrap();
        }
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, t: Tensor<F>) -> TensorId {
        let t = t.with_grad();
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Every id that appears as an input to some recorded operation.
    pub fn op_input_ids(&self) -> BTreeSet<TensorId> {
        let mut used = BTreeSet::new();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } | Op::Add { a, b } => {
                    used.insert(*a);
                    used.insert(*b);
                }
                Op::Linear { x, w, bias, .. } => {
                    used.insert(*x);
                    used.insert(*w);
                    if let Some(b) = bias {
                        used.insert(*b);
                    }
                }
                Op::Scale { x, .. }
                | Op::Relu { x }
                | Op::Sigmoid { x }
                | Op::SliceRows { x, .. }
                | Op::GatherRows { x, .. }
                | Op::GroupMeanRows { x, .. }
                | Op::SumAll { x }
                | Op::Dropout { x, .. } => {
                    used.insert(*x);
                }
                Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
                    used.extend(parts.iter().copied());
                }
                Op::BceWithLogits { logits, .. } => {
                    used.insert(*logits);
                }
            }
        }
        used
    }

    fn rank2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(id);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ---- forward operations -------------------------------------------------

    /// Standard matrix product [m x k] @ [k x n] -> [m x n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// Affine map out = x @ w^T + bias, with w stored [out_dim x in_dim].
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        self.linear_masked(x, w, bias, None)
    }

    /// [`Tape::linear`] where the bias is only added to rows whose mask entry
    /// is true. Used by the graph convolution so relations with no neighbors
    /// at a node contribute neither message nor bias there.
    pub fn linear_masked(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        bias_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorId> {
        let (n, d_in) = self.rank2(x, "linear")?;
        let (d_out, d_in2) = self.rank2(w, "linear")?;
        if d_in != d_in2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![n, d_in],
                rhs: vec![d_out, d_in2],
            });
        }
        let mut out = mm_nt(self.value(x).data(), self.value(w).data(), n, d_in, d_out);
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != d_out {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![d_out],
                    rhs: bt.shape().to_vec(),
                });
            }
            if let Some(mask) = &bias_mask {
                if mask.len() != n {
                    return Err(Error::Contract(format!(
                        "bias mask length {} != row count {n}",
                        mask.len()
                    )));
                }
            }
            let bdata = bt.data().to_vec();
            for r in 0..n {
                let on = bias_mask.as_ref().is_none_or(|m| m[r]);
                if on {
                    for o in 0..d_out {
                        out[r * d_out + o] += bdata[o];
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::from_vec(vec![n, d_out], out)?,
            Op::Linear {
                x,
                w,
                bias,
                bias_mask,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: TensorId, c: F) -> TensorId {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Scale { x, c },
            needs,
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| v.max(F::zero())).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, data).unwrap(), Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| super::sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Sigmoid { x },
            needs,
        )
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, cols) = self.rank2(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![total_rows, cols],
                    rhs: vec![r, c],
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::from_vec(vec![total_rows, cols], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenate rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (rows, _) = self.rank2(parts[0], "concat_cols")?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, total_cols],
                    rhs: vec![r, c],
                });
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                data.extend_from_slice(t.row(r));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::from_vec(vec![rows, total_cols], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Rows start..end of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (rows, cols) = self.rank2(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(vec![end - start, cols], data)?,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    /// `out[t] = x[indices[t]]`; duplicate indices are fine (gradients add up).
    pub fn gather_rows(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let (rows, cols) = self.rank2(x, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows of zero indices".into()));
        }
        for &i in &indices {
            if i >= rows {
                return Err(Error::LookupOutOfRange {
                    index: i,
                    table_rows: rows,
                });
            }
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(t.row(i));
        }
        let n = indices.len();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(vec![n, cols], data)?,
            Op::GatherRows {
                x,
                indices: Arc::new(indices),
            },
            needs,
        ))
    }

    /// Row lookup into an embedding table; same primitive as
    /// [`Tape::gather_rows`] under the name embedding call sites expect.
    pub fn embedding_lookup(&mut self, table: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        self.gather_rows(table, indices)
    }

    /// Column-wise mean over all rows -> [1 x d].
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, _) = self.rank2(x, "mean_rows")?;
        self.group_mean_rows(x, Arc::new(vec![(0..rows).collect()]))
    }

    /// Row g of the output is the mean of x's rows listed in `groups[g]`;
    /// an empty group yields a zero row (and contributes no gradient).
    pub fn group_mean_rows(
        &mut self,
        x: TensorId,
        groups: Arc<Vec<Vec<usize>>>,
    ) -> Result<TensorId> {
        let (rows, cols) = self.rank2(x, "group_mean_rows")?;
        if groups.is_empty() {
            return Err(Error::Contract("group_mean_rows of zero groups".into()));
        }
        let t = self.value(x);
        let mut data = vec![F::zero(); groups.len() * cols];
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            for &v in group {
                if v >= rows {
                    return Err(Error::LookupOutOfRange {
                        index: v,
                        table_rows: rows,
                    });
                }
                for c in 0..cols {
                    data[g * cols + c] += t.at(v, c);
                }
            }
            let inv = F::one() / F::from_f64_lossy(group.len() as f64);
            for c in 0..cols {
                data[g * cols + c] *= inv;
            }
        }
        let g = groups.len();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(vec![g, cols], data)?,
            Op::GroupMeanRows { x, groups },
            needs,
        ))
    }

    /// Sum of all entries -> scalar of shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    /// Elementwise stable binary cross entropy; `targets` must be 0 or 1 and
    /// match the logits element count.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: Vec<F>) -> Result<TensorId> {
        let t = self.value(logits);
        if targets.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets
            .iter()
            .any(|&y| y != F::zero() && y != F::one())
        {
            return Err(Error::Contract("bce targets must be 0 or 1".into()));
        }
        let data: Vec<F> = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| super::bce_with_logits(z, y))
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            Op::BceWithLogits {
                logits,
                targets: Arc::new(targets),
            },
            needs,
        ))
    }

    /// Inverted dropout: in training mode each entry survives with
    /// probability 1-rate and is scaled by 1/(1-rate); in evaluation mode
    /// the input passes through untouched (no op recorded).
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = F::from_f64_lossy(1.0 / (1.0 - rate));
        let t = self.value(x);
        let mask: Vec<F> = (0..t.numel())
            .map(|_| {
                if rng.uniform() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<F> = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            Op::Dropout {
                x,
                mask: Arc::new(mask),
            },
            needs,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of a scalar loss with respect to everything on the tape.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<F>> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(d_out) = grads[id].take() else {
                continue;
            };
            // Leaves keep their accumulated gradient; interior nodes hand it on.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(d_out);
                continue;
            }
            self.backward_op(id, &d_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], id: TensorId, contribution: &[F]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += *c;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&self, id: usize, d_out: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("handled by caller"),

            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.nodes[a.0].needs_grad {
                    // d_a = d_out @ b^T
                    let d_a = mm_nt(d_out, self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, &d_a);
                }
                if self.nodes[b.0].needs_grad {
                    // d_b = a^T @ d_out
                    let d_b = mm_tn(self.value(*a).data(), d_out, m, k, n);
                    self.accum(grads, *b, &d_b);
                }
            }

            Op::Linear {
                x,
                w,
                bias,
                bias_mask,
            } => {
                let (n, d_in) = (self.value(*x).rows(), self.value(*x).cols());
                let d_o = self.value(*w).rows();
                if self.nodes[x.0].needs_grad {
                    // d_x = d_out @ w
                    let d_x = mm_nn(d_out, self.value(*w).data(), n, d_o, d_in);
                    self.accum(grads, *x, &d_x);
                }
                if self.nodes[w.0].needs_grad {
                    // d_w = d_out^T @ x
                    let d_w = mm_tn(d_out, self.value(*x).data(), n, d_o, d_in);
                    self.accum(grads, *w, &d_w);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].needs_grad {
                        let mut d_b = vec![F::zero(); d_o];
                        for r in 0..n {
                            if bias_mask.as_ref().is_none_or(|m| m[r]) {
                                for o in 0..d_o {
                                    d_b[o] += d_out[r * d_o + o];
                                }
                            }
                        }
                        self.accum(grads, *b, &d_b);
                    }
                }
            }

            Op::Add { a, b } => {
                self.accum(grads, *a, d_out);
                self.accum(grads, *b, d_out);
            }

            Op::Scale { x, c } => {
                let d_x: Vec<F> = d_out.iter().map(|&d| d * *c).collect();
                self.accum(grads, *x, &d_x);
            }

            Op::Relu { x } => {
                let d_x: Vec<F> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(d_out)
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                self.accum(grads, *x, &d_x);
            }

            Op::Sigmoid { x } => {
                let out = self.nodes[id].value.data();
                let d_x: Vec<F> = out
                    .iter()
                    .zip(d_out)
                    .map(|(&o, &d)| d * o * (F::one() - o))
                    .collect();
                self.accum(grads, *x, &d_x);
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    self.accum(grads, p, &d_out[offset..offset + numel]);
                    offset += numel;
                }
            }

            Op::ConcatCols { parts } => {
                let rows = self.value(parts[0]).rows();
                let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut col_offset = 0;
                for &p in parts {
                    if !self.nodes[p.0].needs_grad {
                        col_offset += self.value(p).cols();
                        continue;
                    }
                    let c = self.value(p).cols();
                    let mut d_p = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        d_p[r * c..(r + 1) * c].copy_from_slice(
                            &d_out[r * total_cols + col_offset..r * total_cols + col_offset + c],
                        );
                    }
                    self.accum(grads, p, &d_p);
                    col_offset += c;
                }
            }

            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                let mut d_x = vec![F::zero(); self.value(*x).numel()];
                d_x[start * cols..start * cols + d_out.len()].copy_from_slice(d_out);
                self.accum(grads, *x, &d_x);
            }

            Op::GatherRows { x, indices } => {
                let cols = self.value(*x).cols();
                let mut d_x = vec![F::zero(); self.value(*x).numel()];
                for (t, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        d_x[i * cols + c] += d_out[t * cols + c];
                    }
                }
                self.accum(grads, *x, &d_x);
            }

            Op::GroupMeanRows { x, groups } => {
                let cols = self.value(*x).cols();
                let mut d_x = vec![F::zero(); self.value(*x).numel()];
                for (g, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = F::one() / F::from_f64_lossy(group.len() as f64);
                    for &v in group {
                        for c in 0..cols {
                            d_x[v * cols + c] += d_out[g * cols + c] * inv;
                        }
                    }
                }
                self.accum(grads, *x, &d_x);
            }

            Op::SumAll { x } => {
                let d = d_out[0];
                let d_x = vec![d; self.value(*x).numel()];
                self.accum(grads, *x, &d_x);
            }

            Op::BceWithLogits { logits, targets } => {
                let d_z: Vec<F> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .zip(d_out)
                    .map(|((&z, &y), &d)| d * (super::sigmoid(z) - y))
                    .collect();
                self.accum(grads, *logits, &d_z);
            }

            Op::Dropout { x, mask } => {
                let d_x: Vec<F> = d_out.iter().zip(mask.iter()).map(|(&d, &m)| d * m).collect();
                self.accum(grads, *x, &d_x);
            }
        }
    }
}

/// Result of a backward pass: one gradient buffer per tape node that the
/// loss reached.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: TensorId) -> Option<&[F]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, or zeros when the loss never reached it.
    pub fn or_zeros(&self, id: TensorId, numel: usize) -> Vec<F> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); numel],
        }
    }
}

// Row-major matmul kernels. mm_nn computes A@B, mm_nt computes A@B^T,
// mm_tn computes A^T@B; loop orders keep the inner loop contiguous.

fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    // a: [m x k], b: [n x k] -> out: [m x n]
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    // a: [m x k], b: [m x n] -> out: [k x n]
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, max_relative_error};

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0], &[4.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Naive triple-loop oracle, the i/j/p order straight from the
        // definition.
        let mut rng = Rng::new(11);
        let a: Vec<f64> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let ta = tape.constant(Tensor::from_vec(vec![3, 4], a).unwrap());
        let tb = tape.constant(Tensor::from_vec(vec![4, 2], b).unwrap());
        let y = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(t2(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 7.0]]));
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_doubles() {
        // p^2 realized as matmul(p, p) on a 1x1, so the gradient lands twice.
        let mut tape = Tape::new();
        let p = tape.param(t2(&[&[3.0]]));
        let sq = tape.matmul(p, p).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(t2(&[&[1.0, 2.0]]));
        let err = tape.backward(p).unwrap_err();
        assert!(matches!(err, Error::NotScalar { .. }));
    }

    #[test]
    fn unreachable_parameter_reads_back_as_zeros() {
        let mut tape = Tape::new();
        let used = tape.param(t2(&[&[2.0]]));
        let unused = tape.param(t2(&[&[5.0, 5.0]]));
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.or_zeros(unused, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_gradient_equals_path_sum() {
        // Hand-built five-node tape: x -> a = 2x, x -> b = 3x, s = a + b,
        // loss = sum(s). Per-path oracle: the x->a->s->loss path contributes
        // 2*1*1, the x->b->s->loss path 3*1*1; total 5.
        let mut tape = Tape::new();
        let x = tape.param(t2(&[&[1.5]]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        let paths = [2.0 * 1.0 * 1.0, 3.0 * 1.0 * 1.0];
        assert_eq!(grads.get(x).unwrap()[0], paths.iter().sum::<f64>());
    }

    #[test]
    fn diamond_through_matmul_equals_path_sum() {
        // x feeds both operands of a matmul: y = x @ (x^T via gather trick is
        // overkill; use y = x @ c plus x @ d summed). Paths: sum(x@c) gives
        // column sums of c, sum(x@d) of d.
        let mut tape = Tape::new();
        let x = tape.param(t2(&[&[1.0, 2.0]]));
        let c = tape.constant(t2(&[&[1.0], &[4.0]]));
        let d = tape.constant(t2(&[&[10.0], &[20.0]]));
        let xc = tape.matmul(x, c).unwrap();
        let xd = tape.matmul(x, d).unwrap();
        let s = tape.add(xc, xd).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0 + 10.0, 4.0 + 20.0]);
    }

    #[test]
    fn relu_and_sigmoid_forward_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t2(&[&[0.0]]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn gather_out_of_range_reports_index_and_size() {
        let mut tape: Tape<f64> = Tape::new();
        let table = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.embedding_lookup(table, vec![0, 7]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn dropout_seeded_statistics() {
        let n = 100_000;
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::from_vec(vec![1, n], vec![1.0f64; n]).unwrap());
        let mut rng = Rng::new(99);
        let dropped = tape.dropout(ones, 0.2, &mut rng, true).unwrap();
        let data = tape.value(dropped).data();
        let zeros = data.iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.01, "zero fraction {frac}");
        for &v in data {
            assert!(v == 0.0 || v == 1.25, "survivor {v}");
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0]]));
        let mut rng = Rng::new(1);
        let y = tape.dropout(x, 0.2, &mut rng, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let build = |seed: u64| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(vec![1, 64], vec![1.0f64; 64]).unwrap());
            let mut rng = Rng::new(seed);
            let y = tape.dropout(x, 0.3, &mut rng, true).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn works_for_f32_too() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0f32, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![2, 1], vec![3.0f32, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0f32]);
    }

    // ---- finite-difference checks on every primitive ------------------------

    /// Run the tape gradient of `build` (params from the flat vector, loss id
    /// back) against central finite differences.
    fn gradcheck(build: &dyn Fn(&mut Tape<f64>, &[f64]) -> (Vec<TensorId>, TensorId), x0: Vec<f64>) {
        let mut tape = Tape::new();
        let (params, loss) = build(&mut tape, &x0);
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for &p in &params {
            analytic.extend(grads.or_zeros(p, tape.value(p).numel()));
        }
        let mut f = |x: &[f64]| {
            let mut tape = Tape::new();
            let (_, loss) = build(&mut tape, x);
            tape.value(loss).data()[0]
        };
        let numeric = central_difference(&mut f, &x0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn split_params(tape: &mut Tape<f64>, x: &[f64], shapes: &[Vec<usize>]) -> Vec<TensorId> {
        let mut ids = Vec::new();
        let mut offset = 0;
        for shape in shapes {
            let numel: usize = shape.iter().product();
            let t = Tensor::from_vec(shape.clone(), x[offset..offset + numel].to_vec()).unwrap();
            ids.push(tape.param(t));
            offset += numel;
        }
        ids
    }

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        // Kept away from zero so relu kinks are not straddled by the
        // finite-difference step.
        (0..n)
            .map(|_| {
                let v = rng.normal(0.0, 1.0);
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn gradcheck_matmul_linear_chain() {
        let build = move |tape: &mut Tape<f64>, x: &[f64]| {
            let ids = split_params(tape, x, &[vec![3, 4], vec![4, 2]]);
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            let loss = tape.sum(y);
            (ids, loss)
        };
        gradcheck(&build, random_vec(21, 3 * 4 + 4 * 2));
    }

    #[test]
    fn gradcheck_linear_with_masked_bias() {
        let build = move |tape: &mut Tape<f64>, x: &[f64]| {
            let ids = split_params(tape, x, &[vec![4, 3], vec![2, 3], vec![2]]);
            let mask = Arc::new(vec![true, false, true, true]);
            let y = tape
                .linear_masked(ids[0], ids[1], Some(ids[2]), Some(mask))
                .unwrap();
            let s = tape.sigmoid(y);
            let loss = tape.sum(s);
            (ids, loss)
        };
        gradcheck(&build, random_vec(22, 4 * 3 + 2 * 3 + 2));
    }

    #[test]
    fn gradcheck_elementwise_and_shape_ops() {
        let build = move |tape: &mut Tape<f64>, x: &[f64]| {
            let ids = split_params(tape, x, &[vec![3, 2], vec![3, 2], vec![5, 2]]);
            let a = tape.add(ids[0], ids[1]).unwrap();
            let r = tape.relu(a);
            let gathered = tape.gather_rows(ids[2], vec![0, 2, 2]).unwrap();
            let joined = tape.concat_rows(&[r, gathered]).unwrap();
            let side = tape.concat_cols(&[joined, joined]).unwrap();
            let sliced = tape.slice_rows(side, 1, 5).unwrap();
            let scaled = tape.scale(sliced, 0.7);
            let loss = tape.sum(scaled);
            (ids, loss)
        };
        gradcheck(&build, random_vec(23, 6 + 6 + 10));
    }

    #[test]
    fn gradcheck_group_mean_and_mean_rows() {
        let build = move |tape: &mut Tape<f64>, x: &[f64]| {
            let ids = split_params(tape, x, &[vec![5, 3]]);
            let groups = Arc::new(vec![vec![0, 1, 4], vec![], vec![2, 2, 3]]);
            let g = tape.group_mean_rows(ids[0], groups).unwrap();
            let m = tape.mean_rows(ids[0]).unwrap();
            let all = tape.concat_rows(&[g, m]).unwrap();
            let s = tape.sigmoid(all);
            let loss = tape.sum(s);
            (ids, loss)
        };
        gradcheck(&build, random_vec(24, 15));
    }

    #[test]
    fn gradcheck_bce_and_dropout_with_frozen_mask() {
        let build = move |tape: &mut Tape<f64>, x: &[f64]| {
            let ids = split_params(tape, x, &[vec![2, 3]]);
            // Re-seeding per evaluation freezes the mask, which makes the
            // finite-difference comparison valid through the dropout op.
            let mut rng = Rng::new(77);
            let dropped = tape.dropout(ids[0], 0.4, &mut rng, true).unwrap();
            let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
            let losses = tape.bce_with_logits(dropped, targets).unwrap();
            let loss = tape.sum(losses);
            (ids, loss)
        };
        gradcheck(&build, random_vec(25, 6));
    }

    #[test]
    fn gradcheck_random_small_models() {
        // Random compositions with dims <= 8, several seeds.
        for seed in 0..10u64 {
            let mut dims_rng = Rng::new(1000 + seed);
            let m = dims_rng.range_inclusive(1, 8);
            let k = dims_rng.range_inclusive(1, 8);
            let n = dims_rng.range_inclusive(1, 8);
            let build = move |tape: &mut Tape<f64>, x: &[f64]| {
                let ids = split_params(tape, x, &[vec![m, k], vec![n, k], vec![n]]);
                let h = tape.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                let r = tape.relu(h);
                let s = tape.sigmoid(r);
                let loss = tape.sum(s);
                (ids, loss)
            };
            gradcheck(&build, random_vec(2000 + seed, m * k + n * k + n));
        }
    }
}
