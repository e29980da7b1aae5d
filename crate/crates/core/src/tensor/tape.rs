//! Reverse-mode autodiff on a Wengert list ("gradient tape").
//!
//! A [`Tape`] owns an arena of node values plus a list of recorded operations.
//! Forward calls ([`Tape::matmul`], [`Tape::softmax_masked`], …) validate
//! shapes, compute the result eagerly, and append an operation record.
//! [`Tape::backward`] seeds the loss gradient with 1 and replays the records
//! in reverse, accumulating vector-Jacobian products into per-node gradients.
//!
//! Records are appended strictly after their inputs exist, so the list is
//! always in topological order and the reverse sweep needs no explicit sort.
//! Saved activations live in the node arena itself: `tanh`, `sigmoid`, and
//! masked softmax read their own *outputs* during the backward pass.

use std::collections::HashMap;

use super::param::{ParamId, ParamSet};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value on a [`Tape`].
///
/// Only valid for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Arena index (for diagnostics).
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation: which primitive ran, and where its output lives.
struct OpRecord<R: Real> {
    out: NodeId,
    kind: OpKind<R>,
}

enum OpKind<R: Real> {
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: R },
    AddRow { mat: NodeId, row: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxMasked { x: NodeId, mask: Vec<bool> },
    Conv1dSame { seq: NodeId, kernels: NodeId, bias: NodeId },
    Embed { table: NodeId, indices: Vec<usize>, pad: Option<usize> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    Sum { x: NodeId },
    MeanOf { xs: Vec<NodeId> },
    ListwiseCe { scores: NodeId, pos: usize },
}

/// Reverse-mode gradient tape.
pub struct Tape<R: Real> {
    nodes: Vec<Tensor<R>>,
    ops: Vec<OpRecord<R>>,
    grads: Vec<Option<Tensor<R>>>,
    param_nodes: Vec<(ParamId, NodeId)>,
    param_lookup: HashMap<ParamId, NodeId>,
    recording: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    /// Recording tape: supports [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
            param_lookup: HashMap::new(),
            recording: true,
        }
    }

    /// Inference tape: computes forward values but records nothing, so it
    /// uses less memory. Calling [`Tape::backward`] on it is a usage error.
    pub fn inference() -> Self {
        Tape { recording: false, ..Tape::new() }
    }

    /// Number of values on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True if no values have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0]
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if the node is not
    /// on any path to the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Put a constant (non-parameter) value on the tape.
    pub fn input(&mut self, value: Tensor<R>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(value);
        id
    }

    /// Put a parameter's current value on the tape.
    ///
    /// Repeated calls for the same parameter return the same node, so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, set: &ParamSet<R>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_lookup.get(&id) {
            return node;
        }
        let node = self.input(set.value(id).clone());
        self.param_nodes.push((id, node));
        self.param_lookup.insert(id, node);
        node
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("{op}: node {} is not on this tape", id.0)));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<R>, kind: OpKind<R>) -> NodeId {
        let out = NodeId(self.nodes.len());
        self.nodes.push(value);
        if self.recording {
            self.ops.push(OpRecord { out, kind });
        }
        out
    }

    // ----- primitive operations -------------------------------------------

    /// Matrix product `[m × k] · [k × n] -> [m × n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let value = self.nodes[a.0].matmul(&self.nodes[b.0])?;
        Ok(self.push(value, OpKind::Matmul { a, b }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "transpose")?;
        let value = self.nodes[x.0].transpose()?;
        Ok(self.push(value, OpKind::Transpose { x }))
    }

    fn ewise_check(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise_check(a, b, "add")?;
        let mut value = self.nodes[a.0].clone();
        value.axpy(R::one(), &self.nodes[b.0])?;
        Ok(self.push(value, OpKind::Add { a, b }))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise_check(a, b, "sub")?;
        let mut value = self.nodes[a.0].clone();
        value.axpy(-R::one(), &self.nodes[b.0])?;
        Ok(self.push(value, OpKind::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise_check(a, b, "mul")?;
        let bv = &self.nodes[b.0];
        let mut value = self.nodes[a.0].clone();
        for (x, y) in value.data_mut().iter_mut().zip(bv.data().iter()) {
            *x = *x * *y;
        }
        Ok(self.push(value, OpKind::Mul { a, b }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: R) -> Result<NodeId> {
        self.check(x, "scale")?;
        let mut value = self.nodes[x.0].clone();
        for v in value.data_mut() {
            *v = *v * c;
        }
        Ok(self.push(value, OpKind::Scale { x, c }))
    }

    /// Broadcast-add a `[1 × c]` row onto every row of an `[r × c]` matrix.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(mat, "add_row")?;
        self.check(row, "add_row")?;
        let (m, r) = (&self.nodes[mat.0], &self.nodes[row.0]);
        if r.rows() != 1 || m.cols() != r.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: m.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let cols = m.cols();
        let mut value = m.clone();
        for i in 0..value.rows() {
            for j in 0..cols {
                *value.at_mut(i, j) += r.data()[j];
            }
        }
        Ok(self.push(value, OpKind::AddRow { mat, row }))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "relu")?;
        let mut value = self.nodes[x.0].clone();
        for v in value.data_mut() {
            if *v < R::zero() {
                *v = R::zero();
            }
        }
        Ok(self.push(value, OpKind::Relu { x }))
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "tanh")?;
        let mut value = self.nodes[x.0].clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        Ok(self.push(value, OpKind::Tanh { x }))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sigmoid")?;
        let mut value = self.nodes[x.0].clone();
        for v in value.data_mut() {
            // 1 / (1 + e^-x), computed stably on both tails.
            let z = *v;
            *v = if z >= R::zero() {
                R::one() / (R::one() + (-z).exp())
            } else {
                let e = z.exp();
                e / (R::one() + e)
            };
        }
        Ok(self.push(value, OpKind::Sigmoid { x }))
    }

    /// Row-wise masked softmax of an `[r × c]` matrix.
    ///
    /// `mask` is row-major with `r * c` entries; `true` marks a position that
    /// participates. Masked positions get probability exactly 0. A row whose
    /// mask is entirely `false` is a degenerate input and is rejected.
    pub fn softmax_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.check(x, "softmax_masked")?;
        let xv = &self.nodes[x.0];
        if mask.len() != xv.numel() {
            return Err(Error::Usage(format!(
                "softmax_masked: mask has {} entries but tensor has {}",
                mask.len(),
                xv.numel()
            )));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            let row_mask = &mask[i * c..(i + 1) * c];
            if !row_mask.iter().any(|&m| m) {
                return Err(Error::Degenerate(format!("softmax_masked: row {i} is fully masked")));
            }
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if row_mask[j] {
                    max = max.max(xv.at(i, j).as_f64());
                }
            }
            let mut sum = 0.0f64;
            let mut exps = vec![0.0f64; c];
            for j in 0..c {
                if row_mask[j] {
                    let e = (xv.at(i, j).as_f64() - max).exp();
                    exps[j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                *value.at_mut(i, j) = R::of(exps[j] / sum);
            }
        }
        Ok(self.push(value, OpKind::SoftmaxMasked { x, mask: mask.to_vec() }))
    }

    /// Same-length 1-D convolution along the rows of `seq`.
    ///
    /// `seq` is `[L × d_in]`, `kernels` is `[w × d_in × d_out]` with `w` odd,
    /// `bias` is `[1 × d_out]`; the result is `[L × d_out]` with zero padding
    /// of `(w-1)/2` rows on each side.
    pub fn conv1d_same(&mut self, seq: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(seq, "conv1d_same")?;
        self.check(kernels, "conv1d_same")?;
        self.check(bias, "conv1d_same")?;
        let (x, k, b) = (&self.nodes[seq.0], &self.nodes[kernels.0], &self.nodes[bias.0]);
        if k.shape().len() != 3 {
            return Err(Error::Usage(format!("conv1d_same: kernels must be rank-3, got {:?}", k.shape())));
        }
        let (w, d_in, d_out) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d_same: window must be odd, got {w}")));
        }
        if x.shape().len() != 2 || x.cols() != d_in {
            return Err(Error::ShapeMismatch { op: "conv1d_same", lhs: x.shape().to_vec(), rhs: k.shape().to_vec() });
        }
        if b.rows() != 1 || b.cols() != d_out {
            return Err(Error::ShapeMismatch { op: "conv1d_same", lhs: b.shape().to_vec(), rhs: vec![1, d_out] });
        }
        let l = x.rows();
        let p = (w - 1) / 2;
        let kd = k.data();
        let mut value = Tensor::zeros(vec![l, d_out]);
        for t in 0..l {
            for o in 0..d_out {
                let mut acc = b.data()[o].as_f64();
                for u in 0..w {
                    let s = t as isize + u as isize - p as isize;
                    if s < 0 || s >= l as isize {
                        continue;
                    }
                    let s = s as usize;
                    for i in 0..d_in {
                        acc += kd[(u * d_in + i) * d_out + o].as_f64() * x.at(s, i).as_f64();
                    }
                }
                *value.at_mut(t, o) = R::of(acc);
            }
        }
        Ok(self.push(value, OpKind::Conv1dSame { seq, kernels, bias }))
    }

    /// Row lookup into an embedding table `[V × d]`, producing `[L × d]`.
    ///
    /// If `pad` is given, positions whose index equals `pad` produce an
    /// all-zero output row and contribute no gradient to the table, so
    /// padding positions are invisible to the model regardless of what the
    /// padding row of the table contains.
    pub fn embed(&mut self, table: NodeId, indices: &[usize], pad: Option<usize>) -> Result<NodeId> {
        self.check(table, "embed")?;
        let t = &self.nodes[table.0];
        if t.shape().len() != 2 {
            return Err(Error::Usage(format!("embed: table must be rank-2, got {:?}", t.shape())));
        }
        let (v, d) = (t.rows(), t.cols());
        if indices.is_empty() {
            return Err(Error::Usage("embed: empty index list".into()));
        }
        for (pos, &ix) in indices.iter().enumerate() {
            if ix >= v {
                return Err(Error::Data(format!("embed: index {ix} at position {pos} out of range (table has {v} rows)")));
            }
        }
        let mut value = Tensor::zeros(vec![indices.len(), d]);
        for (pos, &ix) in indices.iter().enumerate() {
            if Some(ix) == pad {
                continue;
            }
            for j in 0..d {
                *value.at_mut(pos, j) = t.at(ix, j);
            }
        }
        Ok(self.push(value, OpKind::Embed { table, indices: indices.to_vec(), pad }))
    }

    /// Contiguous row slice `[start .. start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x, "slice_rows")?;
        let xv = &self.nodes[x.0];
        if len == 0 || start + len > xv.rows() {
            return Err(Error::Usage(format!(
                "slice_rows: range {start}..{} out of bounds for {} rows",
                start + len,
                xv.rows()
            )));
        }
        let c = xv.cols();
        let value = Tensor::from_fn(len, c, |i, j| xv.at(start + i, j));
        Ok(self.push(value, OpKind::SliceRows { x, start }))
    }

    /// Contiguous column slice `[start .. start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x, "slice_cols")?;
        let xv = &self.nodes[x.0];
        if len == 0 || start + len > xv.cols() {
            return Err(Error::Usage(format!(
                "slice_cols: range {start}..{} out of bounds for {} cols",
                start + len,
                xv.cols()
            )));
        }
        let r = xv.rows();
        let value = Tensor::from_fn(r, len, |i, j| xv.at(i, start + j));
        Ok(self.push(value, OpKind::SliceCols { x, start }))
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_rows: empty input list".into()));
        }
        for &x in xs {
            self.check(x, "concat_rows")?;
        }
        let c = self.nodes[xs[0].0].cols();
        let mut rows = 0;
        for &x in xs {
            let xv = &self.nodes[x.0];
            if xv.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[xs[0].0].shape().to_vec(),
                    rhs: xv.shape().to_vec(),
                });
            }
            rows += xv.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &x in xs {
            data.extend_from_slice(self.nodes[x.0].data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, OpKind::ConcatRows { xs: xs.to_vec() }))
    }

    /// Concatenate rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_cols: empty input list".into()));
        }
        for &x in xs {
            self.check(x, "concat_cols")?;
        }
        let r = self.nodes[xs[0].0].rows();
        let mut cols = 0;
        for &x in xs {
            let xv = &self.nodes[x.0];
            if xv.rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0].0].shape().to_vec(),
                    rhs: xv.shape().to_vec(),
                });
            }
            cols += xv.cols();
        }
        let mut value = Tensor::zeros(vec![r, cols]);
        let mut offset = 0;
        for &x in xs {
            let xv = &self.nodes[x.0];
            for i in 0..r {
                for j in 0..xv.cols() {
                    *value.at_mut(i, offset + j) = xv.at(i, j);
                }
            }
            offset += xv.cols();
        }
        Ok(self.push(value, OpKind::ConcatCols { xs: xs.to_vec() }))
    }

    /// Sum of all elements, as a `[1 × 1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum")?;
        let mut acc = 0.0f64;
        for v in self.nodes[x.0].data() {
            acc += v.as_f64();
        }
        Ok(self.push(Tensor::scalar(R::of(acc)), OpKind::Sum { x }))
    }

    /// Arithmetic mean of several `[1 × 1]` scalars, as a `[1 × 1]` scalar.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Usage("mean_of: empty input list".into()));
        }
        let mut acc = 0.0f64;
        for &x in xs {
            self.check(x, "mean_of")?;
            let xv = &self.nodes[x.0];
            if xv.numel() != 1 {
                return Err(Error::Usage(format!("mean_of: inputs must be scalars, got shape {:?}", xv.shape())));
            }
            acc += xv.data()[0].as_f64();
        }
        let value = Tensor::scalar(R::of(acc / xs.len() as f64));
        Ok(self.push(value, OpKind::MeanOf { xs: xs.to_vec() }))
    }

    /// Listwise cross-entropy over one score row `[1 × n]`:
    /// `loss = logsumexp(scores) - scores[pos]`.
    ///
    /// Equivalent to softmax cross-entropy with the positive at `pos`;
    /// computed via the max-shifted logsumexp so large scores cannot
    /// overflow.
    pub fn listwise_ce(&mut self, scores: NodeId, pos: usize) -> Result<NodeId> {
        self.check(scores, "listwise_ce")?;
        let s = &self.nodes[scores.0];
        if s.rows() != 1 || s.numel() == 0 {
            return Err(Error::Usage(format!("listwise_ce: scores must be [1 × n], got {:?}", s.shape())));
        }
        if pos >= s.cols() {
            return Err(Error::Usage(format!(
                "listwise_ce: positive index {pos} out of range for {} scores",
                s.cols()
            )));
        }
        let loss = listwise_ce_value(s, pos);
        Ok(self.push(Tensor::scalar(R::of(loss)), OpKind::ListwiseCe { scores, pos }))
    }

    // ----- backward --------------------------------------------------------

    fn accumulate(grads: &mut [Option<Tensor<R>>], node: NodeId, delta: Tensor<R>) {
        match &mut grads[node.0] {
            Some(g) => {
                g.axpy(R::one(), &delta).expect("gradient shapes agree by construction");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Run the reverse sweep from a scalar loss node.
    ///
    /// Gradients from a previous sweep on the same tape are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::Usage("backward: tape was created in inference mode".into()));
        }
        self.check(loss, "backward")?;
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::new(self.nodes[loss.0].shape().to_vec(), vec![R::one()])?);

        for rec in self.ops.iter().rev() {
            let Some(dout) = self.grads[rec.out.0].clone() else { continue };
            let grads = &mut self.grads;
            let nodes = &self.nodes;
            match &rec.kind {
                OpKind::Matmul { a, b } => {
                    let bt = nodes[b.0].transpose()?;
                    Self::accumulate(grads, *a, dout.matmul(&bt)?);
                    let at = nodes[a.0].transpose()?;
                    Self::accumulate(grads, *b, at.matmul(&dout)?);
                }
                OpKind::Transpose { x } => {
                    Self::accumulate(grads, *x, dout.transpose()?);
                }
                OpKind::Add { a, b } => {
                    Self::accumulate(grads, *a, dout.clone());
                    Self::accumulate(grads, *b, dout);
                }
                OpKind::Sub { a, b } => {
                    Self::accumulate(grads, *a, dout.clone());
                    let mut neg = dout;
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    Self::accumulate(grads, *b, neg);
                }
                OpKind::Mul { a, b } => {
                    let mut da = dout.clone();
                    for (g, y) in da.data_mut().iter_mut().zip(nodes[b.0].data()) {
                        *g = *g * *y;
                    }
                    Self::accumulate(grads, *a, da);
                    let mut db = dout;
                    for (g, y) in db.data_mut().iter_mut().zip(nodes[a.0].data()) {
                        *g = *g * *y;
                    }
                    Self::accumulate(grads, *b, db);
                }
                OpKind::Scale { x, c } => {
                    let mut dx = dout;
                    for v in dx.data_mut() {
                        *v = *v * *c;
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::AddRow { mat, row } => {
                    let cols = dout.cols();
                    let mut drow = Tensor::zeros(vec![1, cols]);
                    for j in 0..cols {
                        let mut acc = 0.0f64;
                        for i in 0..dout.rows() {
                            acc += dout.at(i, j).as_f64();
                        }
                        drow.data_mut()[j] = R::of(acc);
                    }
                    Self::accumulate(grads, *mat, dout);
                    Self::accumulate(grads, *row, drow);
                }
                OpKind::Relu { x } => {
                    let mut dx = dout;
                    for (g, v) in dx.data_mut().iter_mut().zip(nodes[x.0].data()) {
                        if *v <= R::zero() {
                            *g = R::zero();
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::Tanh { x } => {
                    let y = &nodes[rec.out.0];
                    let mut dx = dout;
                    for (g, t) in dx.data_mut().iter_mut().zip(y.data()) {
                        *g = *g * (R::one() - *t * *t);
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::Sigmoid { x } => {
                    let y = &nodes[rec.out.0];
                    let mut dx = dout;
                    for (g, s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *g = *g * *s * (R::one() - *s);
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::SoftmaxMasked { x, mask } => {
                    let y = &nodes[rec.out.0];
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        let mut inner = 0.0f64;
                        for j in 0..c {
                            if mask[i * c + j] {
                                inner += dout.at(i, j).as_f64() * y.at(i, j).as_f64();
                            }
                        }
                        for j in 0..c {
                            if mask[i * c + j] {
                                let g = y.at(i, j).as_f64() * (dout.at(i, j).as_f64() - inner);
                                *dx.at_mut(i, j) = R::of(g);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::Conv1dSame { seq, kernels, bias } => {
                    let x = &nodes[seq.0];
                    let k = &nodes[kernels.0];
                    let (w, d_in, d_out) = (k.shape()[0], k.shape()[1], k.shape()[2]);
                    let l = x.rows();
                    let p = (w - 1) / 2;
                    let kd = k.data();

                    let mut dbias = Tensor::zeros(vec![1, d_out]);
                    for o in 0..d_out {
                        let mut acc = 0.0f64;
                        for t in 0..l {
                            acc += dout.at(t, o).as_f64();
                        }
                        dbias.data_mut()[o] = R::of(acc);
                    }

                    let mut dk = Tensor::zeros(vec![w, d_in, d_out]);
                    let dkd = dk.data_mut();
                    for u in 0..w {
                        for i in 0..d_in {
                            for o in 0..d_out {
                                let mut acc = 0.0f64;
                                for t in 0..l {
                                    let s = t as isize + u as isize - p as isize;
                                    if s < 0 || s >= l as isize {
                                        continue;
                                    }
                                    acc += x.at(s as usize, i).as_f64() * dout.at(t, o).as_f64();
                                }
                                dkd[(u * d_in + i) * d_out + o] = R::of(acc);
                            }
                        }
                    }

                    let mut dx = Tensor::zeros(vec![l, d_in]);
                    for s in 0..l {
                        for i in 0..d_in {
                            let mut acc = 0.0f64;
                            for u in 0..w {
                                let t = s as isize - u as isize + p as isize;
                                if t < 0 || t >= l as isize {
                                    continue;
                                }
                                for o in 0..d_out {
                                    acc += kd[(u * d_in + i) * d_out + o].as_f64()
                                        * dout.at(t as usize, o).as_f64();
                                }
                            }
                            *dx.at_mut(s, i) = R::of(acc);
                        }
                    }

                    Self::accumulate(grads, *seq, dx);
                    Self::accumulate(grads, *kernels, dk);
                    Self::accumulate(grads, *bias, dbias);
                }
                OpKind::Embed { table, indices, pad } => {
                    let t = &nodes[table.0];
                    let (v, d) = (t.rows(), t.cols());
                    let mut dt = Tensor::zeros(vec![v, d]);
                    for (pos, &ix) in indices.iter().enumerate() {
                        if Some(ix) == *pad {
                            continue;
                        }
                        for j in 0..d {
                            *dt.at_mut(ix, j) += dout.at(pos, j);
                        }
                    }
                    Self::accumulate(grads, *table, dt);
                }
                OpKind::SliceRows { x, start } => {
                    let xv = &nodes[x.0];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for i in 0..dout.rows() {
                        for j in 0..dout.cols() {
                            *dx.at_mut(start + i, j) = dout.at(i, j);
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::SliceCols { x, start } => {
                    let xv = &nodes[x.0];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for i in 0..dout.rows() {
                        for j in 0..dout.cols() {
                            *dx.at_mut(i, start + j) = dout.at(i, j);
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::ConcatRows { xs } => {
                    let mut offset = 0;
                    for &xn in xs {
                        let rows = nodes[xn.0].rows();
                        let cols = nodes[xn.0].cols();
                        let part = Tensor::from_fn(rows, cols, |i, j| dout.at(offset + i, j));
                        Self::accumulate(grads, xn, part);
                        offset += rows;
                    }
                }
                OpKind::ConcatCols { xs } => {
                    let mut offset = 0;
                    for &xn in xs {
                        let rows = nodes[xn.0].rows();
                        let cols = nodes[xn.0].cols();
                        let part = Tensor::from_fn(rows, cols, |i, j| dout.at(i, offset + j));
                        Self::accumulate(grads, xn, part);
                        offset += cols;
                    }
                }
                OpKind::Sum { x } => {
                    let g = dout.data()[0];
                    let xv = &nodes[x.0];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for v in dx.data_mut() {
                        *v = g;
                    }
                    Self::accumulate(grads, *x, dx);
                }
                OpKind::MeanOf { xs } => {
                    let g = R::of(dout.data()[0].as_f64() / xs.len() as f64);
                    for &xn in xs {
                        Self::accumulate(grads, xn, Tensor::scalar(g));
                    }
                }
                OpKind::ListwiseCe { scores, pos } => {
                    // d loss / d scores = softmax(scores) - one_hot(pos)
                    let s = &nodes[scores.0];
                    let n = s.cols();
                    let g = dout.data()[0].as_f64();
                    let probs = stable_softmax(s);
                    let mut ds = Tensor::zeros(vec![1, n]);
                    for j in 0..n {
                        let delta = if j == *pos { 1.0 } else { 0.0 };
                        ds.data_mut()[j] = R::of(g * (probs[j] - delta));
                    }
                    Self::accumulate(grads, *scores, ds);
                }
            }
        }
        Ok(())
    }

    /// Add this tape's parameter gradients into the parameter set.
    ///
    /// Parameters registered on the tape but absent from the loss path
    /// contribute zero. Marks the set as having fresh gradients so the
    /// optimizer will accept a step.
    pub fn apply_grads(&self, set: &mut ParamSet<R>) -> Result<()> {
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = self.grad(node) {
                set.accumulate_grad(pid, g)?;
            }
        }
        set.mark_grads_ready();
        Ok(())
    }
}

/// Stable softmax of a `[1 × n]` row in `f64`.
fn stable_softmax<R: Real>(s: &Tensor<R>) -> Vec<f64> {
    let n = s.numel();
    let max = s.data().iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut exps = vec![0.0f64; n];
    let mut sum = 0.0f64;
    for j in 0..n {
        let e = (s.data()[j].as_f64() - max).exp();
        exps[j] = e;
        sum += e;
    }
    for e in &mut exps {
        *e /= sum;
    }
    exps
}

/// Scalar value of the listwise cross-entropy at `pos`.
fn listwise_ce_value<R: Real>(s: &Tensor<R>, pos: usize) -> f64 {
    let max = s.data().iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for x in s.data() {
        sum += (x.as_f64() - max).exp();
    }
    max + sum.ln() - s.data()[pos].as_f64()
}
