//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep visits every consumer before
//! its inputs. Besides the usual elementwise and linear-algebra primitives the
//! tape carries a few fused graph operations (gather/relu projections,
//! segment softmax, attention aggregation) so message passing over large
//! disjoint-union batches stays within memory.
//!
//! Segment reductions in the forward direction sum their terms in sorted
//! order, which makes them independent of edge ordering: relabelling nodes
//! or batching graphs together never changes a forward value.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamKey, ParameterGroup, StatUpdate};
use super::{NnError, Tensor};
use super::tensor::gemm;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// CSR grouping of edge rows by target segment.
#[derive(Clone, Debug)]
pub struct Segments {
    n_segments: usize,
    offsets: Vec<usize>,
    members: Vec<usize>,
    n_edges: usize,
}

impl Segments {
    /// `assignment[e]` is the segment of edge row `e`.
    pub fn from_assignment(assignment: &[usize], n_segments: usize) -> Self {
        let mut counts = vec![0usize; n_segments + 1];
        for &s in assignment {
            assert!(s < n_segments, "segment {s} out of range {n_segments}");
            counts[s + 1] += 1;
        }
        for i in 0..n_segments {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut members = vec![0usize; assignment.len()];
        for (e, &s) in assignment.iter().enumerate() {
            members[fill[s]] = e;
            fill[s] += 1;
        }
        Self { n_segments, offsets, members, n_edges: assignment.len() }
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[self.offsets[s]..self.offsets[s + 1]]
    }
}

/// Order-independent sum: terms are sorted before accumulation.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        2 => terms[0] + terms[1],
        _ => {
            // insertion sort; segment degrees are small
            for i in 1..terms.len() {
                let mut j = i;
                while j > 0 && terms[j - 1].total_cmp(&terms[j]).is_gt() {
                    terms.swap(j - 1, j);
                    j -= 1;
                }
            }
            terms.iter().sum()
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { a: Var, idx: Arc<[usize]> },
    ScatterAddRows { a: Var, idx: Arc<[usize]> },
    GatherAddRelu { p: Var, ip: Arc<[usize]>, q: Var, iq: Arc<[usize]>, b: Var },
    BlockLinear { x: Var, offset: usize, blocks: usize, w: Var, b: Var },
    SegmentSoftmax { s: Var, seg: Arc<Segments> },
    AttnAggregate { msg: Var, alpha: Var, seg: Arc<Segments> },
    RowMatVec { f: Var, x: Var },
    LayerNorm { x: Var, g: Var, s: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormTrain { x: Var, g: Var, s: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, g: Var, s: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Tensor },
    BceLogits { logits: Var, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::GatherAddRelu { .. } => "gather_add_relu",
            Op::BlockLinear { .. } => "block_linear",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::AttnAggregate { .. } => "attn_aggregate",
            Op::RowMatVec { .. } => "row_matvec",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormTrain { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse { .. } => "mse",
            Op::BceLogits { .. } => "bce_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    first_non_finite: Option<(usize, &'static str)>,
    stat_updates: Vec<StatUpdate>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            Tensor::from_parts(r, c, value.into_data())
        };
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, group: &ParameterGroup, key: ParamKey) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = group.value(key);
        let value = Tensor::from_parts(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(value, Op::Param(key), true);
        self.params.insert(key, v);
        v
    }

    pub fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.map(|(_, name)| name)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", format!("{}x{} * {}x{}", m, k, tb.rows(), n)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, 0.0, &mut out, n as isize);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), ng))
    }

    /// `x * w + b` with `b` a broadcast row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (tx, tw) = (self.val(x), self.val(w));
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if tw.rows() != k {
            return Err(shape_err("linear", format!("input width {} vs weight rows {}", k, tw.rows())));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let tb = self.val(b);
            if tb.len() != n {
                return Err(shape_err("linear", format!("bias len {} vs {}", tb.len(), n)));
            }
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(m, k, n, tx.data(), k as isize, 1, tw.data(), n as isize, 1, beta, &mut out, n as isize);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(m, n, out), Op::Linear { x, w, b }, ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", ta.rows(), ta.cols(), tb.rows(), tb.cols()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::from_parts(ta.rows(), ta.cols(), data);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if tb.len() != ta.cols() {
            return Err(shape_err(op_name, format!("row of {} vs {} columns", tb.len(), ta.cols())));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.row_broadcast("add_row", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % n]).collect();
        let t = Tensor::from_parts(ta.rows(), n, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddRow(a, b), ng))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.row_broadcast("mul_row", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x * tb.data()[i % n]).collect();
        let t = Tensor::from_parts(ta.rows(), n, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MulRow(a, b), ng))
    }

    /// Scales row `r` of `a` by `w[r]` (`w` is a column).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var, NnError> {
        let (ta, tw) = (self.val(a), self.val(w));
        if tw.len() != ta.rows() {
            return Err(shape_err("mul_col", format!("column of {} vs {} rows", tw.len(), ta.rows())));
        }
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x * tw.data()[i / n]).collect();
        let t = Tensor::from_parts(ta.rows(), n, data);
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(t, Op::MulCol(a, w), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ta = self.val(a);
        if start + len > ta.rows() {
            return Err(shape_err("slice_rows", format!("{}..{} of {}", start, start + len, ta.rows())));
        }
        let n = ta.cols();
        let t = Tensor::from_parts(len, n, ta.data()[start * n..(start + len) * n].to_vec());
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ta = self.val(a);
        let n = ta.cols();
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{}..{} of {}", start, start + len, n)));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_parts(ta.rows(), len, data);
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let n = parts.first().map(|&p| self.val(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", format!("width {} vs {}", t.cols(), n)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(rows, n, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let m = parts.first().map(|&p| self.val(p).rows()).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let t = self.val(p);
            if t.rows() != m {
                return Err(shape_err("concat_cols", format!("rows {} vs {}", t.rows(), m)));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let t = self.val(p);
            let c = t.cols();
            for r in 0..m {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(m, total, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var, NnError> {
        let ta = self.val(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= ta.rows() {
                return Err(shape_err("gather_rows", format!("row {} of {}", i, ta.rows())));
            }
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::from_parts(idx.len(), n, data);
        let ng = self.ng(a);
        Ok(self.push(t, Op::GatherRows { a, idx }, ng))
    }

    /// `out[idx[r]] += a[r]`; summation follows row order.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var, NnError> {
        let ta = self.val(a);
        if idx.len() != ta.rows() {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {} rows", idx.len(), ta.rows())));
        }
        let n = ta.cols();
        let mut data = vec![0.0; n_out * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(shape_err("scatter_add_rows", format!("target {} of {}", i, n_out)));
            }
            for c in 0..n {
                data[i * n + c] += ta.data()[r * n + c];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(n_out, n, data), Op::ScatterAddRows { a, idx }, ng))
    }

    /// `relu(p[ip[e]] + q[iq[e]] + b)` for every edge `e`.
    pub fn gather_add_relu(
        &mut self,
        p: Var,
        ip: Arc<[usize]>,
        q: Var,
        iq: Arc<[usize]>,
        b: Var,
    ) -> Result<Var, NnError> {
        let (tp, tq, tb) = (self.val(p), self.val(q), self.val(b));
        let n = tp.cols();
        if tq.cols() != n || tb.len() != n || ip.len() != iq.len() {
            return Err(shape_err(
                "gather_add_relu",
                format!("widths {}/{}/{}, edges {}/{}", n, tq.cols(), tb.len(), ip.len(), iq.len()),
            ));
        }
        if ip.iter().any(|&i| i >= tp.rows()) || iq.iter().any(|&i| i >= tq.rows()) {
            return Err(shape_err("gather_add_relu", "index out of range".into()));
        }
        let e = ip.len();
        let mut data = vec![0.0; e * n];
        for k in 0..e {
            let (pr, qr) = (tp.row(ip[k]), tq.row(iq[k]));
            let out = &mut data[k * n..(k + 1) * n];
            for c in 0..n {
                out[c] = (pr[c] + qr[c] + tb.data()[c]).max(0.0);
            }
        }
        let ng = self.ng(p) || self.ng(q) || self.ng(b);
        Ok(self.push(Tensor::from_parts(e, n, data), Op::GatherAddRelu { p, ip, q, iq, b }, ng))
    }

    /// Block-diagonal linear map: column block `k` of `x` (starting at
    /// `offset`, width `w.rows() / blocks`) is multiplied by row block `k` of
    /// `w`; the results are laid side by side and `b` is added.
    pub fn block_linear(
        &mut self,
        x: Var,
        offset: usize,
        blocks: usize,
        w: Var,
        b: Var,
    ) -> Result<Var, NnError> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        if blocks == 0 || tw.rows() % blocks != 0 {
            return Err(shape_err("block_linear", format!("{} rows in {} blocks", tw.rows(), blocks)));
        }
        let inb = tw.rows() / blocks;
        let o = tw.cols();
        let (m, xc) = (tx.rows(), tx.cols());
        if offset + blocks * inb > xc || tb.len() != blocks * o {
            return Err(shape_err(
                "block_linear",
                format!("input width {} offset {} blocks {}x{} bias {}", xc, offset, blocks, inb, tb.len()),
            ));
        }
        let width = blocks * o;
        let mut data = vec![0.0; m * width];
        for r in 0..m {
            data[r * width..(r + 1) * width].copy_from_slice(tb.data());
        }
        for k in 0..blocks {
            if m == 0 {
                break;
            }
            gemm(
                m,
                inb,
                o,
                &tx.data()[offset + k * inb..],
                xc as isize,
                1,
                &tw.data()[k * inb * o..],
                o as isize,
                1,
                1.0,
                &mut data[k * o..],
                width as isize,
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::from_parts(m, width, data), Op::BlockLinear { x, offset, blocks, w, b }, ng))
    }

    /// Softmax of each column of `s` within every segment.
    pub fn segment_softmax(&mut self, s: Var, seg: Arc<Segments>) -> Result<Var, NnError> {
        let ts = self.val(s);
        if ts.rows() != seg.n_edges() {
            return Err(shape_err("segment_softmax", format!("{} rows vs {} edges", ts.rows(), seg.n_edges())));
        }
        let k = ts.cols();
        let mut data = vec![0.0; ts.len()];
        let mut terms = Vec::new();
        for sid in 0..seg.n_segments() {
            let mem = seg.members(sid);
            if mem.is_empty() {
                continue;
            }
            for c in 0..k {
                let mx = mem.iter().map(|&e| ts.data()[e * k + c]).fold(f64::NEG_INFINITY, f64::max);
                terms.clear();
                for &e in mem {
                    let v = (ts.data()[e * k + c] - mx).exp();
                    data[e * k + c] = v;
                    terms.push(v);
                }
                let z = sorted_sum(&mut terms);
                for &e in mem {
                    data[e * k + c] /= z;
                }
            }
        }
        let t = Tensor::from_parts(ts.rows(), k, data);
        let ng = self.ng(s);
        Ok(self.push(t, Op::SegmentSoftmax { s, seg }, ng))
    }

    /// Multi-head attention summary: for every segment, the head average of
    /// `sum_e alpha[e, k] * msg[e, k-th block]`. Empty segments give zeros.
    pub fn attn_aggregate(&mut self, msg: Var, alpha: Var, seg: Arc<Segments>) -> Result<Var, NnError> {
        let (tm, ta) = (self.val(msg), self.val(alpha));
        let heads = ta.cols();
        if tm.rows() != seg.n_edges() || ta.rows() != seg.n_edges() || heads == 0 || tm.cols() % heads != 0 {
            return Err(shape_err(
                "attn_aggregate",
                format!("msg {}x{}, alpha {}x{}, edges {}", tm.rows(), tm.cols(), ta.rows(), heads, seg.n_edges()),
            ));
        }
        let h = tm.cols() / heads;
        let mc = tm.cols();
        let ns = seg.n_segments();
        let mut data = vec![0.0; ns * h];
        let inv_heads = 1.0 / heads as f64;
        let mut terms = Vec::new();
        for sid in 0..ns {
            let mem = seg.members(sid);
            if mem.is_empty() {
                continue;
            }
            for c in 0..h {
                let mut acc = 0.0;
                for k in 0..heads {
                    terms.clear();
                    terms.extend(mem.iter().map(|&e| ta.data()[e * heads + k] * tm.data()[e * mc + k * h + c]));
                    acc += sorted_sum(&mut terms);
                }
                data[sid * h + c] = acc * inv_heads;
            }
        }
        let ng = self.ng(msg) || self.ng(alpha);
        Ok(self.push(Tensor::from_parts(ns, h, data), Op::AttnAggregate { msg, alpha, seg }, ng))
    }

    /// Row-wise matrix-vector product: row `r` of `f` holds an `h x h`
    /// matrix (row-major) applied to row `r` of `x`.
    pub fn row_matvec(&mut self, f: Var, x: Var) -> Result<Var, NnError> {
        let (tf, tx) = (self.val(f), self.val(x));
        let h = tx.cols();
        if tf.rows() != tx.rows() || tf.cols() != h * h {
            return Err(shape_err(
                "row_matvec",
                format!("matrices {}x{} vs vectors {}x{}", tf.rows(), tf.cols(), tx.rows(), h),
            ));
        }
        let m = tx.rows();
        let mut data = vec![0.0; m * h];
        for r in 0..m {
            let fr = tf.row(r);
            let xr = tx.row(r);
            for i in 0..h {
                let row = &fr[i * h..(i + 1) * h];
                data[r * h + i] = row.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        let ng = self.ng(f) || self.ng(x);
        Ok(self.push(Tensor::from_parts(m, h, data), Op::RowMatVec { f, x }, ng))
    }

    // ---- normalisation --------------------------------------------------

    /// Per-row layer normalisation with affine `g`, `s` rows.
    pub fn layer_norm(&mut self, x: Var, g: Var, s: Var, eps: f64) -> Result<Var, NnError> {
        let (tx, tg, ts) = (self.val(x), self.val(g), self.val(s));
        let n = tx.cols();
        if tg.len() != n || ts.len() != n {
            return Err(shape_err("layer_norm", format!("gain {} shift {} width {}", tg.len(), ts.len(), n)));
        }
        let m = tx.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                xhat[r * n + c] = xh;
                out[r * n + c] = tg.data()[c] * xh + ts.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(g) || self.ng(s);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::LayerNorm { x, g, s, xhat, inv_std }, ng))
    }

    /// Training-mode BatchNorm over rows. Returns the output and the batch
    /// mean / unbiased variance for running-estimate updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        g: Var,
        s: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NnError> {
        let (tx, tg, ts) = (self.val(x), self.val(g), self.val(s));
        let n = tx.cols();
        let m = tx.rows();
        if tg.len() != n || ts.len() != n || m == 0 {
            return Err(shape_err("batch_norm", format!("gain {} shift {} width {} rows {}", tg.len(), ts.len(), n, m)));
        }
        let mut mean = vec![0.0; n];
        for r in 0..m {
            for (c, v) in tx.row(r).iter().enumerate() {
                mean[c] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for r in 0..m {
            for (c, v) in tx.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 }).collect();
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let xh = (tx.data()[r * n + c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = xh;
                out[r * n + c] = tg.data()[c] * xh + ts.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(g) || self.ng(s);
        let v = self.push(Tensor::from_parts(m, n, out), Op::BatchNormTrain { x, g, s, xhat, inv_std }, ng);
        Ok((v, mean, unbiased))
    }

    /// Evaluation-mode BatchNorm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        g: Var,
        s: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, NnError> {
        let (tx, tg, ts) = (self.val(x), self.val(g), self.val(s));
        let n = tx.cols();
        if tg.len() != n || ts.len() != n || running_mean.len() != n || running_var.len() != n {
            return Err(shape_err("batch_norm_eval", format!("width {}", n)));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let m = tx.rows();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = tg.data()[c] * ((tx.data()[r * n + c] - running_mean[c]) * inv_std[c]) + ts.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(g) || self.ng(s);
        let op = Op::BatchNormEval { x, g, s, mean: running_mean.to_vec(), inv_std };
        Ok(self.push(Tensor::from_parts(m, n, out), op, ng))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.val(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let v = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Mean(a), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var, NnError> {
        let tp = self.val(pred);
        if tp.len() != target.len() {
            return Err(shape_err("mse", format!("{} predictions vs {} targets", tp.len(), target.len())));
        }
        let n = tp.len().max(1) as f64;
        let v = tp.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(v), Op::Mse { pred, target }, ng))
    }

    /// Mean binary cross entropy of sigmoid(logits) against probabilities.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor) -> Result<Var, NnError> {
        let tz = self.val(logits);
        if tz.len() != target.len() {
            return Err(shape_err("bce_logits", format!("{} logits vs {} targets", tz.len(), target.len())));
        }
        let n = tz.len().max(1) as f64;
        let v = tz.data().iter().zip(target.data()).map(|(z, y)| softplus(*z) - y * z).sum::<f64>() / n;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(v), Op::BceLogits { logits, target }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; returns gradients for every bound
    /// parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(NnError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        if let Some((_, name)) = self.first_non_finite {
            return Err(NnError::NonFinite { op: name });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(NnError::NonFinite { op: node.op.name() });
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let t = &self.nodes[v.0].value;
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(t.rows(), t.cols())))
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, c: f64) {
        if let Some(d) = self.slot(grads, v) {
            for (a, b) in d.data_mut().iter_mut().zip(g.data()) {
                *a += c * b;
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(d) = self.slot(grads, v) {
            for (i, a) in d.data_mut().iter_mut().enumerate() {
                *a += f(i);
            }
        }
    }

    fn acc_colsum(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if let Some(d) = self.slot(grads, v) {
            let n = g.cols();
            let dd = d.data_mut();
            for row in g.data().chunks_exact(n.max(1)) {
                for (acc, x) in dd.iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => {
                match out.by_param.get_mut(key) {
                    Some(t) => t.add_assign(g),
                    None => {
                        out.by_param.insert(*key, g.clone());
                    }
                }
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Linear { x, w, b } => {
                self.backward_matmul(*x, *w, g, grads);
                if let Some(b) = b {
                    self.acc_colsum(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                self.acc_with(grads, *a, |i| g.data()[i] * tb.data()[i]);
                self.acc_with(grads, *b, |i| g.data()[i] * ta.data()[i]);
            }
            Op::Scale(a, c) => self.acc_scaled(grads, *a, g, *c),
            Op::AddScalar(a) => self.acc_scaled(grads, *a, g, 1.0),
            Op::AddRow(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_colsum(grads, *b, g);
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let n = ta.cols();
                self.acc_with(grads, *a, |i| g.data()[i] * tb.data()[i % n]);
                if let Some(d) = self.slot(grads, *b) {
                    let dd = d.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        dd[i % n] += gv * ta.data()[i];
                    }
                }
            }
            Op::MulCol(a, w) => {
                let (ta, tw) = (self.val(*a), self.val(*w));
                let n = ta.cols();
                self.acc_with(grads, *a, |i| g.data()[i] * tw.data()[i / n]);
                if let Some(d) = self.slot(grads, *w) {
                    let dd = d.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        dd[i / n] += gv * ta.data()[i];
                    }
                }
            }
            Op::Relu(a) => self.acc_with(grads, *a, |i| if y.data()[i] > 0.0 { g.data()[i] } else { 0.0 }),
            Op::Tanh(a) => self.acc_with(grads, *a, |i| g.data()[i] * (1.0 - y.data()[i] * y.data()[i])),
            Op::Sigmoid(a) => self.acc_with(grads, *a, |i| g.data()[i] * y.data()[i] * (1.0 - y.data()[i])),
            Op::Exp(a) => self.acc_with(grads, *a, |i| g.data()[i] * y.data()[i]),
            Op::Softplus(a) => {
                let ta = self.val(*a);
                self.acc_with(grads, *a, |i| g.data()[i] * sigmoid(ta.data()[i]));
            }
            Op::SliceRows { a, start } => {
                if let Some(d) = self.slot(grads, *a) {
                    let n = g.cols();
                    let dd = &mut d.data_mut()[start * n..(start + g.rows()) * n];
                    for (x, gv) in dd.iter_mut().zip(g.data()) {
                        *x += gv;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if let Some(d) = self.slot(grads, *a) {
                    let n = d.cols();
                    let w = g.cols();
                    let dd = d.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..w {
                            dd[r * n + start + c] += g.data()[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let rows = self.val(p).rows();
                    if let Some(d) = self.slot(grads, p) {
                        for (x, gv) in d.data_mut().iter_mut().zip(&g.data()[row * n..(row + rows) * n]) {
                            *x += gv;
                        }
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    if let Some(d) = self.slot(grads, p) {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            for j in 0..c {
                                dd[r * c + j] += g.data()[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(d) = self.slot(grads, *a) {
                    let n = g.cols();
                    let dd = d.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            dd[i * n + c] += g.data()[r * n + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows { a, idx } => {
                if let Some(d) = self.slot(grads, *a) {
                    let n = g.cols();
                    let dd = d.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            dd[r * n + c] += g.data()[i * n + c];
                        }
                    }
                }
            }
            Op::GatherAddRelu { p, ip, q, iq, b } => {
                let n = g.cols();
                let masked: Vec<f64> =
                    g.data().iter().zip(y.data()).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect();
                if let Some(d) = self.slot(grads, *p) {
                    let dd = d.data_mut();
                    for (e, &i) in ip.iter().enumerate() {
                        for c in 0..n {
                            dd[i * n + c] += masked[e * n + c];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *q) {
                    let dd = d.data_mut();
                    for (e, &i) in iq.iter().enumerate() {
                        for c in 0..n {
                            dd[i * n + c] += masked[e * n + c];
                        }
                    }
                }
                let masked = Tensor::from_parts(g.rows(), n, masked);
                self.acc_colsum(grads, *b, &masked);
            }
            Op::BlockLinear { x, offset, blocks, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let inb = tw.rows() / blocks;
                let o = tw.cols();
                let m = tx.rows();
                let xc = tx.cols();
                let width = g.cols();
                if m > 0 {
                    if let Some(d) = self.slot(grads, *x) {
                        for k in 0..*blocks {
                            // dx_k += g_k * w_kᵀ
                            gemm(
                                m,
                                o,
                                inb,
                                &g.data()[k * o..],
                                width as isize,
                                1,
                                &tw.data()[k * inb * o..],
                                1,
                                o as isize,
                                1.0,
                                &mut d.data_mut()[offset + k * inb..],
                                xc as isize,
                            );
                        }
                    }
                    if let Some(d) = self.slot(grads, *w) {
                        for k in 0..*blocks {
                            // dw_k += x_kᵀ * g_k
                            gemm(
                                inb,
                                m,
                                o,
                                &tx.data()[offset + k * inb..],
                                1,
                                xc as isize,
                                &g.data()[k * o..],
                                width as isize,
                                1,
                                1.0,
                                &mut d.data_mut()[k * inb * o..],
                                o as isize,
                            );
                        }
                    }
                }
                self.acc_colsum(grads, *b, g);
            }
            Op::SegmentSoftmax { s, seg } => {
                if let Some(d) = self.slot(grads, *s) {
                    let k = y.cols();
                    let dd = d.data_mut();
                    for sid in 0..seg.n_segments() {
                        let mem = seg.members(sid);
                        for c in 0..k {
                            let dot: f64 = mem.iter().map(|&e| g.data()[e * k + c] * y.data()[e * k + c]).sum();
                            for &e in mem {
                                dd[e * k + c] += y.data()[e * k + c] * (g.data()[e * k + c] - dot);
                            }
                        }
                    }
                }
            }
            Op::AttnAggregate { msg, alpha, seg } => {
                let (tm, ta) = (self.val(*msg), self.val(*alpha));
                let heads = ta.cols();
                let mc = tm.cols();
                let h = mc / heads;
                let inv = 1.0 / heads as f64;
                if let Some(d) = self.slot(grads, *msg) {
                    let dd = d.data_mut();
                    for sid in 0..seg.n_segments() {
                        let gs = &g.data()[sid * h..(sid + 1) * h];
                        for &e in seg.members(sid) {
                            for k in 0..heads {
                                let a = ta.data()[e * heads + k] * inv;
                                let row = &mut dd[e * mc + k * h..e * mc + (k + 1) * h];
                                for c in 0..h {
                                    row[c] += a * gs[c];
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *alpha) {
                    let dd = d.data_mut();
                    for sid in 0..seg.n_segments() {
                        let gs = &g.data()[sid * h..(sid + 1) * h];
                        for &e in seg.members(sid) {
                            for k in 0..heads {
                                let row = &tm.data()[e * mc + k * h..e * mc + (k + 1) * h];
                                let dot: f64 = row.iter().zip(gs).map(|(a, b)| a * b).sum();
                                dd[e * heads + k] += dot * inv;
                            }
                        }
                    }
                }
            }
            Op::RowMatVec { f, x } => {
                let (tf, tx) = (self.val(*f), self.val(*x));
                let h = tx.cols();
                if let Some(d) = self.slot(grads, *f) {
                    let dd = d.data_mut();
                    for r in 0..tx.rows() {
                        let xr = tx.row(r);
                        for i in 0..h {
                            let gi = g.data()[r * h + i];
                            let row = &mut dd[r * h * h + i * h..r * h * h + (i + 1) * h];
                            for j in 0..h {
                                row[j] += gi * xr[j];
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let dd = d.data_mut();
                    for r in 0..tx.rows() {
                        let fr = tf.row(r);
                        for i in 0..h {
                            let gi = g.data()[r * h + i];
                            for j in 0..h {
                                dd[r * h + j] += gi * fr[i * h + j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gain, s, xhat, inv_std } => {
                let n = y.cols();
                let tg = self.val(*gain);
                if let Some(d) = self.slot(grads, *x) {
                    let dd = d.data_mut();
                    let mut dxh = vec![0.0; n];
                    for r in 0..y.rows() {
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for c in 0..n {
                            dxh[c] = g.data()[r * n + c] * tg.data()[c];
                            sum += dxh[c];
                            sum_x += dxh[c] * xhat[r * n + c];
                        }
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            dd[r * n + c] += k * (n as f64 * dxh[c] - sum - xhat[r * n + c] * sum_x);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gain) {
                    let dd = d.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        dd[i % n] += gv * xhat[i];
                    }
                }
                self.acc_colsum(grads, *s, g);
            }
            Op::BatchNormTrain { x, g: gain, s, xhat, inv_std } => {
                let n = y.cols();
                let m = y.rows();
                let tg = self.val(*gain);
                if let Some(d) = self.slot(grads, *x) {
                    let mut sum = vec![0.0; n];
                    let mut sum_x = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            let dxh = g.data()[r * n + c] * tg.data()[c];
                            sum[c] += dxh;
                            sum_x[c] += dxh * xhat[r * n + c];
                        }
                    }
                    let dd = d.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            let dxh = g.data()[r * n + c] * tg.data()[c];
                            dd[r * n + c] += inv_std[c] / m as f64
                                * (m as f64 * dxh - sum[c] - xhat[r * n + c] * sum_x[c]);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gain) {
                    let dd = d.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        dd[i % n] += gv * xhat[i];
                    }
                }
                self.acc_colsum(grads, *s, g);
            }
            Op::BatchNormEval { x, g: gain, s, mean, inv_std } => {
                let n = y.cols();
                let (tx, tg) = (self.val(*x), self.val(*gain));
                self.acc_with(grads, *x, |i| g.data()[i] * tg.data()[i % n] * inv_std[i % n]);
                if let Some(d) = self.slot(grads, *gain) {
                    let dd = d.data_mut();
                    for (i, gv) in g.data().iter().enumerate() {
                        let c = i % n;
                        dd[c] += gv * (tx.data()[i] - mean[c]) * inv_std[c];
                    }
                }
                self.acc_colsum(grads, *s, g);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc_with(grads, *a, |_| gv);
            }
            Op::Mean(a) => {
                let gv = g.item() / self.val(*a).len().max(1) as f64;
                self.acc_with(grads, *a, |_| gv);
            }
            Op::Mse { pred, target } => {
                let tp = self.val(*pred);
                let k = 2.0 * g.item() / tp.len().max(1) as f64;
                self.acc_with(grads, *pred, |i| k * (tp.data()[i] - target.data()[i]));
            }
            Op::BceLogits { logits, target } => {
                let tz = self.val(*logits);
                let k = g.item() / tz.len().max(1) as f64;
                self.acc_with(grads, *logits, |i| k * (sigmoid(tz.data()[i]) - target.data()[i]));
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if let Some(d) = self.slot(grads, a) {
            // da += g * bᵀ
            gemm(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, 1.0, d.data_mut(), k as isize);
        }
        if let Some(d) = self.slot(grads, b) {
            // db += aᵀ * g
            gemm(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, 1.0, d.data_mut(), n as isize);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_sum_ignores_order() {
        let mut a = [1e16, 1.0, -1e16, 3.0];
        let mut b = [3.0, -1e16, 1.0, 1e16];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(NnError::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_forward_is_reported_by_name() {
        let mut group = ParameterGroup::new();
        let k = group.add("w", Tensor::row_vector(&[800.0]));
        let mut tape = Tape::new();
        let w = tape.param(&group, k);
        let e = tape.exp(w);
        let loss = tape.sum(e);
        match tape.backward(loss) {
            Err(NnError::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segment_softmax_normalises_each_segment() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(5, 2, vec![0.1, 3.0, -2.0, 0.0, 5.0, 1.0, 0.3, 0.3, 9.0, -9.0]).unwrap());
        let seg = Arc::new(Segments::from_assignment(&[0, 1, 0, 1, 2], 4));
        let y = tape.segment_softmax(s, seg.clone()).unwrap();
        let t = tape.value(y);
        for sid in 0..3 {
            for c in 0..2 {
                let total: f64 = seg.members(sid).iter().map(|&e| t.get(e, c)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attn_aggregate_of_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let msg = tape.constant(Tensor::filled(2, 4, 1.0));
        let alpha = tape.constant(Tensor::filled(2, 2, 0.5));
        let seg = Arc::new(Segments::from_assignment(&[0, 0], 2));
        let out = tape.attn_aggregate(msg, alpha, seg).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
