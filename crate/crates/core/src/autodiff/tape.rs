//! Reverse-mode differentiation tape.
//!
//! Each operation records its output tensor and enough context to replay the
//! chain rule backward. Tapes are single-threaded; a fresh tape is built per
//! forward pass and `backward` fills one gradient per gradient-requiring
//! node, deterministically.

use super::lu::LuFactors;
use super::svd::{
    svd3_backward, svd3_forward, svd_min_right_backward, svd_min_right_forward, Svd3Cache,
    SvdMinCache,
};
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
#[allow(dead_code)] // constants inside variants are kept for Debug output
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    ScaleT(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    AcosClamped(NodeId, f64),
    ClampMin(NodeId, f64),
    SoftmaxRows(NodeId),
    LogsumexpRows(NodeId),
    LogsumexpCols(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    AddRowVec(NodeId, NodeId),
    AddColVec(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    ScaleCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    ConcatVecs(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    SliceVec(NodeId, usize, usize),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherEntries(NodeId, Vec<(usize, usize)>),
    Assemble {
        blocks: Vec<(NodeId, usize, usize)>,
    },
    DiagPart(NodeId),
    DiagMat(NodeId),
    Skew3(NodeId),
    SvdMinRight {
        a: NodeId,
        cache: Box<SvdMinCache>,
    },
    Svd3 {
        a: NodeId,
        cache: Box<Svd3Cache>,
    },
    LinearSolve {
        m: NodeId,
        b: NodeId,
        lu: Box<LuFactors>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, details: String) -> DiffError {
    DiffError::ShapeMismatch { op, details }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf whose gradient requirement follows the tensor's own flag.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.rg(a) || self.rg(b)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = ta.zip(tb, f);
        let rg = self.rg2(a, b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let out = self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))?;
        self.value(out).check_finite("div")?;
        Ok(out)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a, c), rg)
    }

    /// Multiply a tensor by a scalar node (shape `[1]`).
    pub fn scale_t(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        if !self.value(s).is_scalar() {
            return Err(shape_err(
                "scale_t",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| sv * x);
        let rg = self.rg2(a, s);
        Ok(self.push(value, Op::ScaleT(a, s), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} × {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = ta.matmul_plain(tb);
        let rg = self.rg2(a, b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("transpose", format!("{:?}", ta.shape())));
        }
        let value = ta.transposed();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Fused linear layer: `x·wᵀ + b` with `x: [m,k]`, `w: [n,k]`, `b: [n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if !tx.is_matrix() || !tw.is_matrix() || tx.cols() != tw.cols() || tb.numel() != tw.rows() {
            return Err(shape_err(
                "linear",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = tb.data()[j];
                for p in 0..k {
                    s += tx.get(i, p) * tw.get(j, p);
                }
                out.set(i, j, s);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
        check: Option<&'static str>,
    ) -> Result<NodeId, DiffError> {
        let value = self.value(a).map(f);
        if let Some(name) = check {
            value.check_finite(name)?;
        }
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), None).unwrap()
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a), None)
            .unwrap()
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, f64::exp, Op::Exp(a), Some("exp"))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, f64::ln, Op::Ln(a), Some("ln"))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, f64::sqrt, Op::Sqrt(a), Some("sqrt"))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, f64::recip, Op::Recip(a), Some("recip"))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a), None).unwrap()
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a), None).unwrap()
    }

    /// `acos` with inputs clamped to `[-1+margin, 1-margin]` so boundary
    /// values stay finite in both passes.
    pub fn acos_clamped(&mut self, a: NodeId, margin: f64) -> NodeId {
        let lo = -1.0 + margin;
        let hi = 1.0 - margin;
        self.unary(
            a,
            |x| x.clamp(lo, hi).acos(),
            Op::AcosClamped(a, margin),
            None,
        )
        .unwrap()
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor), None)
            .unwrap()
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("softmax_rows", format!("{:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                denom += (row[j] - m).exp();
            }
            for j in 0..c {
                out.set(i, j, (row[j] - m).exp() / denom);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    fn logsumexp_axis(&mut self, a: NodeId, rows: bool) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("logsumexp", format!("{:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let n = if rows { r } else { c };
        let mut out = Tensor::zeros(vec![n]);
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            let len = if rows { c } else { r };
            for j in 0..len {
                let x = if rows { ta.get(i, j) } else { ta.get(j, i) };
                m = m.max(x);
            }
            let mut s = 0.0;
            for j in 0..len {
                let x = if rows { ta.get(i, j) } else { ta.get(j, i) };
                s += (x - m).exp();
            }
            out.data_mut()[i] = m + s.ln();
        }
        let rg = self.rg(a);
        let op = if rows {
            Op::LogsumexpRows(a)
        } else {
            Op::LogsumexpCols(a)
        };
        Ok(self.push(out, op, rg))
    }

    /// Log-sum-exp reducing each row: `[r,c] -> [r]`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.logsumexp_axis(a, true)
    }

    /// Log-sum-exp reducing each column: `[r,c] -> [c]`.
    pub fn logsumexp_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.logsumexp_axis(a, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("sum_rows", format!("{:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![r]);
        for i in 0..r {
            out.data_mut()[i] = (0..c).map(|j| ta.get(i, j)).sum();
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(shape_err("sum_cols", format!("{:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![c]);
        for j in 0..c {
            out.data_mut()[j] = (0..r).map(|i| ta.get(i, j)).sum();
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumCols(a), rg))
    }

    fn broadcast(
        &mut self,
        name: &'static str,
        m: NodeId,
        v: NodeId,
        along_rows: bool,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (tm, tv) = (self.value(m), self.value(v));
        let want = if along_rows { tm.rows() } else { tm.cols() };
        if !tm.is_matrix() || !tv.is_vector() || tv.numel() != want {
            return Err(shape_err(
                name,
                format!("matrix {:?}, vector {:?}", tm.shape(), tv.shape()),
            ));
        }
        let (r, c) = (tm.rows(), tm.cols());
        let mut out = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            for j in 0..c {
                let vx = if along_rows {
                    tv.data()[i]
                } else {
                    tv.data()[j]
                };
                out.set(i, j, f(tm.get(i, j), vx));
            }
        }
        let rg = self.rg2(m, v);
        Ok(self.push(out, op, rg))
    }

    /// `out[i,j] = m[i,j] + v[j]` (vector broadcast across rows).
    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.broadcast("add_row_vec", m, v, false, |x, y| x + y, Op::AddRowVec(m, v))
    }

    /// `out[i,j] = m[i,j] + v[i]` (vector broadcast across columns).
    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.broadcast("add_col_vec", m, v, true, |x, y| x + y, Op::AddColVec(m, v))
    }

    /// `out[i,j] = m[i,j] * v[i]`.
    pub fn scale_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.broadcast("scale_rows", m, v, true, |x, y| x * y, Op::ScaleRows(m, v))
    }

    /// `out[i,j] = m[i,j] * v[j]`.
    pub fn scale_cols(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.broadcast("scale_cols", m, v, false, |x, y| x * y, Op::ScaleCols(m, v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "empty part list".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != c {
                return Err(shape_err("concat_rows", format!("{:?}", t.shape())));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "empty part list".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != r {
                return Err(shape_err("concat_cols", format!("{:?}", t.shape())));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(vec![r, cols]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            let mut vals = Vec::with_capacity(r * pc);
            vals.extend_from_slice(t.data());
            for i in 0..r {
                for j in 0..pc {
                    out.set(i, off + j, vals[i * pc + j]);
                }
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_vecs(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_vecs", "empty part list".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(shape_err("concat_vecs", format!("{:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::ConcatVecs(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() || hi > ta.rows() || lo >= hi {
            return Err(shape_err(
                "slice_rows",
                format!("{lo}..{hi} of {:?}", ta.shape()),
            ));
        }
        let c = ta.cols();
        let data = ta.data()[lo * c..hi * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(hi - lo, c, data),
            Op::SliceRows(a, lo, hi),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() || hi > ta.cols() || lo >= hi {
            return Err(shape_err(
                "slice_cols",
                format!("{lo}..{hi} of {:?}", ta.shape()),
            ));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(vec![r, hi - lo]);
        for i in 0..r {
            for j in lo..hi {
                out.set(i, j - lo, ta.data()[i * c + j]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, lo, hi), rg))
    }

    pub fn slice_vec(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_vector() || hi > ta.numel() || lo >= hi {
            return Err(shape_err(
                "slice_vec",
                format!("{lo}..{hi} of {:?}", ta.shape()),
            ));
        }
        let data = ta.data()[lo..hi].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::SliceVec(a, lo, hi), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", ta.shape(), shape),
            ));
        }
        let value = Tensor::new(shape, ta.data().to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() || indices.iter().any(|&i| i >= ta.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("indices out of range for {:?}", ta.shape()),
            ));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(indices.len(), c, data),
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    pub fn gather_entries(
        &mut self,
        a: NodeId,
        entries: &[(usize, usize)],
    ) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix()
            || entries
                .iter()
                .any(|&(r, c)| r >= ta.rows() || c >= ta.cols())
        {
            return Err(shape_err(
                "gather_entries",
                format!("entries out of range for {:?}", ta.shape()),
            ));
        }
        let data = entries.iter().map(|&(r, c)| ta.get(r, c)).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(data),
            Op::GatherEntries(a, entries.to_vec()),
            rg,
        ))
    }

    /// Builds an `[r,c]` matrix by adding matrix blocks at given offsets into
    /// zeros. Overlapping blocks accumulate.
    pub fn assemble(
        &mut self,
        rows: usize,
        cols: usize,
        blocks: &[(NodeId, usize, usize)],
    ) -> Result<NodeId, DiffError> {
        let mut out = Tensor::zeros(vec![rows, cols]);
        for &(id, r0, c0) in blocks {
            let t = self.value(id);
            if !t.is_matrix() || r0 + t.rows() > rows || c0 + t.cols() > cols {
                return Err(shape_err(
                    "assemble",
                    format!(
                        "block {:?} at ({r0},{c0}) outside [{rows},{cols}]",
                        t.shape()
                    ),
                ));
            }
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    let cur = out.get(r0 + i, c0 + j);
                    out.set(r0 + i, c0 + j, cur + t.get(i, j));
                }
            }
        }
        let rg = blocks.iter().any(|&(id, _, _)| self.rg(id));
        Ok(self.push(
            out,
            Op::Assemble {
                blocks: blocks.to_vec(),
            },
            rg,
        ))
    }

    pub fn diag_part(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() || ta.rows() != ta.cols() {
            return Err(shape_err("diag_part", format!("{:?}", ta.shape())));
        }
        let n = ta.rows();
        let data = (0..n).map(|i| ta.get(i, i)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::DiagPart(a), rg))
    }

    pub fn diag_mat(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_vector() {
            return Err(shape_err("diag_mat", format!("{:?}", ta.shape())));
        }
        let n = ta.numel();
        let mut out = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            out.set(i, i, ta.data()[i]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::DiagMat(a), rg))
    }

    /// Skew-symmetric matrix of a 3-vector.
    pub fn skew3(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if ta.shape() != [3] {
            return Err(shape_err("skew3", format!("{:?}", ta.shape())));
        }
        let (x, y, z) = (ta.data()[0], ta.data()[1], ta.data()[2]);
        let value = Tensor::matrix(3, 3, vec![0.0, -z, y, z, 0.0, -x, -y, x, 0.0]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Skew3(a), rg))
    }

    /// Unit right singular vector for the smallest singular value of an
    /// m×n matrix (n ≥ 2; m may be below n, as in the minimal eight-point
    /// system).
    pub fn svd_min_right(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if !ta.is_matrix() || ta.rows() < 2 || ta.cols() < 2 {
            return Err(shape_err("svd_min_right", format!("{:?}", ta.shape())));
        }
        ta.check_finite("svd_min_right")?;
        let (out, cache) = svd_min_right_forward(ta)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SvdMinRight {
                a,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    /// Packed full SVD of a 3×3 matrix: returns a `[3,7]` node laid out as
    /// `[U | σ | V]`. Use `slice_cols` to split. The backward pass errors on
    /// repeated singular values.
    pub fn svd3(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ta = self.value(a);
        if ta.shape() != [3, 3] {
            return Err(shape_err("svd3", format!("{:?}", ta.shape())));
        }
        ta.check_finite("svd3")?;
        let (out, cache) = svd3_forward(ta)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Svd3 {
                a,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    /// Solves `M x = b` by LU with partial pivoting; differentiable in both
    /// operands via the implicit function theorem.
    pub fn linear_solve(&mut self, m: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (tm, tb) = (self.value(m), self.value(b));
        if !tm.is_matrix() || tm.rows() != tm.cols() || !tb.is_vector() || tb.numel() != tm.rows()
        {
            return Err(shape_err(
                "linear_solve",
                format!("M {:?}, b {:?}", tm.shape(), tb.shape()),
            ));
        }
        let n = tm.rows();
        let lu = LuFactors::factor(tm.data(), n)?;
        let x = lu.solve(tb.data());
        let value = Tensor::vector(x);
        value.check_finite("linear_solve")?;
        let rg = self.rg2(m, b);
        Ok(self.push(
            value,
            Op::LinearSolve {
                m,
                b,
                lu: Box::new(lu),
            },
            rg,
        ))
    }

    // ---- composite helpers ----

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.dot(a, a)
    }

    pub fn norm2(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s = self.sum_sq(a)?;
        self.sqrt(s)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ----

    /// Runs the reverse sweep from a scalar node, filling gradients for every
    /// gradient-requiring node. May be called repeatedly; each call recomputes
    /// from scratch.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        assert!(
            self.value(loss).is_scalar(),
            "backward target must be scalar, got {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(
                self.nodes[loss.0].value.shape().to_vec(),
                1.0,
            ));
            for i in (0..=loss.0).rev() {
                if grads[i].is_none() || !self.nodes[i].requires_grad {
                    continue;
                }
                let g = grads[i].clone().unwrap();
                self.backprop(i, &g, &mut grads)?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        debug_assert_eq!(self.nodes[id.0].value.shape(), delta.shape());
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.acc(grads, *a, g.zip(tb, |gx, bx| gx * bx));
                self.acc(grads, *b, g.zip(ta, |gx, ax| gx * ax));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.acc(grads, *a, g.zip(tb, |gx, bx| gx / bx));
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data().iter()))
                        .map(|(&gx, (&ax, &bx))| -gx * ax / (bx * bx))
                        .collect(),
                );
                self.acc(grads, *b, gb);
            }
            Op::Neg(a) => self.acc(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| c * x));
            }
            Op::AddConst(a, _) => self.acc(grads, *a, g.clone()),
            Op::ScaleT(a, s) => {
                let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                let sv = ts.item();
                self.acc(grads, *a, g.map(|x| sv * x));
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(ta.data().iter())
                    .map(|(&gx, &ax)| gx * ax)
                    .sum();
                self.acc(grads, *s, Tensor::scalar(gs));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.acc(grads, *a, g.matmul_plain(&tb.transposed()));
                self.acc(grads, *b, ta.transposed().matmul_plain(g));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transposed()),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                self.acc(grads, *x, g.matmul_plain(tw));
                self.acc(grads, *w, g.transposed().matmul_plain(tx));
                let (m, n) = (g.rows(), g.cols());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.get(i, j);
                    }
                }
                self.acc(grads, *b, Tensor::vector(db));
            }
            Op::Relu(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(grads, *a, g.zip(ta, |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                self.acc(grads, *a, g.zip(y, |gx, yx| gx * yx * (1.0 - yx)));
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                self.acc(grads, *a, g.zip(y, |gx, yx| gx * yx));
            }
            Op::Ln(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(grads, *a, g.zip(ta, |gx, x| gx / x));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                self.acc(grads, *a, g.zip(y, |gx, yx| gx / (2.0 * yx)));
            }
            Op::Recip(a) => {
                let y = &self.nodes[idx].value;
                self.acc(grads, *a, g.zip(y, |gx, yx| -gx * yx * yx));
            }
            Op::Sin(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(grads, *a, g.zip(ta, |gx, x| gx * x.cos()));
            }
            Op::Cos(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(grads, *a, g.zip(ta, |gx, x| -gx * x.sin()));
            }
            Op::AcosClamped(a, margin) => {
                let (lo, hi) = (-1.0 + margin, 1.0 - margin);
                let ta = &self.nodes[a.0].value;
                self.acc(
                    grads,
                    *a,
                    g.zip(ta, |gx, x| {
                        if x > lo && x < hi {
                            -gx / (1.0 - x * x).sqrt()
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let ta = &self.nodes[a.0].value;
                self.acc(
                    grads,
                    *a,
                    g.zip(ta, |gx, x| if x > floor { gx } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.get(i, j) * y.get(i, j);
                    }
                    for j in 0..c {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogsumexpRows(a) => {
                let (ta, y) = (&self.nodes[a.0].value, &self.nodes[idx].value);
                let (r, c) = (ta.rows(), ta.cols());
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.data()[i] * (ta.get(i, j) - y.data()[i]).exp());
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogsumexpCols(a) => {
                let (ta, y) = (&self.nodes[a.0].value, &self.nodes[idx].value);
                let (r, c) = (ta.rows(), ta.cols());
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.data()[j] * (ta.get(i, j) - y.data()[j]).exp());
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(
                    grads,
                    *a,
                    Tensor::filled(ta.shape().to_vec(), g.item()),
                );
            }
            Op::SumRows(a) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.data()[i]);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::SumCols(a) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.data()[j]);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::AddRowVec(m, v) => {
                self.acc(grads, *m, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g.get(i, j);
                    }
                }
                self.acc(grads, *v, Tensor::vector(dv));
            }
            Op::AddColVec(m, v) => {
                self.acc(grads, *m, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dv[i] += g.get(i, j);
                    }
                }
                self.acc(grads, *v, Tensor::vector(dv));
            }
            Op::ScaleRows(m, v) => {
                let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
                let (r, c) = (g.rows(), g.cols());
                let mut dm = Tensor::zeros(vec![r, c]);
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dm.set(i, j, g.get(i, j) * tv.data()[i]);
                        dv[i] += g.get(i, j) * tm.get(i, j);
                    }
                }
                self.acc(grads, *m, dm);
                self.acc(grads, *v, Tensor::vector(dv));
            }
            Op::ScaleCols(m, v) => {
                let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
                let (r, c) = (g.rows(), g.cols());
                let mut dm = Tensor::zeros(vec![r, c]);
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dm.set(i, j, g.get(i, j) * tv.data()[j]);
                        dv[j] += g.get(i, j) * tm.get(i, j);
                    }
                }
                self.acc(grads, *m, dm);
                self.acc(grads, *v, Tensor::vector(dv));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let pr = self.nodes[p.0].value.rows();
                    let data = g.data()[off * c..(off + pr) * c].to_vec();
                    self.acc(grads, p, Tensor::matrix(pr, c, data));
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let r = g.rows();
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut dp = Tensor::zeros(vec![r, pc]);
                    for i in 0..r {
                        for j in 0..pc {
                            dp.set(i, j, g.get(i, off + j));
                        }
                    }
                    self.acc(grads, p, dp);
                    off += pc;
                }
            }
            Op::ConcatVecs(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.acc(grads, p, Tensor::vector(g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceRows(a, lo, _hi) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                let c = ta.cols();
                for i in 0..g.rows() {
                    for j in 0..c {
                        dx.set(lo + i, j, g.get(i, j));
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::SliceCols(a, lo, _hi) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx.set(i, lo + j, g.get(i, j));
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::SliceVec(a, lo, _hi) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                for (i, &gx) in g.data().iter().enumerate() {
                    dx.data_mut()[lo + i] = gx;
                }
                self.acc(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let ta = &self.nodes[a.0].value;
                self.acc(
                    grads,
                    *a,
                    Tensor::new(ta.shape().to_vec(), g.data().to_vec()),
                );
            }
            Op::GatherRows(a, indices) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                let c = ta.cols();
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        let cur = dx.get(src, j);
                        dx.set(src, j, cur + g.get(row, j));
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::GatherEntries(a, entries) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    let cur = dx.get(r, c);
                    dx.set(r, c, cur + g.data()[k]);
                }
                self.acc(grads, *a, dx);
            }
            Op::Assemble { blocks } => {
                for &(id, r0, c0) in blocks {
                    let t = &self.nodes[id.0].value;
                    let mut dp = Tensor::zeros(t.shape().to_vec());
                    for i in 0..t.rows() {
                        for j in 0..t.cols() {
                            dp.set(i, j, g.get(r0 + i, c0 + j));
                        }
                    }
                    self.acc(grads, id, dp);
                }
            }
            Op::DiagPart(a) => {
                let ta = &self.nodes[a.0].value;
                let mut dx = Tensor::zeros(ta.shape().to_vec());
                for i in 0..g.numel() {
                    dx.set(i, i, g.data()[i]);
                }
                self.acc(grads, *a, dx);
            }
            Op::DiagMat(a) => {
                let n = self.nodes[a.0].value.numel();
                let data = (0..n).map(|i| g.get(i, i)).collect();
                self.acc(grads, *a, Tensor::vector(data));
            }
            Op::Skew3(a) => {
                let dv = Tensor::vector(vec![
                    g.get(2, 1) - g.get(1, 2),
                    g.get(0, 2) - g.get(2, 0),
                    g.get(1, 0) - g.get(0, 1),
                ]);
                self.acc(grads, *a, dv);
            }
            Op::SvdMinRight { a, cache } => {
                let ta = &self.nodes[a.0].value;
                let da = svd_min_right_backward(ta, cache, g);
                self.acc(grads, *a, da);
            }
            Op::Svd3 { a, cache } => {
                let da = svd3_backward(cache, g)?;
                self.acc(grads, *a, da);
            }
            Op::LinearSolve { m, b, lu } => {
                let x = &self.nodes[idx].value;
                let gb = lu.solve_transpose(g.data());
                let n = gb.len();
                let mut dm = Tensor::zeros(vec![n, n]);
                for i in 0..n {
                    for j in 0..n {
                        dm.set(i, j, -gb[i] * x.data()[j]);
                    }
                }
                self.acc(grads, *m, dm);
                self.acc(grads, *b, Tensor::vector(gb));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_negative_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(-2.5));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).item(), 0.0);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::identity(4));
        let b = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.5, 0.25]));
        let x = tape.linear_solve(m, b).unwrap();
        assert_eq!(tape.value(x).data(), tape.value(b).data());
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.3, -1.2, 2.2]));
        let y = tape.sum_sq(x).unwrap();
        tape.backward(y).unwrap();
        let g1: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
        tape.backward(y).unwrap();
        let g2: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
        let bits1: Vec<u64> = g1.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let a = tape.var(t.clone());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]));
        let _ = tape.matmul(a, b).unwrap();
        let _ = tape.mul(a, b).unwrap();
        let _ = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(a).data(), t.data());
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        match tape.add(a, b) {
            Err(DiffError::ShapeMismatch { op, details }) => {
                assert_eq!(op, "add");
                assert!(details.contains("[2, 3]"));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
