//! Reverse-mode tape.
//!
//! Ops are recorded in construction order, which is already a topological
//! order, so backward is a single reverse sweep. Every op validates shapes
//! and rejects non-finite outputs; gradients are checked the same way.

use super::kernels;
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_each_row_chunk;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a `[1, cols]` row applied to every row of lhs.
    Row,
    /// rhs is a `[rows, 1]` column applied to every column of lhs.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// x*w + bias with optional fused relu.
    Affine { x: NodeId, w: NodeId, b: NodeId, relu: bool },
    /// relu(a + b), the residual-shortcut fusion.
    AddRelu { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bcast: Bcast },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId, bcast: Bcast },
    Scale { a: NodeId, c: f32 },
    AddScalar { a: NodeId },
    Neg { a: NodeId },
    Recip { a: NodeId },
    Relu { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    Exp { a: NodeId },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    GatherRows { a: NodeId, idx: Vec<i64> },
    Reshape { a: NodeId },
    BroadcastRows { a: NodeId },
    SumAll { a: NodeId },
    SumGroups { a: NodeId, group: usize },
    LogSumExp { a: NodeId },
    Bilinear { map: NodeId, uv: NodeId, height: usize, width: usize },
    CumprodExcl { a: NodeId, group: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Gradient of a leaf, or zeros when the leaf is tracked but
    /// unreachable from the root.
    pub fn or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

fn unary_map(src: &[f32], f: impl Fn(f32) -> f32 + Sync) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    if src.len() < 1 << 14 {
        for (o, &x) in out.iter_mut().zip(src.iter()) {
            *o = f(x);
        }
    } else {
        for_each_row_chunk(&mut out, 1, |first, chunk| {
            for (o, &x) in chunk.iter_mut().zip(src[first..].iter()) {
                *o = f(x);
            }
        });
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Tracked input; gradients will be produced for it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, false, Op::Leaf)
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, op });
        id
    }

    fn push_op(&mut self, op_name: &'static str, value: Tensor, inputs: &[NodeId], op: Op) -> Result<NodeId> {
        ensure_finite(op_name, value.data())?;
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(value, requires, op))
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = (at.rows(), at.cols());
        let (kb, n) = (bt.rows(), bt.cols());
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", at.shape(), bt.shape()),
            });
        }
        let mut out = vec![0.0f32; m * n];
        kernels::matmul(at.data(), bt.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul", value, &[a, b], Op::Matmul { a, b })
    }

    /// Fused `x*w + bias` with an optional relu; one pass over the output.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId, relu: bool) -> Result<NodeId> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = (xt.rows(), xt.cols());
        let (kw, n) = (wt.rows(), wt.cols());
        if k != kw || bt.rows() != 1 || bt.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "affine",
                detail: format!("{:?} x {:?} + {:?}", xt.shape(), wt.shape(), bt.shape()),
            });
        }
        let mut out = vec![0.0f32; m * n];
        kernels::affine(xt.data(), wt.data(), bt.data(), relu, &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op("affine", value, &[x, w, b], Op::Affine { x, w, b, relu })
    }

    /// relu(a + b) in one pass; shapes must match.
    pub fn add_relu(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_relu",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let mut out = at.data().to_vec();
        let bd = bt.data();
        for_each_row_chunk(&mut out, 1, |first, chunk| {
            for (o, &v) in chunk.iter_mut().zip(bd[first..].iter()) {
                *o = (*o + v).max(0.0);
            }
        });
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("add_relu", value, &[a, b], Op::AddRelu { a, b })
    }

    fn binary_bcast(&self, op: &'static str, a: NodeId, b: NodeId, allow_col: bool) -> Result<Bcast> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() == bt.shape() {
            Ok(Bcast::Same)
        } else if bt.rows() == 1 && bt.cols() == at.cols() {
            Ok(Bcast::Row)
        } else if allow_col && bt.cols() == 1 && bt.rows() == at.rows() {
            Ok(Bcast::Col)
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = self.binary_bcast("add", a, b, false)?;
        let (at, bt) = (self.value(a), self.value(b));
        let cols = at.cols();
        let mut out = at.data().to_vec();
        match bcast {
            Bcast::Same => {
                let bd = bt.data();
                for_each_row_chunk(&mut out, 1, |first, chunk| {
                    for (o, &v) in chunk.iter_mut().zip(bd[first..].iter()) {
                        *o += v;
                    }
                });
            }
            Bcast::Row => {
                let bd = bt.data();
                for row in out.chunks_mut(cols) {
                    for (o, &v) in row.iter_mut().zip(bd.iter()) {
                        *o += v;
                    }
                }
            }
            Bcast::Col => unreachable!(),
        }
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("add", value, &[a, b], Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let out: Vec<f32> = at.data().iter().zip(bt.data().iter()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("sub", value, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = self.binary_bcast("mul", a, b, true)?;
        let (at, bt) = (self.value(a), self.value(b));
        let cols = at.cols();
        let mut out = at.data().to_vec();
        let bd = bt.data();
        match bcast {
            Bcast::Same => {
                for_each_row_chunk(&mut out, 1, |first, chunk| {
                    for (o, &v) in chunk.iter_mut().zip(bd[first..].iter()) {
                        *o *= v;
                    }
                });
            }
            Bcast::Row => {
                for row in out.chunks_mut(cols) {
                    for (o, &v) in row.iter_mut().zip(bd.iter()) {
                        *o *= v;
                    }
                }
            }
            Bcast::Col => {
                for (r, row) in out.chunks_mut(cols).enumerate() {
                    let v = bd[r];
                    for o in row.iter_mut() {
                        *o *= v;
                    }
                }
            }
        }
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("mul", value, &[a, b], Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), |x| x * c);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("scale", value, &[a], Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), |x| x + c);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("add_scalar", value, &[a], Op::AddScalar { a })
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), |x| -x);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("neg", value, &[a], Op::Neg { a })
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), |x| 1.0 / x);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("recip", value, &[a], Op::Recip { a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), |x| x.max(0.0));
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("relu", value, &[a], Op::Relu { a })
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), f32::sin);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("sin", value, &[a], Op::Sin { a })
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), f32::cos);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("cos", value, &[a], Op::Cos { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), f32::exp);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("exp", value, &[a], Op::Exp { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), sigmoid);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("sigmoid", value, &[a], Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let out = unary_map(at.data(), softplus);
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("softplus", value, &[a], Op::Softplus { a })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat", detail: "no parts".into() });
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("row counts differ: {} vs {}", rows, t.rows()),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        let mut col0 = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + col0..r * total + col0 + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push_op("concat", value, parts, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat", detail: "no parts".into() });
        }
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("column counts differ: {} vs {}", cols, t.cols()),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push_op("concat", value, parts, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let at = self.value(a);
        let (rows, cols) = (at.rows(), at.cols());
        if start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("cols {}..{} of {}", start, start + len, cols),
            });
        }
        let mut out = vec![0.0f32; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&at.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push_op("slice", value, &[a], Op::SliceCols { a, start, len })
    }

    /// Row gather; index −1 yields a zero row (used for conv padding).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[i64]) -> Result<NodeId> {
        let at = self.value(a);
        let (rows, cols) = (at.rows(), at.cols());
        for &i in idx {
            if i >= rows as i64 {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    detail: format!("row {} out of {}", i, rows),
                });
            }
        }
        let src = at.data();
        let mut out = vec![0.0f32; idx.len() * cols];
        for_each_row_chunk(&mut out, cols, |first, chunk| {
            for (o, &i) in chunk.chunks_mut(cols).zip(idx[first..].iter()) {
                if i >= 0 {
                    o.copy_from_slice(&src[i as usize * cols..(i as usize + 1) * cols]);
                }
            }
        });
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        self.push_op("gather", value, &[a], Op::GatherRows { a, idx: idx.to_vec() })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push_op("reshape", value, &[a], Op::Reshape { a })
    }

    /// `[1, cols]` row repeated `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let at = self.value(a);
        if at.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                detail: format!("expected a single row, got {:?}", at.shape()),
            });
        }
        let cols = at.cols();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(at.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push_op("broadcast", value, &[a], Op::BroadcastRows { a })
    }

    /// Sum of all elements, in row-major index order.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = 0.0f32;
        for &v in self.value(a).data() {
            s += v;
        }
        let value = Tensor::scalar(s);
        self.push_op("sum", value, &[a], Op::SumAll { a })
    }

    /// Sums each contiguous block of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn sum_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let at = self.value(a);
        let (rows, cols) = (at.rows(), at.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_groups",
                detail: format!("{} rows not divisible into groups of {}", rows, group),
            });
        }
        let groups = rows / group;
        let src = at.data();
        let mut out = vec![0.0f32; groups * cols];
        for_each_row_chunk(&mut out, cols, |first, chunk| {
            for (g, orow) in chunk.chunks_mut(cols).enumerate() {
                let base = (first + g) * group;
                for r in 0..group {
                    let srow = &src[(base + r) * cols..(base + r + 1) * cols];
                    for (o, &v) in orow.iter_mut().zip(srow.iter()) {
                        *o += v;
                    }
                }
            }
        });
        let value = Tensor::new(vec![groups, cols], out)?;
        self.push_op("sum_groups", value, &[a], Op::SumGroups { a, group })
    }

    /// Numerically stable log(sum(exp(x))) over a `[n, 1]` column.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        if at.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "log_sum_exp",
                detail: format!("expected a column, got {:?}", at.shape()),
            });
        }
        let src = at.data();
        let m = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for &v in src {
            s += (v - m).exp();
        }
        let value = Tensor::scalar(m + s.ln());
        self.push_op("log_sum_exp", value, &[a], Op::LogSumExp { a })
    }

    /// Bilinear lookup of `uv` (continuous pixel coordinates, clamped to
    /// the map border) in a `[h*w, c]` feature map. Differentiable with
    /// respect to both the map and the coordinates.
    pub fn bilinear(&mut self, map: NodeId, uv: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let mt = self.value(map);
        let ut = self.value(uv);
        if mt.rows() != height * width {
            return Err(Error::ShapeMismatch {
                op: "bilinear",
                detail: format!("map {:?} vs {}x{}", mt.shape(), height, width),
            });
        }
        if ut.cols() != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear",
                detail: format!("uv must be [n, 2], got {:?}", ut.shape()),
            });
        }
        let c = mt.cols();
        let n = ut.rows();
        let src = mt.data();
        let uvd = ut.data();
        let mut out = vec![0.0f32; n * c];
        for_each_row_chunk(&mut out, c, |first, chunk| {
            for (r, orow) in chunk.chunks_mut(c).enumerate() {
                let p = first + r;
                let lk = bilinear_lookup(uvd[2 * p], uvd[2 * p + 1], height, width);
                let (w00, w01, w10, w11) = lk.weights();
                let m00 = &src[lk.i00 * c..(lk.i00 + 1) * c];
                let m01 = &src[lk.i01 * c..(lk.i01 + 1) * c];
                let m10 = &src[lk.i10 * c..(lk.i10 + 1) * c];
                let m11 = &src[lk.i11 * c..(lk.i11 + 1) * c];
                for j in 0..c {
                    orow[j] = w00 * m00[j] + w01 * m01[j] + w10 * m10[j] + w11 * m11[j];
                }
            }
        });
        let value = Tensor::new(vec![n, c], out)?;
        self.push_op("bilinear", value, &[map, uv], Op::Bilinear { map, uv, height, width })
    }

    /// Exclusive running product within each contiguous block of `group`
    /// rows of a `[g*group, 1]` column; element 0 of each block is 1.
    pub fn cumprod_exclusive_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let at = self.value(a);
        let rows = at.rows();
        if at.cols() != 1 || group == 0 || rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "cumprod",
                detail: format!("{:?} into groups of {}", at.shape(), group),
            });
        }
        let src = at.data();
        let mut out = vec![0.0f32; rows];
        for g in 0..rows / group {
            let base = g * group;
            let mut run = 1.0f32;
            for i in 0..group {
                out[base + i] = run;
                run *= src[base + i];
            }
        }
        let value = Tensor::new(at.shape().to_vec(), out)?;
        self.push_op("cumprod", value, &[a], Op::CumprodExcl { a, group })
    }

    /// Hash of every piecewise boundary the forward pass sits on: relu
    /// input signs and bilinear lattice cells (including border clamps).
    /// Two evaluations with equal signatures lie on the same smooth piece,
    /// so finite differences between them see no derivative jumps.
    pub fn discontinuity_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { a } => {
                    for (i, &x) in self.value(*a).data().iter().enumerate() {
                        if x > 0.0 {
                            mix(i as u64 + 1);
                        }
                    }
                    mix(u64::MAX);
                }
                Op::Affine { relu: true, .. } | Op::AddRelu { .. } => {
                    for (i, &y) in node.value.data().iter().enumerate() {
                        if y > 0.0 {
                            mix(i as u64 + 1);
                        }
                    }
                    mix(u64::MAX);
                }
                Op::Bilinear { uv, height, width, .. } => {
                    let uvd = self.value(*uv).data();
                    for p in 0..self.value(*uv).rows() {
                        let lk = bilinear_lookup(uvd[2 * p], uvd[2 * p + 1], *height, *width);
                        mix(lk.i00 as u64);
                        mix(lk.inside_u as u64 * 2 + lk.inside_v as u64);
                    }
                    mix(u64::MAX - 1);
                }
                _ => {}
            }
        }
        h
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradients of a scalar root with respect to every tracked node.
    /// Tracked leaves that the root does not depend on get no entry;
    /// [`Gradients::or_zeros`] maps them to zero.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", root_node.value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::new(root_node.value.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ensure_finite("backward", g.data())?;
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                debug_assert!(matches!(self.nodes[i].op, Op::Leaf));
                ensure_finite("backward", g.data())?;
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds a whole-tensor gradient contribution, moving it into an empty
    /// slot instead of zero-filling and accumulating.
    fn contribute(&self, grads: &mut [Option<Tensor>], id: NodeId, tensor: Tensor) {
        debug_assert!(self.nodes[id.0].requires_grad);
        match &mut grads[id.0] {
            Some(existing) => accumulate(existing.data_mut(), tensor.data()),
            slot @ None => *slot = Some(tensor),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> Option<&'a mut Tensor> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.nodes[id.0].value.shape().to_vec();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut bt = vec![0.0f32; k * n];
                    kernels::transpose(self.value(*b).data(), k, n, &mut bt);
                    let mut da = vec![0.0f32; m * k];
                    kernels::matmul(g.data(), &bt, &mut da, m, n, k);
                    self.contribute(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let a_data = self.value(*a).data();
                    let slot = self.grad_slot(grads, *b).unwrap();
                    kernels::matmul_grad_b(a_data, g.data(), slot.data_mut(), m, k, n);
                }
            }
            Op::Affine { x, w, b, relu } => {
                let out = self.nodes[i].value.data();
                let (m, k) = (self.value(*x).rows(), self.value(*x).cols());
                let n = self.value(*w).cols();
                // gradient through the fused relu: zero where the output
                // was clipped
                let geff: Vec<f32> = if *relu {
                    g.data()
                        .iter()
                        .zip(out.iter())
                        .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                        .collect()
                } else {
                    g.data().to_vec()
                };
                if self.nodes[x.0].requires_grad {
                    let mut wt = vec![0.0f32; k * n];
                    kernels::transpose(self.value(*w).data(), k, n, &mut wt);
                    let mut dx = vec![0.0f32; m * k];
                    kernels::matmul(&geff, &wt, &mut dx, m, n, k);
                    self.contribute(grads, *x, Tensor::new(vec![m, k], dx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let x_data = self.value(*x).data();
                    let slot = self.grad_slot(grads, *w).unwrap();
                    kernels::matmul_grad_b(x_data, &geff, slot.data_mut(), m, k, n);
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    let sd = slot.data_mut();
                    for row in geff.chunks(n) {
                        accumulate(sd, row);
                    }
                }
            }
            Op::AddRelu { a, b } => {
                let out = self.nodes[i].value.data();
                let geff: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(out.iter())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                let shape = self.nodes[i].value.shape().to_vec();
                if self.nodes[a.0].requires_grad {
                    self.contribute(grads, *a, Tensor::new(shape.clone(), geff.clone())?);
                }
                if self.nodes[b.0].requires_grad {
                    self.contribute(grads, *b, Tensor::new(shape, geff)?);
                }
            }
            Op::Add { a, b, bcast } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    accumulate(slot.data_mut(), g.data());
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    match bcast {
                        Bcast::Same => accumulate(slot.data_mut(), g.data()),
                        Bcast::Row => {
                            let cols = slot.cols();
                            for row in g.data().chunks(cols) {
                                accumulate(slot.data_mut(), row);
                            }
                        }
                        Bcast::Col => unreachable!(),
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    accumulate(slot.data_mut(), g.data());
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    for (o, &v) in slot.data_mut().iter_mut().zip(g.data().iter()) {
                        *o -= v;
                    }
                }
            }
            Op::Mul { a, b, bcast } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let cols = self.value(*a).cols();
                if self.nodes[a.0].requires_grad {
                    let slot = self.grad_slot(grads, *a).unwrap();
                    let sd = slot.data_mut();
                    match bcast {
                        Bcast::Same => {
                            for ((o, &gv), &bv) in sd.iter_mut().zip(g.data()).zip(bd) {
                                *o += gv * bv;
                            }
                        }
                        Bcast::Row => {
                            for (orow, grow) in sd.chunks_mut(cols).zip(g.data().chunks(cols)) {
                                for ((o, &gv), &bv) in orow.iter_mut().zip(grow).zip(bd) {
                                    *o += gv * bv;
                                }
                            }
                        }
                        Bcast::Col => {
                            for (r, (orow, grow)) in sd.chunks_mut(cols).zip(g.data().chunks(cols)).enumerate() {
                                let bv = bd[r];
                                for (o, &gv) in orow.iter_mut().zip(grow) {
                                    *o += gv * bv;
                                }
                            }
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let slot = self.grad_slot(grads, *b).unwrap();
                    let sd = slot.data_mut();
                    match bcast {
                        Bcast::Same => {
                            for ((o, &gv), &av) in sd.iter_mut().zip(g.data()).zip(ad) {
                                *o += gv * av;
                            }
                        }
                        Bcast::Row => {
                            for (grow, arow) in g.data().chunks(cols).zip(ad.chunks(cols)) {
                                for ((o, &gv), &av) in sd.iter_mut().zip(grow).zip(arow) {
                                    *o += gv * av;
                                }
                            }
                        }
                        Bcast::Col => {
                            for (r, (grow, arow)) in g.data().chunks(cols).zip(ad.chunks(cols)).enumerate() {
                                let mut s = 0.0f32;
                                for (&gv, &av) in grow.iter().zip(arow) {
                                    s += gv * av;
                                }
                                sd[r] += s;
                            }
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * c;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    accumulate(slot.data_mut(), g.data());
                }
            }
            Op::Neg { a } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                }
            }
            Op::Recip { a } => {
                let out = self.nodes[i].value.data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &y) in slot.data_mut().iter_mut().zip(g.data()).zip(out) {
                        *o -= gv * y * y;
                    }
                }
            }
            Op::Relu { a } => {
                let input = self.value(*a).data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(input) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sin { a } => {
                let input = self.value(*a).data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(input) {
                        *o += gv * x.cos();
                    }
                }
            }
            Op::Cos { a } => {
                let input = self.value(*a).data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(input) {
                        *o -= gv * x.sin();
                    }
                }
            }
            Op::Exp { a } => {
                let out = self.nodes[i].value.data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &y) in slot.data_mut().iter_mut().zip(g.data()).zip(out) {
                        *o += gv * y;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let out = self.nodes[i].value.data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &y) in slot.data_mut().iter_mut().zip(g.data()).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Softplus { a } => {
                let input = self.value(*a).data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(input) {
                        *o += gv * sigmoid(x);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut col0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(slot) = self.grad_slot(grads, p) {
                        let sd = slot.data_mut();
                        for r in 0..rows {
                            let grow = &g.data()[r * total + col0..r * total + col0 + w];
                            accumulate(&mut sd[r * w..(r + 1) * w], grow);
                        }
                    }
                    col0 += w;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[i].value.cols();
                let mut row0 = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if let Some(slot) = self.grad_slot(grads, p) {
                        accumulate(slot.data_mut(), &g.data()[row0 * cols..(row0 + r) * cols]);
                    }
                    row0 += r;
                }
            }
            Op::SliceCols { a, start, len } => {
                let cols = self.value(*a).cols();
                let rows = self.value(*a).rows();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let sd = slot.data_mut();
                    for r in 0..rows {
                        let grow = &g.data()[r * len..(r + 1) * len];
                        accumulate(&mut sd[r * cols + start..r * cols + start + len], grow);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = self.value(*a).cols();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let sd = slot.data_mut();
                    for (o, &src) in idx.iter().enumerate() {
                        if src >= 0 {
                            let grow = &g.data()[o * cols..(o + 1) * cols];
                            accumulate(&mut sd[src as usize * cols..(src as usize + 1) * cols], grow);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    accumulate(slot.data_mut(), g.data());
                }
            }
            Op::BroadcastRows { a } => {
                let cols = self.value(*a).cols();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for grow in g.data().chunks(cols) {
                        accumulate(slot.data_mut(), grow);
                    }
                }
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for o in slot.data_mut().iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::SumGroups { a, group } => {
                let cols = self.value(*a).cols();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let sd = slot.data_mut();
                    for (r, orow) in sd.chunks_mut(cols).enumerate() {
                        let grow = &g.data()[(r / group) * cols..(r / group + 1) * cols];
                        accumulate(orow, grow);
                    }
                }
            }
            Op::LogSumExp { a } => {
                let gv = g.data()[0];
                let out = self.nodes[i].value.data()[0];
                let input = self.value(*a).data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for (o, &x) in slot.data_mut().iter_mut().zip(input) {
                        *o += gv * (x - out).exp();
                    }
                }
            }
            Op::Bilinear { map, uv, height, width } => {
                let c = self.value(*map).cols();
                let uvd = self.value(*uv).data();
                let n = self.value(*uv).rows();
                let src = self.value(*map).data();
                if self.nodes[map.0].requires_grad {
                    let slot = self.grad_slot(grads, *map).unwrap();
                    let sd = slot.data_mut();
                    for p in 0..n {
                        let lk = bilinear_lookup(uvd[2 * p], uvd[2 * p + 1], *height, *width);
                        let (w00, w01, w10, w11) = lk.weights();
                        let grow = &g.data()[p * c..(p + 1) * c];
                        for j in 0..c {
                            sd[lk.i00 * c + j] += w00 * grow[j];
                            sd[lk.i01 * c + j] += w01 * grow[j];
                            sd[lk.i10 * c + j] += w10 * grow[j];
                            sd[lk.i11 * c + j] += w11 * grow[j];
                        }
                    }
                }
                if self.nodes[uv.0].requires_grad {
                    let slot = self.grad_slot(grads, *uv).unwrap();
                    let sd = slot.data_mut();
                    for p in 0..n {
                        let lk = bilinear_lookup(uvd[2 * p], uvd[2 * p + 1], *height, *width);
                        let grow = &g.data()[p * c..(p + 1) * c];
                        let m00 = &src[lk.i00 * c..(lk.i00 + 1) * c];
                        let m01 = &src[lk.i01 * c..(lk.i01 + 1) * c];
                        let m10 = &src[lk.i10 * c..(lk.i10 + 1) * c];
                        let m11 = &src[lk.i11 * c..(lk.i11 + 1) * c];
                        let mut du = 0.0f32;
                        let mut dv = 0.0f32;
                        for j in 0..c {
                            du += grow[j] * ((1.0 - lk.fv) * (m01[j] - m00[j]) + lk.fv * (m11[j] - m10[j]));
                            dv += grow[j] * ((1.0 - lk.fu) * (m10[j] - m00[j]) + lk.fu * (m11[j] - m01[j]));
                        }
                        // clamped coordinates stop contributing gradient
                        if lk.inside_u {
                            sd[2 * p] += du;
                        }
                        if lk.inside_v {
                            sd[2 * p + 1] += dv;
                        }
                    }
                }
            }
            Op::CumprodExcl { a, group } => {
                let input = self.value(*a).data();
                let out = self.nodes[i].value.data();
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let sd = slot.data_mut();
                    let groups = input.len() / group;
                    for gi in 0..groups {
                        let base = gi * group;
                        for j in 0..*group {
                            // d out[i] / d in[j] for i > j is the product of
                            // all inputs below i except j; building the middle
                            // product incrementally avoids dividing by in[j].
                            let mut mid = 1.0f32;
                            let mut s = 0.0f32;
                            for k in (j + 1)..*group {
                                s += g.data()[base + k] * mid;
                                mid *= input[base + k];
                            }
                            sd[base + j] += out[base + j] * s;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &v) in dst.iter_mut().zip(src.iter()) {
        *o += v;
    }
}

/// Clamped bilinear cell lookup shared by forward and both gradients.
pub(crate) struct BilinearLookup {
    pub fu: f32,
    pub fv: f32,
    pub i00: usize,
    pub i01: usize,
    pub i10: usize,
    pub i11: usize,
    pub inside_u: bool,
    pub inside_v: bool,
}

impl BilinearLookup {
    pub fn weights(&self) -> (f32, f32, f32, f32) {
        let w00 = (1.0 - self.fu) * (1.0 - self.fv);
        let w01 = self.fu * (1.0 - self.fv);
        let w10 = (1.0 - self.fu) * self.fv;
        let w11 = self.fu * self.fv;
        (w00, w01, w10, w11)
    }
}

pub(crate) fn bilinear_lookup(u: f32, v: f32, height: usize, width: usize) -> BilinearLookup {
    let max_u = (width - 1) as f32;
    let max_v = (height - 1) as f32;
    let inside_u = u > 0.0 && u < max_u;
    let inside_v = v > 0.0 && v < max_v;
    let uc = u.clamp(0.0, max_u);
    let vc = v.clamp(0.0, max_v);
    let x0 = (uc.floor() as usize).min(width - 1);
    let y0 = (vc.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    BilinearLookup {
        fu: uc - x0 as f32,
        fv: vc - y0 as f32,
        i00: y0 * width + x0,
        i01: y0 * width + x1,
        i10: y1 * width + x0,
        i11: y1 * width + x1,
        inside_u,
        inside_v,
    }
}
