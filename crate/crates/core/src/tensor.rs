//! Dense f64 tensors with a per-forward-pass tape for reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional handle into
//! the [`Graph`] that produced it. Tensors created outside a graph (or via
//! [`Tensor::detach`]) are constants: operations record their values but no
//! gradient flows into them. Registering a tensor with [`Graph::var`] makes
//! it a leaf whose gradient can be read back from [`Gradients`] after
//! [`Graph::backward`].
//!
//! The tape is append-only; backward walks it exactly once in reverse append
//! order and accumulates additively into shared inputs. A graph is confined
//! to one thread and discarded after backward; independent graphs may run in
//! parallel. All kernels are plain loops with fixed iteration order, so
//! identical inputs produce bit-identical outputs.
//!
//! Broadcasting is deliberately minimal: elementwise ops accept equal shapes
//! or a single-element operand on either side, and [`Graph::add_bias`]
//! broadcasts a vector over matrix rows. Nothing else.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::Error;
use crate::Result;

pub type NodeId = usize;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// ── Tensor ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<(u64, NodeId)>,
}

impl Tensor {
    /// Constant (untracked) tensor. Fails when the shape does not match the
    /// buffer length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!(
                    "shape {:?} does not describe {} elements",
                    shape,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of this tensor with the graph handle removed; values shared.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Sole element of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape {
                op: "tensor::item",
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape {
                op,
                detail: format!("expected a 2-d tensor, got shape {:?}", other),
            }),
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

enum Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    Relu,
    Gelu,
    Abs,
    Clamp { lo: f64, hi: f64 },
    SoftmaxRows,
    SoftmaxAll,
    LayerNorm { eps: f64 },
    ConcatRows,
    ConcatCols,
    Gather { index: Arc<Vec<Option<usize>>> },
    SumAll,
    MeanAll,
    SumRows,
}

/// One operand record: originating node (None for constants), shape, and a
/// snapshot of the forward value.
type InputRecord = (Option<NodeId>, Vec<usize>, Arc<Vec<f64>>);

struct Node {
    op: Op,
    inputs: Vec<InputRecord>,
    out_shape: Vec<usize>,
    out_data: Arc<Vec<f64>>,
}

pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Gradients {
    graph_id: u64,
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, which must be a
    /// tracked tensor of the graph that ran backward. `None` when no
    /// gradient reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        match t.node {
            Some((gid, nid)) if gid == self.graph_id => {
                self.slots.get(nid).and_then(|s| s.as_deref())
            }
            _ => None,
        }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes (diagnostics only).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register `t` as a differentiable leaf of this graph.
    pub fn var(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape.clone(),
            out_data: t.data.clone(),
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some((self.id, id)),
        }
    }

    fn check_member(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if let Some((gid, _)) = t.node {
            if gid != self.id {
                return Err(Error::Graph {
                    detail: format!("operand of {op} belongs to graph {gid}, not {}", self.id),
                });
            }
        }
        Ok(())
    }

    fn push(
        &self,
        op: Op,
        op_name: &'static str,
        operands: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
    ) -> Result<Tensor> {
        for t in operands {
            self.check_member(op_name, t)?;
        }
        let data = Arc::new(out_data);
        // A node is only worth recording when gradient can flow through it.
        if operands.iter().all(|t| t.node.is_none()) {
            return Ok(Tensor {
                shape: out_shape,
                data,
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: operands
                .iter()
                .map(|t| (t.node.map(|(_, nid)| nid), t.shape.clone(), t.data.clone()))
                .collect(),
            out_shape: out_shape.clone(),
            out_data: data.clone(),
        });
        Ok(Tensor {
            shape: out_shape,
            data,
            node: Some((self.id, id)),
        })
    }

    // ── Forward ops ─────────────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let av = a.data[i * ka + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Op::Matmul, "matmul", &[a, b], vec![m, n], out)
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data[i * n + j];
            }
        }
        self.push(Op::Transpose, "transpose", &[x], vec![n, m], out)
    }

    fn elementwise2(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape, out) = if a.shape == b.shape {
            let v = a
                .data
                .iter()
                .zip(b.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), v)
        } else if b.numel() == 1 {
            let s = b.data[0];
            (a.shape.clone(), a.data.iter().map(|&x| f(x, s)).collect())
        } else if a.numel() == 1 {
            let s = a.data[0];
            (b.shape.clone(), b.data.iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(Error::Shape {
                op: name,
                detail: format!("incompatible shapes {:?} and {:?}", a.shape, b.shape),
            });
        };
        self.push(op, name, &[a, b], shape, out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out = x.data.iter().map(|&v| v * c).collect();
        self.push(Op::Scale(c), "scale", &[x], x.shape.clone(), out)
    }

    /// `x` is `[m, n]`, `bias` is `[n]`; the bias is added to every row.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("add_bias")?;
        if bias.shape != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias shape {:?} does not match row width {n}", bias.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.data[i * n + j] + bias.data[j];
            }
        }
        self.push(Op::AddBias, "add_bias", &[x, bias], x.shape.clone(), out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out = x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        self.push(Op::Relu, "relu", &[x], x.shape.clone(), out)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        let out = x
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(Op::Gelu, "gelu", &[x], x.shape.clone(), out)
    }

    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.data.iter().map(|&v| v.abs()).collect();
        self.push(Op::Abs, "abs", &[x], x.shape.clone(), out)
    }

    pub fn clamp(&self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        // partial_cmp so NaN bounds land in the error arm as well.
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Shape {
                op: "clamp",
                detail: format!("invalid interval [{lo}, {hi}]"),
            });
        }
        let out = x.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { lo, hi }, "clamp", &[x], x.shape.clone(), out)
    }

    /// Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows, "softmax_rows", &[x], x.shape.clone(), out)
    }

    /// Softmax over every entry jointly (one distribution across the whole
    /// tensor), stabilized by the global max.
    pub fn softmax_all(&self, x: &Tensor) -> Result<Tensor> {
        let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in out.iter_mut() {
            *v /= sum;
        }
        self.push(Op::SoftmaxAll, "softmax_all", &[x], x.shape.clone(), out)
    }

    /// Per-row normalization of `x: [m, d]` followed by the affine map
    /// `gain * xhat + bias`. Requires `d >= 2`: a single-column row has zero
    /// variance by construction and normalizing it is meaningless.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, d) = x.dims2("layer_norm")?;
        if d < 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("degenerate normalization: row width {d} < 2"),
            });
        }
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} do not match row width {d}",
                    gain.shape, bias.shape
                ),
            });
        }
        // partial_cmp so a NaN eps lands in the error arm as well.
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &x.data[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = gain.data[j] * (row[j] - mu) * inv + bias.data[j];
            }
        }
        self.push(
            Op::LayerNorm { eps },
            "layer_norm",
            &[x, gain, bias],
            x.shape.clone(),
            out,
        )
    }

    /// Stack 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_rows",
                detail: "no operands".into(),
            });
        }
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts differ: {n} vs {pn}"),
                });
            }
            rows += pm;
            out.extend_from_slice(&p.data);
        }
        self.push(Op::ConcatRows, "concat_rows", parts, vec![rows, n], out)
    }

    /// Join 2-d tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "no operands".into(),
            });
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {m} vs {pm}"),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut col = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[i * total + col..i * total + col + w]
                    .copy_from_slice(&p.data[i * w..(i + 1) * w]);
                col += w;
            }
        }
        self.push(Op::ConcatCols, "concat_cols", parts, vec![m, total], out)
    }

    /// Rebuild a tensor by flat-index lookup: `out[i] = x[index[i]]`, with
    /// `None` entries producing 0 (used for zero padding). The same source
    /// index may appear many times; backward sums into it.
    pub fn gather(
        &self,
        x: &Tensor,
        index: Arc<Vec<Option<usize>>>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor> {
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!(
                    "index length {} vs output shape {:?}",
                    index.len(),
                    out_shape
                ),
            });
        }
        let limit = x.numel();
        let mut out = vec![0.0; numel];
        for (o, idx) in out.iter_mut().zip(index.iter()) {
            if let Some(j) = idx {
                if *j >= limit {
                    return Err(Error::Shape {
                        op: "gather",
                        detail: format!("index {j} out of bounds for {limit} elements"),
                    });
                }
                *o = x.data[*j];
            }
        }
        self.push(Op::Gather { index }, "gather", &[x], out_shape, out)
    }

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data.iter().sum();
        self.push(Op::SumAll, "sum_all", &[x], vec![1], vec![s])
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data.iter().sum();
        self.push(
            Op::MeanAll,
            "mean_all",
            &[x],
            vec![1],
            vec![s / x.numel() as f64],
        )
    }

    /// Row sums of a 2-d tensor, shape `[m, 1]`.
    pub fn sum_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("sum_rows")?;
        let out = (0..m)
            .map(|i| x.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        self.push(Op::SumRows, "sum_rows", &[x], vec![m, 1], out)
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a single-element `root`. Returns per-leaf gradient
    /// buffers; nodes the root does not depend on hold `None`.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let (gid, root_id) = root.node.ok_or_else(|| Error::Graph {
            detail: "backward root is not tracked by any graph".into(),
        })?;
        if gid != self.id {
            return Err(Error::Graph {
                detail: format!("backward root belongs to graph {gid}, not {}", self.id),
            });
        }
        if root.numel() != 1 {
            return Err(Error::Graph {
                detail: format!("backward root must be scalar, shape is {:?}", root.shape),
            });
        }
        let nodes = self.nodes.borrow();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        slots[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let gout = match &slots[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &nodes[id];
            let contributions = node_backward(node, &gout);
            for (slot, grad) in contributions {
                let (nid, shape, _) = &node.inputs[slot];
                if let Some(nid) = nid {
                    let numel: usize = shape.iter().product();
                    let acc = slots[*nid].get_or_insert_with(|| vec![0.0; numel]);
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
            }
        }
        Ok(Gradients {
            graph_id: self.id,
            slots,
        })
    }
}

/// Gradient of each differentiable input of `node`, as `(operand slot,
/// buffer)` pairs. Slots whose operand is a constant are skipped by the
/// caller.
fn node_backward(node: &Node, gout: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let input = |slot: usize| -> &[f64] { &node.inputs[slot].2 };
    let in_shape = |slot: usize| -> &[usize] { &node.inputs[slot].1 };
    let tracked = |slot: usize| -> bool { node.inputs[slot].0.is_some() };
    let out = &node.out_data;

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Matmul => {
            let (m, k) = (in_shape(0)[0], in_shape(0)[1]);
            let n = in_shape(1)[1];
            let a = input(0);
            let b = input(1);
            let mut res = Vec::new();
            if tracked(0) {
                // dA = dC . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gout[i * n + j] * b[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                res.push((0, da));
            }
            if tracked(1) {
                // dB = A^T . dC
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * gout[i * n + j];
                        }
                    }
                }
                res.push((1, db));
            }
            res
        }
        Op::Transpose => {
            let (m, n) = (in_shape(0)[0], in_shape(0)[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = gout[j * m + i];
                }
            }
            vec![(0, dx)]
        }
        Op::Add | Op::Sub => {
            let sign = if matches!(node.op, Op::Sub) {
                -1.0
            } else {
                1.0
            };
            let mut res = Vec::new();
            for slot in 0..2 {
                if !tracked(slot) {
                    continue;
                }
                let s = if slot == 0 { 1.0 } else { sign };
                let numel: usize = in_shape(slot).iter().product();
                let buf = if numel == gout.len() {
                    gout.iter().map(|g| s * g).collect()
                } else {
                    // single-element operand broadcast over the other
                    vec![s * gout.iter().sum::<f64>()]
                };
                res.push((slot, buf));
            }
            res
        }
        Op::Mul => {
            let mut res = Vec::new();
            for slot in 0..2 {
                if !tracked(slot) {
                    continue;
                }
                let other = input(1 - slot);
                let numel: usize = in_shape(slot).iter().product();
                let buf = if numel == gout.len() {
                    if other.len() == 1 {
                        gout.iter().map(|g| g * other[0]).collect()
                    } else {
                        gout.iter().zip(other).map(|(g, o)| g * o).collect()
                    }
                } else {
                    vec![gout.iter().zip(other).map(|(g, o)| g * o).sum::<f64>()]
                };
                res.push((slot, buf));
            }
            res
        }
        Op::Scale(c) => vec![(0, gout.iter().map(|g| c * g).collect())],
        Op::AddBias => {
            let (m, n) = (in_shape(0)[0], in_shape(0)[1]);
            let mut res = Vec::new();
            if tracked(0) {
                res.push((0, gout.to_vec()));
            }
            if tracked(1) {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gout[i * n + j];
                    }
                }
                res.push((1, db));
            }
            res
        }
        Op::Relu => {
            let x = input(0);
            vec![(
                0,
                gout.iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Gelu => {
            let x = input(0);
            let dx = gout
                .iter()
                .zip(x)
                .map(|(g, &v)| {
                    let u = GELU_K * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_A * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![(0, dx)]
        }
        Op::Abs => {
            let x = input(0);
            let dx = gout
                .iter()
                .zip(x)
                .map(|(g, &v)| {
                    if v > 0.0 {
                        *g
                    } else if v < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(0, dx)]
        }
        Op::Clamp { lo, hi } => {
            let x = input(0);
            let dx = gout
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                .collect();
            vec![(0, dx)]
        }
        Op::SoftmaxRows => {
            let (m, n) = (node.out_shape[0], node.out_shape[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let y = &out[i * n..(i + 1) * n];
                let g = &gout[i * n..(i + 1) * n];
                let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    dx[i * n + j] = y[j] * (g[j] - dot);
                }
            }
            vec![(0, dx)]
        }
        Op::SoftmaxAll => {
            let dot: f64 = out.iter().zip(gout).map(|(&yv, &gv)| yv * gv).sum();
            vec![(
                0,
                out.iter()
                    .zip(gout)
                    .map(|(&yv, &gv)| yv * (gv - dot))
                    .collect(),
            )]
        }
        Op::LayerNorm { eps } => {
            let (m, d) = (in_shape(0)[0], in_shape(0)[1]);
            let x = input(0);
            let gain = input(1);
            let mut dx = vec![0.0; m * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                let g = &gout[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                let dxhat: Vec<f64> = g.iter().zip(gain).map(|(&gv, &w)| gv * w).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[i * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    dgain[j] += g[j] * xhat[j];
                    dbias[j] += g[j];
                }
            }
            let mut res = Vec::new();
            if tracked(0) {
                res.push((0, dx));
            }
            if tracked(1) {
                res.push((1, dgain));
            }
            if tracked(2) {
                res.push((2, dbias));
            }
            res
        }
        Op::ConcatRows => {
            let mut res = Vec::new();
            let mut offset = 0;
            for slot in 0..node.inputs.len() {
                let numel: usize = in_shape(slot).iter().product();
                if tracked(slot) {
                    res.push((slot, gout[offset..offset + numel].to_vec()));
                }
                offset += numel;
            }
            res
        }
        Op::ConcatCols => {
            let m = node.out_shape[0];
            let total = node.out_shape[1];
            let mut res = Vec::new();
            let mut col = 0;
            for slot in 0..node.inputs.len() {
                let w = in_shape(slot)[1];
                if tracked(slot) {
                    let mut buf = vec![0.0; m * w];
                    for i in 0..m {
                        buf[i * w..(i + 1) * w]
                            .copy_from_slice(&gout[i * total + col..i * total + col + w]);
                    }
                    res.push((slot, buf));
                }
                col += w;
            }
            res
        }
        Op::Gather { index } => {
            let numel: usize = in_shape(0).iter().product();
            let mut dx = vec![0.0; numel];
            for (g, idx) in gout.iter().zip(index.iter()) {
                if let Some(j) = idx {
                    dx[*j] += g;
                }
            }
            vec![(0, dx)]
        }
        Op::SumAll => {
            let numel: usize = in_shape(0).iter().product();
            vec![(0, vec![gout[0]; numel])]
        }
        Op::MeanAll => {
            let numel: usize = in_shape(0).iter().product();
            vec![(0, vec![gout[0] / numel as f64; numel])]
        }
        Op::SumRows => {
            let (m, n) = (in_shape(0)[0], in_shape(0)[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = gout[i];
                }
            }
            vec![(0, dx)]
        }
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
