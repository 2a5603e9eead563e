//! Reverse-mode autodiff on a Wengert tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each node stores its
//! operation (with parent indices), its shape, and its eagerly computed
//! value. `backward` walks the tape once in reverse insertion order and
//! dispatches the vector–Jacobian product of every op; no other graph
//! traversal exists. Gradients flow only through nodes that have a
//! `requires_grad` leaf upstream, and [`Graph::detach`] severs that
//! linkage explicitly — the editing losses rely on it to keep their
//! target distributions out of the differentiated set.
//!
//! Shape and state violations (mismatched operands, backward on a
//! non-scalar, backward twice) are bugs in the calling code, not data
//! errors, and panic with messages naming the offending shapes.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    /// Elementwise difference.
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// Multiply every entry by a constant.
    Scale(NodeId, f64),
    /// `[r, c] + [1, c]`, the row vector added to every row.
    AddRow(NodeId, NodeId),
    /// `[r, c] ⊙ [1, c]`, the row vector multiplied into every row.
    MulRow(NodeId, NodeId),
    /// `[m, k] @ [k, n]`.
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    /// `out[i, :] = table[indices[i], :]`; backward scatter-adds.
    EmbedRows { table: NodeId, indices: Vec<usize> },
    /// Horizontal concatenation of same-height blocks.
    ConcatCols(Vec<NodeId>),
    /// Columns `start .. start + len` of the input.
    SliceCols { input: NodeId, start: usize, len: usize },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(NodeId),
    /// Row-wise log-softmax, fused so the backward rule is the exact
    /// `g - softmax * rowsum(g)` form.
    LogSoftmaxRows(NodeId),
    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine part.
    LayerNormRows(NodeId),
    /// `out[r] = input[r, cols[r]]` as an `[r, 1]` column.
    PickPerRow { input: NodeId, cols: Vec<usize> },
    /// Sum of all entries, a `[1, 1]` scalar.
    Sum(NodeId),
    /// `sum_i exp(t_i) * (t_i - m_i)` over all entries: the KL divergence
    /// from the distribution with log-weights `t` to the one with
    /// log-probabilities `m`, restricted to the rows enumerated in `t`.
    /// Gradient flows into `m` only; `t` must be detached.
    KlDetachedWeights { target_log: NodeId, model_log: NodeId },
    /// Value copy with no gradient linkage.
    Detach,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: [usize; 2],
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only computation tape. Values are computed eagerly as nodes
/// are pushed; one `backward` call per graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.shape, [1, 1], "scalar_value on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, shape: [usize; 2], value: Vec<f64>, needs_grad: bool) -> NodeId {
        assert!(
            !self.backward_done,
            "graph is frozen: backward has already run, build a fresh graph"
        );
        assert_eq!(shape[0] * shape[1], value.len(), "node value does not fill shape {shape:?}");
        self.nodes.push(Node { op, shape, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: [usize; 2], data: Vec<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    /// Leaf initialized from a tensor, inheriting its `requires_grad`.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.shape, t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: [usize; 2], data: Vec<f64>) -> NodeId {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant([1, 1], vec![x])
    }

    // ── Elementwise and broadcast arithmetic ────────────────────────────

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op_name: &str) -> ([usize; 2], bool) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op_name} on mismatched shapes {sa:?} vs {sb:?}");
        (sa, self.needs_grad(a) || self.needs_grad(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, ng) = self.binary_same_shape(a, b, "add");
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), shape, v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, ng) = self.binary_same_shape(a, b, "sub");
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), shape, v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, ng) = self.binary_same_shape(a, b, "mul");
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), shape, v, ng)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let shape = self.shape(a);
        let ng = self.needs_grad(a);
        let v = self.value(a).iter().map(|&x| k * x).collect();
        self.push(Op::Scale(a, k), shape, v, ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let ([r, c], srow) = (self.shape(a), self.shape(row));
        assert_eq!(srow, [1, c], "add_row: row shape {srow:?} does not broadcast over [{r}, {c}]");
        let ng = self.needs_grad(a) || self.needs_grad(row);
        let mut v = self.value(a).to_vec();
        let rv = self.value(row);
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += rv[j];
            }
        }
        self.push(Op::AddRow(a, row), [r, c], v, ng)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let ([r, c], srow) = (self.shape(a), self.shape(row));
        assert_eq!(srow, [1, c], "mul_row: row shape {srow:?} does not broadcast over [{r}, {c}]");
        let ng = self.needs_grad(a) || self.needs_grad(row);
        let mut v = self.value(a).to_vec();
        let rv = self.value(row);
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] *= rv[j];
            }
        }
        self.push(Op::MulRow(a, row), [r, c], v, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        assert_eq!(
            k, k2,
            "matmul inner dimensions disagree: [{m}, {k}] @ [{k2}, {n}]"
        );
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let v = matmul_buf(self.value(a), self.value(b), m, k, n);
        self.push(Op::Matmul(a, b), [m, n], v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let ng = self.needs_grad(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = av[i * c + j];
            }
        }
        self.push(Op::Transpose(a), [c, r], v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        let ng = self.needs_grad(a);
        let v = self.value(a).iter().map(|&x| math::tanh(x)).collect();
        self.push(Op::Tanh(a), shape, v, ng)
    }

    // ── Structure ops ───────────────────────────────────────────────────

    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let [rows, cols] = self.shape(table);
        for &ix in indices {
            assert!(ix < rows, "embed_rows: index {ix} out of range for {rows} rows");
        }
        let ng = self.needs_grad(table);
        let tv = self.value(table);
        let mut v = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            v.extend_from_slice(&tv[ix * cols..(ix + 1) * cols]);
        }
        let shape = [indices.len(), cols];
        self.push(Op::EmbedRows { table, indices: indices.to_vec() }, shape, v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        let mut ng = false;
        for &p in parts {
            let [r, c] = self.shape(p);
            assert_eq!(r, rows, "concat_cols: block heights differ ({r} vs {rows})");
            total += c;
            ng |= self.needs_grad(p);
        }
        let mut v = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let pv = self.value(p);
            for i in 0..rows {
                v[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), [rows, total], v, ng)
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let [r, c] = self.shape(input);
        assert!(
            start + len <= c,
            "slice_cols {start}..{} out of range for {c} columns",
            start + len
        );
        let ng = self.needs_grad(input);
        let iv = self.value(input);
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&iv[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { input, start, len }, [r, len], v, ng)
    }

    // ── Fused row-wise ops ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let ng = self.needs_grad(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let lse = math::log_sum_exp(row);
            for j in 0..c {
                v[i * c + j] = math::exp(row[j] - lse);
            }
        }
        self.push(Op::SoftmaxRows(a), [r, c], v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let ng = self.needs_grad(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let lse = math::log_sum_exp(row);
            for j in 0..c {
                v[i * c + j] = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), [r, c], v, ng)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        assert!(c > 0, "layer_norm_rows on zero-width input");
        let ng = self.needs_grad(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for j in 0..c {
                v[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a), [r, c], v, ng)
    }

    pub fn pick_per_row(&mut self, input: NodeId, cols: &[usize]) -> NodeId {
        let [r, c] = self.shape(input);
        assert_eq!(cols.len(), r, "pick_per_row: {} picks for {r} rows", cols.len());
        for &j in cols {
            assert!(j < c, "pick_per_row: column {j} out of range for {c} columns");
        }
        let ng = self.needs_grad(input);
        let iv = self.value(input);
        let v = cols.iter().enumerate().map(|(i, &j)| iv[i * c + j]).collect();
        self.push(Op::PickPerRow { input, cols: cols.to_vec() }, [r, 1], v, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ng = self.needs_grad(a);
        let v = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a), [1, 1], v, ng)
    }

    /// Mean over all entries; sugar for `scale(sum(a), 1/len)`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        assert!(n > 0, "mean over an empty node");
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// KL divergence `sum_i exp(t_i) * (t_i - m_i)` from a detached
    /// distribution given by log-weights `t` to model log-probabilities
    /// `m`. Entries with `exp(t_i) == 0` (t = -inf) contribute zero, so
    /// one-hot targets are exact. The target side must carry no gradient
    /// linkage — pass it through [`Graph::detach`] or a constant leaf.
    pub fn kl_detached_weights(&mut self, target_log: NodeId, model_log: NodeId) -> NodeId {
        let (st, sm) = (self.shape(target_log), self.shape(model_log));
        assert_eq!(st, sm, "kl_detached_weights on mismatched shapes {st:?} vs {sm:?}");
        assert!(
            !self.needs_grad(target_log),
            "kl_detached_weights: target distribution must be detached"
        );
        let ng = self.needs_grad(model_log);
        let mut acc = 0.0;
        for (&t, &m) in self.value(target_log).iter().zip(self.value(model_log)) {
            let w = math::exp(t);
            if w > 0.0 {
                acc += w * (t - m);
            }
        }
        self.push(Op::KlDetachedWeights { target_log, model_log }, [1, 1], vec![acc], ng)
    }

    /// Value copy that blocks gradients; the only sanctioned way to use
    /// a tape value as a fixed target.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        let v = self.value(a).to_vec();
        self.push(Op::Detach, shape, v, false)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Panics on a non-scalar loss or
    /// when called a second time on the same graph. Returns nothing;
    /// read leaf gradients with [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> BackwardPass {
        assert!(!self.backward_done, "backward called twice on one graph");
        let shape = self.shape(loss);
        assert_eq!(shape, [1, 1], "backward needs a scalar loss, got shape {shape:?}");
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        BackwardPass { grads }
    }

    fn apply_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                for (&p, other) in [(a, b), (b, a)].iter().map(|(x, y)| (*x, *y)) {
                    let _ = other;
                    if self.needs_grad(p) {
                        add_into(grads, p, g.len(), &mut |s| {
                            for (sg, &gg) in s.iter_mut().zip(g) {
                                *sg += gg;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.len(), &mut |s| {
                        for (sg, &gg) in s.iter_mut().zip(g) {
                            *sg += gg;
                        }
                    });
                }
                if self.needs_grad(*b) {
                    add_into(grads, *b, g.len(), &mut |s| {
                        for (sg, &gg) in s.iter_mut().zip(g) {
                            *sg -= gg;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.len(), &mut |s| {
                        for k in 0..g.len() {
                            s[k] += g[k] * bv[k];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    add_into(grads, *b, g.len(), &mut |s| {
                        for k in 0..g.len() {
                            s[k] += g[k] * av[k];
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                if self.needs_grad(*a) {
                    let k = *k;
                    add_into(grads, *a, g.len(), &mut |s| {
                        for (sg, &gg) in s.iter_mut().zip(g) {
                            *sg += k * gg;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                let [r, c] = node.shape;
                if self.needs_grad(*a) {
                    add_into(grads, *a, r * c, &mut |s| {
                        for (sg, &gg) in s.iter_mut().zip(g) {
                            *sg += gg;
                        }
                    });
                }
                if self.needs_grad(*row) {
                    add_into(grads, *row, c, &mut |s| {
                        for i2 in 0..r {
                            for j in 0..c {
                                s[j] += g[i2 * c + j];
                            }
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let [r, c] = node.shape;
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.needs_grad(*a) {
                    add_into(grads, *a, r * c, &mut |s| {
                        for i2 in 0..r {
                            for j in 0..c {
                                s[i2 * c + j] += g[i2 * c + j] * rv[j];
                            }
                        }
                    });
                }
                if self.needs_grad(*row) {
                    add_into(grads, *row, c, &mut |s| {
                        for i2 in 0..r {
                            for j in 0..c {
                                s[j] += g[i2 * c + j] * av[i2 * c + j];
                            }
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    // dA = g @ B^T
                    let bt = transpose_buf(bv, k, n);
                    let da = matmul_buf(g, &bt, m, n, k);
                    add_into(grads, *a, m * k, &mut |s| {
                        for (sg, &d) in s.iter_mut().zip(&da) {
                            *sg += d;
                        }
                    });
                }
                if self.needs_grad(*b) {
                    // dB = A^T @ g
                    let at = transpose_buf(av, m, k);
                    let db = matmul_buf(&at, g, k, m, n);
                    add_into(grads, *b, k * n, &mut |s| {
                        for (sg, &d) in s.iter_mut().zip(&db) {
                            *sg += d;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let [r, c] = self.shape(*a);
                if self.needs_grad(*a) {
                    add_into(grads, *a, r * c, &mut |s| {
                        for i2 in 0..r {
                            for j in 0..c {
                                s[i2 * c + j] += g[j * r + i2];
                            }
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if self.needs_grad(*a) {
                    let y = &node.value;
                    add_into(grads, *a, g.len(), &mut |s| {
                        for k in 0..g.len() {
                            s[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    });
                }
            }
            Op::EmbedRows { table, indices } => {
                if self.needs_grad(*table) {
                    let [rows, cols] = self.shape(*table);
                    add_into(grads, *table, rows * cols, &mut |s| {
                        for (i2, &ix) in indices.iter().enumerate() {
                            for j in 0..cols {
                                s[ix * cols + j] += g[i2 * cols + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs_grad(p) {
                        add_into(grads, p, rows * c, &mut |s| {
                            for i2 in 0..rows {
                                for j in 0..c {
                                    s[i2 * c + j] += g[i2 * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.needs_grad(*input) {
                    let [r, c] = self.shape(*input);
                    let (start, len) = (*start, *len);
                    add_into(grads, *input, r * c, &mut |s| {
                        for i2 in 0..r {
                            for j in 0..len {
                                s[i2 * c + start + j] += g[i2 * len + j];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs_grad(*a) {
                    let [r, c] = node.shape;
                    let y = &node.value;
                    add_into(grads, *a, r * c, &mut |s| {
                        for i2 in 0..r {
                            let dot: f64 =
                                (0..c).map(|j| g[i2 * c + j] * y[i2 * c + j]).sum();
                            for j in 0..c {
                                s[i2 * c + j] += y[i2 * c + j] * (g[i2 * c + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.needs_grad(*a) {
                    let [r, c] = node.shape;
                    let y = &node.value;
                    add_into(grads, *a, r * c, &mut |s| {
                        for i2 in 0..r {
                            let gsum: f64 = (0..c).map(|j| g[i2 * c + j]).sum();
                            for j in 0..c {
                                s[i2 * c + j] +=
                                    g[i2 * c + j] - math::exp(y[i2 * c + j]) * gsum;
                            }
                        }
                    });
                }
            }
            Op::LayerNormRows(a) => {
                if self.needs_grad(*a) {
                    let [r, c] = node.shape;
                    let y = &node.value;
                    let av = self.value(*a);
                    add_into(grads, *a, r * c, &mut |s| {
                        for i2 in 0..r {
                            let row = &av[i2 * c..(i2 + 1) * c];
                            let mean = row.iter().sum::<f64>() / c as f64;
                            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>()
                                / c as f64;
                            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
                            let gm: f64 = (0..c).map(|j| g[i2 * c + j]).sum::<f64>() / c as f64;
                            let gy: f64 = (0..c)
                                .map(|j| g[i2 * c + j] * y[i2 * c + j])
                                .sum::<f64>()
                                / c as f64;
                            for j in 0..c {
                                s[i2 * c + j] +=
                                    inv * (g[i2 * c + j] - gm - y[i2 * c + j] * gy);
                            }
                        }
                    });
                }
            }
            Op::PickPerRow { input, cols } => {
                if self.needs_grad(*input) {
                    let [r, c] = self.shape(*input);
                    add_into(grads, *input, r * c, &mut |s| {
                        for (i2, &j) in cols.iter().enumerate() {
                            s[i2 * c + j] += g[i2];
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.needs_grad(*a) {
                    let n = self.value(*a).len();
                    add_into(grads, *a, n, &mut |s| {
                        for sg in s.iter_mut() {
                            *sg += g[0];
                        }
                    });
                }
            }
            Op::KlDetachedWeights { target_log, model_log } => {
                if self.needs_grad(*model_log) {
                    let tv = self.value(*target_log).to_vec();
                    let n = tv.len();
                    add_into(grads, *model_log, n, &mut |s| {
                        for (k, &t) in tv.iter().enumerate() {
                            let w = math::exp(t);
                            if w > 0.0 {
                                s[k] -= w * g[0];
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct BackwardPass {
    grads: Vec<Option<Vec<f64>>>,
}

impl BackwardPass {
    /// Gradient of the loss with respect to a node; zeros if the node
    /// was never reached (e.g. a detached branch).
    pub fn grad(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn grad_ref(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

fn matmul_buf(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_buf(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
