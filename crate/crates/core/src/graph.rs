//! Recorded computation graph with exact reverse-mode and forward-mode
//! differentiation.
//!
//! Nodes are appended in evaluation order, so node indices are a valid
//! topological order. Values are immutable once recorded; differentiation
//! never mutates the graph, so one graph can serve any number of concurrent
//! sweeps, each owning its own gradient buffers.
//!
//! Both sweep directions are batched: a reverse sweep carries `B` output
//! seeds at once, a forward sweep carries `B` input tangents at once. A batch
//! of per-node gradients is stored as `B` contiguous copies of the node's
//! shape.

use crate::error::{shape_str, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, transpose_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeluKind {
    /// `x·Φ(x)` with the exact Gaussian CDF.
    #[default]
    ExactGelu,
    /// The `tanh` approximation used by some checkpoints.
    TanhGelu,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    MatMul,
    Add,
    /// Adds a rank-1 bias to every row.
    AddBias,
    Scale(T),
    Transpose,
    /// Concatenation along the last axis.
    Concat,
    SliceCols {
        start: usize,
        len: usize,
    },
    SliceRows {
        start: usize,
        len: usize,
    },
    /// Extracts one row of a matrix as a vector.
    Row(usize),
    /// Embedding lookup: rows of a `V×d` table.
    Gather(Vec<usize>),
    /// Softmax over the last axis.
    Softmax,
    /// Layer norm over the last axis; inputs are `(x, gamma, beta)`.
    LayerNorm {
        eps: T,
    },
    Gelu(GeluKind),
}

#[derive(Clone, Debug)]
struct LnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    cache: Option<LnCache<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// One reverse sweep per batch of output coordinates.
    #[default]
    Reverse,
    /// One forward sweep per batch of input coordinates.
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JacobianOptions {
    pub mode: JacobianMode,
    /// Upper bound on seeds carried by a single sweep. Larger batches trade
    /// memory for fewer passes; the result does not depend on it.
    pub max_seeds_per_sweep: usize,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self {
            mode: JacobianMode::Reverse,
            max_seeds_per_sweep: 1024,
        }
    }
}

impl JacobianOptions {
    pub fn forward() -> Self {
        Self {
            mode: JacobianMode::Forward,
            ..Self::default()
        }
    }
}

/// The differentiated quantity: a whole node or one row of a matrix node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Whole(NodeId),
    Row(NodeId, usize),
}

impl Target {
    pub fn node(self) -> NodeId {
        match self {
            Target::Whole(n) | Target::Row(n, _) => n,
        }
    }
}

/// `batch` stacked copies of a tensor-shaped buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedBatch<T> {
    pub batch: usize,
    pub numel: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SeedBatch<T> {
    pub fn zeros(batch: usize, numel: usize) -> Self {
        Self {
            batch,
            numel,
            data: vec![T::zero(); batch * numel],
        }
    }

    /// Seeds `e_{indices[b]}` for each `b`.
    pub fn one_hot(numel: usize, indices: &[usize]) -> Self {
        let mut s = Self::zeros(indices.len(), numel);
        for (b, &i) in indices.iter().enumerate() {
            s.data[b * numel + i] = T::one();
        }
        s
    }

    pub fn item(&self, b: usize) -> &[T] {
        &self.data[b * self.numel..(b + 1) * self.numel]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            cache: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        let (value, cache) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            evaluate(&op, &vals)?
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            cache,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias, vec![x, bias])
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        self.push(Op::Scale(s), vec![x])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, len }, vec![x])
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, len }, vec![x])
    }

    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        self.push(Op::Row(i), vec![x])
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(ids.to_vec()), vec![table])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn gelu(&mut self, x: NodeId, kind: GeluKind) -> Result<NodeId> {
        self.push(Op::Gelu(kind), vec![x])
    }

    /// Recomputes every node in order. `overrides` replace the value of the
    /// given nodes (leaf or not) before their consumers are evaluated.
    pub fn replay(&self, overrides: &[(NodeId, Tensor<T>)]) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some((_, v)) = overrides.iter().find(|(id, _)| id.0 == idx) {
                if v.shape() != node.value.shape() {
                    return Err(Error::Dimension(format!(
                        "override for node {idx} has shape {}, expected {}",
                        shape_str(v.shape()),
                        shape_str(node.value.shape())
                    )));
                }
                values.push(v.clone());
                continue;
            }
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    evaluate(&node.op, &ins)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when `y` is `x` or is computed from `x`.
    pub fn depends_on(&self, y: NodeId, x: NodeId) -> bool {
        self.relevant_nodes(y, x).is_some()
    }

    /// Nodes lying on some path from `x` to `y`, or `None` if there is none.
    fn relevant_nodes(&self, y: NodeId, x: NodeId) -> Option<Vec<bool>> {
        if x.0 > y.0 {
            return None;
        }
        let mut desc = vec![false; y.0 + 1];
        desc[x.0] = true;
        for n in x.0 + 1..=y.0 {
            desc[n] = self.nodes[n].inputs.iter().any(|i| i.0 >= x.0 && desc[i.0]);
        }
        if !desc[y.0] {
            return None;
        }
        let mut rel = vec![false; y.0 + 1];
        rel[y.0] = true;
        for n in (x.0..=y.0).rev() {
            if !rel[n] {
                continue;
            }
            for i in &self.nodes[n].inputs {
                if i.0 >= x.0 && desc[i.0] {
                    rel[i.0] = true;
                }
            }
        }
        Some(rel)
    }

    /// Multi-seed reverse sweep: pulls `seeds` (shaped like `output`) back to
    /// `wrt`. Gradients only flow along paths from `wrt` to `output`.
    pub fn vjp(&self, output: NodeId, seeds: &SeedBatch<T>, wrt: NodeId) -> Result<SeedBatch<T>> {
        let out_numel = self.value(output).numel();
        if seeds.numel != out_numel {
            return Err(Error::Dimension(format!(
                "seed size {} does not match output size {out_numel}",
                seeds.numel
            )));
        }
        let wrt_numel = self.value(wrt).numel();
        let bsz = seeds.batch;
        let Some(rel) = self.relevant_nodes(output, wrt) else {
            return Ok(SeedBatch::zeros(bsz, wrt_numel));
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seeds.data.clone());
        for n in (wrt.0 + 1..=output.0).rev() {
            if !rel[n] {
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| i.0 >= wrt.0 && rel[i.0])
                .collect();
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let in_grads = backward(node, &ins, &g, bsz, &need);
            for ((input, need), ig) in node.inputs.iter().zip(need).zip(in_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let data = grads[wrt.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); bsz * wrt_numel]);
        Ok(SeedBatch {
            batch: bsz,
            numel: wrt_numel,
            data,
        })
    }

    /// Multi-tangent forward sweep: pushes `tangents` (shaped like `input`)
    /// through to `output`.
    pub fn jvp(
        &self,
        input: NodeId,
        tangents: &SeedBatch<T>,
        output: NodeId,
    ) -> Result<SeedBatch<T>> {
        let in_numel = self.value(input).numel();
        if tangents.numel != in_numel {
            return Err(Error::Dimension(format!(
                "tangent size {} does not match input size {in_numel}",
                tangents.numel
            )));
        }
        let out_numel = self.value(output).numel();
        let bsz = tangents.batch;
        let Some(rel) = self.relevant_nodes(output, input) else {
            return Ok(SeedBatch::zeros(bsz, out_numel));
        };
        let mut tans: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        tans[input.0] = Some(tangents.data.clone());
        for n in input.0 + 1..=output.0 {
            if !rel[n] {
                continue;
            }
            let node = &self.nodes[n];
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let in_tans: Vec<Option<&[T]>> = node
                .inputs
                .iter()
                .map(|i| {
                    if i.0 >= input.0 {
                        tans[i.0].as_deref()
                    } else {
                        None
                    }
                })
                .collect();
            tans[n] = Some(tangent(node, &ins, &in_tans, bsz));
        }
        let data = tans[output.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); bsz * out_numel]);
        Ok(SeedBatch {
            batch: bsz,
            numel: out_numel,
            data,
        })
    }

    /// Exact Jacobian `∂y/∂x` of two rank-1 nodes, `p×q`.
    pub fn jacobian(&self, y: NodeId, x: NodeId, opts: JacobianOptions) -> Result<Tensor<T>> {
        for (name, id) in [("y", y), ("x", x)] {
            let s = self.value(id).shape();
            if s.len() != 1 {
                return Err(Error::Dimension(format!(
                    "jacobian needs rank-1 {name}, got shape {}",
                    shape_str(s)
                )));
            }
        }
        self.jacobian_of(Target::Whole(y), x, opts)
    }

    /// Jacobian of `target` with respect to every element of `x`, flattened
    /// row-major: shape `p × numel(x)`.
    pub fn jacobian_of(
        &self,
        target: Target,
        x: NodeId,
        opts: JacobianOptions,
    ) -> Result<Tensor<T>> {
        let y = target.node();
        let yv = self.value(y);
        let (offset, p) = match target {
            Target::Whole(_) => (0, yv.numel()),
            Target::Row(_, r) => {
                if yv.rank() != 2 {
                    return Err(Error::Dimension(format!(
                        "row target needs a rank-2 node, got shape {}",
                        shape_str(yv.shape())
                    )));
                }
                if r >= yv.rows() {
                    return Err(Error::Index(format!(
                        "row {r} out of range for {} rows",
                        yv.rows()
                    )));
                }
                (r * yv.cols(), yv.cols())
            }
        };
        let q = self.value(x).numel();
        if !self.depends_on(y, x) {
            log::warn!(
                "jacobian: node {} is not an ancestor of node {}; result is zero",
                x.0,
                y.0
            );
            return Tensor::new(vec![p, q], vec![T::zero(); p * q]);
        }
        let chunk = opts.max_seeds_per_sweep.max(1);
        let y_numel = yv.numel();
        let mut out = vec![T::zero(); p * q];
        match opts.mode {
            JacobianMode::Reverse => {
                let mut start = 0;
                while start < p {
                    let end = (start + chunk).min(p);
                    let idx: Vec<usize> = (start..end).map(|r| offset + r).collect();
                    let seeds = SeedBatch::one_hot(y_numel, &idx);
                    let g = self.vjp(y, &seeds, x)?;
                    out[start * q..end * q].copy_from_slice(&g.data);
                    start = end;
                }
            }
            JacobianMode::Forward => {
                let mut start = 0;
                while start < q {
                    let end = (start + chunk).min(q);
                    let idx: Vec<usize> = (start..end).collect();
                    let tans = SeedBatch::one_hot(q, &idx);
                    let t = self.jvp(x, &tans, y)?;
                    for (b, c) in (start..end).enumerate() {
                        let item = t.item(b);
                        for r in 0..p {
                            out[r * q + c] = item[offset + r];
                        }
                    }
                    start = end;
                }
            }
        }
        Tensor::new(vec![p, q], out)
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn evaluate<T: Scalar>(op: &Op<T>, ins: &[&Tensor<T>]) -> Result<(Tensor<T>, Option<LnCache<T>>)> {
    let plain = |t: Tensor<T>| Ok((t, None));
    match op {
        Op::Leaf => Err(dim_err("leaf nodes are not evaluated".into())),
        Op::MatMul => plain(ins[0].matmul(ins[1])?),
        Op::Add => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(dim_err(format!(
                    "add shape mismatch: {} + {}",
                    shape_str(a.shape()),
                    shape_str(b.shape())
                )));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x + y)
                .collect();
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        Op::AddBias => {
            let (x, b) = (ins[0], ins[1]);
            if b.rank() != 1 || x.rank() == 0 || x.rank() > 2 || b.numel() != x.cols() {
                return Err(dim_err(format!(
                    "bias {} does not broadcast over {}",
                    shape_str(b.shape()),
                    shape_str(x.shape())
                )));
            }
            let c = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % c])
                .collect();
            plain(Tensor::new(x.shape().to_vec(), data)?)
        }
        Op::Scale(s) => plain(ins[0].map(|v| v * *s)),
        Op::Transpose => plain(ins[0].transpose()?),
        Op::Concat => {
            let first = ins
                .first()
                .ok_or_else(|| dim_err("concat of zero tensors".into()))?;
            let rank = first.rank();
            if rank == 0 || rank > 2 {
                return Err(dim_err(format!(
                    "concat expects rank 1 or 2, got {}",
                    shape_str(first.shape())
                )));
            }
            let rows = first.rows();
            for t in ins {
                if t.rank() != rank || t.rows() != rows {
                    return Err(dim_err(format!(
                        "concat shape mismatch: {} vs {}",
                        shape_str(first.shape()),
                        shape_str(t.shape())
                    )));
                }
            }
            let width: usize = ins.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in ins {
                    data.extend_from_slice(t.row(r));
                }
            }
            let shape = if rank == 1 {
                vec![width]
            } else {
                vec![rows, width]
            };
            plain(Tensor::new(shape, data)?)
        }
        Op::SliceCols { start, len } => {
            let x = ins[0];
            let (m, n) = x.as_matrix_dims("slice_cols")?;
            if start + len > n {
                return Err(Error::Index(format!(
                    "column slice {start}..{} out of range for {n} columns",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            plain(Tensor::new(vec![m, *len], data)?)
        }
        Op::SliceRows { start, len } => {
            let x = ins[0];
            let (m, n) = x.as_matrix_dims("slice_rows")?;
            if start + len > m {
                return Err(Error::Index(format!(
                    "row slice {start}..{} out of range for {m} rows",
                    start + len
                )));
            }
            plain(Tensor::new(
                vec![*len, n],
                x.data()[start * n..(start + len) * n].to_vec(),
            )?)
        }
        Op::Row(i) => {
            let x = ins[0];
            let (m, _) = x.as_matrix_dims("row")?;
            if *i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            plain(Tensor::vector(x.row(*i).to_vec()))
        }
        Op::Gather(ids) => {
            let t = ins[0];
            let (v, d) = t.as_matrix_dims("gather table")?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for (pos, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::Index(format!(
                        "gather id {id} at position {pos} out of range for {v} rows"
                    )));
                }
                data.extend_from_slice(t.row(id));
            }
            plain(Tensor::new(vec![ids.len(), d], data)?)
        }
        Op::Softmax => {
            let x = ins[0];
            if x.numel() == 0 || x.rank() == 0 {
                return Err(dim_err(format!(
                    "softmax of empty tensor {}",
                    shape_str(x.shape())
                )));
            }
            let c = x.cols();
            let mut data = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let row = x.row(r);
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let start = data.len();
                let mut sum = T::zero();
                for &v in row {
                    let e = (v - m).exp();
                    sum += e;
                    data.push(e);
                }
                for v in &mut data[start..start + c] {
                    *v /= sum;
                }
            }
            plain(Tensor::new(x.shape().to_vec(), data)?)
        }
        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let n = x.cols();
            if x.rank() == 0 || n < 2 {
                return Err(dim_err(format!(
                    "layer norm needs at least 2 features, got {}",
                    shape_str(x.shape())
                )));
            }
            if gamma.shape() != [n] || beta.shape() != [n] {
                return Err(dim_err(format!(
                    "layer norm parameters {} / {} do not match feature size {n}",
                    shape_str(gamma.shape()),
                    shape_str(beta.shape())
                )));
            }
            let nf = T::from_usize_lossy(n);
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut data = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::one() / (var + *eps).sqrt();
                inv_std.push(is);
                for (c, &v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    data.push(h * gamma.data()[c] + beta.data()[c]);
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), data)?,
                Some(LnCache { xhat, inv_std }),
            ))
        }
        Op::Gelu(kind) => plain(ins[0].map(|v| gelu_value(v, *kind))),
    }
}

/// GELU value.
pub fn gelu_value<T: Scalar>(x: T, kind: GeluKind) -> T {
    let half = T::lit(0.5);
    match kind {
        GeluKind::ExactGelu => {
            x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
        }
        GeluKind::TanhGelu => {
            let u =
                T::lit((2.0 / std::f64::consts::PI).sqrt()) * (x + T::lit(0.044715) * x * x * x);
            half * x * (T::one() + u.tanh())
        }
    }
}

/// GELU derivative.
pub fn gelu_derivative<T: Scalar>(x: T, kind: GeluKind) -> T {
    let half = T::lit(0.5);
    match kind {
        GeluKind::ExactGelu => {
            let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
        GeluKind::TanhGelu => {
            let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let c = T::lit(0.044715);
            let t = (k * (x + c * x * x * x)).tanh();
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
        }
    }
}

/// Pulls a batch of output gradients back to the inputs flagged in `need`.
fn backward<T: Scalar>(
    node: &Node<T>,
    ins: &[&Tensor<T>],
    g: &[T],
    bsz: usize,
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let out = &node.value;
    let on = out.numel();
    let zeros = |t: &Tensor<T>| vec![T::zero(); bsz * t.numel()];
    let mut res: Vec<Option<Vec<T>>> = vec![None; ins.len()];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if need[0] {
                let mut ga = zeros(a);
                for bi in 0..bsz {
                    matmul_bt_acc(
                        &g[bi * on..(bi + 1) * on],
                        b.data(),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                res[0] = Some(ga);
            }
            if need[1] {
                let mut gb = zeros(b);
                for bi in 0..bsz {
                    matmul_at_acc(
                        a.data(),
                        &g[bi * on..(bi + 1) * on],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                res[1] = Some(gb);
            }
        }
        Op::Add => {
            for i in 0..2 {
                if need[i] {
                    res[i] = Some(g.to_vec());
                }
            }
        }
        Op::AddBias => {
            if need[0] {
                res[0] = Some(g.to_vec());
            }
            if need[1] {
                let c = out.cols();
                let mut gb = vec![T::zero(); bsz * c];
                for bi in 0..bsz {
                    for (i, &v) in g[bi * on..(bi + 1) * on].iter().enumerate() {
                        gb[bi * c + i % c] += v;
                    }
                }
                res[1] = Some(gb);
            }
        }
        Op::Scale(s) => {
            if need[0] {
                res[0] = Some(g.iter().map(|&v| v * *s).collect());
            }
        }
        Op::Transpose => {
            if need[0] {
                let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
                let mut gi = zeros(ins[0]);
                for bi in 0..bsz {
                    transpose_into(
                        &g[bi * on..(bi + 1) * on],
                        &mut gi[bi * on..(bi + 1) * on],
                        n,
                        m,
                    );
                }
                res[0] = Some(gi);
            }
        }
        Op::Concat => {
            let rows = out.rows();
            let width = out.cols();
            let mut off = 0;
            for (i, t) in ins.iter().enumerate() {
                let w = t.cols();
                if need[i] {
                    let tn = t.numel();
                    let mut gi = zeros(t);
                    for bi in 0..bsz {
                        for r in 0..rows {
                            let src = &g[bi * on + r * width + off..bi * on + r * width + off + w];
                            gi[bi * tn + r * w..bi * tn + (r + 1) * w].copy_from_slice(src);
                        }
                    }
                    res[i] = Some(gi);
                }
                off += w;
            }
        }
        Op::SliceCols { start, len } => {
            if need[0] {
                let x = ins[0];
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let xn = x.numel();
                let mut gi = zeros(x);
                for bi in 0..bsz {
                    for r in 0..m {
                        let src = &g[bi * on + r * len..bi * on + (r + 1) * len];
                        let dst = bi * xn + r * n + start;
                        gi[dst..dst + len].copy_from_slice(src);
                    }
                }
                res[0] = Some(gi);
            }
        }
        Op::SliceRows { start, .. } => {
            if need[0] {
                let x = ins[0];
                let n = x.cols();
                let xn = x.numel();
                let mut gi = zeros(x);
                for bi in 0..bsz {
                    let dst = bi * xn + start * n;
                    gi[dst..dst + on].copy_from_slice(&g[bi * on..(bi + 1) * on]);
                }
                res[0] = Some(gi);
            }
        }
        Op::Row(i) => {
            if need[0] {
                let x = ins[0];
                let n = x.cols();
                let xn = x.numel();
                let mut gi = zeros(x);
                for bi in 0..bsz {
                    let dst = bi * xn + i * n;
                    gi[dst..dst + n].copy_from_slice(&g[bi * on..(bi + 1) * on]);
                }
                res[0] = Some(gi);
            }
        }
        Op::Gather(ids) => {
            if need[0] {
                let t = ins[0];
                let d = t.cols();
                let tn = t.numel();
                let mut gi = zeros(t);
                for bi in 0..bsz {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gi[bi * tn + id * d + c] += g[bi * on + r * d + c];
                        }
                    }
                }
                res[0] = Some(gi);
            }
        }
        Op::Softmax => {
            if need[0] {
                // J = diag(s) − s·sᵀ applied row by row.
                let c = out.cols();
                let s = out.data();
                let mut gi = vec![T::zero(); bsz * on];
                for bi in 0..bsz {
                    for r in 0..out.rows() {
                        let base = r * c;
                        let gr = &g[bi * on + base..bi * on + base + c];
                        let sr = &s[base..base + c];
                        let dot: T = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            gi[bi * on + base + k] = sr[k] * (gr[k] - dot);
                        }
                    }
                }
                res[0] = Some(gi);
            }
        }
        Op::LayerNorm { .. } => {
            let cache = node.cache.as_ref().expect("layer norm cache");
            let gamma = ins[1].data();
            let n = out.cols();
            let nf = T::from_usize_lossy(n);
            if need[0] {
                let mut gi = vec![T::zero(); bsz * on];
                let mut dxhat = vec![T::zero(); n];
                for bi in 0..bsz {
                    for r in 0..out.rows() {
                        let base = r * n;
                        let gr = &g[bi * on + base..bi * on + base + n];
                        let xh = &cache.xhat[base..base + n];
                        for k in 0..n {
                            dxhat[k] = gr[k] * gamma[k];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / nf;
                        let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        let is = cache.inv_std[r];
                        for k in 0..n {
                            gi[bi * on + base + k] = is * (dxhat[k] - m1 - xh[k] * m2);
                        }
                    }
                }
                res[0] = Some(gi);
            }
            if need[1] {
                let mut gg = vec![T::zero(); bsz * n];
                for bi in 0..bsz {
                    for (i, &v) in g[bi * on..(bi + 1) * on].iter().enumerate() {
                        gg[bi * n + i % n] += v * cache.xhat[i];
                    }
                }
                res[1] = Some(gg);
            }
            if need[2] {
                let mut gb = vec![T::zero(); bsz * n];
                for bi in 0..bsz {
                    for (i, &v) in g[bi * on..(bi + 1) * on].iter().enumerate() {
                        gb[bi * n + i % n] += v;
                    }
                }
                res[2] = Some(gb);
            }
        }
        Op::Gelu(kind) => {
            if need[0] {
                let d: Vec<T> = ins[0]
                    .data()
                    .iter()
                    .map(|&x| gelu_derivative(x, *kind))
                    .collect();
                let mut gi = Vec::with_capacity(bsz * on);
                for bi in 0..bsz {
                    gi.extend(
                        g[bi * on..(bi + 1) * on]
                            .iter()
                            .zip(&d)
                            .map(|(&a, &b)| a * b),
                    );
                }
                res[0] = Some(gi);
            }
        }
    }
    res
}

/// Pushes a batch of input tangents forward through one node. Inputs with
/// `None` tangents are constant along the sweep.
fn tangent<T: Scalar>(
    node: &Node<T>,
    ins: &[&Tensor<T>],
    tans: &[Option<&[T]>],
    bsz: usize,
) -> Vec<T> {
    let out = &node.value;
    let on = out.numel();
    let mut res = vec![T::zero(); bsz * on];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            for bi in 0..bsz {
                let dst = &mut res[bi * on..(bi + 1) * on];
                if let Some(da) = tans[0] {
                    matmul_acc(&da[bi * m * k..(bi + 1) * m * k], b.data(), dst, m, k, n);
                }
                if let Some(db) = tans[1] {
                    matmul_acc(a.data(), &db[bi * k * n..(bi + 1) * k * n], dst, m, k, n);
                }
            }
        }
        Op::Add => {
            for t in tans.iter().flatten() {
                for (r, &v) in res.iter_mut().zip(t.iter()) {
                    *r += v;
                }
            }
        }
        Op::AddBias => {
            let c = out.cols();
            if let Some(dx) = tans[0] {
                res.copy_from_slice(dx);
            }
            if let Some(db) = tans[1] {
                for bi in 0..bsz {
                    for i in 0..on {
                        res[bi * on + i] += db[bi * c + i % c];
                    }
                }
            }
        }
        Op::Scale(s) => {
            if let Some(dx) = tans[0] {
                for (r, &v) in res.iter_mut().zip(dx) {
                    *r = v * *s;
                }
            }
        }
        Op::Transpose => {
            if let Some(dx) = tans[0] {
                let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
                for bi in 0..bsz {
                    transpose_into(
                        &dx[bi * on..(bi + 1) * on],
                        &mut res[bi * on..(bi + 1) * on],
                        m,
                        n,
                    );
                }
            }
        }
        Op::Concat => {
            let rows = out.rows();
            let width = out.cols();
            let mut off = 0;
            for (i, t) in ins.iter().enumerate() {
                let w = t.cols();
                if let Some(dt) = tans[i] {
                    let tn = t.numel();
                    for bi in 0..bsz {
                        for r in 0..rows {
                            let dst = bi * on + r * width + off;
                            res[dst..dst + w]
                                .copy_from_slice(&dt[bi * tn + r * w..bi * tn + (r + 1) * w]);
                        }
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { start, len } => {
            if let Some(dx) = tans[0] {
                let x = ins[0];
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let xn = x.numel();
                for bi in 0..bsz {
                    for r in 0..m {
                        let src = bi * xn + r * n + start;
                        res[bi * on + r * len..bi * on + (r + 1) * len]
                            .copy_from_slice(&dx[src..src + len]);
                    }
                }
            }
        }
        Op::SliceRows { start, .. } => {
            if let Some(dx) = tans[0] {
                let x = ins[0];
                let n = x.cols();
                let xn = x.numel();
                for bi in 0..bsz {
                    let src = bi * xn + start * n;
                    res[bi * on..(bi + 1) * on].copy_from_slice(&dx[src..src + on]);
                }
            }
        }
        Op::Row(i) => {
            if let Some(dx) = tans[0] {
                let x = ins[0];
                let n = x.cols();
                let xn = x.numel();
                for bi in 0..bsz {
                    let src = bi * xn + i * n;
                    res[bi * on..(bi + 1) * on].copy_from_slice(&dx[src..src + n]);
                }
            }
        }
        Op::Gather(ids) => {
            if let Some(dt) = tans[0] {
                let t = ins[0];
                let d = t.cols();
                let tn = t.numel();
                for bi in 0..bsz {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = bi * tn + id * d;
                        res[bi * on + r * d..bi * on + (r + 1) * d]
                            .copy_from_slice(&dt[src..src + d]);
                    }
                }
            }
        }
        Op::Softmax => {
            if let Some(dx) = tans[0] {
                let c = out.cols();
                let s = out.data();
                for bi in 0..bsz {
                    for r in 0..out.rows() {
                        let base = r * c;
                        let dr = &dx[bi * on + base..bi * on + base + c];
                        let sr = &s[base..base + c];
                        let dot: T = dr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            res[bi * on + base + k] = sr[k] * (dr[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { .. } => {
            let cache = node.cache.as_ref().expect("layer norm cache");
            let gamma = ins[1].data();
            let n = out.cols();
            let nf = T::from_usize_lossy(n);
            for bi in 0..bsz {
                for r in 0..out.rows() {
                    let base = r * n;
                    let xh = &cache.xhat[base..base + n];
                    let dst = &mut res[bi * on + base..bi * on + base + n];
                    if let Some(dx) = tans[0] {
                        let dr = &dx[bi * on + base..bi * on + base + n];
                        let m1 = dr.iter().copied().sum::<T>() / nf;
                        let m2 = dr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        let is = cache.inv_std[r];
                        for k in 0..n {
                            dst[k] += gamma[k] * is * (dr[k] - m1 - xh[k] * m2);
                        }
                    }
                    if let Some(dg) = tans[1] {
                        for k in 0..n {
                            dst[k] += dg[bi * n + k] * xh[k];
                        }
                    }
                    if let Some(db) = tans[2] {
                        for k in 0..n {
                            dst[k] += db[bi * n + k];
                        }
                    }
                }
            }
        }
        Op::Gelu(kind) => {
            if let Some(dx) = tans[0] {
                let d: Vec<T> = ins[0]
                    .data()
                    .iter()
                    .map(|&x| gelu_derivative(x, *kind))
                    .collect();
                for bi in 0..bsz {
                    for i in 0..on {
                        res[bi * on + i] = dx[bi * on + i] * d[i];
                    }
                }
            }
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.0; 4]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let v = g.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[0], 1.0);
        assert!(v[1] < 1e-300);
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = g.softmax(x).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![]));
        assert!(matches!(g.softmax(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1.0; 4]));
        let gm = g.leaf(Tensor::vector(vec![1.0; 4]));
        let bt = g.leaf(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let x = g.leaf(Tensor::vector(vec![-1.0, 1.0]));
        let gm = g.leaf(Tensor::vector(vec![1.0; 2]));
        let bt = g.leaf(Tensor::vector(vec![0.0; 2]));
        let y = g.layer_norm(x, gm, bt, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_needs_two_features() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let gm = g.leaf(Tensor::vector(vec![1.0]));
        let bt = g.leaf(Tensor::vector(vec![0.0]));
        assert!(matches!(
            g.layer_norm(x, gm, bt, 1e-12),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_value(0.0f64, GeluKind::ExactGelu), 0.0);
        assert!((gelu_value(10.0f64, GeluKind::ExactGelu) - 10.0).abs() < 1e-12);
        // Φ(1) = ½(1 + erf(1/√2)) = 0.841344746068543
        assert!((gelu_value(1.0f64, GeluKind::ExactGelu) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_value(1.0f64, GeluKind::TanhGelu) - 0.841_191_990_607_0).abs() < 1e-9);
    }

    #[test]
    fn identity_jacobian() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]));
        for opts in [JacobianOptions::default(), JacobianOptions::forward()] {
            let j = g.jacobian(x, x, opts).unwrap();
            assert_eq!(j, Tensor::identity(3));
        }
    }

    #[test]
    fn softmax_jacobian_at_origin() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for opts in [JacobianOptions::default(), JacobianOptions::forward()] {
            let j = g.jacobian(s, x, opts).unwrap();
            assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);
        }
    }

    #[test]
    fn jacobian_rejects_matrices() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            g.jacobian(x, x, JacobianOptions::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn disconnected_jacobian_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y0 = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.scale(y0, 2.0).unwrap();
        assert!(!g.depends_on(y, x));
        let j = g.jacobian(y, x, JacobianOptions::default()).unwrap();
        assert_eq!(j.shape(), &[3, 2]);
        assert!(j.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_slice_row_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![5., 6.]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice_cols(c, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2., 5., 4., 6.]);
        let r = g.row(c, 1).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4., 6.]);
        assert!(matches!(g.row(c, 2), Err(Error::Index(_))));
        let table = g.leaf(Tensor::matrix(3, 1, vec![7., 8., 9.]).unwrap());
        assert!(matches!(g.gather(table, &[0, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![0.1, -0.7, 2.0, 0.4, 0.5, -1.2]).unwrap());
        let gm = g.leaf(Tensor::vector(vec![1.1, 0.9, 1.0]));
        let bt = g.leaf(Tensor::vector(vec![0.0, 0.1, -0.1]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        let z = g.gelu(y, GeluKind::ExactGelu).unwrap();
        let s = g.softmax(z).unwrap();
        let replayed = g.replay(&[]).unwrap();
        for id in [y, z, s] {
            assert_eq!(replayed[id.index()].data(), g.value(id).data());
        }
    }
}
