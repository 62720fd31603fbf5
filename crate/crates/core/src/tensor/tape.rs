use std::collections::{BTreeMap, HashMap};

use super::linalg::{dot, gemm, norm};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Added to each norm in [`Tape::cosine`] and [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    CausalMask(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Cosine { u: Var, v: Var, nu: f64, nv: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of one forward computation.
///
/// Nodes are appended after their inputs, so the node vector is always in
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
///
/// Every leaf that required a gradient has an entry, zero-filled when the
/// loss does not depend on it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sums another gradient map into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        for (k, g) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.leaves.insert(k, g);
                }
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (n / cols, cols)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf; gradients are reported through [`Gradients::get`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err("constant", format!("{:?} vs {} values", shape, data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf { param: None }, false))
    }

    /// Places parameter `id` on the tape once; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        );
        self.param_cache.insert(id, v);
        v
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`) for 2-D operands.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let (br, bc) = rows_cols(self.shape(b));
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return shape_err(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), ng)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if self.value(bias).len() != n {
            return shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            add_into(&mut out[r * n..(r + 1) * n], b);
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            super::linalg::softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), ng)
    }

    /// Replaces entries above the diagonal of a square score matrix with a large negative value.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if m != n {
            return shape_err("causal_mask", format!("non-square {:?}", self.shape(a)));
        }
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for j in i + 1..n {
                out[i * n + j] = MASKED;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::CausalMask(a), ng))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer_norm", format!("width {n} vs gain/bias"));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            ng,
        ))
    }

    /// Selects rows of `table` (viewed as `rows × last_dim`) in the given order.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(table));
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} of table with {m} rows")));
            }
            out.extend_from_slice(&tv[r * n..(r + 1) * n]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows { table, rows: rows.to_vec() },
            ng,
        ))
    }

    /// Stacks 2-D blocks with equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let n = rows_cols(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = rows_cols(self.shape(p));
            if pn != n {
                return shape_err("concat_rows", format!("width {pn} vs {n}"));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if start > end || end > n {
            return shape_err("slice_cols", format!("[{start}, {end}) of width {n}"));
        }
        let w = end - start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + end]);
        }
        let ng = self.needs(a);
        Ok(self.push(vec![m, w], out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let m = rows_cols(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(self.shape(p)).1).collect();
        for &p in parts {
            if rows_cols(self.shape(p)).0 != m {
                return shape_err("concat_cols", "row counts differ");
            }
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Cosine similarity `u·v / ((‖u‖+ε)(‖v‖+ε))` of two equal-length vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return shape_err("cosine", format!("{:?} vs {:?}", self.shape(u), self.shape(v)));
        }
        let (uv, vv) = (self.value(u), self.value(v));
        let (nu, nv) = (norm(uv), norm(vv));
        let s = dot(uv, vv) / ((nu + COSINE_EPS) * (nv + COSINE_EPS));
        let ng = self.needs(u) || self.needs(v);
        Ok(self.push(vec![1], vec![s], Op::Cosine { u, v, nu, nv }, ng))
    }

    /// Mean over rows of `-log softmax(logits[row])[targets[row]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = rows_cols(self.shape(logits));
        if targets.len() != t || t == 0 {
            return shape_err(
                "cross_entropy",
                format!("{} target rows for logits {:?}", targets.len(), self.shape(logits)),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss / t as f64],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("loss node {} not on tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf { param } = node.op {
                if node.needs_grad {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    match param {
                        Some(id) => {
                            out.params.insert(id, g);
                        }
                        None => {
                            out.leaves.insert(i, g);
                        }
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.check_inputs(i)?;
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn check_inputs(&self, i: usize) -> Result<()> {
        let bad = |v: &Var| v.0 >= i;
        let cyclic = match &self.nodes[i].op {
            Op::Leaf { .. } => false,
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                bad(a) || bad(b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::CausalMask(a)
            | Op::Sum(a)
            | Op::Mean(a) => bad(a),
            Op::SliceCols { a, .. } => bad(a),
            Op::GatherRows { table, .. } => bad(table),
            Op::LayerNorm { x, gain, bias, .. } => bad(x) || bad(gain) || bad(bias),
            Op::ConcatRows(ps) | Op::ConcatCols(ps) => ps.iter().any(bad),
            Op::Cosine { u, v, .. } => bad(u) || bad(v),
            Op::CrossEntropy { logits, .. } => bad(logits),
        };
        if cyclic {
            return Err(Error::Internal(format!("node {i} reads a later node")));
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv, !*trans_b, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av, false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, av, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::AddRow(a, bias) => {
                let (m, n) = rows_cols(&node.shape);
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let s = dot(yr, gr);
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                let n = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..node.shape[0] {
                        for c in 0..=r {
                            ga[r * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dxhat[c] = d;
                            s1 += d;
                            s2 += d * xhat[r * n + c];
                        }
                        for c in 0..n {
                            gx[r * n + c] +=
                                rstd[r] / nf * (nf * dxhat[c] - s1 - xhat[r * n + c] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let n = node.shape[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut gt[r * n..(r + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, w) = rows_cols(&node.shape);
                let n = rows_cols(self.shape(*a)).1;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = rows_cols(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let w = rows_cols(self.shape(p)).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / len);
                }
            }
            Op::Cosine { u, v, nu, nv } => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let (du, dv) = (nu + COSINE_EPS, nv + COSINE_EPS);
                let uv_dot = dot(uv, vv);
                let denom = du * dv;
                if let Some(gu) = self.slot(grads, *u) {
                    let c = if *nu > 0.0 { uv_dot / (du * denom * nu) } else { 0.0 };
                    for j in 0..uv.len() {
                        gu[j] += g[0] * (vv[j] / denom - c * uv[j]);
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    let c = if *nv > 0.0 { uv_dot / (dv * denom * nv) } else { 0.0 };
                    for j in 0..vv.len() {
                        gv[j] += g[0] * (uv[j] / denom - c * vv[j]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (t, v) = rows_cols(self.shape(*logits));
                let scale = g[0] / t as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &y) in targets.iter().enumerate() {
                        for c in 0..v {
                            let ind = if c == y { 1.0 } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - ind);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Plain cosine similarity with the same ε rule as the tape op.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return shape_err("cosine_similarity", format!("{} vs {}", u.len(), v.len()));
    }
    Ok(dot(u, v) / ((norm(u) + COSINE_EPS) * (norm(v) + COSINE_EPS)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(t: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![1], vec![3.0]);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![2], vec![1.0, 2.0]);
        let p = var(&mut t, vec![3], vec![1.0, 1.0, 1.0]);
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_shape_error() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
        // zero vector stays finite
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut t = Tape::new();
        let l = t.constant(vec![1, 4], vec![0.5; 4]).unwrap();
        let loss = t.cross_entropy(l, &[2]).unwrap();
        assert!((t.scalar(loss) - 4f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[3] = 20.0;
        let l = t.constant(vec![1, 5], logits).unwrap();
        let loss = t.cross_entropy(l, &[3]).unwrap();
        assert!(t.scalar(loss) < 1e-6);

        let l = t.constant(vec![1, 5], vec![0.0; 5]).unwrap();
        assert!(matches!(t.cross_entropy(l, &[5]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = vec![0.3, -1.2, 2.0, 0.1, 1.5, -0.4];
        let targets = [2usize, 0];
        let direct: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &logits[r * 3..r * 3 + 3];
                let z: f64 = row.iter().map(|x: &f64| x.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        let mut t = Tape::new();
        let l = t.constant(vec![2, 3], logits).unwrap();
        let loss = t.cross_entropy(l, &targets).unwrap();
        assert!((t.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn param_leaves_are_cached() {
        let mut store = ParamStore::new();
        let id = store.add("w", "g", Tensor::zeros(vec![2]).with_requires_grad(true));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(id).unwrap(), &[2.0, 2.0]);
    }
}
