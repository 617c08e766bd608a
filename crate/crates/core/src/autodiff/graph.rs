//! Reverse-mode tape over dense matrices.
//!
//! A [`Graph`] is built fresh for every loss evaluation. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order
//! for the adjoint pass. Nodes that do not depend on a trainable parameter
//! are never visited during backward.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Where a network reads its parameters from, and whether they receive gradients.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectBlocks(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    RowMask(Var, Vec<f64>),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionSaved>),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq_len: usize,
    starts: Vec<usize>,
    probs: Vec<f64>,
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
}

/// `c (+)= op(a) · op(b)` with optional transposes, row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    // op(a) is m×k; stored as k×m when transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides given above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor { shape: vec![n.rows, n.cols], values: n.value.clone() }
    }

    /// Constant input matrix.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::invalid(format!("{rows}x{cols} input given {} values", values.len())));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.values.clone(), Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf, false)
    }

    /// Binds a parameter. Trainable parameters are bound once per graph and
    /// reported by [`Graph::backward`]; frozen ones are plain constants.
    pub fn bind(&mut self, p: Binding<'_>, path: &str) -> Result<Var> {
        if p.trainable {
            if let Some(&v) = self.bound.get(path) {
                return Ok(v);
            }
        }
        let t = p.store.get(path)?;
        let v = self.push(t.rows(), t.cols(), t.values.clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.bound.insert(path.to_string(), v);
            self.params.push((path.to_string(), v));
        }
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::invalid(format!("{what}: shape {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let (r, c) = (n.rows, n.cols);
        let val = n.value.iter().map(|&x| f(x)).collect();
        let ng = n.needs_grad;
        self.push(r, c, val, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let val = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, val, op, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::invalid(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a + bias` with `bias` (1×n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(a), self.shape(bias));
        if br != 1 || bc != n {
            return Err(Error::invalid(format!("add_row: {m}x{n} plus {br}x{bc}")));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, x) in row.iter_mut().zip(b) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(m, n, out, Op::AddRow(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// `a * s` with `s` a 1×1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::invalid("mul_scalar: multiplier is not 1x1"));
        }
        let k = self.scalar(s);
        let (r, c) = self.shape(a);
        let val = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(r, c, val, Op::MulScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::invalid("concat of nothing")),
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::invalid("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, w, out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::invalid(format!("slice_rows {start}..{end} of {r}")));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start), ng))
    }

    /// Row `i` of the result is block `blocks[i]` (of width `width`) of row `i` of `a`.
    pub fn select_blocks(&mut self, a: Var, width: usize, blocks: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if width == 0 || c % width != 0 || blocks.len() != r {
            return Err(Error::invalid(format!("select_blocks: {r}x{c}, width {width}, {} picks", blocks.len())));
        }
        let nb = c / width;
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for (i, &b) in blocks.iter().enumerate() {
            if b >= nb {
                return Err(Error::invalid(format!("select_blocks: block {b} of {nb}")));
            }
            out.extend_from_slice(&src[i * c + b * width..i * c + (b + 1) * width]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, width, out, Op::SelectBlocks(a, blocks.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows: row {i} of {r}")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Multiplies row `i` by the constant `mask[i]`.
    pub fn row_mask(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if mask.len() != r {
            return Err(Error::invalid("row_mask: length mismatch"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for (i, &m) in mask.iter().enumerate() {
            out.extend(src[i * c..(i + 1) * c].iter().map(|x| x * m));
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::RowMask(a, mask.to_vec()), ng))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let m = src.iter().sum::<f64>() / src.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(1, 1, vec![m], Op::Mean(a), ng)
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × width` with row `b·seq_len + t`
    /// holding position `t` of sequence `b`. Sequence `b` occupies positions
    /// `starts[b]..seq_len`; earlier positions are padding and are never
    /// attended to. Padding queries produce zero rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize, starts: &[usize]) -> Result<Var> {
        let (rows, width) = self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!("attention width {width} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows != starts.len() * seq_len {
            return Err(Error::invalid("attention: rows do not match batch × seq_len"));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t_len = seq_len;
        let mut probs = vec![0.0; starts.len() * heads * t_len * t_len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; t_len];
        for (b, &start) in starts.iter().enumerate() {
            let base = b * t_len;
            for h in 0..heads {
                let off = h * dh;
                for i in start..t_len {
                    let qi = &qv[(base + i) * width + off..(base + i) * width + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in start..=i {
                        let kj = &kv[(base + j) * width + off..(base + j) * width + off + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(i + 1).skip(start) {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * t_len + i) * t_len..][..t_len];
                    let orow = &mut out[(base + i) * width + off..(base + i) * width + off + dh];
                    for j in start..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vv[(base + j) * width + off..(base + j) * width + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttentionSaved { q, k, v, heads, seq_len, starts: starts.to_vec(), probs };
        Ok(self.push(rows, width, out, Op::Attention(Box::new(saved)), ng))
    }

    /// Attention weights of sequence `b`, head `h`, query position `i`.
    pub fn attention_probs(&self, att: Var, b: usize, h: usize, i: usize) -> Option<&[f64]> {
        match &self.node(att).op {
            Op::Attention(s) => {
                let t = s.seq_len;
                Some(&s.probs[((b * s.heads + h) * t + i) * t..][..t])
            }
            _ => None,
        }
    }

    /// Gradients of a 1×1 `root` with respect to every trainable binding.
    pub fn backward(&self, root: Var) -> Result<ParamStore> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid("backward root must be a scalar"));
        }
        let v = self.scalar(root);
        if !v.is_finite() {
            return Err(Error::numeric("loss"));
        }
        self.backward_seeded(root, vec![1.0])
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ root`.
    pub fn backward_seeded(&self, root: Var, seed: Vec<f64>) -> Result<ParamStore> {
        if seed.len() != self.node(root).value.len() {
            return Err(Error::invalid("seed does not match root shape"));
        }
        let grads = self.adjoints(root, seed);
        let mut out = ParamStore::new();
        for (path, v) in &self.params {
            let n = self.node(*v);
            let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("gradient of {path}")));
            }
            out.insert(path.clone(), Tensor { shape: vec![n.rows, n.cols], values: g })?;
        }
        Ok(out)
    }

    fn adjoints(&self, root: Var, seed: Vec<f64>) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, 1.0);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.scalar(*s);
                let dot: f64 = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).sum();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += dot;
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
                }
            }
            Op::Shift(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => self.elementwise_back(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, &node.value),
            Op::Sigmoid(a) => self.elementwise_back(*a, g, grads, |_, y| y * (1.0 - y), &node.value),
            Op::Tanh(a) => self.elementwise_back(*a, g, grads, |_, y| 1.0 - y * y, &node.value),
            Op::Exp(a) => self.elementwise_back(*a, g, grads, |_, y| y, &node.value),
            Op::Ln(a) => self.elementwise_back(*a, g, grads, |x, _| 1.0 / x, &node.value),
            Op::Square(a) => self.elementwise_back(*a, g, grads, |x, _| 2.0 * x, &node.value),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*a, g, grads, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }, &node.value)
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * cols + off..r * cols + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let dst = &mut ga[r * c + start..r * c + start + cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let dst = &mut ga[start * cols..(start + rows) * cols];
                    dst.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SelectBlocks(a, blocks) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &b) in blocks.iter().enumerate() {
                        let dst = &mut ga[i * c + b * cols..i * c + (b + 1) * cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut ga[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::RowMask(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &m) in mask.iter().enumerate() {
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(x, y)| *x += y * m);
                    }
                }
            }
            Op::SumCols(a) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        ga[r * c..(r + 1) * c].iter_mut().for_each(|x| *x += g[r]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.node(*a).value.len().max(1) as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Attention(s) => self.attention_back(s, cols, g, grads),
        }
    }

    fn elementwise_back(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let av = &self.nodes[a.0].value;
        if !self.nodes[a.0].needs_grad {
            return;
        }
        let len = av.len();
        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; len]);
        for i in 0..len {
            ga[i] += g[i] * d(av[i], out[i]);
        }
    }

    fn attention_back(&self, s: &AttentionSaved, width: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let dh = width / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = s.seq_len;
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t_len];
        for (b, &start) in s.starts.iter().enumerate() {
            let base = b * t_len;
            for h in 0..s.heads {
                let off = h * dh;
                for i in start..t_len {
                    let prow = &s.probs[((b * s.heads + h) * t_len + i) * t_len..][..t_len];
                    let go = &g[(base + i) * width + off..(base + i) * width + off + dh];
                    let mut weighted = 0.0;
                    for j in start..=i {
                        let vj = (base + j) * width + off;
                        let d: f64 = go.iter().zip(&vv[vj..vj + dh]).map(|(x, y)| x * y).sum();
                        dp[j] = d;
                        weighted += prow[j] * d;
                        for (x, y) in dv[vj..vj + dh].iter_mut().zip(go) {
                            *x += prow[j] * y;
                        }
                    }
                    let qi = (base + i) * width + off;
                    for j in start..=i {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (base + j) * width + off;
                        for c in 0..dh {
                            dq[qi + c] += ds * kv[kj + c];
                            dk[kj + c] += ds * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (v, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if let Some(gv) = self.acc(grads, v) {
                gv.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Evaluates `loss_fn` on a fresh graph and returns its value and the
/// gradient of every trainable parameter it bound.
pub fn value_and_grad<F>(loss_fn: F) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = loss_fn(&mut g)?;
    let grads = g.backward(root)?;
    Ok((g.scalar(root), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_gradient() {
        let p = store(&[("w", Tensor::scalar(3.0))]);
        let (v, g) = value_and_grad(|g| {
            let w = g.bind(Binding::trainable(&p), "w")?;
            let sq = g.square(w);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get("w").unwrap().values, vec![6.0]);
    }

    #[test]
    fn relu_kink_takes_zero_subgradient() {
        let p = store(&[("w", Tensor::vector(vec![0.0, 2.0]))]);
        let (_, g) = value_and_grad(|g| {
            let w = g.bind(Binding::trainable(&p), "w")?;
            let r = g.relu(w);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!(g.get("w").unwrap().values, vec![0.0, 1.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = store(&[("w", Tensor::scalar(-1.0))]);
        let r = value_and_grad(|g| {
            let w = g.bind(Binding::trainable(&p), "w")?;
            let l = g.ln(w);
            Ok(g.sum(l))
        });
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn frozen_and_detached_get_no_gradient() {
        let p = store(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(5.0))]);
        let (_, grads) = value_and_grad(|g| {
            let a = g.bind(Binding::trainable(&p), "a")?;
            let b = g.bind(Binding::frozen(&p), "b")?;
            let ad = g.detach(a);
            let x = g.mul(a, b)?;
            let y = g.mul(ad, b)?;
            let s = g.add(x, y)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("a").unwrap().values, vec![5.0]);
    }

    #[test]
    fn matmul_gradients_by_hand() {
        // f = sum(A·B), dA = 1·Bᵀ, dB = Aᵀ·1
        let p = store(&[
            ("a", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()),
            ("b", Tensor::matrix(3, 2, vec![1., -1., 0., 2., 3., 1.]).unwrap()),
        ]);
        let (v, g) = value_and_grad(|g| {
            let a = g.bind(Binding::trainable(&p), "a")?;
            let b = g.bind(Binding::trainable(&p), "b")?;
            let c = g.matmul(a, b)?;
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(v, (1. - 1. + 0. + 4. + 9. + 3.) + (4. - 4. + 0. + 10. + 18. + 6.));
        assert_eq!(g.get("a").unwrap().values, vec![0., 2., 4., 0., 2., 4.]);
        assert_eq!(g.get("b").unwrap().values, vec![5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn attention_single_position_copies_value() {
        let mut g = Graph::new();
        let q = g.input(1, 2, vec![0.3, -0.1]).unwrap();
        let k = g.input(1, 2, vec![1.0, 2.0]).unwrap();
        let v = g.input(1, 2, vec![7.0, -3.0]).unwrap();
        let o = g.causal_attention(q, k, v, 1, 1, &[0]).unwrap();
        assert_eq!(g.value(o), &[7.0, -3.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.zeros(2, 3);
        let b = g.zeros(2, 3);
        assert!(g.matmul(a, b).is_err());
        let c = g.zeros(3, 2);
        assert!(g.add(a, c).is_err());
        assert!(g.input(2, 2, vec![1.0]).is_err());
    }
}
