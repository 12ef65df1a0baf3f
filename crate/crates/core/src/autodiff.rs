//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node; node ids are
//! assigned in creation order, so inputs always precede their consumers and a
//! single reverse sweep visits each record exactly once. Parameters are
//! borrowed from a [`ParamStore`] and never copied onto the tape.

use std::collections::HashMap;

use crate::error::{DcerError, Result};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug)]
enum Value {
    Owned(Vec<f32>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, s: f32 },
    DivScalar { a: Var, s: Var },
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, rstd: Vec<f32> },
    ConcatRows(Vec<Var>),
    ConcatCols { parts: Vec<Var>, rows: usize },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize, in_cols: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows { a: Var, rows: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Dwt { x: Var, low: Var, high: Var, t: usize, d: usize },
    BandMasks { b: Var, tau: f32, radii: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::DivScalar { .. } => "div_scalar",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows { .. } => "mean_rows",
            Op::Embedding { .. } => "embedding",
            Op::Dwt { .. } => "dwt",
            Op::BandMasks { .. } => "band_masks",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } | Op::MatMulT { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::DivScalar { a, s } => vec![*a, *s],
            Op::Scale { a, .. }
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Softmax { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Transpose { a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols { parts, .. } => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Dwt { x, low, high, .. } => vec![*x, *low, *high],
            Op::BandMasks { b, .. } => vec![*b],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    track_params: bool,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f32>>,
    params: Vec<(ParamId, Vec<f32>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn accumulate_into(&self, buf: &mut GradBuffer) {
        for (id, g) in &self.params {
            buf.add(*id, g);
        }
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only explicit leaves are available.
    pub fn new() -> Graph<'static> {
        Graph {
            params: None,
            track_params: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph reading parameters from `params`. When `track_params` is false
    /// parameters are treated as constants and receive no gradient.
    pub fn with_params(params: &'p ParamStore, track_params: bool) -> Graph<'p> {
        Graph {
            params: Some(params),
            track_params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_store(&self) -> Option<&'p ParamStore> {
        self.params
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let inputs = op.inputs();
        // `v * 0` is NaN exactly for non-finite `v`, and the fold vectorises.
        if cfg!(debug_assertions) && !data.iter().fold(0.0f32, |acc, v| acc + v * 0.0).is_finite() {
            let inputs_finite = inputs
                .iter()
                .all(|&i| self.value(i).iter().all(|v| v.is_finite()));
            assert!(
                !inputs_finite,
                "{} produced non-finite output from finite inputs",
                op.name()
            );
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Owned(t.data().to_vec()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(&t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- linear algebra -----------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(DcerError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(DcerError::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(DcerError::shape("transpose", self.shape(a), &[2]));
        }
        let (rows, cols) = self.rows_cols(a);
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DcerError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.value(row).len() != cols {
            return Err(DcerError::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..rows {
            out[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(r)
                .for_each(|(o, b)| *o += b);
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s })
    }

    /// Divides every element of `a` by the single-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(DcerError::shape("div_scalar", self.shape(a), self.shape(s)));
        }
        let d = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x / d).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::DivScalar { a, s }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Softplus(a))
    }

    /// Softmax over `axis` of a 2-D tensor (or the only axis of a vector).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if axis >= nd.max(1) || nd > 2 {
            return Err(DcerError::Contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                self.shape(a)
            )));
        }
        if nd == 2 && axis == 0 {
            let t = self.transpose(a)?;
            let s = self.softmax_last(t);
            return self.transpose(s);
        }
        Ok(self.softmax_last(a))
    }

    fn softmax_last(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a);
        let mut out = self.value(a).to_vec();
        for r in out.chunks_mut(cols).take(rows) {
            let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in r.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            r.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a, cols })
    }

    /// Layer normalisation over the last axis with variance epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(DcerError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for i in 0..rows {
            let row = &xs[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                out[i * cols + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, cols, rstd },
        ))
    }

    // ---- structural ---------------------------------------------------

    /// Concatenates 2-D tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DcerError::Contract("concat of zero tensors".into()))?;
        let cols = self.rows_cols(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols || self.shape(p).len() != 2 {
                return Err(DcerError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DcerError::Contract("concat of zero tensors".into()))?;
        let rows = self.rows_cols(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows || self.shape(p).len() != 2 {
                return Err(DcerError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols { parts: parts.to_vec(), rows },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.shape(a).len() != 2 || start + len > rows || len == 0 {
            return Err(DcerError::shape("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.shape(a).len() != 2 || start + len > cols || len == 0 {
            return Err(DcerError::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start, in_cols: cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(DcerError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Mean over rows of a 2-D tensor, giving `[1 × cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a);
        let src = self.value(a);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            out.iter_mut()
                .zip(&src[i * cols..(i + 1) * cols])
                .for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(vec![1, cols], out, Op::MeanRows { a, rows })
    }

    // ---- model-specific kernels -----------------------------------------

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(DcerError::Input(format!(
                "token id {bad} out of vocabulary of size {vocab}"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// One analysis level of a two-channel periodic filter bank applied
    /// along the time axis of `x[t×d]`. The output stacks the approximation
    /// rows on top of the detail rows, `[t/2 + t/2, d]`.
    pub fn dwt(&mut self, x: Var, low: Var, high: Var) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        if self.shape(x).len() != 2 || t % 2 != 0 {
            return Err(DcerError::shape("dwt", self.shape(x), &[t]));
        }
        let taps = self.value(low).len();
        if self.value(high).len() != taps {
            return Err(DcerError::shape("dwt filters", self.shape(low), self.shape(high)));
        }
        let out = crate::wavelet::analysis_periodic(
            self.value(x),
            t,
            d,
            self.value(low),
            self.value(high),
        );
        Ok(self.push(vec![t, d], out, Op::Dwt { x, low, high, t, d }))
    }

    /// Soft band masks over a grid of normalised radii; see
    /// [`crate::dct::soft_band_masks`]. Output is `[bands, radii.len()]`.
    pub fn band_masks(&mut self, boundaries: Var, radii: &[f32], tau: f32) -> Var {
        let b = self.value(boundaries).to_vec();
        let out = crate::dct::soft_band_masks(radii, &b, tau);
        self.push(
            vec![b.len() + 1, radii.len()],
            out,
            Op::BandMasks { b: boundaries, tau, radii: radii.to_vec() },
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(DcerError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.backward_op(idx, op, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_op(&self, idx: usize, op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out_val = self.value(Var(idx));
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, m * k);
                    gemm(*m, *n, *k, g, false, self.value(*b), true, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = grad_slot(grads, *b, k * n);
                    gemm(*k, *m, *n, self.value(*a), true, g, false, buf, true);
                }
            }
            Op::MatMulT { a, b, m, k, n } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, m * k);
                    gemm(*m, *n, *k, g, false, self.value(*b), false, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = grad_slot(grads, *b, n * k);
                    gemm(*n, *m, *k, g, true, self.value(*a), false, buf, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.requires_grad(*b) {
                    let buf = grad_slot(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let buf = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let buf = grad_slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g);
                if self.requires_grad(*row) {
                    let cols = self.value(*row).len();
                    let buf = grad_slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        buf.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale { a, s } => {
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::DivScalar { a, s } => {
                let d = self.value(*s)[0];
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v / d);
                }
                if self.requires_grad(*s) {
                    let av = self.value(*a);
                    let dot: f32 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    grad_slot(grads, *s, 1)[0] -= dot / (d * d);
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let av = self.value(*a);
                    let buf = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        let s = out_val[i];
                        buf[i] += g[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Softplus(a) => {
                if self.requires_grad(*a) {
                    let av = self.value(*a);
                    let buf = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * sigmoid(av[i]);
                    }
                }
            }
            Op::Softmax { a, cols } => {
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, g.len());
                    for (r, (gr, yr)) in g.chunks(*cols).zip(out_val.chunks(*cols)).enumerate() {
                        let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        let o = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..*cols {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, cols, rstd } => {
                let cols = *cols;
                let xs = self.value(*x);
                let gv = self.value(*gain);
                let rows = rstd.len();
                let mut xhat = vec![0.0; cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = if self.requires_grad(*x) {
                    Some(vec![0.0; rows * cols])
                } else {
                    None
                };
                for i in 0..rows {
                    let row = &xs[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f32>() / cols as f32;
                    let rs = rstd[i];
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * rs;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[j];
                        }
                        m1 /= cols as f32;
                        m2 /= cols as f32;
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            dx[i * cols + j] = rs * (dxh - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, &dx);
                }
                self.acc(grads, *gain, &dgain);
                self.acc(grads, *bias, &dbias);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total = g.len() / rows;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).len() / rows;
                    if self.requires_grad(p) {
                        let buf = grad_slot(grads, p, rows * w);
                        for i in 0..*rows {
                            buf[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + off..i * total + off + w])
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len();
                    let cols = self.rows_cols(*a).1;
                    let buf = grad_slot(grads, *a, n);
                    buf[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::SliceCols { a, start, in_cols } => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len();
                    let rows = n / in_cols;
                    let len = g.len() / rows;
                    let buf = grad_slot(grads, *a, n);
                    for i in 0..rows {
                        buf[i * in_cols + start..i * in_cols + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Transpose { a, rows, cols } => {
                if self.requires_grad(*a) {
                    let buf = grad_slot(grads, *a, rows * cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            buf[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, g),
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len();
                    let buf = grad_slot(grads, *a, n);
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len();
                    let s = g[0] / n as f32;
                    let buf = grad_slot(grads, *a, n);
                    buf.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows { a, rows } => {
                if self.requires_grad(*a) {
                    let cols = g.len();
                    let inv = 1.0 / *rows as f32;
                    let buf = grad_slot(grads, *a, rows * cols);
                    for i in 0..*rows {
                        buf[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(o, v)| *o += v * inv);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let n = self.value(*table).len();
                    let dim = g.len() / ids.len();
                    let buf = grad_slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        buf[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Dwt { x, low, high, t, d } => {
                let (dx, dlow, dhigh) = crate::wavelet::analysis_periodic_backward(
                    self.value(*x),
                    *t,
                    *d,
                    self.value(*low),
                    self.value(*high),
                    g,
                );
                self.acc(grads, *x, &dx);
                self.acc(grads, *low, &dlow);
                self.acc(grads, *high, &dhigh);
            }
            Op::BandMasks { b, tau, radii } => {
                if self.requires_grad(*b) {
                    let bv = self.value(*b);
                    let n = radii.len();
                    let mut db = vec![0.0; bv.len()];
                    // s_j = σ((r - b_j)/τ) enters mask_j with − and mask_{j+1} with +
                    for (j, dbj) in db.iter_mut().enumerate() {
                        let up = &g[j * n..(j + 1) * n];
                        let down = &g[(j + 1) * n..(j + 2) * n];
                        let mut acc = 0.0;
                        for p in 0..n {
                            let s = sigmoid((radii[p] - bv[j]) / tau);
                            let ds_db = -s * (1.0 - s) / tau;
                            acc += (down[p] - up[p]) * ds_db;
                        }
                        *dbj = acc;
                    }
                    self.acc(grads, *b, &db);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = grad_slot(grads, v, g.len());
        buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of `k×n`.
/// A transposed operand is stored row-major in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    if (m <= SMALL_DIM || k <= SMALL_DIM) && !(a_t && b_t) {
        small_gemm(m, k, n, a, a_t, b, b_t, c, accumulate);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
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

/// Below this row or inner count the packing done by the blocked kernel
/// costs more than the arithmetic; the direct loops below stream contiguous
/// rows instead.
const SMALL_DIM: usize = 16;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the features the wrapper is compiled for were just detected.
        unsafe { small_gemm_avx2(m, k, n, a, a_t, b, b_t, c, accumulate) };
        return;
    }
    small_gemm_portable(m, k, n, a, a_t, b, b_t, c, accumulate);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    small_gemm_portable(m, k, n, a, a_t, b, b_t, c, accumulate);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn small_gemm_portable(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(0.0);
    }
    if b_t {
        // a is m×k row-major here; b is n×k.
        for (i, crow) in c.chunks_exact_mut(n).enumerate() {
            let arow = &a[i * k..(i + 1) * k];
            for (j, cij) in crow.iter_mut().enumerate() {
                *cij += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        for p in 0..k {
            let aip = if a_t { a[p * m + i] } else { a[i * k + p] };
            if aip == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
}

#[inline(always)]
fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (xv, yv) in xr.iter().zip(yr) {
        s += xv * yv;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_gemm_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(m, k, n) in &[(4, 40, 19), (3, 5, 7), (20, 4, 33), (1, 17, 1)] {
            for (a_t, b_t) in [(false, false), (false, true), (true, false)] {
                let a = Tensor::randn(vec![m * k], 1.0, &mut rng);
                let b = Tensor::randn(vec![k * n], 1.0, &mut rng);
                let at = |i: usize, p: usize| if a_t { a.data()[p * m + i] } else { a.data()[i * k + p] };
                let bt = |p: usize, j: usize| if b_t { b.data()[j * k + p] } else { b.data()[p * n + j] };
                let mut c = vec![0.5f32; m * n];
                small_gemm(m, k, n, a.data(), a_t, b.data(), b_t, &mut c, true);
                for i in 0..m {
                    for j in 0..n {
                        let want: f64 = 0.5 + (0..k).map(|p| at(i, p) as f64 * bt(p, j) as f64).sum::<f64>();
                        assert!((c[i * n + j] as f64 - want).abs() < 1e-4, "{m}x{k}x{n} {a_t} {b_t}");
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let i3 = g.constant(&Tensor::eye(3));
        let mv = g.constant(&m);
        let out = g.matmul(i3, mv).unwrap();
        assert_eq!(g.value(out), m.data());

        let a = g.constant(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.constant(&Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(DcerError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = g.constant(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(y, 0).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-6);
        assert!(g.value(s)[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_axis_zero_normalises_columns() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(&Tensor::randn(vec![4, 6], 2.0, &mut rng));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for j in 0..6 {
            let col: f32 = (0..4).map(|i| v[i * 6 + j]).sum();
            assert!((col - 1.0).abs() < 1e-5);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_of_constant_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(vec![2, 5], 3.25));
        let gain = g.constant(&Tensor::full(vec![5], 2.0));
        let bias = g.constant(&Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y);
        for r in 0..2 {
            for j in 0..5 {
                assert!((v[r * 5 + j] - (j as f32 + 1.0) * 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::scalar(0.0));
        let y = g.gelu(x);
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(DcerError::Contract(_))));
    }

    #[test]
    fn backward_seeds_one_and_reaches_leaves() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn params_are_shared_not_copied_and_receive_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(vec![1, 2], 0.5), crate::params::Decay::Apply);
        let mut g = Graph::with_params(&store, true);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap(), &[1.0, 1.0]);

        let mut frozen = Graph::with_params(&store, false);
        let a = frozen.param(w);
        let loss = frozen.sum(a);
        assert!(frozen.backward(loss).unwrap().param(w).is_none());
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let t = g.constant(&Tensor::zeros(vec![4, 3]));
        assert!(matches!(g.embedding(t, &[1, 4]), Err(DcerError::Input(_))));
    }
}
