//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and enough
//! context to run its backward rule. Nodes are only ever appended, so the
//! node order is already a topological order of the computation and
//! [`Tape::backward`] simply walks it in reverse.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Storage {
    Owned(Vec<f64>),
    Param(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var, cols: usize },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Gather { table: Var, ids: Vec<usize>, dim: usize },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Recip { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    SliceRows { a: Var, start: usize, cols: usize },
    SliceCols { a: Var, start: usize, cols_in: usize, cols_out: usize },
    MaskedMean { a: Var, rows: Vec<usize>, cols: usize },
    SumRows { a: Var, cols: usize },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Storage,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape may borrow a [`ParamSet`]; parameter leaves then read their
/// values in place instead of copying them onto the tape.
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
    dropout_seed: u64,
    dropout_counter: u64,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape without parameters, recording gradients.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            dropout_seed: 0,
            dropout_counter: 0,
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            dropout_seed: 0,
            dropout_counter: 0,
        }
    }

    /// A tape that evaluates but records no backward information.
    pub fn inference(params: &'p ParamSet) -> Self {
        let mut tape = Self::with_params(params);
        tape.grad_enabled = false;
        tape
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Seeds the counter-based dropout stream. Each dropout call draws from
    /// its own generator keyed by (seed, call index).
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_seed = seed;
        self.dropout_counter = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Storage::Owned(data) => data,
            Storage::Param(i) => self
                .params
                .expect("param node without params")
                .get(ParamId(*i))
                .data(),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Storage::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----------------------------------------------------------

    pub fn input(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.input(tensor, false)
    }

    /// Leaf referring to a parameter of the borrowed set. Repeated calls with
    /// the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let params = self.params.expect("Tape::param requires a tape built with_params");
        let shape = params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Storage::Param(id.0),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- shape helpers -----------------------------------------------------

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref other => Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected a 2-D tensor, got shape {other:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, value, op, rg)
    }

    // ---- primitives ----------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    /// Elementwise sum. `b` may also be a row vector (`[n]` or `[1,n]`)
    /// broadcast over the rows of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
            let rg = self.requires(a) || self.requires(b);
            return Ok(self.push(self.shape(a).to_vec(), value, Op::Add { a, b }, rg));
        }
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let cols = match (sa.as_slice(), sb.as_slice()) {
            ([_, c], [n]) | ([_, c], [1, n]) if c == n => *c,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add",
                    left: sa,
                    right: sb,
                })
            }
        };
        let row = self.value(b);
        let value = self
            .value(a)
            .chunks(cols)
            .flat_map(|r| r.iter().zip(row).map(|(x, y)| x + y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(sa, value, Op::AddRow { a, row: b, cols }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub { a, b }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    /// Row lookup: `table[V,d]`, `ids` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {vocab} rows"),
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Alias of [`Tape::embedding`] for selecting rows of activations.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.embedding(a, rows)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(shape, out, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Row-wise softmax over a 2-D tensor where columns with `keep[j] == false`
    /// receive probability exactly zero and do not influence the other entries.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2("masked_softmax_rows", a)?;
        if keep.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: vec![rows, cols],
                right: vec![keep.len()],
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::InvalidArgument {
                op: "masked_softmax_rows",
                msg: "every column is masked".into(),
            });
        }
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..cols {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for j in 0..cols {
                if keep[j] {
                    dst[j] /= total;
                }
            }
        }
        // Same backward rule as a dense softmax: masked outputs are zero so
        // they receive zero gradient.
        let rg = self.requires(a);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::Softmax {
                a,
                outer: rows,
                len: cols,
                inner: 1,
            },
            rg,
        ))
    }

    /// Normalizes each row of `a[m,n]` then applies `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2("layer_norm", a)?;
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![rows, cols],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (row[j] - mean) * is;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.requires(a) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu { a },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip { a })
    }

    /// Inverted dropout. Returns `a` itself when `train` is false or the
    /// rate is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.dropout_seed, self.dropout_counter));
        self.dropout_counter += 1;
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Dropout { a, mask }, rg))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_rows", a)?;
        if start + len > rows {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {rows}", start + len),
            });
        }
        let value = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires(a);
        Ok(self.push(vec![len, cols], value, Op::SliceRows { a, start, cols }, rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", a)?;
        if start + len > cols {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {cols}", start + len),
            });
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            vec![rows, len],
            value,
            Op::SliceCols {
                a,
                start,
                cols_in: cols,
                cols_out: len,
            },
            rg,
        ))
    }

    /// Mean of the rows of `a[L,d]` where `mask` is set; returns `[1,d]`.
    pub fn mean_over_mask(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_over_mask", a)?;
        if mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mean_over_mask",
                left: vec![rows, cols],
                right: vec![mask.len()],
            });
        }
        let kept: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        if kept.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean_over_mask",
                msg: "mask selects no rows".into(),
            });
        }
        let src = self.value(a);
        let mut out = vec![0.0; cols];
        for &r in &kept {
            for (o, x) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += x;
            }
        }
        let count = kept.len() as f64;
        out.iter_mut().for_each(|o| *o /= count);
        let rg = self.requires(a);
        Ok(self.push(vec![1, cols], out, Op::MaskedMean { a, rows: kept, cols }, rg))
    }

    /// Per-row sums of a 2-D tensor, `[m,n] -> [m,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("sum_rows", a)?;
        let value = self.value(a).chunks(cols.max(1)).take(rows).map(|r| r.iter().sum()).collect();
        let rg = self.requires(a);
        Ok(self.push(vec![rows, 1], value, Op::SumRows { a, cols }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total: f64 = self.value(a).iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![total / n], Op::Mean { a }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[b,C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims2("cross_entropy", logits)?;
        if targets.len() != batch {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![batch, classes],
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {t} out of range for {classes} classes"),
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
            loss += lse - row[t];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss / batch as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let n_params = self.params.map_or(0, ParamSet::len);
        let mut out = Gradients {
            params: (0..n_params)
                .map(|i| vec![0.0; self.params.unwrap().get(ParamId(i)).numel()])
                .collect(),
            inputs: HashMap::new(),
        };
        if !self.requires(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    match node.value {
                        Storage::Param(p) => {
                            for (dst, x) in out.params[p].iter_mut().zip(&g) {
                                *dst += x;
                            }
                        }
                        Storage::Owned(_) => {
                            out.inputs.insert(idx, g);
                        }
                    }
                    continue;
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.requires(*a) {
                        let bv = self.value(*b);
                        self.accumulate(&mut grads, *a, |da| gemm(m, n, k, &g, (n, 1), bv, (1, n), da));
                    }
                    if self.requires(*b) {
                        let av = self.value(*a);
                        self.accumulate(&mut grads, *b, |db| gemm(k, m, n, av, (1, k), &g, (n, 1), db));
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..*rows {
                            for j in 0..*cols {
                                da[i * cols + j] += g[j * rows + i];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, &g));
                    self.accumulate(&mut grads, *b, |db| add_into(db, &g));
                }
                Op::AddRow { a, row, cols } => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, &g));
                    self.accumulate(&mut grads, *row, |dr| {
                        for chunk in g.chunks(*cols) {
                            add_into(dr, chunk);
                        }
                    });
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, *a, |da| add_into(da, &g));
                    self.accumulate(&mut grads, *b, |db| {
                        db.iter_mut().zip(&g).for_each(|(d, x)| *d -= x)
                    });
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * bv[i];
                        }
                    });
                    self.accumulate(&mut grads, *b, |db| {
                        for i in 0..db.len() {
                            db[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    self.accumulate(&mut grads, *a, |da| {
                        da.iter_mut().zip(&g).for_each(|(d, x)| *d += x * factor)
                    });
                }
                Op::AddScalar { a } => self.accumulate(&mut grads, *a, |da| add_into(da, &g)),
                Op::Gather { table, ids, dim } => {
                    self.accumulate(&mut grads, *table, |dt| {
                        for (r, &i) in ids.iter().enumerate() {
                            add_into(&mut dt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    });
                }
                Op::Softmax { a, outer, len, inner } => {
                    let y = self.own_value(idx);
                    self.accumulate(&mut grads, *a, |da| {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let at = |t: usize| (o * len + t) * inner + i;
                                let dot: f64 = (0..*len).map(|t| y[at(t)] * g[at(t)]).sum();
                                for t in 0..*len {
                                    da[at(t)] += y[at(t)] * (g[at(t)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    cols,
                    xhat,
                    inv_std,
                } => {
                    let cols = *cols;
                    let gv = self.value(*gamma);
                    self.accumulate(&mut grads, *gamma, |dg| {
                        for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                    });
                    self.accumulate(&mut grads, *beta, |db| {
                        for gr in g.chunks(cols) {
                            add_into(db, gr);
                        }
                    });
                    self.accumulate(&mut grads, *a, |da| {
                        let nf = cols as f64;
                        for (r, (gr, xr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                            let dxhat: Vec<f64> = (0..cols).map(|j| gr[j] * gv[j]).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                            for j in 0..cols {
                                da[r * cols + j] +=
                                    inv_std[r] / nf * (nf * dxhat[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                    });
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            let xi = x[i];
                            let t = (GELU_C * (xi + GELU_K * xi * xi * xi)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xi * xi);
                            da[i] += g[i] * d;
                        }
                    });
                }
                Op::Tanh { a } => {
                    let y = self.own_value(idx);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let y = self.own_value(idx);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Exp { a } => {
                    let y = self.own_value(idx);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * y[i];
                        }
                    });
                }
                Op::Log { a } => {
                    let x = self.value(*a);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] / x[i];
                        }
                    });
                }
                Op::Recip { a } => {
                    let y = self.own_value(idx);
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] -= g[i] * y[i] * y[i];
                        }
                    });
                }
                Op::Dropout { a, mask } => {
                    self.accumulate(&mut grads, *a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * mask[i];
                        }
                    });
                }
                Op::Concat { parts, outer, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        self.accumulate(&mut grads, p, |dp| {
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + w];
                                add_into(&mut dp[o * w..(o + 1) * w], src);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows { a, start, cols } => {
                    self.accumulate(&mut grads, *a, |da| {
                        add_into(&mut da[start * cols..start * cols + g.len()], &g)
                    });
                }
                Op::SliceCols {
                    a,
                    start,
                    cols_in,
                    cols_out,
                } => {
                    self.accumulate(&mut grads, *a, |da| {
                        for (r, gr) in g.chunks(*cols_out).enumerate() {
                            add_into(&mut da[r * cols_in + start..r * cols_in + start + cols_out], gr);
                        }
                    });
                }
                Op::MaskedMean { a, rows, cols } => {
                    let inv = 1.0 / rows.len() as f64;
                    self.accumulate(&mut grads, *a, |da| {
                        for &r in rows {
                            for j in 0..*cols {
                                da[r * cols + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::SumRows { a, cols } => {
                    self.accumulate(&mut grads, *a, |da| {
                        for (r, dr) in da.chunks_mut((*cols).max(1)).enumerate() {
                            dr.iter_mut().for_each(|d| *d += g[r]);
                        }
                    });
                }
                Op::Sum { a } => {
                    self.accumulate(&mut grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Mean { a } => {
                    let inv = 1.0 / self.value(*a).len() as f64;
                    self.accumulate(&mut grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0] * inv));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    classes,
                } => {
                    let scale = g[0] / targets.len() as f64;
                    self.accumulate(&mut grads, *logits, |dl| {
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..*classes {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn own_value(&self, idx: usize) -> &[f64] {
        self.value(Var(idx))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Vec<f64>>,
    inputs: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter; all zeros when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Vec<f64>> {
        self.params
    }

    /// Gradient for a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
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

/// SplitMix64 finalizer over two words; used to key deterministic streams.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c[m,n] += a[m,k] * b[k,n]` with arbitrary (row, col) strides on `a`, `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    debug_assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the debug assertions above spell out the extents dgemm reads
    // and writes; every caller passes slices sized from the same m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
