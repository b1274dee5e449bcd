use std::collections::BTreeMap;

use super::kernels::{self, AttnGeom, ConvGeom};
use super::{numel, ParamStore, Tensor};
use crate::error::{ensure, Error, Result};
use crate::scalar::{sum64, Scalar};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Gather { table: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows { parts: Vec<Var>, groups: usize },
    RepeatRows { x: Var, times: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize },
    Upsample2x(Var),
    AvgPool { x: Var, k: usize },
    RowsToNchw { x: Var, batch: usize, h: usize, w: usize },
    NchwToRows { x: Var, batch: usize, h: usize, w: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of eagerly evaluated operations.
///
/// Nodes are appended in evaluation order, so the tape is always a valid
/// topological order and backward is a single reverse sweep. One graph is
/// built and differentiated by one thread.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Graph::leaf`] or a param.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a named parameter, summed over every use in the graph.
    pub fn param(&self, name: &str) -> Option<Vec<T>> {
        let ids = self.params.get(name)?;
        let mut total: Option<Vec<T>> = None;
        for &id in ids {
            if let Some(g) = &self.grads[id] {
                match &mut total {
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    ensure!(a == b, "{op}: shape mismatch {a:?} vs {b:?}");
    Ok(())
}

fn dims2(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    ensure!(shape.len() == 2, "{op}: expected a matrix, got shape {shape:?}");
    Ok((shape[0], shape[1]))
}

fn dims4(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    ensure!(shape.len() == 4, "{op}: expected [B,C,H,W], got shape {shape:?}");
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as an input; it is differentiable iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        ensure!(numel(shape) == data.len(), "constant: shape {shape:?} vs {} values", data.len());
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(store.name(id).to_string()), t.requires_grad())
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), name)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(x), "add_bias")?;
        ensure!(self.shape(b) == [n], "add_bias: bias shape {:?} for {n} columns", self.shape(b));
        let bias = self.value(b);
        let value = self.value(x).chunks(n).flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c)).collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), self.rg(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), value, Op::AddScalar(x), self.rg(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        ensure!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), value, op, self.rg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    /// `max(x, slope * x)` for `slope` in `[0, 1)`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::of(gelu(v.to_f64_lossy())), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    fn row_softmax(&self, x: Var, name: &str, log: bool) -> Result<Vec<T>> {
        let (_, n) = dims2(self.shape(x), name)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
            let denom: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
            let log_denom = denom.ln();
            out.extend(row.iter().map(|v| {
                let z = v.to_f64_lossy() - max;
                T::of(if log { z - log_denom } else { z.exp() / denom })
            }));
        }
        Ok(out)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.row_softmax(x, "softmax", false)?;
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax(x), self.rg(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.row_softmax(x, "log_softmax", true)?;
        Ok(self.push(self.shape(x).to_vec(), value, Op::LogSoftmax(x), self.rg(x)))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "layer_norm")?;
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for row in self.value(x).chunks(n) {
            let mean = sum64(row) / n as f64;
            let var = row.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::of(r));
            xhat.extend(row.iter().map(|v| T::of((v.to_f64_lossy() - mean) * r)));
        }
        let value = xhat.clone();
        Ok(self.push(vec![m, n], value, Op::LayerNorm { x, xhat, rstd }, self.rg(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum64(self.value(x));
        self.push(vec![], vec![T::of(s)], Op::Sum(x), self.rg(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = sum64(v) / v.len() as f64;
        self.push(vec![], vec![T::of(s)], Op::Mean(x), self.rg(x))
    }

    /// Embedding lookup: rows of `table[V,n]` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, n) = dims2(self.shape(table), "gather_rows")?;
        let t = self.value(table);
        let mut value = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            ensure!(i < rows, "gather_rows: index {i} out of range for {rows} rows");
            value.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let op = Op::Gather { table, idx: idx.to_vec() };
        Ok(self.push(vec![idx.len(), n], value, op, self.rg(table)))
    }

    /// One element per row: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "pick")?;
        ensure!(idx.len() == m, "pick: {} indices for {m} rows", idx.len());
        let xv = self.value(x);
        let mut value = Vec::with_capacity(m);
        for (r, &c) in idx.iter().enumerate() {
            ensure!(c < n, "pick: column {c} out of range for {n} columns");
            value.push(xv[r * n + c]);
        }
        Ok(self.push(vec![m], value, Op::Pick { x, idx: idx.to_vec() }, self.rg(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        ensure!(numel(shape) == self.value(x).len(), "reshape: {:?} -> {shape:?}", self.shape(x));
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), self.rg(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "slice_cols")?;
        ensure!(start + len <= n, "slice_cols: [{start}, {}) exceeds {n} columns", start + len);
        let value = self.value(x).chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.push(vec![m, len], value, Op::SliceCols { x, start }, self.rg(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols: no inputs");
        let m = dims2(self.shape(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_cols")?;
            ensure!(pm == m, "concat_cols: row counts {pm} and {m} differ");
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row concatenation inside each of `groups` equal row blocks: every
    /// input is `[groups*r_i, n]`, the output is `[groups*sum(r_i), n]`
    /// with group `g` holding the `g`-th block of each input in order.
    pub fn concat_rows(&mut self, parts: &[Var], groups: usize) -> Result<Var> {
        ensure!(!parts.is_empty() && groups > 0, "concat_rows: no inputs");
        let n = dims2(self.shape(parts[0]), "concat_rows")?.1;
        let mut rows = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_rows")?;
            ensure!(pn == n && pm % groups == 0, "concat_rows: part shape {:?} incompatible", self.shape(p));
            rows.push(pm / groups);
        }
        let total: usize = rows.iter().sum();
        let mut value = Vec::with_capacity(groups * total * n);
        for g in 0..groups {
            for (&p, &r) in parts.iter().zip(&rows) {
                value.extend_from_slice(&self.value(p)[g * r * n..(g + 1) * r * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![groups * total, n], value, Op::ConcatRows { parts: parts.to_vec(), groups }, rg))
    }

    /// Each row of `x[m,n]` repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "repeat_rows")?;
        let mut value = Vec::with_capacity(m * times * n);
        for row in self.value(x).chunks(n) {
            for _ in 0..times {
                value.extend_from_slice(row);
            }
        }
        Ok(self.push(vec![m * times, n], value, Op::RepeatRows { x, times }, self.rg(x)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = dims4(self.shape(x), "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(self.shape(w), "conv2d")?;
        ensure!(wcin == cin && kh == kw, "conv2d: kernel {:?} for {cin} input channels", self.shape(w));
        ensure!(self.shape(b) == [cout], "conv2d: bias shape {:?}", self.shape(b));
        ensure!(stride >= 1 && h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let geom = ConvGeom { in_ch: cin, out_ch: cout, height: h, width: wd, kernel: kh, stride, pad };
        let value = kernels::conv2d(self.value(x), self.value(w), self.value(b), batch, &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![batch, cout, geom.out_h(), geom.out_w()], value, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "upsample2x")?;
        let xv = self.value(x);
        let mut value = vec![T::zero(); b * c * h * w * 4];
        for plane in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    value[(plane * 2 * h + y) * 2 * w + xx] = xv[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![b, c, 2 * h, 2 * w], value, Op::Upsample2x(x), self.rg(x)))
    }

    /// Non-overlapping `k x k` average pooling of `[B,C,H,W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "avg_pool")?;
        ensure!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool: window {k} does not tile {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x);
        let inv = 1.0 / (k * k) as f64;
        let mut value = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0f64;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += xv[(plane * h + oy * k + dy) * w + ox * k + dx].to_f64_lossy();
                        }
                    }
                    value.push(T::of(s * inv));
                }
            }
        }
        Ok(self.push(vec![b, c, oh, ow], value, Op::AvgPool { x, k }, self.rg(x)))
    }

    /// `[B*h*w, d]` token rows (batch-major, then raster order) to `[B,d,h,w]`.
    pub fn rows_to_nchw(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let (m, d) = dims2(self.shape(x), "rows_to_nchw")?;
        ensure!(m == batch * h * w, "rows_to_nchw: {m} rows for batch {batch} of {h}x{w}");
        let xv = self.value(x);
        let hw = h * w;
        let mut value = vec![T::zero(); m * d];
        for b in 0..batch {
            for p in 0..hw {
                for c in 0..d {
                    value[(b * d + c) * hw + p] = xv[(b * hw + p) * d + c];
                }
            }
        }
        Ok(self.push(vec![batch, d, h, w], value, Op::RowsToNchw { x, batch, h, w }, self.rg(x)))
    }

    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let (batch, d, h, w) = dims4(self.shape(x), "nchw_to_rows")?;
        let xv = self.value(x);
        let hw = h * w;
        let mut value = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..d {
                for p in 0..hw {
                    value[(b * hw + p) * d + c] = xv[(b * d + c) * hw + p];
                }
            }
        }
        Ok(self.push(vec![batch * hw, d], value, Op::NchwToRows { x, batch, h, w }, self.rg(x)))
    }

    /// Multi-head scaled dot-product attention. `q` is `[batch*q_len, width]`,
    /// `k` and `v` are `[batch*kv_len, width]`; heads split the width.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qm, width) = dims2(self.shape(q), "attention")?;
        let (km, kw) = dims2(self.shape(k), "attention")?;
        same_shape(self.shape(k), self.shape(v), "attention")?;
        ensure!(kw == width, "attention: key width {kw} != query width {width}");
        ensure!(heads > 0 && width % heads == 0, "attention: width {width} not divisible by {heads} heads");
        ensure!(batch > 0 && qm % batch == 0 && km % batch == 0, "attention: rows not divisible by batch {batch}");
        let geom = AttnGeom { batch, q_len: qm / batch, kv_len: km / batch, width, heads };
        let (value, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), &geom);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(vec![qm, width], value, Op::Attention { q, k, v, geom, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", n.shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                params.entry(name.clone()).or_default().push(i);
            }
        }
        if !n.requires_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Runs `f` on the gradient buffer of `v` if `v` needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        let add_into = |buf: &mut [T], src: &[T]| buf.iter_mut().zip(src).for_each(|(a, &b)| *a += b);

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| buf.iter_mut().zip(g).zip(bv).for_each(|((x, &gy), &o)| *x += gy * o));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).zip(av).for_each(|((x, &gy), &o)| *x += gy * o));
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (c, slot) in buf.iter_mut().enumerate() {
                        *slot += T::of(g.iter().skip(c).step_by(n).map(|v| v.to_f64_lossy()).sum());
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| kernels::matmul_nt_acc(g, bv, buf, m, n, k));
                acc(*b, &mut |buf| kernels::matmul_tn_acc(av, g, buf, m, k, n));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                acc(*x, &mut |buf| {
                    for ((a, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *a += if v > T::zero() { gy } else { *slope * gy };
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |buf| {
                    for ((a, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *a += gy * T::of(gelu_grad(v.to_f64_lossy()));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((a, &gy), &s) in buf.iter_mut().zip(g).zip(y) {
                        *a += gy * s * (T::one() - s);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |buf| {
                    for ((a, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *a += gy;
                        } else if v < T::zero() {
                            *a -= gy;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::of(2.0);
                acc(*x, &mut |buf| buf.iter_mut().zip(g).zip(xv).for_each(|((a, &gy), &v)| *a += two * v * gy));
            }
            Op::Softmax(x) => {
                let n = node.shape[1];
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
                        let dot = T::of(dot);
                        for ((a, &gy), &yy) in brow.iter_mut().zip(grow).zip(yrow) {
                            *a += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = node.shape[1];
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total = T::of(sum64(grow));
                        for ((a, &gy), &ly) in brow.iter_mut().zip(grow).zip(yrow) {
                            *a += gy - ly.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let n = node.shape[1];
                acc(*x, &mut |buf| {
                    for (((brow, grow), hrow), &r) in buf.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).zip(rstd) {
                        let mg = sum64(grow) / n as f64;
                        let mgh: f64 =
                            grow.iter().zip(hrow).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum::<f64>() / n as f64;
                        let (mg, mgh) = (T::of(mg), T::of(mgh));
                        for ((a, &gy), &h) in brow.iter_mut().zip(grow).zip(hrow) {
                            *a += r * (gy - mg - h * mgh);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / T::of(self.value(*x).len() as f64);
                acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += inv));
            }
            Op::Gather { table, idx } => {
                let n = self.shape(*table)[1];
                acc(*table, &mut |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Pick { x, idx } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (r, &c) in idx.iter().enumerate() {
                        buf[r * n + c] += g[r];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.shape[1];
                acc(*x, &mut |buf| {
                    for (brow, grow) in buf.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut brow[*start..*start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |buf| {
                        for (brow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(brow, &grow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts, groups } => {
                let n = node.shape[1];
                let rows: Vec<usize> = parts.iter().map(|&p| self.shape(p)[0] / groups).collect();
                let total: usize = rows.iter().sum();
                let mut off = 0;
                for (&p, &r) in parts.iter().zip(&rows) {
                    acc(p, &mut |buf| {
                        for gi in 0..*groups {
                            let src = &g[(gi * total + off) * n..(gi * total + off + r) * n];
                            add_into(&mut buf[gi * r * n..(gi + 1) * r * n], src);
                        }
                    });
                    off += r;
                }
            }
            Op::RepeatRows { x, times } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (r, brow) in buf.chunks_mut(n).enumerate() {
                        for t in 0..*times {
                            add_into(brow, &g[(r * times + t) * n..(r * times + t + 1) * n]);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); geom.out_ch]);
                kernels::conv2d_backward(xv, wv, g, *batch, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    acc(*x, &mut |buf| add_into(buf, &d));
                }
                if let Some(d) = dw {
                    acc(*w, &mut |buf| add_into(buf, &d));
                }
                if let Some(d) = db {
                    acc(*b, &mut |buf| add_into(buf, &d));
                }
            }
            Op::Upsample2x(x) => {
                let (h, w) = (self.shape(*x)[2], self.shape(*x)[3]);
                acc(*x, &mut |buf| {
                    for plane in 0..buf.len() / (h * w) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                buf[(plane * h + y / 2) * w + xx / 2] += g[(plane * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let (h, w) = (self.shape(*x)[2], self.shape(*x)[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::of(1.0 / (k * k) as f64);
                acc(*x, &mut |buf| {
                    for plane in 0..buf.len() / (h * w) {
                        for y in 0..h {
                            for xx in 0..w {
                                buf[(plane * h + y) * w + xx] += g[(plane * oh + y / k) * ow + xx / k] * inv;
                            }
                        }
                    }
                });
            }
            Op::RowsToNchw { x, batch, h, w } => {
                let d = node.shape[1];
                let hw = h * w;
                acc(*x, &mut |buf| {
                    for b in 0..*batch {
                        for p in 0..hw {
                            for c in 0..d {
                                buf[(b * hw + p) * d + c] += g[(b * d + c) * hw + p];
                            }
                        }
                    }
                });
            }
            Op::NchwToRows { x, batch, h, w } => {
                let d = node.shape[1];
                let hw = h * w;
                acc(*x, &mut |buf| {
                    for b in 0..*batch {
                        for c in 0..d {
                            for p in 0..hw {
                                buf[(b * d + c) * hw + p] += g[(b * hw + p) * d + c];
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                kernels::attention_backward(qv, kv, vv, probs, g, geom, &mut dq, &mut dk, &mut dv);
                acc(*q, &mut |buf| add_into(buf, &dq));
                acc(*k, &mut |buf| add_into(buf, &dk));
                acc(*v, &mut |buf| add_into(buf, &dv));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(g: &mut Graph<f64>, v: f64) -> Var {
        g.leaf(&Tensor::scalar(v).with_grad())
    }

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_grad() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let c = g.constant(&[], vec![7.0]).unwrap();
        let zero = g.scale(x, 0.0);
        let y = g.add(zero, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0]);
    }

    #[test]
    fn sum_of_two_inputs() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, -1.5);
        let y = scalar_leaf(&mut g, 4.25);
        let s = g.add(x, y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0]);
        assert_eq!(grads.wrt(y).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_grads_add_up() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let sa = g.sum(a);
        let bb = g.square(b);
        let sb = g.sum(bb);
        let loss = g.add(sa, sb).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dw [sum(w) + sum(w^2)] = 1 + 2w
        assert_eq!(grads.param("w").unwrap(), vec![3.0, 5.0]);

        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[6.0, 10.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[1], vec![2.0]).unwrap());
        store.set_trainable(false);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let y = g.square(w);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param("w").is_none());
    }

    #[test]
    fn layout_round_trip() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let x = g.constant(&[2 * 4, 3], data.clone()).unwrap();
        let n = g.rows_to_nchw(x, 2, 2, 2).unwrap();
        assert_eq!(g.shape(n), &[2, 3, 2, 2]);
        let back = g.nchw_to_rows(n).unwrap();
        assert_eq!(g.value(back), &data[..]);
    }

    #[test]
    fn grouped_row_concat_interleaves_by_batch() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[4, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let c = g.concat_rows(&[a, b], 2).unwrap();
        assert_eq!(g.value(c), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }
}
