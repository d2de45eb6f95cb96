//! Forward definitions and local gradient rules for every tape operation.

use super::{Node, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Lower clamp applied by [`Var::log_clamped`].
pub const LOG_EPS: f64 = 1e-7;

/// Additive score used to mask attention logits. Large enough that its
/// softmax weight underflows to exactly zero, small enough to stay finite.
pub const NEG_MASK: f64 = -1e9;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    LogClamped(usize),
    LogSigmoidClamped(usize),
    Gather {
        src: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    NarrowCols {
        src: usize,
        start: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2d {
        x: usize,
        k: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MatMul(a, b) | MatMulT(a, b) => vec![*a, *b],
            Scale(a, _) | Shift(a) | Transpose(a) | Reshape(a) | Sum(a) | Mean(a)
            | MeanRows(a) | SoftmaxRows(a) | LogSoftmaxRows(a) | Gelu(a) | Sigmoid(a)
            | LogClamped(a) | LogSigmoidClamped(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Gather { src, .. } | NarrowCols { src, .. } => vec![*src],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            AvgPool2d { x, .. } => vec![*x],
        }
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape(), a.data().iter().map(|&x| f(x)).collect())
}

fn row_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| dim_err!("{op}: expected a matrix, got {:?}", t.shape()))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'t> Var<'t> {
    fn binary(
        self,
        rhs: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape));
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(out, op))
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                same_shape("add", a, b)?;
                Ok(zip_map(a, b, |x, y| x + y))
            },
            Op::Add(self.id, rhs.id),
        )
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                same_shape("sub", a, b)?;
                Ok(zip_map(a, b, |x, y| x - y))
            },
            Op::Sub(self.id, rhs.id),
        )
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                same_shape("mul", a, b)?;
                Ok(zip_map(a, b, |x, y| x * y))
            },
            Op::Mul(self.id, rhs.id),
        )
    }

    /// Elementwise quotient.
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                same_shape("div", a, b)?;
                Ok(zip_map(a, b, |x, y| x / y))
            },
            Op::Div(self.id, rhs.id),
        )
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            |a, r| {
                let (_, n) = row_dims("add_row", a)?;
                if r.numel() != n {
                    return Err(dim_err!(
                        "add_row: row {:?} does not match {:?}",
                        r.shape(),
                        a.shape()
                    ));
                }
                let mut data = a.data().to_vec();
                for chunk in data.chunks_mut(n) {
                    for (x, &b) in chunk.iter_mut().zip(r.data()) {
                        *x += b;
                    }
                }
                Ok(Tensor::from_parts(a.shape(), data))
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies every row of an `m×n` matrix by a length-`n` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            |a, r| {
                let (_, n) = row_dims("mul_row", a)?;
                if r.numel() != n {
                    return Err(dim_err!(
                        "mul_row: row {:?} does not match {:?}",
                        r.shape(),
                        a.shape()
                    ));
                }
                let mut data = a.data().to_vec();
                for chunk in data.chunks_mut(n) {
                    for (x, &b) in chunk.iter_mut().zip(r.data()) {
                        *x *= b;
                    }
                }
                Ok(Tensor::from_parts(a.shape(), data))
            },
            Op::MulRow(self.id, row.id),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(map(a, |x| x * c)), Op::Scale(self.id, c))
    }

    /// Adds a constant to every element.
    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(map(a, |x| x + c)), Op::Shift(self.id))
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'t>> {
        self.scale(-1.0)?.add_scalar(c)
    }

    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                let (m, k) = row_dims("matmul", a)?;
                let (k2, n) = row_dims("matmul", b)?;
                if k != k2 {
                    return Err(dim_err!(
                        "matmul: inner dimensions of {:?} and {:?} differ",
                        a.shape(),
                        b.shape()
                    ));
                }
                let mut c = vec![0.0; m * n];
                gemm_nn(a.data(), b.data(), &mut c, m, k, n);
                Ok(Tensor::from_parts([m, n], c))
            },
            Op::MatMul(self.id, rhs.id),
        )
    }

    /// `self[m×k] · rhs[n×k]ᵀ` without materialising the transpose.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            |a, b| {
                let (m, k) = row_dims("matmul_t", a)?;
                let (n, k2) = row_dims("matmul_t", b)?;
                if k != k2 {
                    return Err(dim_err!(
                        "matmul_t: inner dimensions of {:?} and {:?}ᵀ differ",
                        a.shape(),
                        b.shape()
                    ));
                }
                let mut c = vec![0.0; m * n];
                gemm_nt(a.data(), b.data(), &mut c, m, k, n);
                Ok(Tensor::from_parts([m, n], c))
            },
            Op::MatMulT(self.id, rhs.id),
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (m, n) = row_dims("transpose", a)?;
                Ok(Tensor::from_parts([n, m], transpose(a.data(), m, n)))
            },
            Op::Transpose(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(|a| a.clone().reshape(shape.to_vec()), Op::Reshape(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(
            |a| Ok(Tensor::scalar(a.data().iter().sum())),
            Op::Sum(self.id),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                if a.numel() == 0 {
                    return Err(dim_err!("mean of an empty tensor"));
                }
                Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
            },
            Op::Mean(self.id),
        )
    }

    /// Mean over the rows of an `m×n` matrix, giving `1×n`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (m, n) = row_dims("mean_rows", a)?;
                let mut out = vec![0.0; n];
                for row in a.data().chunks(n) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Ok(Tensor::from_parts([1, n], out))
            },
            Op::MeanRows(self.id),
        )
    }

    /// Softmax along the last axis of a matrix (or over a vector).
    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let n = *a.shape().last().unwrap_or(&0);
                let mut out = vec![0.0; a.numel()];
                for (row, o) in a.data().chunks(n).zip(out.chunks_mut(n)) {
                    softmax_row(row, o);
                }
                Ok(Tensor::from_parts(a.shape(), out))
            },
            Op::SoftmaxRows(self.id),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let n = *a.shape().last().unwrap_or(&0);
                let mut out = vec![0.0; a.numel()];
                for (row, o) in a.data().chunks(n).zip(out.chunks_mut(n)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    for (o, &x) in o.iter_mut().zip(row) {
                        *o = x - lse;
                    }
                }
                Ok(Tensor::from_parts(a.shape(), out))
            },
            Op::LogSoftmaxRows(self.id),
        )
    }

    /// Row-wise layer normalisation with affine parameters of length `n`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let n = *x.shape().last().unwrap_or(&0);
            if n == 0 || g.numel() != n || b.numel() != n {
                return Err(dim_err!(
                    "layer_norm: input {:?} with gamma {:?} and beta {:?}",
                    x.shape(),
                    g.shape(),
                    b.shape()
                ));
            }
            let rows = x.numel() / n;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::from_parts(x.shape(), out), xhat, inv_std)
        };
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(map(a, gelu)), Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(map(a, sigmoid)), Op::Sigmoid(self.id))
    }

    /// `ln(clamp(x, LOG_EPS, 1))`
    pub fn log_clamped(self) -> Result<Var<'t>> {
        self.unary(
            |a| Ok(map(a, |x| x.clamp(LOG_EPS, 1.0).ln())),
            Op::LogClamped(self.id),
        )
    }

    /// `log(max(sigmoid(x), LOG_EPS))` evaluated without forming `sigmoid(x)`,
    /// so saturated logits keep full precision.
    pub fn log_sigmoid_clamped(self) -> Result<Var<'t>> {
        self.unary(
            |a| Ok(map(a, |x| log_sigmoid(x).max(LOG_EPS.ln()))),
            Op::LogSigmoidClamped(self.id),
        )
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    ///
    /// Covers patch extraction, embedding lookup and element picking.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let op_index = index.clone();
        let out = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            if shape.iter().product::<usize>() != index.len() {
                return Err(dim_err!(
                    "gather: {} indices cannot fill {:?}",
                    index.len(),
                    shape
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= src.numel()) {
                return Err(dim_err!(
                    "gather: index {bad} out of range for {:?}",
                    src.shape()
                ));
            }
            let data = index.iter().map(|&i| src.data()[i]).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(
            out,
            Op::Gather {
                src: self.id,
                index: op_index,
            },
        ))
    }

    /// Rows `ids` of a `V×d` table.
    pub fn embed(self, ids: &[usize]) -> Result<Var<'t>> {
        let (v, d) = row_dims("embed", &self.value())?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(dim_err!("embed: id {bad} out of range for {v} rows"));
        }
        let index = ids
            .iter()
            .flat_map(|&i| (0..d).map(move |j| i * d + j))
            .collect();
        self.gather(index, &[ids.len(), d])
    }

    /// Concatenates along the first axis; trailing dimensions must agree.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_rows of nothing"))?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let tail = nodes[first.id].value.shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.id].value;
                if t.shape()[1..] != tail[..] {
                    return Err(dim_err!(
                        "concat_rows: {:?} does not stack with trailing {:?}",
                        t.shape(),
                        tail
                    ));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            Tensor::from_parts(shape, data)
        };
        Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let (m, _) = row_dims("concat_cols", &nodes[first.id].value)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = row_dims("concat_cols", &nodes[p.id].value)?;
                if r != m {
                    return Err(dim_err!("concat_cols: row counts {m} and {r} differ"));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; m * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..m {
                    data[r * total + off..r * total + off + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
            Tensor::from_parts([m, total], data)
        };
        Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (m, n) = row_dims("narrow_cols", a)?;
                if start + len > n {
                    return Err(dim_err!(
                        "narrow_cols: {start}..{} exceeds {n} columns",
                        start + len
                    ));
                }
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&a.data()[r * n + start..r * n + start + len]);
                }
                Ok(Tensor::from_parts([m, len], data))
            },
            Op::NarrowCols {
                src: self.id,
                start,
            },
        )
    }

    /// 2-D cross-correlation of a `C×H×W` input with a `C'×C×kh×kw` kernel
    /// and optional per-output-channel bias, zero padded.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (out, geom, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let k = &nodes[kernel.id].value;
            let geom = conv_geom(x.shape(), k.shape(), stride, pad)?;
            if let Some(b) = bias {
                if nodes[b.id].value.numel() != geom.co {
                    return Err(dim_err!(
                        "conv2d: bias {:?} for {} output channels",
                        nodes[b.id].value.shape(),
                        geom.co
                    ));
                }
            }
            let cols = im2col(x.data(), &geom);
            let mut out = vec![0.0; geom.co * geom.out_len()];
            gemm_nn(
                k.data(),
                &cols,
                &mut out,
                geom.co,
                geom.patch_len(),
                geom.out_len(),
            );
            if let Some(b) = bias {
                let bd = nodes[b.id].value.data();
                for (ch, chunk) in out.chunks_mut(geom.out_len()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[ch]);
                }
            }
            (
                Tensor::from_parts([geom.co, geom.ho, geom.wo], out),
                geom,
                cols,
            )
        };
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                geom,
                cols,
            },
        ))
    }

    /// Non-overlapping `k×k` average pooling of a `C×H×W` tensor.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let [c, h, w] = a.shape() else {
                    return Err(dim_err!("avg_pool2d: expected C×H×W, got {:?}", a.shape()));
                };
                let (c, h, w) = (*c, *h, *w);
                if k == 0 || h % k != 0 || w % k != 0 {
                    return Err(dim_err!("avg_pool2d: {h}×{w} not divisible by {k}"));
                }
                let (ho, wo) = (h / k, w / k);
                let mut out = vec![0.0; c * ho * wo];
                let norm = 1.0 / (k * k) as f64;
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            out[ch * ho * wo + (i / k) * wo + j / k] +=
                                a.data()[ch * h * w + i * w + j] * norm;
                        }
                    }
                }
                Ok(Tensor::from_parts([c, ho, wo], out))
            },
            Op::AvgPool2d { x: self.id, k },
        )
    }

    /// Appends x and y coordinate planes, each spanning `[-1, 1]`, then
    /// runs [`conv2d`](Self::conv2d). A length-1 axis gets coordinate −1.
    pub fn coordconv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(dim_err!("coordconv2d: expected C×H×W, got {shape:?}"));
        };
        let kc = kernel.shape().get(1).copied();
        if kc != Some(c + 2) {
            return Err(dim_err!(
                "coordconv2d: kernel {:?} needs {} input channels",
                kernel.shape(),
                c + 2
            ));
        }
        let coords = self.tape.constant(coord_planes(h, w));
        let x = Var::concat_rows(&[self.reshape(&[c, h * w])?, coords])?;
        x.reshape(&[c + 2, h, w])?.conv2d(kernel, bias, stride, pad)
    }
}

/// `2×(H·W)` rows: x-coordinate plane then y-coordinate plane.
pub(crate) fn coord_planes(h: usize, w: usize) -> Tensor {
    let axis = |n: usize, i: usize| {
        if n == 1 {
            -1.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        data.extend((0..w).map(|j| axis(w, j)));
    }
    for i in 0..h {
        data.extend(std::iter::repeat_n(axis(h, i), w));
    }
    Tensor::from_parts([2, h * w], data)
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let [c, h, w] = x else {
        return Err(dim_err!("conv2d: input must be C×H×W, got {x:?}"));
    };
    let [co, ci, kh, kw] = k else {
        return Err(dim_err!("conv2d: kernel must be C'×C×kh×kw, got {k:?}"));
    };
    if ci != c {
        return Err(dim_err!(
            "conv2d: kernel {k:?} expects {ci} input channels, input {x:?} has {c}"
        ));
    }
    if stride == 0 {
        return Err(dim_err!("conv2d: stride must be at least 1"));
    }
    if *kh > h + 2 * pad || *kw > w + 2 * pad {
        return Err(dim_err!(
            "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        ));
    }
    Ok(ConvGeom {
        c: *c,
        h: *h,
        w: *w,
        co: *co,
        kh: *kh,
        kw: *kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        if j < 0 || j >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.wo + oj] = x[ch * g.h * g.w + i as usize * g.w + j as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.out_len();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        if j < 0 || j >= g.w as isize {
                            continue;
                        }
                        dx[ch * g.h * g.w + i as usize * g.w + j as usize] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
}

/// Adds `f(buffer)` into the gradient slot of `id` if that node needs it.
fn acc(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

pub(crate) fn backward_node(
    nodes: &[Node],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |d| {
                for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                    *x += gy * bb;
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((x, gy), aa) in d.iter_mut().zip(g).zip(av) {
                    *x += gy * aa;
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |d| {
                for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                    *x += gy / bb;
                }
            });
            acc(nodes, grads, *b, |d| {
                for (((x, gy), aa), bb) in d.iter_mut().zip(g).zip(av).zip(bv) {
                    *x -= gy * aa / (bb * bb);
                }
            });
        }
        Op::AddRow(a, r) => {
            let n = val(*r).numel();
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *r, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::MulRow(a, r) => {
            let n = val(*r).numel();
            let (av, rv) = (val(*a).data(), val(*r).data());
            acc(nodes, grads, *a, |d| {
                for (dr, gr) in d.chunks_mut(n).zip(g.chunks(n)) {
                    for ((x, gy), rr) in dr.iter_mut().zip(gr).zip(rv) {
                        *x += gy * rr;
                    }
                }
            });
            acc(nodes, grads, *r, |d| {
                for (ar, gr) in av.chunks(n).zip(g.chunks(n)) {
                    for ((x, gy), aa) in d.iter_mut().zip(gr).zip(ar) {
                        *x += gy * aa;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            acc(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            });
        }
        Op::Shift(a) | Op::Reshape(a) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matrix");
            let n = val(*b).shape()[1];
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |d| gemm_nt(g, bv, d, m, n, k));
            acc(nodes, grads, *b, |d| gemm_tn(av, g, d, k, m, n));
        }
        Op::MatMulT(a, b) => {
            let (m, k) = val(*a).dims2().expect("matrix");
            let n = val(*b).shape()[0];
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |d| gemm_nn(g, bv, d, m, n, k));
            acc(nodes, grads, *b, |d| gemm_tn(g, av, d, n, m, k));
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2().expect("matrix");
            // g is n×m
            let gt = transpose(g, n, m);
            acc(nodes, grads, *a, |d| add_into(d, &gt));
        }
        Op::Sum(a) => {
            acc(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let s = g[0] / val(*a).numel() as f64;
            acc(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
        }
        Op::MeanRows(a) => {
            let (m, n) = val(*a).dims2().expect("matrix");
            acc(nodes, grads, *a, |d| {
                for row in d.chunks_mut(n) {
                    for (x, gy) in row.iter_mut().zip(g) {
                        *x += gy / m as f64;
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let y = nodes[id].value.data();
            let n = *nodes[id].value.shape().last().unwrap();
            acc(nodes, grads, *a, |d| {
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    for ((x, yy), gy) in dr.iter_mut().zip(yr).zip(gr) {
                        *x += yy * (gy - s);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let y = nodes[id].value.data();
            let n = *nodes[id].value.shape().last().unwrap();
            acc(nodes, grads, *a, |d| {
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((x, yy), gy) in dr.iter_mut().zip(yr).zip(gr) {
                        *x += gy - yy.exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma).data();
            let n = gv.len();
            acc(nodes, grads, *gamma, |d| {
                for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                    for ((x, h), gy) in d.iter_mut().zip(hr).zip(gr) {
                        *x += gy * h;
                    }
                }
            });
            acc(nodes, grads, *beta, |d| {
                for gr in g.chunks(n) {
                    add_into(d, gr);
                }
            });
            acc(nodes, grads, *x, |d| {
                let mut dh = vec![0.0; n];
                for (r, ((dr, hr), gr)) in d
                    .chunks_mut(n)
                    .zip(xhat.chunks(n))
                    .zip(g.chunks(n))
                    .enumerate()
                {
                    for j in 0..n {
                        dh[j] = gr[j] * gv[j];
                    }
                    let s1: f64 = dh.iter().sum();
                    let s2 = dot(&dh, hr);
                    let k = inv_std[r] / n as f64;
                    for j in 0..n {
                        dr[j] += k * (n as f64 * dh[j] - s1 - hr[j] * s2);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a).data();
            acc(nodes, grads, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(av) {
                    *x += gy * gelu_grad(*v);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = nodes[id].value.data();
            acc(nodes, grads, *a, |d| {
                for ((x, gy), yy) in d.iter_mut().zip(g).zip(y) {
                    *x += gy * yy * (1.0 - yy);
                }
            });
        }
        Op::LogSigmoidClamped(a) => {
            let av = val(*a).data();
            acc(nodes, grads, *a, |d| {
                for ((x, gy), &v) in d.iter_mut().zip(g).zip(av) {
                    if log_sigmoid(v) > LOG_EPS.ln() {
                        *x += gy * sigmoid(-v);
                    }
                }
            });
        }
        Op::LogClamped(a) => {
            let av = val(*a).data();
            acc(nodes, grads, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(av) {
                    if *v > LOG_EPS && *v < 1.0 {
                        *x += gy / v;
                    }
                }
            });
        }
        Op::Gather { src, index } => {
            acc(nodes, grads, *src, |d| {
                for (gy, &i) in g.iter().zip(index) {
                    d[i] += gy;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).numel();
                acc(nodes, grads, p, |d| add_into(d, &g[off..off + len]));
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.shape()[1];
            let mut off = 0;
            for &p in parts {
                let (m, w) = val(p).dims2().expect("matrix");
                acc(nodes, grads, p, |d| {
                    for r in 0..m {
                        add_into(
                            &mut d[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                });
                off += w;
            }
        }
        Op::NarrowCols { src, start } => {
            let n = val(*src).shape()[1];
            let len = nodes[id].value.shape()[1];
            acc(nodes, grads, *src, |d| {
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut d[r * n + start..r * n + start + len], gr);
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let n = geom.out_len();
            let pl = geom.patch_len();
            acc(nodes, grads, *w, |d| gemm_nt(g, cols, d, geom.co, n, pl));
            if let Some(b) = b {
                acc(nodes, grads, *b, |d| {
                    for (ch, gr) in g.chunks(n).enumerate() {
                        d[ch] += gr.iter().sum::<f64>();
                    }
                });
            }
            if nodes[*x].needs_grad {
                let mut dcols = vec![0.0; pl * n];
                gemm_tn(val(*w).data(), g, &mut dcols, pl, geom.co, n);
                acc(nodes, grads, *x, |d| col2im_acc(&dcols, geom, d));
            }
        }
        Op::AvgPool2d { x, k } => {
            let [c, h, w] = val(*x).shape() else {
                unreachable!("checked in forward")
            };
            let (c, h, w, k) = (*c, *h, *w, *k);
            let (ho, wo) = (h / k, w / k);
            let norm = 1.0 / (k * k) as f64;
            acc(nodes, grads, *x, |d| {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            d[ch * h * w + i * w + j] += g[ch * ho * wo + (i / k) * wo + j / k] * norm;
                        }
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
