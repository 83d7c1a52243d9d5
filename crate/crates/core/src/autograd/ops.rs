use super::kernels::{self, ConvGeom};
use super::{Graph, Node, Var, CLAMP_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    Exp,
    /// Natural log with inputs in `[0, CLAMP_FLOOR)` raised to the floor.
    Log,
    Sigmoid,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LogSumExp {
        a: Var,
        mask: Option<Vec<bool>>,
    },
    Reduce {
        kind: ReduceOp,
        a: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAll {
        a: Var,
        mean: bool,
    },
    Reshape {
        a: Var,
    },
    Im2Col {
        a: Var,
        geom: ConvGeom,
    },
    RowsToNchw {
        a: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        /// Statistics came from this batch (train mode) rather than constants.
        batch_stats: bool,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    ArcMargin {
        a: Var,
        labels: Vec<usize>,
        slopes: Vec<f64>,
        scale: f64,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Binary { a, b, .. } | ConcatLast { a, b } => vec![*a, *b],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Transpose { a }
            | Unary { a, .. }
            | Softmax { a }
            | LogSoftmax { a }
            | LogSumExp { a, .. }
            | Reduce { a, .. }
            | SumAll { a, .. }
            | Reshape { a }
            | Im2Col { a, .. }
            | RowsToNchw { a, .. }
            | MaxPool { a, .. }
            | Pick { a, .. }
            | GatherRows { a, .. }
            | SliceRows { a, .. }
            | NormalizeRows { a, .. }
            | ArcMargin { a, .. } => vec![*a],
        }
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what} expects a matrix, got shape {s:?}")),
    }
}

/// Splits a shape into (rows, last-axis extent) for row-wise ops.
fn rows_last(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&c) => Ok((t.len() / c, c)),
        None => dim_err(format!("{what} needs at least one axis")),
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
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul lhs")?;
        let (k2, n) = matrix_dims(tb, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents disagree: {:?} · {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix_dims(t, "transpose")?;
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { a }))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        kernels::broadcast_for_each(ta.shape(), tb.shape(), &shape, |o, i, j| {
            out[o] = match kind {
                BinaryOp::Add => da[i] + db[j],
                BinaryOp::Sub => da[i] - db[j],
                BinaryOp::Mul => da[i] * db[j],
            };
        });
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == UnaryOp::Log {
            if let Some(bad) = t.data().iter().find(|x| x.is_nan() || **x < 0.0) {
                return Err(Error::NumericDomain(format!("log of {bad}")));
            }
        }
        let f = |x: f64| match kind {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.max(CLAMP_FLOOR).ln(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Neg => -x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let out = t.map(f);
        Ok(self.push(out, Op::Unary { kind, a }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), a)
            .expect("add_scalar is total")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp(lo, hi), a)
            .expect("clamp is total")
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = rows_last(t, "softmax")?;
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(c).take(rows) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = rows_last(t, "log_softmax")?;
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(c) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { a }))
    }

    /// Row-wise log-sum-exp of a `[B×c]` matrix, optionally restricted to
    /// entries where `mask` is true. Every row must keep at least one entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = matrix_dims(t, "logsumexp_rows")?;
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return dim_err(format!("mask has {} entries for {:?}", m.len(), t.shape()));
            }
        }
        let keep = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let d = t.data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let idx = (r * c..(r + 1) * c).filter(|&i| keep(i));
            let m = idx.clone().map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return dim_err(format!("logsumexp row {r} has no unmasked entries"));
            }
            out.push(m + idx.map(|i| (d[i] - m).exp()).sum::<f64>().ln());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::LogSumExp { a, mask },
        ))
    }

    /// Reduces along `axis`, removing it from the shape. Max routes its
    /// gradient to the first maximal index.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * extent + k) * inner + i];
                let slot = o * inner + i;
                out[slot] = match kind {
                    ReduceOp::Sum => (0..extent).map(at).sum(),
                    ReduceOp::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceOp::Max => {
                        let mut best = 0;
                        for k in 1..extent {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Reduce {
                kind,
                a,
                outer,
                extent,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: false })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: true })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Unfolds `[B×C×H×W]` into patch rows `[B·OH·OW × C·k·k]`.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let t = self.value(a);
        let geom = ConvGeom::new(t.shape(), kernel, stride, pad)?;
        let cols = kernels::im2col(t.data(), &geom);
        Ok(self.push(
            Tensor::from_parts(vec![geom.patches(), geom.patch_len()], cols),
            Op::Im2Col { a, geom },
        ))
    }

    /// Rearranges `[B·H·W × C]` rows back into `[B×C×H×W]`.
    pub fn rows_to_nchw(&mut self, a: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, channels) = matrix_dims(t, "rows_to_nchw")?;
        let spatial = h * w;
        if rows != batch * spatial {
            return dim_err(format!(
                "rows_to_nchw: {rows} rows cannot form batch {batch} of {h}×{w}"
            ));
        }
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        for b in 0..batch {
            for s in 0..spatial {
                let row = &d[(b * spatial + s) * channels..(b * spatial + s + 1) * channels];
                for (c, &v) in row.iter().enumerate() {
                    out[(b * channels + c) * spatial + s] = v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, channels, h, w], out),
            Op::RowsToNchw {
                a,
                batch,
                channels,
                spatial,
            },
        ))
    }

    /// Non-overlapping `size×size` max pooling over `[B×C×H×W]`.
    pub fn max_pool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        let t = self.value(a);
        let [b, c, h, w] = *t.shape() else {
            return dim_err(format!("max_pool2d expects [B×C×H×W], got {:?}", t.shape()));
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return dim_err(format!("pool size {size} does not divide {h}×{w}"));
        }
        let (oh, ow) = (h / size, w / size);
        let d = t.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = base + (oy * size + ky) * w + ox * size + kx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::MaxPool { a, argmax },
        ))
    }

    /// Batch normalization of `[B×C×…]` over every axis but the channel one.
    ///
    /// With `stats = None` the batch's own biased statistics are used and
    /// returned; otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.len() < 2 {
            return dim_err(format!("batch_norm expects [B×C×…], got {shape:?}"));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, v) in [("scale", gamma), ("shift", beta)] {
            if self.value(v).shape() != [channels] {
                return dim_err(format!(
                    "batch_norm {name} has shape {:?}, expected [{channels}]",
                    self.value(v).shape()
                ));
            }
        }
        let d = t.data();
        let count = (batch * inner) as f64;
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return dim_err(format!(
                        "batch_norm statistics have {} / {} channels, expected {channels}",
                        m.len(),
                        v.len()
                    ));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        mean[c] += d[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        var[c] += d[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (d[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let shape = shape.to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                batch_stats: stats.is_none(),
            },
        );
        Ok((v, mean, var))
    }

    /// Selects `a[r, idx[r]]` from each row of a matrix.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = matrix_dims(t, "pick")?;
        if idx.len() != rows {
            return dim_err(format!("pick: {} indices for {rows} rows", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return dim_err(format!("pick index {bad} out of range for {c} columns"));
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * c + i])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row gather: `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a).select(idx)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Concatenates along the last axis; leading extents must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = rows_last(ta, "concat")?;
        let (rb, cb) = rows_last(tb, "concat")?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] || ra != rb {
            return dim_err(format!("cannot concatenate {sa:?} and {sb:?}"));
        }
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ra {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast { a, b }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = matrix_dims(t, "slice_rows")?;
        if start >= end || end > rows {
            return dim_err(format!("row range {start}..{end} invalid for {rows} rows"));
        }
        let out = t.data()[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, c], out),
            Op::SliceRows { a, start },
        ))
    }

    /// L2-normalizes each row (last axis).
    ///
    /// In strict mode a zero row is a normalization error; otherwise the
    /// norm is floored at [`CLAMP_FLOOR`] and a zero row maps to zero.
    pub fn normalize_rows(&mut self, a: Var, strict: bool) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = rows_last(t, "normalize_rows")?;
        let d = t.data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if strict && n == 0.0 {
                return Err(Error::Normalization(format!("row {r} has zero norm")));
            }
            let n = n.max(CLAMP_FLOOR);
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { a, norms },
        ))
    }

    /// Additive angular margin on cosine logits: the label entry of each row
    /// becomes `scale·cos(θ + margin)` (with the usual linear fallback once
    /// θ + margin would pass π), all other entries `scale·cos θ`.
    pub fn arc_margin(&mut self, a: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = matrix_dims(t, "arc_margin")?;
        if labels.len() != rows {
            return dim_err(format!(
                "arc_margin: {} labels for {rows} rows",
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return dim_err(format!("label {bad} out of range for {c} classes"));
        }
        let mut out: Vec<f64> = t.data().iter().map(|v| v * scale).collect();
        let mut slopes = vec![1.0; rows];
        if margin != 0.0 {
            let (cos_m, sin_m) = (margin.cos(), margin.sin());
            let threshold = (std::f64::consts::PI - margin).cos();
            for (r, &l) in labels.iter().enumerate() {
                let cv = t.data()[r * c + l];
                let (phi, slope) = if cv > threshold {
                    let sin_t = (1.0 - cv * cv).max(0.0).sqrt();
                    (
                        cv * cos_m - sin_t * sin_m,
                        cos_m + sin_m * cv / sin_t.max(1e-6),
                    )
                } else {
                    (cv - margin * sin_m, 1.0)
                };
                out[r * c + l] = scale * phi;
                slopes[r] = slope;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ArcMargin {
                a,
                labels: labels.to_vec(),
                slopes,
                scale,
            },
        ))
    }
}

fn slot<'a>(g: &Graph, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &g.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(crate) fn backward_node(g: &Graph, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &g.nodes[v.0].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if let Some(da) = slot(g, grads, *a) {
                // dA = dC · Bᵀ
                kernels::gemm(m, n, k, dy, n, 1, tb.data(), 1, n, da, true);
            }
            if let Some(db) = slot(g, grads, *b) {
                // dB = Aᵀ · dC
                kernels::gemm(k, m, n, ta.data(), 1, k, dy, n, 1, db, true);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(da) = slot(g, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += dy[j * r + i];
                    }
                }
            }
        }
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let out_shape = node.value.shape();
            if let Some(da) = slot(g, grads, *a) {
                let db_vals = tb.data();
                kernels::broadcast_for_each(ta.shape(), tb.shape(), out_shape, |o, i, j| {
                    da[i] += match kind {
                        BinaryOp::Add | BinaryOp::Sub => dy[o],
                        BinaryOp::Mul => dy[o] * db_vals[j],
                    };
                });
            }
            if let Some(db) = slot(g, grads, *b) {
                let da_vals = ta.data();
                kernels::broadcast_for_each(ta.shape(), tb.shape(), out_shape, |o, i, j| {
                    db[j] += match kind {
                        BinaryOp::Add => dy[o],
                        BinaryOp::Sub => -dy[o],
                        BinaryOp::Mul => dy[o] * da_vals[i],
                    };
                });
            }
        }
        Op::Unary { kind, a } => {
            let x = val(*a).data();
            if let Some(da) = slot(g, grads, *a) {
                for i in 0..da.len() {
                    da[i] += dy[i]
                        * match kind {
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => {
                                if x[i] >= CLAMP_FLOOR {
                                    1.0 / x[i]
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Scale(c) => *c,
                            UnaryOp::AddScalar(_) => 1.0,
                            UnaryOp::Clamp(lo, hi) => {
                                if x[i] >= *lo && x[i] <= *hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::Softmax { a } => {
            let c = *node.value.shape().last().unwrap();
            if let Some(da) = slot(g, grads, *a) {
                for ((yr, dyr), dar) in y.chunks(c).zip(dy.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(dyr).map(|(p, q)| p * q).sum();
                    for i in 0..c {
                        dar[i] += yr[i] * (dyr[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            let c = *node.value.shape().last().unwrap();
            if let Some(da) = slot(g, grads, *a) {
                for ((yr, dyr), dar) in y.chunks(c).zip(dy.chunks(c)).zip(da.chunks_mut(c)) {
                    let s: f64 = dyr.iter().sum();
                    for i in 0..c {
                        dar[i] += dyr[i] - yr[i].exp() * s;
                    }
                }
            }
        }
        Op::LogSumExp { a, mask } => {
            let x = val(*a).data();
            let c = val(*a).shape()[1];
            if let Some(da) = slot(g, grads, *a) {
                for (r, &lse) in y.iter().enumerate() {
                    for i in r * c..(r + 1) * c {
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            da[i] += dy[r] * (x[i] - lse).exp();
                        }
                    }
                }
            }
        }
        Op::Reduce {
            kind,
            a,
            outer,
            extent,
            inner,
            argmax,
        } => {
            if let Some(da) = slot(g, grads, *a) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let s = o * inner + i;
                        match kind {
                            ReduceOp::Sum | ReduceOp::Mean => {
                                let w = if *kind == ReduceOp::Mean {
                                    dy[s] / *extent as f64
                                } else {
                                    dy[s]
                                };
                                for k in 0..*extent {
                                    da[(o * extent + k) * inner + i] += w;
                                }
                            }
                            ReduceOp::Max => da[(o * extent + argmax[s]) * inner + i] += dy[s],
                        }
                    }
                }
            }
        }
        Op::SumAll { a, mean } => {
            if let Some(da) = slot(g, grads, *a) {
                let w = if *mean {
                    dy[0] / da.len() as f64
                } else {
                    dy[0]
                };
                da.iter_mut().for_each(|v| *v += w);
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = slot(g, grads, *a) {
                da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
            }
        }
        Op::Im2Col { a, geom } => {
            if let Some(da) = slot(g, grads, *a) {
                kernels::col2im_add(dy, geom, da);
            }
        }
        Op::RowsToNchw {
            a,
            batch,
            channels,
            spatial,
        } => {
            if let Some(da) = slot(g, grads, *a) {
                for b in 0..*batch {
                    for s in 0..*spatial {
                        for c in 0..*channels {
                            da[(b * spatial + s) * channels + c] +=
                                dy[(b * channels + c) * spatial + s];
                        }
                    }
                }
            }
        }
        Op::MaxPool { a, argmax } => {
            if let Some(da) = slot(g, grads, *a) {
                for (o, &i) in argmax.iter().enumerate() {
                    da[i] += dy[o];
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            inner,
            batch_stats,
        } => {
            let (channels, inner) = (*channels, *inner);
            let batch = xhat.len() / (channels * inner);
            let gam = val(*gamma).data();
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * inner;
                    for i in base..base + inner {
                        sum_dy[c] += dy[i];
                        sum_dy_xhat[c] += dy[i] * xhat[i];
                    }
                }
            }
            if let Some(dg) = slot(g, grads, *gamma) {
                dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s);
            }
            if let Some(db) = slot(g, grads, *beta) {
                db.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s);
            }
            if let Some(dx) = slot(g, grads, *x) {
                let count = (batch * inner) as f64;
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        let k = gam[c] * inv_std[c];
                        for i in base..base + inner {
                            dx[i] += if *batch_stats {
                                k * (dy[i] - sum_dy[c] / count - xhat[i] * sum_dy_xhat[c] / count)
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
            }
        }
        Op::Pick { a, idx } => {
            let c = val(*a).shape()[1];
            if let Some(da) = slot(g, grads, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    da[r * c + i] += dy[r];
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let stride = val(*a).len() / val(*a).shape()[0];
            if let Some(da) = slot(g, grads, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    let src = &dy[r * stride..(r + 1) * stride];
                    da[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::ConcatLast { a, b } => {
            let ca = *val(*a).shape().last().unwrap();
            let cb = *val(*b).shape().last().unwrap();
            let rows = val(*a).len() / ca;
            if let Some(da) = slot(g, grads, *a) {
                for r in 0..rows {
                    for j in 0..ca {
                        da[r * ca + j] += dy[r * (ca + cb) + j];
                    }
                }
            }
            if let Some(db) = slot(g, grads, *b) {
                for r in 0..rows {
                    for j in 0..cb {
                        db[r * cb + j] += dy[r * (ca + cb) + ca + j];
                    }
                }
            }
        }
        Op::SliceRows { a, start } => {
            let c = val(*a).shape()[1];
            if let Some(da) = slot(g, grads, *a) {
                da[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(d, s)| *d += s);
            }
        }
        Op::NormalizeRows { a, norms } => {
            let c = *node.value.shape().last().unwrap();
            let raw = val(*a).data();
            if let Some(da) = slot(g, grads, *a) {
                for (r, &n) in norms.iter().enumerate() {
                    let rng = r * c..(r + 1) * c;
                    let true_norm = raw[rng.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if true_norm < CLAMP_FLOOR {
                        for i in rng {
                            da[i] += dy[i] / n;
                        }
                        continue;
                    }
                    let dot: f64 = rng.clone().map(|i| y[i] * dy[i]).sum();
                    for i in rng {
                        da[i] += (dy[i] - y[i] * dot) / n;
                    }
                }
            }
        }
        Op::ArcMargin {
            a,
            labels,
            slopes,
            scale,
        } => {
            let c = val(*a).shape()[1];
            if let Some(da) = slot(g, grads, *a) {
                for i in 0..da.len() {
                    da[i] += dy[i] * scale;
                }
                for (r, &l) in labels.iter().enumerate() {
                    da[r * c + l] += dy[r * c + l] * scale * (slopes[r] - 1.0);
                }
            }
        }
    }
}
