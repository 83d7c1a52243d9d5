//! Composite layer functions built from autograd primitives.

use crate::autograd::{Graph, ReduceOp, Var};
use crate::error::{dim_err, Result};

/// `x·W + b` with `W` stored as `[in × out]`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// 2-D cross-correlation of `[B×C×H×W]` with weights `[O×C×k×k]`,
/// realized as im2col followed by a matrix product.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
    let ws = g.value(weight).shape().to_vec();
    let xs = g.value(x).shape().to_vec();
    let [out_ch, in_ch, k, k2] = ws[..] else {
        return dim_err(format!("conv weight must be [O×C×k×k], got {ws:?}"));
    };
    if k != k2 {
        return dim_err(format!("conv kernel must be square, got {k}×{k2}"));
    }
    if xs.len() != 4 || xs[1] != in_ch {
        return dim_err(format!(
            "conv input {xs:?} does not match weight {ws:?} (channels)"
        ));
    }
    let cols = g.im2col(x, k, stride, pad)?;
    let flat = g.reshape(weight, &[out_ch, in_ch * k * k])?;
    let wt = g.transpose(flat)?;
    let rows = g.matmul(cols, wt)?;
    let oh = (xs[2] + 2 * pad - k) / stride + 1;
    let ow = (xs[3] + 2 * pad - k) / stride + 1;
    g.rows_to_nchw(rows, xs[0], oh, ow)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let mean = g.mean_all(picked);
    Ok(g.neg(mean))
}

/// Row-wise cosine similarity of two `[B×d]` matrices, norms floored at
/// the clamp floor (a zero row yields cosine 0).
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.normalize_rows(a, false)?;
    let nb = g.normalize_rows(b, false)?;
    let prod = g.mul(na, nb)?;
    let axis = g.value(prod).ndim() - 1;
    g.reduce(ReduceOp::Sum, prod, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = Tensor::new(vec![1, 2, 3, 3], data).unwrap();
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = conv2d(&mut g, xv, wv, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 5, 5], 0.7));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let y = conv2d(&mut g, x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_geometry_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(conv2d(&mut g, x, w, 1, 0).is_err());
        let w2 = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(conv2d(&mut g, x, w2, 1, 0).is_err());
    }
}
