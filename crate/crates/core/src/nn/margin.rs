use crate::autograd::{Graph, Var};
use crate::error::Result;

/// Cosine logits between L2-normalized embeddings `[B×d]` and class weights
/// `[c×d]`. Zero-norm rows are a normalization error.
pub fn cosine_logits(g: &mut Graph, f: Var, class_weights: Var) -> Result<Var> {
    let fh = g.normalize_rows(f, true)?;
    let wh = g.normalize_rows(class_weights, true)?;
    let wt = g.transpose(wh)?;
    g.matmul(fh, wt)
}

/// Additive-angular-margin logits: `s·cos(θ_y + m)` on the label class,
/// `s·cos θ_j` elsewhere. With `m = 0` this is the scaled cosine.
pub fn margin_softmax_logits(
    g: &mut Graph,
    f: Var,
    class_weights: Var,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let cos = cosine_logits(g, f, class_weights)?;
    g.arc_margin(cos, labels, margin, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(f: &[Vec<f64>], w: &[Vec<f64>], labels: &[usize], m: f64, s: f64) -> Tensor {
        let mut g = Graph::new();
        let fv = g.constant(Tensor::from_rows(f).unwrap());
        let wv = g.constant(Tensor::from_rows(w).unwrap());
        let out = margin_softmax_logits(&mut g, fv, wv, labels, m, s).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn aligned_embedding_has_unit_cosine() {
        let w = vec![vec![2.0, 0.0], vec![0.0, 3.0]];
        let out = logits(&[vec![5.0, 0.0]], &w, &[0], 0.0, 1.0);
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!(out.data()[1].abs() < 1e-15);
    }

    #[test]
    fn margin_only_lowers_the_label_logit() {
        let w = vec![
            vec![1.0, 0.2, -0.3],
            vec![-0.4, 1.0, 0.1],
            vec![0.3, -0.2, 1.0],
        ];
        let f = vec![vec![0.8, 0.5, 0.1], vec![0.1, 0.2, 0.9]];
        let plain = logits(&f, &w, &[0, 2], 0.0, 16.0);
        let marg = logits(&f, &w, &[0, 2], 0.5, 16.0);
        for r in 0..2 {
            for c in 0..3 {
                let (p, m) = (plain.data()[r * 3 + c], marg.data()[r * 3 + c]);
                if [0, 2][r] == c {
                    assert!(m < p, "label logit should drop: {m} vs {p}");
                } else {
                    assert_eq!(m, p);
                }
            }
        }
    }

    #[test]
    fn zero_margin_is_scaled_cosine() {
        let w = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]];
        let f = vec![vec![0.7, -0.2], vec![1.5, 2.5]];
        let out = logits(&f, &w, &[1, 2], 0.0, 16.0);
        for r in 0..2 {
            for c in 0..3 {
                let (a, b) = (&f[r], &w[c]);
                let cos = (a[0] * b[0] + a[1] * b[1])
                    / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
                assert!((out.data()[r * 3 + c] - 16.0 * cos).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 2]));
        let w = g.constant(Tensor::eye(2));
        assert!(margin_softmax_logits(&mut g, f, w, &[0], 0.35, 16.0).is_err());
    }
}
