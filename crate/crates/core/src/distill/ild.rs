//! Instance-level distillation with the target / non-target decomposition.
//!
//! Per sample, with `p_tar` the target probability, `p_ntar = 1 − p_tar` and
//! `p̂` the distribution renormalized over non-target classes:
//!
//! ```text
//! L = t_tar·log(t_tar / s_tar) + t_ntar·log(t_ntar / s_ntar)
//!     + t_ntar · Σ_{i≠tar} t̂_i·log(t̂_i / ŝ_i)
//! ```
//!
//! which equals the full KL divergence between the two softmax
//! distributions.

use crate::autograd::{Graph, Var, CLAMP_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledProbs {
    pub p_tar: f64,
    pub p_ntar: f64,
    /// Non-target probabilities in class order with the target skipped.
    pub p_hat: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn decouple(logits: &[f64], target: usize) -> Result<DecoupledProbs> {
    let c = logits.len();
    if c < 2 {
        return dim_err(format!("decoupling needs at least 2 classes, got {c}"));
    }
    if target >= c {
        return dim_err(format!("target {target} out of range for {c} classes"));
    }
    if let Some(bad) = logits.iter().find(|v| v.is_nan()) {
        return Err(Error::NumericDomain(format!("logit {bad}")));
    }
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| v)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e_tar = (logits[target] - m).exp();
    let e_rest: f64 = rest.iter().map(|v| (v - m).exp()).sum();
    let s = e_tar + e_rest;
    Ok(DecoupledProbs {
        p_tar: e_tar / s,
        p_ntar: e_rest / s,
        p_hat: softmax(&rest),
    })
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.max(CLAMP_FLOOR).ln()
    } else {
        0.0
    }
}

fn check_logits(teacher: &Tensor, student: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let [b, c] = *teacher.shape() else {
        return dim_err(format!(
            "teacher logits must be [B×c], got {:?}",
            teacher.shape()
        ));
    };
    if student.shape() != teacher.shape() {
        return dim_err(format!(
            "student logits {:?} do not match teacher logits {:?}",
            student.shape(),
            teacher.shape()
        ));
    }
    if targets.len() != b {
        return dim_err(format!("{} targets for {b} samples", targets.len()));
    }
    Ok((b, c))
}

/// Batch mean of the decoupled divergence, scaled by `T²`. Teacher logits
/// are constants.
pub fn ild_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    targets: &[usize],
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (b, c) = check_logits(teacher_logits, g.value(student_logits), targets)?;
    let inv_t = 1.0 / temperature;

    // Teacher side: constants and per-entry weights of the student logs.
    let mut constant = 0.0;
    let mut w_tar = Vec::with_capacity(b);
    let mut w_ntar = Vec::with_capacity(b);
    let mut w_hat = vec![0.0; b * c];
    for (r, &tar) in targets.iter().enumerate() {
        let z: Vec<f64> = teacher_logits.row(r).iter().map(|v| v * inv_t).collect();
        let p = decouple(&z, tar)?;
        constant += xlogx(p.p_tar)
            + xlogx(p.p_ntar)
            + p.p_ntar * p.p_hat.iter().map(|&q| xlogx(q)).sum::<f64>();
        w_tar.push(p.p_tar);
        w_ntar.push(p.p_ntar);
        let mut k = 0;
        for i in 0..c {
            if i != tar {
                w_hat[r * c + i] = p.p_ntar * p.p_hat[k];
                k += 1;
            }
        }
    }

    // Student side.
    let zs = g.scale(student_logits, inv_t);
    let mask: Vec<bool> = (0..b * c).map(|k| k % c != targets[k / c]).collect();
    let lse_all = g.logsumexp_rows(zs, None)?;
    let lse_nt = g.logsumexp_rows(zs, Some(mask))?;
    let log_s = g.log_softmax(zs)?;
    let log_s_tar = g.pick(log_s, targets)?;
    let log_s_ntar = g.sub(lse_nt, lse_all)?;
    let lse_nt_col = g.reshape(lse_nt, &[b, 1])?;
    let log_s_hat = g.sub(zs, lse_nt_col)?;

    let wt = g.constant(Tensor::vector(w_tar));
    let wn = g.constant(Tensor::vector(w_ntar));
    let wh = g.constant(Tensor::new(vec![b, c], w_hat)?);
    let a = g.mul(wt, log_s_tar)?;
    let bb = g.mul(wn, log_s_ntar)?;
    let h = g.mul(wh, log_s_hat)?;
    let a = g.sum_all(a);
    let bb = g.sum_all(bb);
    let h = g.sum_all(h);
    let cross = g.add(a, bb)?;
    let cross = g.add(cross, h)?;
    let per_batch = g.neg(cross);
    let per_batch = g.add_scalar(per_batch, constant);
    Ok(g.scale(per_batch, temperature * temperature / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn kl(t: &[f64], s: &[f64]) -> f64 {
        let (p, q) = (softmax(t), softmax(s));
        p.iter()
            .zip(&q)
            .map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 })
            .sum()
    }

    fn eval(t: &Tensor, s: &Tensor, targets: &[usize]) -> f64 {
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = ild_loss(&mut g, t, sv, targets, 1.0).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits() {
        let p = decouple(&[0.3; 4], 2).unwrap();
        assert!((p.p_tar - 0.25).abs() < 1e-15);
        assert!((p.p_ntar - 0.75).abs() < 1e-15);
        assert!(p.p_hat.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_target() {
        let p = decouple(&[800.0, 0.0, 1.0], 0).unwrap();
        assert_eq!(p.p_tar, 1.0);
        assert!(p.p_ntar < 1e-300);
        assert!((p.p_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_target() {
        assert!(decouple(&[0.0, 1.0], 2).is_err());
        assert!(decouple(&[0.0], 0).is_err());
    }

    #[test]
    fn small_worked_case() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let s = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let want = kl(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert!((eval(&t, &s, &[0]) - want).abs() < 1e-12);
        assert!(eval(&t, &t, &[0]).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn equals_full_kl(seed in 0u64..10_000, c in 2usize..8) {
            let mut rng = Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let s: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let tar = rng.random_range(0..c);
            let got = eval(&Tensor::new(vec![1, c], t.clone()).unwrap(), &Tensor::new(vec![1, c], s.clone()).unwrap(), &[tar]);
            prop_assert!((got - kl(&t, &s)).abs() < 1e-10);
            prop_assert!(got >= -1e-12);
            let p = decouple(&s, tar).unwrap();
            let full = softmax(&s);
            let mut k = 0;
            for (i, &q) in full.iter().enumerate() {
                if i != tar {
                    prop_assert!((p.p_hat[k] * p.p_ntar - q).abs() < 1e-12);
                    k += 1;
                }
            }
            prop_assert!((p.p_tar + p.p_ntar - 1.0).abs() < 1e-12);
        }
    }
}
