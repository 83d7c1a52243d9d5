//! Temperature-softened KL distillation baseline.

use crate::autograd::{Graph, Var, CLAMP_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// `T² · mean_b KL(softmax(t_b/T) ‖ softmax(s_b/T))`; teacher logits are
/// constants.
pub fn vanilla_kd_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let [b, c] = *teacher_logits.shape() else {
        return dim_err(format!(
            "teacher logits must be [B×c], got {:?}",
            teacher_logits.shape()
        ));
    };
    if g.value(student_logits).shape() != teacher_logits.shape() {
        return dim_err(format!(
            "student logits {:?} do not match teacher logits {:?}",
            g.value(student_logits).shape(),
            teacher_logits.shape()
        ));
    }
    let mut p = Vec::with_capacity(b * c);
    let mut entropy_term = 0.0;
    for r in 0..b {
        let row = teacher_logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| ((v - m) / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        for v in e {
            let q = v / s;
            if q > 0.0 {
                entropy_term += q * q.max(CLAMP_FLOOR).ln();
            }
            p.push(q);
        }
    }
    let zs = g.scale(student_logits, 1.0 / temperature);
    let log_q = g.log_softmax(zs)?;
    let pv = g.constant(Tensor::new(vec![b, c], p)?);
    let cross = g.mul(pv, log_q)?;
    let cross = g.sum_all(cross);
    let kl = g.neg(cross);
    let kl = g.add_scalar(kl, entropy_term);
    Ok(g.scale(kl, temperature * temperature / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::ild_loss;

    fn value(t: &Tensor, s: &Tensor, temp: f64) -> f64 {
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = vanilla_kd_loss(&mut g, t, sv, temp).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn equal_logits_give_zero() {
        let t = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        assert!(value(&t, &t, 4.0).abs() < 1e-14);
    }

    #[test]
    fn unit_temperature_matches_instance_loss() {
        let t = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]).unwrap();
        let s = Tensor::from_rows(&[vec![0.2, 0.1, -0.4], vec![1.0, 1.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let ild = ild_loss(&mut g, &t, sv, &[0, 1], 1.0).unwrap();
        assert!((value(&t, &s, 1.0) - g.value(ild).item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let sv = g.param(t.clone());
        assert!(vanilla_kd_loss(&mut g, &t, sv, 0.0).is_err());
    }
}
