//! The combined training objective `α·IlD + β·RlD + Cls`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 2.0;

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} loss is {v}")))
    }
}

/// Scalar form of the objective.
pub fn total(cls: f64, ild: f64, rld: f64, alpha: f64, beta: f64) -> Result<f64> {
    finite("classification", cls)?;
    finite("instance", ild)?;
    finite("relation", rld)?;
    Ok(alpha * ild + beta * rld + cls)
}

/// Graph form. Absent components contribute nothing; a component whose
/// weight is zero is skipped entirely.
pub fn total_loss(
    g: &mut Graph,
    cls: Var,
    ild: Option<Var>,
    rld: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    finite("classification", g.value(cls).item()?)?;
    let mut out = cls;
    for (name, part, w) in [("instance", ild, alpha), ("relation", rld, beta)] {
        let Some(v) = part else { continue };
        finite(name, g.value(v).item()?)?;
        if w != 0.0 {
            let s = g.scale(v, w);
            out = g.add(out, s)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_weights() {
        assert!((total(0.5, 0.1, 0.2, DEFAULT_ALPHA, DEFAULT_BETA).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(total(0.5, 0.1, 0.2, 0.0, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_component_is_named() {
        let err = total(0.5, f64::NAN, 0.2, 1.0, 2.0).unwrap_err();
        assert!(err.to_string().contains("instance"));
    }

    #[test]
    fn gradient_is_weighted_sum() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -0.7]));
        let sq = g.mul(x, x).unwrap();
        let cls = g.sum_all(sq);
        let ild = g.sum_all(x);
        let e = g.exp(x);
        let rld = g.sum_all(e);
        let l = total_loss(&mut g, cls, Some(ild), Some(rld), 1.0, 2.0).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap().data();
        for (k, &v) in [0.3f64, -0.7].iter().enumerate() {
            assert!((gx[k] - (2.0 * v + 1.0 + 2.0 * v.exp())).abs() < 1e-12);
        }
    }
}
