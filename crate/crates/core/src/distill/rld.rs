//! Relation-level distillation loss.
//!
//! For a pair `(i, j)` the teacher relation is `r_t = R_t(f_t(x_i), f_t(x_j))`
//! and the cross-resolution relation is `r_ts = R_ts(f_t(x_i), f_s(x̂_j))`.
//! The critic `h = sigmoid(cos(r_t, r_ts)/τ)` should approach 1 on
//! same-identity pairs and 0 on hard negatives:
//!
//! ```text
//! L = −mean_pos log h  +  n · (−mean_neg log(1 − h))
//! ```
//!
//! With [`Reduction::Sum`] the means become sums.
//!
//! Relation vectors come out of a ReLU, so their cosine is never negative
//! and the plain critic cannot go below ½. [`RldConfig::offset`] shifts the
//! cosine before the sigmoid, `h = sigmoid((cos − offset)/τ)`, which lets
//! negatives reach small critic values.

use serde::{Deserialize, Serialize};

use super::relation::{critic_rows, RelationHeads};
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Critic values are clamped into `[H_CLAMP, 1 − H_CLAMP]` before logs.
pub const H_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RldConfig {
    pub tau: f64,
    /// Weight of the negative term.
    pub neg_weight: f64,
    pub reduction: Reduction,
    /// Subtracted from the cosine before the sigmoid.
    pub offset: f64,
}

/// Rows of the feature matrices taking part in one class of pairs:
/// pair `p` relates teacher row `i[p]` to sample `j`, whose teacher feature
/// is row `j_teacher[p]` and whose student feature is row `j_student[p]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairRows {
    pub i: Vec<usize>,
    pub j_teacher: Vec<usize>,
    pub j_student: Vec<usize>,
}

impl PairRows {
    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    pub fn push(&mut self, i: usize, j_teacher: usize, j_student: usize) {
        self.i.push(i);
        self.j_teacher.push(j_teacher);
        self.j_student.push(j_student);
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.j_teacher.len() != self.i.len() || self.j_student.len() != self.i.len() {
            return dim_err(format!("{what} pair rows have inconsistent lengths"));
        }
        if self.is_empty() {
            return Err(Error::EmptyPairs(format!("no {what} pairs in batch")));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RldOutput {
    pub loss: Var,
    pub mean_h_pos: f64,
    pub mean_h_neg: f64,
    /// Critic values that hit the clamp.
    pub clamped: usize,
}

/// Evaluates the relation loss. `teacher` is `[N×d]` and always enters the
/// graph as a constant; `student` is `[B×d]`.
pub fn rld_loss(
    g: &mut Graph,
    heads: &RelationHeads,
    bound: &Bound,
    teacher: &Tensor,
    student: Var,
    pos: &PairRows,
    neg: &PairRows,
    cfg: &RldConfig,
) -> Result<RldOutput> {
    pos.check("positive")?;
    neg.check("negative")?;
    if !(cfg.neg_weight >= 0.0) || !cfg.neg_weight.is_finite() {
        return Err(Error::Config(format!(
            "negative weight {} is invalid",
            cfg.neg_weight
        )));
    }
    let t = g.constant(teacher.clone());
    let (np, nn) = (pos.len(), neg.len());
    let cat = |a: &[usize], b: &[usize]| [a, b].concat();
    let i = cat(&pos.i, &neg.i);
    let jt = cat(&pos.j_teacher, &neg.j_teacher);
    let js = cat(&pos.j_student, &neg.j_student);

    let r_t = heads.teacher.forward_indexed(g, bound, t, t, &i, &jt)?;
    let r_ts = heads.cross.forward_indexed(g, bound, t, student, &i, &js)?;
    let h = critic_rows(g, r_t, r_ts, cfg.tau, cfg.offset)?;

    let hv = g.value(h).data();
    let clamped = hv
        .iter()
        .filter(|&&v| !(H_CLAMP..=1.0 - H_CLAMP).contains(&v))
        .count();
    let mean_h_pos = hv[..np].iter().sum::<f64>() / np as f64;
    let mean_h_neg = hv[np..].iter().sum::<f64>() / nn as f64;
    if clamped > 0 {
        log::warn!(
            "relation critic hit the clamp on {clamped} of {} pairs",
            np + nn
        );
    }

    let h = g.clamp(h, H_CLAMP, 1.0 - H_CLAMP);
    let h = g.reshape(h, &[np + nn, 1])?;
    let hp = g.slice_rows(h, 0, np)?;
    let hn = g.slice_rows(h, np, np + nn)?;
    let lp = g.log(hp)?;
    let one_minus = g.neg(hn);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let ln = g.log(one_minus)?;
    let (sp, sn) = match cfg.reduction {
        Reduction::Mean => (g.mean_all(lp), g.mean_all(ln)),
        Reduction::Sum => (g.sum_all(lp), g.sum_all(ln)),
    };
    let sn = g.scale(sn, cfg.neg_weight);
    let total = g.add(sp, sn)?;
    Ok(RldOutput {
        loss: g.neg(total),
        mean_h_pos,
        mean_h_neg,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use rand::{Rng as _, SeedableRng};

    fn mean_cfg(n: f64) -> RldConfig {
        RldConfig {
            tau: 0.1,
            neg_weight: n,
            reduction: Reduction::Mean,
            offset: 0.0,
        }
    }

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rng.random::<f64>() - 0.5)
                .collect(),
        )
        .unwrap()
    }

    fn relation(p: &crate::nn::ParamStore, name: &str, a: &[f64], b: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.weight")).unwrap();
        let bias = p.get(&format!("{name}.bias")).unwrap();
        let x: Vec<f64> = a.iter().chain(b).copied().collect();
        let k = bias.len();
        (0..k)
            .map(|c| {
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(r, v)| v * w.data()[r * k + c])
                    .sum();
                (s + bias.data()[c]).max(0.0)
            })
            .collect()
    }

    /// Term-by-term transcription of the loss.
    fn direct(
        heads: &RelationHeads,
        t: &Tensor,
        s: &Tensor,
        pos: &PairRows,
        neg: &PairRows,
        cfg: &RldConfig,
    ) -> f64 {
        let (tau, n) = (cfg.tau, cfg.neg_weight);
        let h = |i: usize, jt: usize, js: usize| {
            let rt = relation(&heads.params, "rel_t", t.row(i), t.row(jt));
            let rts = relation(&heads.params, "rel_ts", t.row(i), s.row(js));
            let dot: f64 = rt.iter().zip(&rts).map(|(a, b)| a * b).sum();
            let na = rt.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rts.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Zero relations count as cosine 0.
            let cos = dot / (na.max(1e-12) * nb.max(1e-12));
            let v = 1.0 / (1.0 + (-(cos - cfg.offset) / tau).exp());
            v.clamp(H_CLAMP, 1.0 - H_CLAMP)
        };
        let mut lp = 0.0;
        for p in 0..pos.len() {
            lp -= h(pos.i[p], pos.j_teacher[p], pos.j_student[p]).ln();
        }
        let mut ln = 0.0;
        for p in 0..neg.len() {
            ln -= (1.0 - h(neg.i[p], neg.j_teacher[p], neg.j_student[p])).ln();
        }
        lp / pos.len() as f64 + n * ln / neg.len() as f64
    }

    #[test]
    fn matches_direct_transcription() {
        let mut rng = Rng::seed_from_u64(3);
        let heads = RelationHeads::init(4, 5, &mut rng).unwrap();
        let t = random(&mut rng, 6, 4);
        let s = random(&mut rng, 6, 4);
        let labels = [0, 0, 1, 1, 2, 2];
        let (mut pos, mut neg) = (PairRows::default(), PairRows::default());
        for j in 0..6 {
            for i in 0..6 {
                if i != j && labels[i] == labels[j] {
                    pos.push(i, j, j);
                }
            }
            neg.push((j + 2) % 6, j, j);
            neg.push((j + 3) % 6, j, j);
            // Teacher side and student side on different samples.
            neg.push(j ^ 1, (j + 2) % 6, j);
        }
        for offset in [0.0, 0.5] {
            let cfg = RldConfig {
                offset,
                ..mean_cfg(2.0)
            };
            let mut g = Graph::new();
            let b = heads.params.bind(&mut g, |_| true);
            let sv = g.param(s.clone());
            let out = rld_loss(&mut g, &heads, &b, &t, sv, &pos, &neg, &cfg).unwrap();
            let got = g.value(out.loss).item().unwrap();
            let want = direct(&heads, &t, &s, &pos, &neg, &cfg);
            assert!(
                (got - want).abs() < 1e-10,
                "offset {offset}: {got} vs {want}"
            );
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn half_critic_gives_log_two_terms() {
        // Zero relation weights make every relation zero, so h = ½.
        let mut heads = RelationHeads::init(2, 3, &mut Rng::seed_from_u64(1)).unwrap();
        for (_, p) in heads.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let b = heads.params.bind(&mut g, |_| true);
        let s = g.constant(t.clone());
        let pos = PairRows {
            i: vec![0],
            j_teacher: vec![1],
            j_student: vec![1],
        };
        let neg = PairRows {
            i: vec![1, 0],
            j_teacher: vec![0, 1],
            j_student: vec![0, 1],
        };
        for n in [1.0, 4.0] {
            let out = rld_loss(&mut g, &heads, &b, &t, s, &pos, &neg, &mean_cfg(n)).unwrap();
            let want = 2f64.ln() + n * 2f64.ln();
            assert!((g.value(out.loss).item().unwrap() - want).abs() < 1e-12);
        }
        let sum = RldConfig {
            reduction: Reduction::Sum,
            ..mean_cfg(1.0)
        };
        let out = rld_loss(&mut g, &heads, &b, &t, s, &pos, &neg, &sum).unwrap();
        assert!((g.value(out.loss).item().unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_pairs_are_rejected() {
        let heads = RelationHeads::init(2, 3, &mut Rng::seed_from_u64(1)).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let b = heads.params.bind(&mut g, |_| true);
        let s = g.constant(t.clone());
        let one = PairRows {
            i: vec![0],
            j_teacher: vec![0],
            j_student: vec![0],
        };
        let r = rld_loss(
            &mut g,
            &heads,
            &b,
            &t,
            s,
            &PairRows::default(),
            &one,
            &mean_cfg(1.0),
        );
        assert!(matches!(r, Err(Error::EmptyPairs(_))));
    }
}
