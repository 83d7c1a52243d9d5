//! Score-level metrics: threshold sweep, top-K ranking and histograms.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Result of sweeping the decision threshold. A pair is predicted
/// "same" when its score is strictly above `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Candidate thresholds: one below every score, every score, every
/// midpoint between consecutive distinct scores and one above every score.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(2 * s.len() + 1);
    if let (Some(&lo), Some(&hi)) = (s.first(), s.last()) {
        out.push(lo - 1.0);
        for w in s.windows(2) {
            out.push(w[0]);
            out.push(0.5 * (w[0] + w[1]));
        }
        out.push(hi);
        out.push(hi + 1.0);
    }
    out
}

/// Best accuracy over all candidate thresholds; among equally good
/// thresholds the largest wins, so constant scores give the all-negative
/// rule.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> Result<Sweep> {
    if scores.len() != same.len() {
        return dim_err(format!("{} scores for {} labels", scores.len(), same.len()));
    }
    if scores.is_empty() {
        return Err(Error::Protocol("empty verification protocol".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("verification score {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;

    // Sweep upward: everything at or below the threshold is predicted
    // negative. Start below all scores (all predicted positive).
    let mut correct = same.iter().filter(|&&s| s).count();
    let mut best = Sweep {
        threshold: scores[order[0]] - 1.0,
        accuracy: correct as f64 / n,
    };
    let mut k = 0;
    while k < order.len() {
        let v = scores[order[k]];
        while k < order.len() && scores[order[k]] == v {
            if same[order[k]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            k += 1;
        }
        let acc = correct as f64 / n;
        if acc >= best.accuracy {
            let threshold = match order.get(k) {
                Some(&next) => 0.5 * (v + scores[next]),
                None => v + 1.0,
            };
            best = Sweep {
                threshold,
                accuracy: acc,
            };
        }
    }
    Ok(best)
}

/// Row-wise cosine similarity of L2-normalized rows.
pub fn cosine_pairs(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return dim_err(format!(
            "cosine pairs need equal [N×d] inputs, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    (0..a.shape()[0])
        .map(|i| cosine(a.row(i), b.row(i)))
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Normalization(
            "zero embedding cannot be normalized".into(),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Fraction of probes whose label is among the `k` best-scoring gallery
/// identities, for each requested `k`. An identity scores the maximum
/// cosine over its gallery samples.
pub fn top_k_accuracy(
    gallery: &Tensor,
    gallery_labels: &[usize],
    probes: &Tensor,
    probe_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if gallery_labels.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if probe_labels.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut ids: Vec<usize> = gallery_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if let Some(&l) = probe_labels.iter().find(|l| ids.binary_search(l).is_err()) {
        return Err(Error::Protocol(format!(
            "probe identity {l} has no gallery sample"
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!("top-K needs K ≥ 1, got {k}")));
    }
    let mut hits = vec![0usize; ks.len()];
    for (p, &truth) in probe_labels.iter().enumerate() {
        let mut best = vec![f64::NEG_INFINITY; ids.len()];
        for (g, &l) in gallery_labels.iter().enumerate() {
            let c = cosine(probes.row(p), gallery.row(g))?;
            let slot = ids.binary_search(&l).expect("gallery label");
            best[slot] = best[slot].max(c);
        }
        let own = best[ids.binary_search(&truth).expect("checked above")];
        // Rank 0 is best; ties with other identities count against the probe.
        let rank = best.iter().filter(|&&s| s >= own).count() - 1;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = probe_labels.len() as f64;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / n))
        .collect())
}

/// Fixed-range score histogram of positive and negative pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 100;

impl ScoreHistogram {
    /// Bins over `[−1, 1]`; the top edge belongs to the last bin and
    /// out-of-range scores are clamped into the end bins.
    pub fn new(scores: &[f64], same: &[bool], bins: usize) -> Self {
        let (lo, hi) = (-1.0, 1.0);
        let mut h = Self {
            lo,
            hi,
            positive: vec![0; bins],
            negative: vec![0; bins],
        };
        for (&s, &p) in scores.iter().zip(same) {
            let b = (((s - lo) / (hi - lo)) * bins as f64)
                .floor()
                .clamp(0.0, (bins - 1) as f64) as usize;
            if p {
                h.positive[b] += 1;
            } else {
                h.negative[b] += 1;
            }
        }
        h
    }

    pub fn bins(&self) -> usize {
        self.positive.len()
    }

    /// Shared area of the two histograms after normalizing each to unit
    /// mass: 0 for disjoint score ranges, 1 for identical distributions.
    pub fn overlap(&self) -> f64 {
        let np: u64 = self.positive.iter().sum();
        let nn: u64 = self.negative.iter().sum();
        if np == 0 || nn == 0 {
            return 0.0;
        }
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(&p, &n)| (p as f64 / np as f64).min(n as f64 / nn as f64))
            .sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_lo", "bin_hi", "positive", "negative"])?;
        let width = (self.hi - self.lo) / self.bins() as f64;
        for b in 0..self.bins() {
            let lo = self.lo + b as f64 * width;
            w.write_record([
                format!("{lo:.4}"),
                format!("{:.4}", lo + width),
                self.positive[b].to_string(),
                self.negative[b].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], same: &[bool]) -> f64 {
        candidate_thresholds(scores)
            .iter()
            .map(|&t| {
                scores
                    .iter()
                    .zip(same)
                    .filter(|&(&s, &y)| (s > t) == y)
                    .count() as f64
                    / scores.len() as f64
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn separable_scores() {
        let scores = [0.9, 0.9, 0.1, 0.1];
        let same = [true, true, false, false];
        let s = best_threshold(&scores, &same).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(s.threshold > 0.1 && s.threshold < 0.9);
    }

    #[test]
    fn constant_scores_predict_all_negative() {
        let s = best_threshold(&[0.3; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert!(s.threshold > 0.3);
    }

    #[test]
    fn empty_protocol_is_an_error() {
        assert!(matches!(best_threshold(&[], &[]), Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(
            raw in proptest::collection::vec((0u8..12, any::<bool>()), 1..40)
        ) {
            // Coarse grid so ties are common.
            let scores: Vec<f64> = raw.iter().map(|(v, _)| *v as f64 / 6.0 - 1.0).collect();
            let same: Vec<bool> = raw.iter().map(|(_, s)| *s).collect();
            let s = best_threshold(&scores, &same).unwrap();
            prop_assert_eq!(s.accuracy, brute_force(&scores, &same));
            let realized = scores.iter().zip(&same).filter(|&(&v, &y)| (v > s.threshold) == y).count() as f64
                / scores.len() as f64;
            prop_assert_eq!(realized, s.accuracy);
        }
    }

    #[test]
    fn self_match_and_orthogonal_ids() {
        let e = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.9, 0.1, 0.0],
        ])
        .unwrap();
        let labels = [0, 1, 2, 0];
        let top = top_k_accuracy(&e, &labels, &e, &labels, &[1, 5]).unwrap();
        assert_eq!(top, vec![(1, 1.0), (5, 1.0)]);
        let err = top_k_accuracy(&e, &[0, 1, 1, 0], &e, &labels, &[1]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn histogram_counts_and_overlap() {
        let scores = [-1.0, -0.5, 0.5, 1.0, 0.5];
        let same = [false, false, true, true, false];
        let h = ScoreHistogram::new(&scores, &same, HISTOGRAM_BINS);
        assert_eq!(h.positive.iter().sum::<u64>(), 2);
        assert_eq!(h.negative.iter().sum::<u64>(), 3);
        assert_eq!(h.positive[99], 1);
        assert_eq!(h.negative[0], 1);
        assert!((h.overlap() - 1.0 / 3.0).abs() < 1e-12);
        let disjoint = ScoreHistogram::new(&[0.9, -0.9], &[true, false], 100);
        assert_eq!(disjoint.overlap(), 0.0);
        assert_eq!(h.to_csv().unwrap().lines().count(), 101);
    }
}
