//! Offline positive/negative pair selection on teacher embeddings.
//!
//! For every anchor whose identity has at least two samples, all
//! same-identity partners are kept, sorted by teacher cosine similarity
//! (descending), and the `n_neg` most similar different-identity samples are
//! kept as hard negatives. Ties always go to the lower sample index.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub anchor: u32,
    pub other: u32,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    pub n_neg: usize,
    pub num_samples: usize,
    pos_ranges: Vec<(usize, usize)>,
    neg_ranges: Vec<(usize, usize)>,
}

impl PairSet {
    /// Builds a pair set from anchor-grouped lists, indexing them by anchor.
    pub fn from_pairs(
        num_samples: usize,
        n_neg: usize,
        positives: Vec<Pair>,
        negatives: Vec<Pair>,
    ) -> Result<Self> {
        let ranges = |pairs: &[Pair]| -> Result<Vec<(usize, usize)>> {
            let mut r = vec![(0, 0); num_samples];
            let mut i = 0;
            while i < pairs.len() {
                let a = pairs[i].anchor as usize;
                if a >= num_samples || pairs[i].other as usize >= num_samples {
                    return Err(Error::Format(format!(
                        "pair ({}, {}) out of range for {num_samples} samples",
                        pairs[i].anchor, pairs[i].other
                    )));
                }
                let start = i;
                while i < pairs.len() && pairs[i].anchor as usize == a {
                    i += 1;
                }
                if r[a] != (0, 0) {
                    return Err(Error::Format(format!("anchor {a} is not contiguous")));
                }
                r[a] = (start, i);
            }
            Ok(r)
        };
        Ok(Self {
            pos_ranges: ranges(&positives)?,
            neg_ranges: ranges(&negatives)?,
            positives,
            negatives,
            n_neg,
            num_samples,
        })
    }

    pub fn positives_of(&self, anchor: usize) -> &[Pair] {
        let (s, e) = self.pos_ranges.get(anchor).copied().unwrap_or((0, 0));
        &self.positives[s..e]
    }

    pub fn negatives_of(&self, anchor: usize) -> &[Pair] {
        let (s, e) = self.neg_ranges.get(anchor).copied().unwrap_or((0, 0));
        &self.negatives[s..e]
    }

    /// Anchors that own at least one positive pair.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.num_samples)
            .filter(|&a| !self.positives_of(a).is_empty())
            .collect()
    }
}

/// Cosine similarity matrix of the rows of `embeds`.
fn cosine_matrix(embeds: &Tensor) -> Result<Vec<f64>> {
    let [n, d] = *embeds.shape() else {
        return dim_err(format!(
            "embeddings must be [N×d], got {:?}",
            embeds.shape()
        ));
    };
    let mut unit = embeds.data().to_vec();
    for (r, row) in unit.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Normalization(format!("embedding {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sims[i * n + j] = unit[i * d..(i + 1) * d]
                .iter()
                .zip(&unit[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    Ok(sims)
}

fn by_similarity(a: &Pair, b: &Pair) -> std::cmp::Ordering {
    b.sim.total_cmp(&a.sim).then(a.other.cmp(&b.other))
}

/// Mines positive and hard-negative pairs from teacher embeddings `[N×d]`.
pub fn mine_pairs(teacher_embeds: &Tensor, labels: &[usize], n_neg: usize) -> Result<PairSet> {
    let n = teacher_embeds.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} embeddings", labels.len()));
    }
    if n_neg == 0 {
        return Err(Error::Config("n_neg must be positive".into()));
    }
    let sims = cosine_matrix(teacher_embeds)?;
    let count = |l: usize| labels.iter().filter(|&&x| x == l).count();
    let anchors: Vec<usize> = (0..n).filter(|&i| count(labels[i]) >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::EmptyPairs(
            "no identity has at least two samples".into(),
        ));
    }
    for &a in &anchors {
        let available = n - count(labels[a]);
        if n_neg > available {
            return Err(Error::Config(format!(
                "n_neg = {n_neg} exceeds the {available} different-identity samples of anchor {a}"
            )));
        }
    }

    let per_anchor: Vec<(Vec<Pair>, Vec<Pair>)> = anchors
        .par_iter()
        .map(|&a| {
            let pair = |o: usize| Pair {
                anchor: a as u32,
                other: o as u32,
                sim: sims[a * n + o],
            };
            let mut pos: Vec<Pair> = (0..n)
                .filter(|&o| o != a && labels[o] == labels[a])
                .map(pair)
                .collect();
            pos.sort_by(by_similarity);
            let mut neg: Vec<Pair> = (0..n)
                .filter(|&o| labels[o] != labels[a])
                .map(pair)
                .collect();
            neg.sort_by(by_similarity);
            neg.truncate(n_neg);
            (pos, neg)
        })
        .collect();

    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    for (p, q) in per_anchor {
        positives.extend(p);
        negatives.extend(q);
    }
    PairSet::from_pairs(n, n_neg, positives, negatives)
}

pub const PAIR_MAGIC: &[u8; 4] = b"AIRP";
pub const PAIR_FORMAT: u32 = 1;

/// Sidecar layout: magic, u32 format, u32 n_neg, u32 num_samples, u32 #pos,
/// u32 #neg, then (u32 anchor, u32 other) for every positive, then every
/// negative, then the f64 similarities of positives, then of negatives.
pub fn to_bytes(p: &PairSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PAIR_MAGIC);
    for v in [
        PAIR_FORMAT,
        p.n_neg as u32,
        p.num_samples as u32,
        p.positives.len() as u32,
        p.negatives.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for pair in p.positives.iter().chain(&p.negatives) {
        out.extend_from_slice(&pair.anchor.to_le_bytes());
        out.extend_from_slice(&pair.other.to_le_bytes());
    }
    for pair in p.positives.iter().chain(&p.negatives) {
        out.extend_from_slice(&pair.sim.to_le_bytes());
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<PairSet> {
    let bad = |m: &str| Error::Format(format!("pair file: {m}"));
    if buf.len() < 24 || &buf[..4] != PAIR_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != PAIR_FORMAT {
        return Err(bad(&format!("unsupported format {}", word(0))));
    }
    let (n_neg, num_samples) = (word(1) as usize, word(2) as usize);
    let (np, nn) = (word(3) as usize, word(4) as usize);
    let total = np + nn;
    if buf.len() != 24 + total * 16 {
        return Err(bad("length does not match header"));
    }
    let idx = &buf[24..24 + total * 8];
    let sims = &buf[24 + total * 8..];
    let pairs: Vec<Pair> = (0..total)
        .map(|k| Pair {
            anchor: u32::from_le_bytes(idx[k * 8..k * 8 + 4].try_into().unwrap()),
            other: u32::from_le_bytes(idx[k * 8 + 4..k * 8 + 8].try_into().unwrap()),
            sim: f64::from_le_bytes(sims[k * 8..k * 8 + 8].try_into().unwrap()),
        })
        .collect();
    let negatives = pairs[np..].to_vec();
    let mut positives = pairs;
    positives.truncate(np);
    PairSet::from_pairs(num_samples, n_neg, positives, negatives)
}

pub fn save(p: &PairSet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PairSet> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
