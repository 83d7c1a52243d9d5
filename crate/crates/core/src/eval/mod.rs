//! Verification and identification on trained networks.

pub mod scores;

use serde::{Deserialize, Serialize};

pub use scores::{
    best_threshold, candidate_thresholds, cosine, cosine_pairs, top_k_accuracy, ScoreHistogram,
    Sweep, HISTOGRAM_BINS,
};

use crate::autograd::Graph;
use crate::error::{dim_err, Error, Result};
use crate::nn::functional::cross_entropy;
use crate::nn::margin::margin_softmax_logits;
use crate::nn::network::CLASSIFIER_WEIGHT;
use crate::nn::optim::Sgd;
use crate::nn::Network;
use crate::synth::{downsample, Dataset, VerifyPair};
use crate::tensor::Tensor;

const EMBED_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    VerifyLrlr,
    VerifyLrhr,
    Identify,
}

/// How the high-resolution side of an LR-HR pair is embedded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HrSide<'a> {
    /// The teacher embeds the HR image.
    Teacher(&'a Network),
    /// The HR image is downsampled to the student's input and embedded by it.
    StudentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub threshold: Option<f64>,
    pub top_k: Vec<(usize, f64)>,
    pub pairs: usize,
    pub histogram: Option<ScoreHistogram>,
    pub overlap: Option<f64>,
    /// Accuracy of each seed when the report aggregates several runs.
    pub per_seed: Vec<f64>,
}

impl EvalReport {
    pub fn from_scores(mode: EvalMode, scores: &[f64], same: &[bool]) -> Result<Self> {
        let sweep = best_threshold(scores, same)?;
        let histogram = ScoreHistogram::new(scores, same, HISTOGRAM_BINS);
        Ok(Self {
            mode,
            accuracy: sweep.accuracy,
            threshold: Some(sweep.threshold),
            top_k: Vec::new(),
            pairs: scores.len(),
            overlap: Some(histogram.overlap()),
            histogram: Some(histogram),
            per_seed: Vec::new(),
        })
    }
}

/// Embeds the listed samples; rows follow `idx`.
fn embed_rows(net: &Network, images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    net.embed_batched(&images.select(idx)?, EMBED_CHUNK)
}

fn check_pairs(ds: &Dataset, pairs: &[VerifyPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Protocol("empty verification protocol".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.a >= ds.len() || p.b >= ds.len()) {
        return Err(Error::Protocol(format!(
            "pair ({}, {}) indexes past the {} dataset samples",
            p.a,
            p.b,
            ds.len()
        )));
    }
    Ok(())
}

fn unique(idx: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = idx.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn lookup(table: &[usize], emb: &Tensor, i: usize) -> Vec<f64> {
    emb.row(table.binary_search(&i).expect("embedded")).to_vec()
}

/// Cosine score of every pair. In LR-LR both sides are low-resolution
/// student embeddings; with `hr` set, side `b` is the high-resolution
/// gallery image.
pub fn pair_scores(
    student: &Network,
    ds: &Dataset,
    pairs: &[VerifyPair],
    hr: Option<HrSide>,
) -> Result<Vec<f64>> {
    check_pairs(ds, pairs)?;
    student.check_input(&ds.lr.select(&[0])?)?;
    let a_idx = unique(pairs.iter().map(|p| p.a));
    let b_idx = unique(pairs.iter().map(|p| p.b));
    let ea = embed_rows(student, &ds.lr, &a_idx)?;
    let eb = match hr {
        None => embed_rows(student, &ds.lr, &b_idx)?,
        Some(HrSide::Teacher(t)) => {
            if t.embed_dim() != student.embed_dim() {
                return dim_err(format!(
                    "teacher embedding {} and student embedding {} cannot be compared",
                    t.embed_dim(),
                    student.embed_dim()
                ));
            }
            embed_rows(t, &ds.hr, &b_idx)?
        }
        Some(HrSide::StudentOnly) => {
            let [_, h, _] = student.input_shape();
            let hr_size = ds.config.hr_size;
            if hr_size % h != 0 {
                return dim_err(format!(
                    "HR size {hr_size} is not a multiple of student input {h}"
                ));
            }
            let fitted = downsample(&ds.hr.select(&b_idx)?, hr_size / h, ds.config.kernel)?;
            student.embed_batched(&fitted, EMBED_CHUNK)?
        }
    };
    pairs
        .iter()
        .map(|p| cosine(&lookup(&a_idx, &ea, p.a), &lookup(&b_idx, &eb, p.b)))
        .collect()
}

pub fn evaluate_verification(
    student: &Network,
    ds: &Dataset,
    pairs: &[VerifyPair],
    hr: Option<HrSide>,
) -> Result<EvalReport> {
    let scores = pair_scores(student, ds, pairs, hr)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    let mode = if hr.is_some() {
        EvalMode::VerifyLrhr
    } else {
        EvalMode::VerifyLrlr
    };
    EvalReport::from_scores(mode, &scores, &same)
}

/// Gallery fine-tune of the embedding layer and classifier; every BN layer
/// stays in eval mode with frozen statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

const FINETUNE_PREFIXES: [&str; 2] = ["embed.", "classifier."];

/// Full-batch fine-tune of the final layers on `images`/`labels`.
pub fn finetune_final_layer(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    cfg: &FinetuneConfig,
) -> Result<Network> {
    let mut out = net.clone();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let trainable = |n: &str| FINETUNE_PREFIXES.iter().any(|p| n.starts_with(p));
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = out.params.bind(&mut g, trainable);
        let f = out.forward_eval(&mut g, &bound, images)?;
        let c = &out.arch.classifier;
        let logits = margin_softmax_logits(
            &mut g,
            f,
            bound.var(CLASSIFIER_WEIGHT)?,
            labels,
            c.margin,
            c.scale,
        )?;
        let loss = cross_entropy(&mut g, logits, labels)?;
        let grads = g
            .backward(loss)
            .map_err(|e| Error::Diverged(format!("fine-tune step {step}: {e}")))?;
        opt.step(&mut out.params, &bound.gradients(&grads), cfg.lr)?;
    }
    Ok(out)
}

/// 1:N identification of LR probes against an LR gallery.
pub fn evaluate_identification(
    student: &Network,
    ds: &Dataset,
    gallery: &[usize],
    probes: &[usize],
    ks: &[usize],
    finetune: Option<&FinetuneConfig>,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if let Some(&i) = gallery.iter().chain(probes).find(|&&i| i >= ds.len()) {
        return Err(Error::Protocol(format!(
            "index {i} past the {} dataset samples",
            ds.len()
        )));
    }
    let g_labels = ds.labels_of(gallery);
    let p_labels = ds.labels_of(probes);
    let tuned;
    let net = match finetune {
        Some(cfg) => {
            tuned = finetune_final_layer(student, &ds.lr.select(gallery)?, &g_labels, cfg)?;
            &tuned
        }
        None => student,
    };
    let eg = embed_rows(net, &ds.lr, gallery)?;
    let ep = if probes.is_empty() {
        Tensor::zeros(&[0, net.embed_dim()])
    } else {
        embed_rows(net, &ds.lr, probes)?
    };
    let top_k = top_k_accuracy(&eg, &g_labels, &ep, &p_labels, ks)?;
    Ok(EvalReport {
        mode: EvalMode::Identify,
        accuracy: top_k.first().map(|t| t.1).unwrap_or(0.0),
        threshold: None,
        top_k,
        pairs: probes.len(),
        histogram: None,
        overlap: None,
        per_seed: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::rng::SeedStream;
    use crate::synth::{
        build_identify, build_verify, generate_dataset, DataConfig, Protocol, ShiftConfig, Split,
    };

    fn setup() -> (Dataset, Network) {
        let cfg = DataConfig {
            num_ids: 4,
            samples_per_id: 8,
            test_per_id: 4,
            shift: ShiftConfig::none(),
            lr_noise: 0.0,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg, 2).unwrap();
        let net = Network::init(Architecture::student(8, 4), SeedStream::new(1)).unwrap();
        (ds, net)
    }

    #[test]
    fn verification_report_is_consistent() {
        let (ds, net) = setup();
        let Protocol::Verify(pairs) = build_verify(&ds, Split::Test, 20, 0).unwrap() else {
            panic!()
        };
        let r = evaluate_verification(&net, &ds, &pairs, None).unwrap();
        assert_eq!(r.mode, EvalMode::VerifyLrlr);
        assert!((0.0..=1.0).contains(&r.accuracy));
        let h = r.histogram.unwrap();
        assert_eq!(
            h.positive.iter().sum::<u64>() + h.negative.iter().sum::<u64>(),
            20
        );
        let student_only =
            evaluate_verification(&net, &ds, &pairs, Some(HrSide::StudentOnly)).unwrap();
        assert_eq!(student_only.mode, EvalMode::VerifyLrhr);
        // LR images are the bicubic downsample of HR, so student-only LR-HR
        // sees the same inputs as LR-LR.
        assert_eq!(student_only.accuracy, r.accuracy);
        let teacher = Network::init(Architecture::teacher(32, 4), SeedStream::new(3)).unwrap();
        evaluate_verification(&net, &ds, &pairs, Some(HrSide::Teacher(&teacher))).unwrap();
        assert!(evaluate_verification(&net, &ds, &[], None).is_err());
    }

    #[test]
    fn identification_self_match_and_finetune() {
        let (ds, net) = setup();
        let test = ds.indices(Split::Test);
        let r = evaluate_identification(&net, &ds, &test, &test, &[1, 5], None).unwrap();
        assert_eq!(r.top_k[0], (1, 1.0));
        let Protocol::Identify { gallery, probes } =
            build_identify(&ds, Split::Test, 2, 0).unwrap()
        else {
            panic!()
        };
        let ft = FinetuneConfig::default();
        let r = evaluate_identification(&net, &ds, &gallery, &probes, &[1, 5], Some(&ft)).unwrap();
        assert_eq!(r.top_k[1].1, 1.0);
        let tuned = finetune_final_layer(
            &net,
            &ds.lr.select(&gallery).unwrap(),
            &ds.labels_of(&gallery),
            &ft,
        )
        .unwrap();
        assert_eq!(tuned.bn, net.bn);
        for (name, t) in net.params.iter() {
            let frozen = !FINETUNE_PREFIXES.iter().any(|p| name.starts_with(p));
            assert_eq!(tuned.params.get(name).unwrap() == t, frozen, "{name}");
        }
    }

    #[test]
    fn probe_without_gallery_identity_is_rejected() {
        let (ds, net) = setup();
        let test = ds.indices(Split::Test);
        let gallery: Vec<usize> = test
            .iter()
            .copied()
            .filter(|&i| ds.labels[i] != 0)
            .collect();
        let err = evaluate_identification(&net, &ds, &gallery, &test, &[1], None).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
