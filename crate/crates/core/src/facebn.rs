//! Test-time re-estimation of batch-norm statistics.
//!
//! Each BN layer's running statistics are pulled toward those of unlabeled
//! target-domain batches:
//!
//! ```text
//! μ  ← γ·μ  + (1 − γ)·mean(batch)
//! σ² ← γ·σ² + (1 − γ)·var(batch)      (divisor M by default)
//! ```
//!
//! Learned scale/shift and every other weight are left untouched, and no
//! label is ever read.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{dim_err, Error, Result};
use crate::nn::batchnorm::{channel_stats, AdaptRule, BnPass, BnStats, BnStore};
use crate::nn::network::forward_features;
use crate::nn::Network;
use crate::tensor::Tensor;

/// Momentum on the stored statistic during adaptation.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// `None` means one full pass over the stream.
    pub num_batches: Option<usize>,
    /// Restrict adaptation to these BN layers; `None` adapts all.
    pub layer_filter: Option<Vec<String>>,
    /// Use the `M − 1` divisor for batch variance.
    pub unbiased: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            batch_size: 32,
            num_batches: None,
            layer_filter: None,
            unbiased: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "adaptation batch size {} < 2",
                self.batch_size
            )));
        }
        if self.num_batches == Some(0) {
            return Err(Error::Config("num_batches must be positive".into()));
        }
        Ok(())
    }
}

/// Mixes the statistics of one batch of activations `[M×C×…]` into `stats`.
pub fn adapt_step(
    stats: &mut BnStats,
    activations: &Tensor,
    gamma: f64,
    unbiased: bool,
) -> Result<()> {
    let s = activations.shape();
    if s.len() < 2 {
        return dim_err(format!("activations must be [M×C×…], got {s:?}"));
    }
    if s[0] < 2 {
        return Err(Error::BatchSize(format!(
            "adaptation needs M ≥ 2, got {}",
            s[0]
        )));
    }
    if s[1] != stats.channels() {
        return dim_err(format!(
            "activations have {} channels, statistics {}",
            s[1],
            stats.channels()
        ));
    }
    let (mean, var) = channel_stats(activations, unbiased)?;
    for c in 0..stats.channels() {
        stats.mean[c] = gamma * stats.mean[c] + (1.0 - gamma) * mean[c];
        stats.var[c] = gamma * stats.var[c] + (1.0 - gamma) * var[c];
    }
    Ok(())
}

/// Consecutive `batch_size` slices of `images`; a trailing remainder is kept
/// if it still has at least two samples.
pub fn gallery_batches(images: &Tensor, batch_size: usize) -> Result<Vec<Tensor>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start >= 2 {
            out.push(images.select(&(start..end).collect::<Vec<_>>())?);
        }
        start = end;
    }
    Ok(out)
}

/// Runs adapt-mode forward passes over `stream` and returns the network
/// with re-estimated BN statistics.
pub fn adapt_network<I>(net: &Network, stream: I, cfg: &AdaptConfig) -> Result<Network>
where
    I: IntoIterator<Item = Tensor>,
{
    cfg.validate()?;
    if net.bn.is_empty() {
        return Err(Error::Config("network has no batch-norm layers".into()));
    }
    if let Some(filter) = &cfg.layer_filter {
        if let Some(bad) = filter.iter().find(|n| net.bn.get(n).is_none()) {
            return Err(Error::Config(format!("unknown BN layer {bad} in filter")));
        }
    }
    let mut adapted = net.clone();
    let rule = AdaptRule {
        gamma: cfg.gamma,
        unbiased: cfg.unbiased,
    };
    let mut seen = 0;
    for batch in stream {
        if cfg.num_batches.is_some_and(|n| seen >= n) {
            break;
        }
        adapted.check_input(&batch)?;
        let mut g = Graph::new();
        let bound = adapted.params.bind(&mut g, |_| false);
        let x = g.constant(batch);
        let mut pass = BnPass::Adapt {
            store: &mut adapted.bn,
            rule,
            only: cfg.layer_filter.as_deref(),
        };
        forward_features(&adapted.arch, &mut g, &bound, x, &mut pass)?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Config("adaptation stream yielded no batches".into()));
    }
    Ok(adapted)
}

/// Statistics each BN layer sees when the whole of `images` is normalized
/// as one batch: the target `E_rl`, `V_rl` that adaptation estimates.
pub fn measure_domain_stats(net: &Network, images: &Tensor) -> Result<BnStore> {
    net.check_input(images)?;
    let mut store = BnStore::new();
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, |_| false);
    let x = g.constant(images.clone());
    forward_features(
        &net.arch,
        &mut g,
        &bound,
        x,
        &mut BnPass::Measure(&mut store),
    )?;
    Ok(store)
}

/// Per-channel 2-Wasserstein distance between the Gaussians N(μ, σ²) of two
/// statistic sets.
pub fn channel_distances(a: &BnStats, b: &BnStats) -> Vec<f64> {
    (0..a.channels())
        .map(|c| {
            let dm = a.mean[c] - b.mean[c];
            let ds = a.var[c].max(0.0).sqrt() - b.var[c].max(0.0).sqrt();
            (dm * dm + ds * ds).sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShift {
    pub layer: String,
    /// ‖μ_after − μ_before‖₂ over channels.
    pub mean_shift: f64,
    /// ‖σ²_after − σ²_before‖₂ over channels.
    pub var_shift: f64,
    pub mean_before: Vec<f64>,
    pub mean_after: Vec<f64>,
    pub var_before: Vec<f64>,
    pub var_after: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptDiagnostics {
    pub gamma: f64,
    pub batches: usize,
    pub layers: Vec<LayerShift>,
}

pub fn diagnostics(
    before: &Network,
    after: &Network,
    cfg: &AdaptConfig,
    batches: usize,
) -> AdaptDiagnostics {
    let l2 = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let layers = before
        .bn
        .iter()
        .filter_map(|(name, b)| {
            after.bn.get(name).map(|a| LayerShift {
                layer: name.to_string(),
                mean_shift: l2(&a.mean, &b.mean),
                var_shift: l2(&a.var, &b.var),
                mean_before: b.mean.clone(),
                mean_after: a.mean.clone(),
                var_before: b.var.clone(),
                var_after: a.var.clone(),
            })
        })
        .collect();
    AdaptDiagnostics {
        gamma: cfg.gamma,
        batches,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::rng::{Rng, SeedStream};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn batch(m: usize, c: usize, mean: f64, sd: f64, rng: &mut Rng) -> Tensor {
        let n = Normal::new(mean, sd).unwrap();
        Tensor::new(
            vec![m, c, 2, 2],
            (0..m * c * 4).map(|_| n.sample(rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_step_matches_mixing_formula() {
        let mut s = BnStats {
            mean: vec![1.0],
            var: vec![1.0],
        };
        // Batch with mean 0 and biased variance 1.
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        adapt_step(&mut s, &x, 0.1, false).unwrap();
        assert!((s.mean[0] - 0.1).abs() < 1e-15);
        assert!((s.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_gamma_leaves_stats_alone() {
        let mut s = BnStats {
            mean: vec![0.3, -2.0],
            var: vec![0.5, 4.0],
        };
        let before = s.clone();
        let mut rng = Rng::seed_from_u64(0);
        adapt_step(&mut s, &batch(8, 2, 5.0, 3.0, &mut rng), 1.0, false).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn step_errors() {
        let mut s = BnStats::identity(2);
        let one = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            adapt_step(&mut s, &one, 0.1, false),
            Err(Error::BatchSize(_))
        ));
        let wrong = Tensor::zeros(&[4, 3, 2, 2]);
        assert!(matches!(
            adapt_step(&mut s, &wrong, 0.1, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn unbiased_flag_changes_divisor() {
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let mut s = BnStats::identity(1);
        adapt_step(&mut s, &x, 0.0, true).unwrap();
        assert!((s.var[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = AdaptConfig::default();
        assert!(c.validate().is_ok());
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        c = AdaptConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_stream_is_a_config_error() {
        let net = Network::init(Architecture::student(8, 3), SeedStream::new(0)).unwrap();
        let err = adapt_network(&net, Vec::new(), &AdaptConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unit_gamma_network_is_bitwise_unchanged() {
        let net = Network::init(Architecture::student(8, 3), SeedStream::new(2)).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let stream: Vec<Tensor> = (0..3)
            .map(|_| {
                let n = Normal::new(0.5, 0.2).unwrap();
                Tensor::new(
                    vec![4, 1, 8, 8],
                    (0..256).map(|_| n.sample(&mut rng)).collect(),
                )
                .unwrap()
            })
            .collect();
        let cfg = AdaptConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let out = adapt_network(&net, stream, &cfg).unwrap();
        assert_eq!(
            crate::nn::checkpoint::to_bytes(&out),
            crate::nn::checkpoint::to_bytes(&net)
        );
    }

    #[test]
    fn only_bn_statistics_change() {
        let net = Network::init(Architecture::student(8, 3), SeedStream::new(4)).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let n = Normal::new(0.8, 0.3).unwrap();
        let stream: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::new(
                    vec![6, 1, 8, 8],
                    (0..384).map(|_| n.sample(&mut rng)).collect(),
                )
                .unwrap()
            })
            .collect();
        let out = adapt_network(&net, stream, &AdaptConfig::default()).unwrap();
        assert_eq!(out.params_digest(), net.params_digest());
        assert_ne!(out.bn, net.bn);
    }

    #[test]
    fn layer_filter_restricts_updates() {
        let net = Network::init(Architecture::student(8, 3), SeedStream::new(4)).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let n = Normal::new(0.8, 0.3).unwrap();
        let stream = vec![Tensor::new(
            vec![6, 1, 8, 8],
            (0..384).map(|_| n.sample(&mut rng)).collect(),
        )
        .unwrap()];
        let cfg = AdaptConfig {
            layer_filter: Some(vec!["b1.bn".into()]),
            ..Default::default()
        };
        let out = adapt_network(&net, stream, &cfg).unwrap();
        assert_eq!(out.bn.get("b0.bn"), net.bn.get("b0.bn"));
        assert_ne!(out.bn.get("b1.bn"), net.bn.get("b1.bn"));
        let bad = AdaptConfig {
            layer_filter: Some(vec!["nope".into()]),
            ..Default::default()
        };
        assert!(adapt_network(&net, Vec::<Tensor>::new(), &bad).is_err());
    }
}
