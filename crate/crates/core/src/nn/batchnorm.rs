//! Batch normalization with train, eval and adapt statistic modes.

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::facebn;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the new batch when updating running statistics in training.
pub const BN_TRAIN_MOMENTUM: f64 = 0.1;

/// Running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Running statistics of every BN layer, in layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStore {
    layers: Vec<(String, BnStats)>,
}

impl BnStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: BnStats) {
        let name = name.into();
        match self.layers.iter_mut().find(|(n, _)| *n == name) {
            Some((_, s)) => *s = stats,
            None => self.layers.push((name, stats)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&BnStats> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut BnStats> {
        self.layers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    fn require(&self, name: &str) -> Result<&BnStats> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("no running statistics for {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnStats)> {
        self.layers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Test-time re-estimation rule (see [`crate::facebn`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptRule {
    /// Weight kept on the stored statistic.
    pub gamma: f64,
    /// Use the `M − 1` divisor for the batch variance.
    pub unbiased: bool,
}

/// How BN layers treat statistics during one forward pass.
pub enum BnPass<'a> {
    /// Normalize with stored statistics; nothing is mutated.
    Eval(&'a BnStore),
    /// Normalize with batch statistics and update the running ones.
    Train(&'a mut BnStore),
    /// Mix batch statistics into the stored ones, then normalize with the
    /// updated values. Layers outside `only` behave as in eval.
    Adapt {
        store: &'a mut BnStore,
        rule: AdaptRule,
        only: Option<&'a [String]>,
    },
    /// Normalize with this batch's own statistics and record them
    /// (biased) into the store, replacing what was there.
    Measure(&'a mut BnStore),
}

impl BnPass<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, BnPass::Eval(_))
    }
}

/// Per-channel mean and variance of `[B×C×…]`; biased unless `unbiased`.
pub fn channel_stats(x: &Tensor, unbiased: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    if s.len() < 2 {
        return dim_err(format!("channel statistics need [B×C×…], got {s:?}"));
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let n = b * inner;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            mean[ci] += d[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            var[ci] += d[base..base + inner]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    let div = if unbiased { (n - 1).max(1) } else { n } as f64;
    var.iter_mut().for_each(|v| *v /= div);
    Ok((mean, var))
}

fn require_batch(x: &Tensor, name: &str, mode: &str) -> Result<()> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::BatchSize(format!(
            "{name}: {mode} mode needs at least 2 samples, got {b}"
        )));
    }
    Ok(())
}

/// Applies BN layer `name` to `x` under `pass`.
pub fn batchnorm_forward(
    g: &mut Graph,
    name: &str,
    x: Var,
    scale: Var,
    shift: Var,
    pass: &mut BnPass<'_>,
) -> Result<Var> {
    let channels = g.value(x).shape().get(1).copied().unwrap_or(0);
    match pass {
        BnPass::Eval(store) => {
            let s = store.require(name)?;
            check_channels(name, s, channels)?;
            Ok(
                g.batch_norm(x, scale, shift, Some((&s.mean, &s.var)), BN_EPS)?
                    .0,
            )
        }
        BnPass::Measure(store) => {
            require_batch(g.value(x), name, "measure")?;
            let (y, mean, var) = g.batch_norm(x, scale, shift, None, BN_EPS)?;
            store.insert(name, BnStats { mean, var });
            Ok(y)
        }
        BnPass::Train(store) => {
            require_batch(g.value(x), name, "train")?;
            let count = g.value(x).len() / channels.max(1);
            let (y, mean, var) = g.batch_norm(x, scale, shift, None, BN_EPS)?;
            let s = store
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("no running statistics for {name}")))?;
            check_channels(name, s, channels)?;
            let m = BN_TRAIN_MOMENTUM;
            let correction = count as f64 / (count as f64 - 1.0);
            for c in 0..channels {
                s.mean[c] = (1.0 - m) * s.mean[c] + m * mean[c];
                s.var[c] = (1.0 - m) * s.var[c] + m * var[c] * correction;
            }
            Ok(y)
        }
        BnPass::Adapt { store, rule, only } => {
            let selected = only.map_or(true, |names| names.iter().any(|n| n == name));
            let s = store
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("no running statistics for {name}")))?;
            check_channels(name, s, channels)?;
            if selected {
                require_batch(g.value(x), name, "adapt")?;
                facebn::adapt_step(s, g.value(x), rule.gamma, rule.unbiased)?;
            }
            let s = &*s;
            Ok(
                g.batch_norm(x, scale, shift, Some((&s.mean, &s.var)), BN_EPS)?
                    .0,
            )
        }
    }
}

fn check_channels(name: &str, s: &BnStats, channels: usize) -> Result<()> {
    if s.channels() != channels {
        return dim_err(format!(
            "{name}: statistics have {} channels, activations {channels}",
            s.channels()
        ));
    }
    Ok(())
}
