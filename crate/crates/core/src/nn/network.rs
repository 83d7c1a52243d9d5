//! Feature extractor plus margin-softmax classifier head.

use sha2::{Digest, Sha256};

use super::arch::{Architecture, LayerSpec};
use super::batchnorm::{batchnorm_forward, BnPass, BnStats, BnStore};
use super::functional::{conv2d, linear};
use super::margin::cosine_logits;
use super::params::{Bound, ParamStore};
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: ParamStore,
    pub bn: BnStore,
}

/// Runs the backbone `F`, returning the embedding `[B×d]`.
pub fn forward_features(
    arch: &Architecture,
    g: &mut Graph,
    params: &Bound,
    x: Var,
    pass: &mut BnPass<'_>,
) -> Result<Var> {
    let mut h = x;
    for layer in &arch.layers {
        h = match layer {
            LayerSpec::Conv {
                name, stride, pad, ..
            } => {
                let w = params.var(&format!("{name}.weight"))?;
                conv2d(g, h, w, *stride, *pad)?
            }
            LayerSpec::BatchNorm { name } => {
                let scale = params.var(&format!("{name}.weight"))?;
                let shift = params.var(&format!("{name}.bias"))?;
                batchnorm_forward(g, name, h, scale, shift, pass)?
            }
            LayerSpec::Relu => g.relu(h),
            LayerSpec::MaxPool { size } => g.max_pool2d(h, *size)?,
            LayerSpec::Flatten => {
                let s = g.value(h).shape().to_vec();
                let per: usize = s[1..].iter().product();
                g.reshape(h, &[s[0], per])?
            }
            LayerSpec::Linear { name, .. } => {
                let w = params.var(&format!("{name}.weight"))?;
                let b = params.var(&format!("{name}.bias"))?;
                linear(g, h, w, Some(b))?
            }
        };
    }
    Ok(h)
}

impl Network {
    pub fn init(arch: Architecture, seeds: SeedStream) -> Result<Self> {
        let specs = arch.param_specs()?;
        let params = ParamStore::init(&specs, &mut seeds.rng("init"))?;
        let mut bn = BnStore::new();
        for (name, c) in arch.bn_layers()? {
            bn.insert(name, BnStats::identity(c));
        }
        Ok(Self { arch, params, bn })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim().expect("validated at construction")
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classifier.classes
    }

    /// Checks `[B×C×H×W]` against the declared input resolution.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            let [c, h, w] = self.arch.input;
            return dim_err(format!(
                "input resolution mismatch: expected [B×{c}×{h}×{w}], got {s:?}"
            ));
        }
        Ok(())
    }

    /// Train-mode backbone pass: batch statistics, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph, params: &Bound, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        forward_features(&self.arch, g, params, xv, &mut BnPass::Train(&mut self.bn))
    }

    /// Eval-mode backbone pass inside a caller-owned graph.
    pub fn forward_eval(&self, g: &mut Graph, params: &Bound, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        forward_features(&self.arch, g, params, xv, &mut BnPass::Eval(&self.bn))
    }

    /// Eval-mode embeddings and scaled-cosine logits (no margin).
    pub fn forward_embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let f = self.forward_eval(&mut g, &bound, x)?;
        let w = bound.var(CLASSIFIER_WEIGHT)?;
        let cos = cosine_logits(&mut g, f, w)?;
        let logits = g.scale(cos, self.arch.classifier.scale);
        Ok((g.value(f).clone(), g.value(logits).clone()))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let f = self.forward_eval(&mut g, &bound, x)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode embeddings computed `chunk` samples at a time.
    pub fn embed_batched(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut data = Vec::with_capacity(n * self.embed_dim());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            data.extend(self.embed(&x.select(&idx)?)?.into_data());
            start = end;
        }
        Tensor::new(vec![n, self.embed_dim()], data)
    }

    /// SHA-256 over the full serialized state.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(super::checkpoint::to_bytes(self)))
    }

    /// SHA-256 over learned parameters only (BN running stats excluded).
    pub fn params_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
