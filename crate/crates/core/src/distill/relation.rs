//! Relation extraction networks and the relation critic.

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::arch::{ParamKind, ParamSpec};
use crate::nn::functional::cosine_rows;
use crate::nn::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_REL_DIM: usize = 32;
pub const DEFAULT_TAU: f64 = 0.1;

/// `r = relu(concat(f_a, f_b)·W + b)` with `W` stored as `[2d × rel_dim]`
/// under `<name>.weight` and `b` under `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationNet {
    pub name: String,
    pub embed_dim: usize,
    pub rel_dim: usize,
}

impl RelationNet {
    pub fn new(name: impl Into<String>, embed_dim: usize, rel_dim: usize) -> Self {
        Self {
            name: name.into(),
            embed_dim,
            rel_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.weight_name(),
                shape: vec![self.input_dim(), self.rel_dim],
                fan_in: self.input_dim(),
                kind: ParamKind::Weight,
            },
            ParamSpec {
                name: self.bias_name(),
                shape: vec![self.rel_dim],
                fan_in: self.input_dim(),
                kind: ParamKind::Bias,
            },
        ]
    }

    fn check_features(&self, g: &Graph, f: Var) -> Result<usize> {
        match *g.value(f).shape() {
            [n, d] if d == self.embed_dim => Ok(n),
            ref s => dim_err(format!(
                "{}: features must be [n×{}], got {s:?}",
                self.name, self.embed_dim
            )),
        }
    }

    /// Row-wise relation of `[P×d]` feature pairs through the literal
    /// concatenation.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, fa: Var, fb: Var) -> Result<Var> {
        let (na, nb) = (self.check_features(g, fa)?, self.check_features(g, fb)?);
        if na != nb {
            return dim_err(format!("{}: {na} vs {nb} feature rows", self.name));
        }
        let x = g.concat_last(fa, fb)?;
        let y = g.matmul(x, bound.var(&self.weight_name())?)?;
        let y = g.add(y, bound.var(&self.bias_name())?)?;
        Ok(g.relu(y))
    }

    /// Relations of the index pairs `(fa_all[ia[p]], fb_all[ib[p]])`.
    ///
    /// Same values as [`forward`](Self::forward) on gathered rows, but the
    /// weight halves are applied once per distinct feature row instead of
    /// once per pair.
    pub fn forward_indexed(
        &self,
        g: &mut Graph,
        bound: &Bound,
        fa_all: Var,
        fb_all: Var,
        ia: &[usize],
        ib: &[usize],
    ) -> Result<Var> {
        self.check_features(g, fa_all)?;
        self.check_features(g, fb_all)?;
        if ia.len() != ib.len() || ia.is_empty() {
            return dim_err(format!(
                "{}: index lists of length {} and {}",
                self.name,
                ia.len(),
                ib.len()
            ));
        }
        let d = self.embed_dim;
        let w = bound.var(&self.weight_name())?;
        let w_a = g.slice_rows(w, 0, d)?;
        let w_b = g.slice_rows(w, d, 2 * d)?;
        let pa = g.matmul(fa_all, w_a)?;
        let pb = g.matmul(fb_all, w_b)?;
        let ga = g.gather_rows(pa, ia)?;
        let gb = g.gather_rows(pb, ib)?;
        let s = g.add(ga, gb)?;
        let s = g.add(s, bound.var(&self.bias_name())?)?;
        Ok(g.relu(s))
    }
}

/// The pair of relation networks: `R_t` over two teacher features and
/// `R_ts` over a teacher and a student feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationHeads {
    pub teacher: RelationNet,
    pub cross: RelationNet,
    pub params: ParamStore,
}

impl RelationHeads {
    pub fn init(embed_dim: usize, rel_dim: usize, rng: &mut Rng) -> Result<Self> {
        if embed_dim == 0 || rel_dim == 0 {
            return Err(Error::Config("relation dimensions must be positive".into()));
        }
        let teacher = RelationNet::new("rel_t", embed_dim, rel_dim);
        let cross = RelationNet::new("rel_ts", embed_dim, rel_dim);
        let mut specs = teacher.param_specs();
        specs.extend(cross.param_specs());
        let params = ParamStore::init(&specs, rng)?;
        Ok(Self {
            teacher,
            cross,
            params,
        })
    }
}

/// `h = sigmoid(cos(r_t, r_ts)/τ)` for a single pair of relation vectors.
pub fn critic_h(r_t: &Tensor, r_ts: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "critic temperature must be positive, got {tau}"
        )));
    }
    if r_t.shape() != r_ts.shape() {
        return dim_err(format!(
            "critic inputs {:?} and {:?}",
            r_t.shape(),
            r_ts.shape()
        ));
    }
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(r_t), norm(r_ts));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Normalization("zero-norm relation vector".into()));
    }
    let dot: f64 = r_t.data().iter().zip(r_ts.data()).map(|(a, b)| a * b).sum();
    Ok(1.0 / (1.0 + (-dot / (na * nb) / tau).exp()))
}

/// Row-wise critic `sigmoid((cos − offset)/τ)` on `[P×k]` relation
/// matrices, returning `[P]`. With `offset = 0` this is [`critic_h`].
///
/// Zero rows are tolerated (cosine 0); the training loop counts them
/// instead of aborting.
pub fn critic_rows(g: &mut Graph, r_t: Var, r_ts: Var, tau: f64, offset: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "critic temperature must be positive, got {tau}"
        )));
    }
    let c = cosine_rows(g, r_t, r_ts)?;
    let c = g.add_scalar(c, -offset);
    let z = g.scale(c, 1.0 / tau);
    Ok(g.sigmoid(z))
}
