//! Named parameter storage and binding into a graph.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::Uniform;

use super::arch::{ParamKind, ParamSpec};
use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameters in manifest order, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Kaiming-uniform weights, `±1/√fan_in` biases, unit BN scale and zero
    /// BN shift.
    pub fn init(specs: &[ParamSpec], rng: &mut Rng) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let fan_in = spec.fan_in.max(1) as f64;
            let data: Vec<f64> = match spec.kind {
                ParamKind::Weight | ParamKind::ClassWeights => {
                    let bound = (6.0 / fan_in).sqrt();
                    let u = Uniform::new(-bound, bound).expect("positive bound");
                    (0..n).map(|_| rng.sample(u)).collect()
                }
                ParamKind::Bias => {
                    let bound = 1.0 / fan_in.sqrt();
                    let u = Uniform::new(-bound, bound).expect("positive bound");
                    (0..n).map(|_| rng.sample(u)).collect()
                }
                ParamKind::BnScale => vec![1.0; n],
                ParamKind::BnShift => vec![0.0; n],
            };
            store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers every parameter as a graph leaf; those for which
    /// `trainable` returns true receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect::<Vec<_>>();
        Bound::new(vars)
    }
}

/// Parameter name → graph variable for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binds names to variables created by the caller.
    pub fn new(vars: Vec<(String, Var)>) -> Self {
        let index = vars
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { vars, index }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].1)
            .ok_or_else(|| Error::Format(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}
