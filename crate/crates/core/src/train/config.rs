//! Training run configuration.

use serde::{Deserialize, Serialize};

use crate::distill::{Reduction, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_REL_DIM, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::nn::optim::LrSchedule;

pub const RUN_HEADER: &str = "aird-run 1";

pub const TEACHER_SCALE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// High-resolution teacher pretraining.
    Teacher,
    /// Classification plus instance- and relation-level distillation.
    Aird,
    /// Classification plus temperature-softened KL to the teacher.
    VanillaKd,
    /// Low-resolution classification only.
    ScratchLr,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::Config(format!(
                "unknown mode {s:?} (teacher|aird|vanilla_kd|scratch_lr)"
            ))
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).expect("unit enum");
        f.write_str(v.as_str().expect("unit enum"))
    }
}

/// How a hard negative `k` of anchor `a` enters the relation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRelation {
    /// Teacher relation `(k, a)` against cross relation `(k, â)`.
    Partner,
    /// Teacher relation `(p, k)` against cross relation `(p, â)`, where `p`
    /// is the most similar same-identity partner of `k`.
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_neg: usize,
    /// Weight of the negative relation term; 0 uses `n_neg`.
    pub neg_weight: f64,
    pub tau: f64,
    /// Cosine offset inside the relation critic.
    pub critic_offset: f64,
    pub negative_relation: NegativeRelation,
    pub rel_dim: usize,
    /// Softmax temperature of the instance-level term.
    pub temperature: f64,
    /// Softmax temperature of the vanilla KD baseline.
    pub kd_temperature: f64,
    pub reduction: Reduction,
    /// Positives used per anchor, most similar first; 0 keeps all.
    pub max_positives: usize,
    pub margin: f64,
    pub scale: f64,
    pub hr_size: usize,
    pub lr_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Aird,
            epochs: 40,
            batch_size: 32,
            lr: 0.05,
            lr_decay: 0.1,
            milestones: vec![21, 28, 32],
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            n_neg: 16,
            neg_weight: 0.0,
            tau: DEFAULT_TAU,
            critic_offset: 0.5,
            negative_relation: NegativeRelation::Partner,
            rel_dim: DEFAULT_REL_DIM,
            temperature: 1.0,
            kd_temperature: 4.0,
            reduction: Reduction::Mean,
            max_positives: 0,
            margin: crate::nn::arch::DEFAULT_MARGIN,
            scale: crate::nn::arch::DEFAULT_SCALE,
            hr_size: 32,
            lr_size: 8,
        }
    }
}

impl RunConfig {
    /// Teacher defaults. The smaller logit scale gives softer teacher
    /// distributions for the instance-level and KD terms.
    pub fn teacher() -> Self {
        Self {
            mode: Mode::Teacher,
            scale: TEACHER_SCALE,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            factor: self.lr_decay,
            milestones: self.milestones.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones {:?} are not strictly increasing",
                self.milestones
            ));
        }
        if self.epochs > 0 && self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!(
                "milestones {:?} must be below epochs = {}",
                self.milestones, self.epochs
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("tau", self.tau),
            ("temperature", self.temperature),
            ("kd_temperature", self.kd_temperature),
            ("scale", self.scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("margin", self.margin),
            ("neg_weight", self.neg_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.n_neg == 0 || self.rel_dim == 0 {
            return bad("n_neg and rel_dim must be positive".into());
        }
        if self.hr_size == 0 || self.lr_size == 0 || self.hr_size % self.lr_size != 0 {
            return bad(format!(
                "lr_size {} must divide hr_size {}",
                self.lr_size, self.hr_size
            ));
        }
        Ok(())
    }

    pub fn negative_weight(&self) -> f64 {
        if self.neg_weight > 0.0 {
            self.neg_weight
        } else {
            self.n_neg as f64
        }
    }

    pub fn to_text(&self) -> Result<String> {
        crate::config::to_text(RUN_HEADER, self)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let c: Self = crate::config::from_text(RUN_HEADER, Some(text), overrides)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text().unwrap(), &[]).unwrap(), c);
        assert_eq!(c.schedule().at_epoch(28), 0.05 * 0.1 * 0.1);
    }

    #[test]
    fn invalid_milestones() {
        let mut c = RunConfig::default();
        c.milestones = vec![5, 5];
        assert!(c.validate().is_err());
        c.milestones = vec![50];
        assert!(c.validate().is_err());
        c.milestones = vec![];
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn negative_weight_defaults_to_the_count() {
        let mut c = RunConfig::default();
        assert_eq!(c.negative_weight(), 16.0);
        c.neg_weight = 4.0;
        assert_eq!(c.negative_weight(), 4.0);
        c.neg_weight = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names() {
        assert_eq!("vanilla_kd".parse::<Mode>().unwrap(), Mode::VanillaKd);
        assert_eq!(Mode::ScratchLr.to_string(), "scratch_lr");
        assert!("kd".parse::<Mode>().is_err());
    }
}
