//! End-to-end studies on the synthetic benchmark: the baseline comparison,
//! the component ablation and the negative-count sweep.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::eval::{evaluate_verification, EvalReport};
use crate::facebn::{adapt_network, gallery_batches, AdaptConfig};
use crate::nn::Network;
use crate::synth::{
    build_verify, generate_dataset, DataConfig, Dataset, Protocol, Split, VerifyPair,
};
use crate::train::{distill_student, mine_dataset_pairs, train_teacher, Mode, RunConfig};

pub const PIPELINE_HEADER: &str = "aird-pipeline 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSettings {
    pub gamma: f64,
    pub batch_size: usize,
    /// 0 adapts on one full pass over the gallery.
    pub num_batches: usize,
    pub unbiased: bool,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            gamma: d.gamma,
            batch_size: d.batch_size,
            num_batches: 0,
            unbiased: d.unbiased,
        }
    }
}

impl AdaptSettings {
    pub fn to_config(&self) -> AdaptConfig {
        AdaptConfig {
            gamma: self.gamma,
            batch_size: self.batch_size,
            num_batches: (self.num_batches > 0).then_some(self.num_batches),
            layer_filter: None,
            unbiased: self.unbiased,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Balanced verification pairs per test split.
    pub verify_pairs: usize,
    pub gallery_per_id: usize,
    /// LR-HR verification embeds the HR side with the student instead of
    /// the teacher.
    pub student_only: bool,
    pub finetune: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            verify_pairs: 800,
            gallery_per_id: 2,
            student_only: false,
            finetune: false,
        }
    }
}

/// Every knob of a benchmark run. The root seed drives data, teacher and
/// student; the `seed` fields of the run configs are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub seeds: usize,
    pub data: DataConfig,
    pub teacher: RunConfig,
    pub student: RunConfig,
    pub adapt: AdaptSettings,
    pub eval: EvalSettings,
    pub sweep_negatives: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 3,
            data: DataConfig::default(),
            teacher: RunConfig::teacher(),
            student: RunConfig::default(),
            adapt: AdaptSettings::default(),
            eval: EvalSettings::default(),
            sweep_negatives: vec![4, 8, 16, 32, 64],
        }
    }
}

impl PipelineConfig {
    pub fn from_text(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let cfg: Self = config::from_text(PIPELINE_HEADER, text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        config::to_text(PIPELINE_HEADER, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.adapt.to_config().validate()?;
        if self.teacher.mode != Mode::Teacher {
            return Err(Error::Config(format!(
                "teacher.mode must be teacher, got {}",
                self.teacher.mode
            )));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the `k`-th repetition.
    pub fn seed_at(&self, k: usize) -> u64 {
        self.seed + k as u64
    }

    pub fn teacher_run(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.teacher.clone()
        }
    }

    pub fn student_run(&self, seed: u64, mode: Mode) -> RunConfig {
        RunConfig {
            seed,
            mode,
            ..self.student.clone()
        }
    }
}

/// Dataset and frozen teacher shared by every student of one seed.
pub struct SeedContext {
    pub seed: u64,
    pub dataset: Dataset,
    pub teacher: Network,
    pub clean_pairs: Vec<VerifyPair>,
    pub shifted_pairs: Vec<VerifyPair>,
}

fn verify_pairs(ds: &Dataset, split: Split, count: usize, seed: u64) -> Result<Vec<VerifyPair>> {
    match build_verify(ds, split, count, seed)? {
        Protocol::Verify(p) => Ok(p),
        Protocol::Identify { .. } => unreachable!("build_verify returns a verification protocol"),
    }
}

impl SeedContext {
    pub fn prepare(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let dataset = generate_dataset(&cfg.data, seed)?;
        let teacher = train_teacher(&cfg.teacher_run(seed), &dataset)?.network;
        let clean_pairs = verify_pairs(&dataset, Split::Test, cfg.eval.verify_pairs, seed)?;
        let shifted_pairs = if cfg.data.shift.enabled {
            verify_pairs(&dataset, Split::TestShifted, cfg.eval.verify_pairs, seed)?
        } else {
            Vec::new()
        };
        Ok(Self {
            seed,
            dataset,
            teacher,
            clean_pairs,
            shifted_pairs,
        })
    }

    pub fn student(&self, run: &RunConfig) -> Result<Network> {
        let teacher = (run.mode != Mode::ScratchLr).then_some(&self.teacher);
        Ok(distill_student(run, &self.dataset, teacher, None)?.network)
    }

    pub fn clean_accuracy(&self, net: &Network) -> Result<EvalReport> {
        evaluate_verification(net, &self.dataset, &self.clean_pairs, None)
    }

    pub fn shifted_accuracy(&self, net: &Network) -> Result<EvalReport> {
        if self.shifted_pairs.is_empty() {
            return Err(Error::Config(
                "the dataset has no shifted test split".into(),
            ));
        }
        evaluate_verification(net, &self.dataset, &self.shifted_pairs, None)
    }

    /// BN statistics re-estimated on the unlabeled shifted test images.
    pub fn adapt(&self, net: &Network, settings: &AdaptSettings) -> Result<Network> {
        let idx = self.dataset.indices(Split::TestShifted);
        if idx.is_empty() {
            return Err(Error::Config(
                "the dataset has no shifted test split".into(),
            ));
        }
        let images = self.dataset.lr_batch(&idx)?;
        adapt_network(
            net,
            gallery_batches(&images, settings.batch_size)?,
            &settings.to_config(),
        )
    }
}

/// One seed of the baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSeed {
    pub seed: u64,
    pub scratch: EvalReport,
    pub kd: EvalReport,
    pub aird: EvalReport,
    pub aird_shifted: EvalReport,
    pub aird_facebn: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<BenchmarkSeed>,
    pub scratch: f64,
    pub kd: f64,
    pub aird: f64,
    pub aird_shifted: f64,
    pub aird_facebn: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn run_benchmark(cfg: &PipelineConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds);
    for k in 0..cfg.seeds {
        let seed = cfg.seed_at(k);
        let ctx = SeedContext::prepare(cfg, seed)?;
        let scratch = ctx.student(&cfg.student_run(seed, Mode::ScratchLr))?;
        let kd = ctx.student(&cfg.student_run(seed, Mode::VanillaKd))?;
        let aird = ctx.student(&cfg.student_run(seed, Mode::Aird))?;
        let adapted = ctx.adapt(&aird, &cfg.adapt)?;
        let row = BenchmarkSeed {
            seed,
            scratch: ctx.clean_accuracy(&scratch)?,
            kd: ctx.clean_accuracy(&kd)?,
            aird: ctx.clean_accuracy(&aird)?,
            aird_shifted: ctx.shifted_accuracy(&aird)?,
            aird_facebn: ctx.shifted_accuracy(&adapted)?,
        };
        log::info!(
            "seed {seed}: scratch {:.4} kd {:.4} aird {:.4} shifted {:.4} facebn {:.4}",
            row.scratch.accuracy,
            row.kd.accuracy,
            row.aird.accuracy,
            row.aird_shifted.accuracy,
            row.aird_facebn.accuracy
        );
        seeds.push(row);
    }
    Ok(BenchmarkReport {
        scratch: mean(seeds.iter().map(|s| s.scratch.accuracy)),
        kd: mean(seeds.iter().map(|s| s.kd.accuracy)),
        aird: mean(seeds.iter().map(|s| s.aird.accuracy)),
        aird_shifted: mean(seeds.iter().map(|s| s.aird_shifted.accuracy)),
        aird_facebn: mean(seeds.iter().map(|s| s.aird_facebn.accuracy)),
        seeds,
    })
}

/// One configuration of the component grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub ild: bool,
    pub rld: bool,
    pub facebn: bool,
}

impl Components {
    /// Cls only, then adding IlD, RlD and FaceBN in turn.
    pub const STANDARD: [Components; 4] = [
        Components {
            ild: false,
            rld: false,
            facebn: false,
        },
        Components {
            ild: true,
            rld: false,
            facebn: false,
        },
        Components {
            ild: true,
            rld: true,
            facebn: false,
        },
        Components {
            ild: true,
            rld: true,
            facebn: true,
        },
    ];

    pub fn label(&self) -> String {
        let mut s = String::from("cls");
        for (on, name) in [
            (self.ild, "ild"),
            (self.rld, "rld"),
            (self.facebn, "facebn"),
        ] {
            if on {
                s.push('+');
                s.push_str(name);
            }
        }
        s
    }

    fn run(&self, base: &PipelineConfig, seed: u64) -> RunConfig {
        if !self.ild && !self.rld {
            return base.student_run(seed, Mode::ScratchLr);
        }
        let mut run = base.student_run(seed, Mode::Aird);
        if !self.ild {
            run.alpha = 0.0;
        }
        if !self.rld {
            run.beta = 0.0;
        }
        run
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: Components,
    /// Verification accuracy on the clean test split, mean over seeds.
    pub clean: f64,
    /// Verification accuracy on the shifted test split, mean over seeds.
    pub shifted: f64,
    pub clean_per_seed: Vec<f64>,
    pub shifted_per_seed: Vec<f64>,
}

/// Trains each grid entry on every seed. Entries differing only in FaceBN
/// share the trained student.
pub fn run_ablation(cfg: &PipelineConfig, grid: &[Components]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut rows: Vec<AblationRow> = grid
        .iter()
        .map(|&components| AblationRow {
            components,
            clean: 0.0,
            shifted: 0.0,
            clean_per_seed: Vec::new(),
            shifted_per_seed: Vec::new(),
        })
        .collect();
    for k in 0..cfg.seeds {
        let seed = cfg.seed_at(k);
        let ctx = SeedContext::prepare(cfg, seed)?;
        let mut trained: Vec<((bool, bool), Network)> = Vec::new();
        for row in rows.iter_mut() {
            let c = row.components;
            let key = (c.ild, c.rld);
            let net = match trained.iter().find(|(k, _)| *k == key) {
                Some((_, n)) => n.clone(),
                None => {
                    let n = ctx.student(&c.run(cfg, seed))?;
                    trained.push((key, n.clone()));
                    n
                }
            };
            let net = if c.facebn {
                ctx.adapt(&net, &cfg.adapt)?
            } else {
                net
            };
            row.clean_per_seed.push(ctx.clean_accuracy(&net)?.accuracy);
            row.shifted_per_seed
                .push(ctx.shifted_accuracy(&net)?.accuracy);
        }
    }
    for row in rows.iter_mut() {
        row.clean = mean(row.clean_per_seed.iter().copied());
        row.shifted = mean(row.shifted_per_seed.iter().copied());
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cls",
        "ild",
        "rld",
        "facebn",
        "label",
        "clean_accuracy",
        "shifted_accuracy",
    ])?;
    for r in rows {
        let c = r.components;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        w.write_record([
            "1".to_string(),
            flag(c.ild),
            flag(c.rld),
            flag(c.facebn),
            c.label(),
            format!("{:.6}", r.clean),
            format!("{:.6}", r.shifted),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_neg: usize,
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
    /// Distillation wall time summed over seeds, mining included.
    pub seconds: f64,
}

/// AIRD students trained with each negative count. Every `n` must be below
/// the smallest number of differently-labelled training samples.
pub fn negative_count_sweep(cfg: &PipelineConfig, n_values: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if n_values.is_empty() {
        return Err(Error::Config("no negative counts to sweep".into()));
    }
    let train_per_id = cfg.data.samples_per_id - cfg.data.test_per_id;
    let cross = train_per_id * (cfg.data.num_ids - 1);
    if let Some(&n) = n_values.iter().find(|&&n| n == 0 || n >= cross) {
        return Err(Error::Config(format!(
            "negative count {n} must lie in 1..{cross} (differently-labelled training samples per anchor)"
        )));
    }
    let mut rows: Vec<SweepRow> = n_values
        .iter()
        .map(|&n_neg| SweepRow {
            n_neg,
            accuracy: 0.0,
            per_seed: Vec::new(),
            seconds: 0.0,
        })
        .collect();
    for k in 0..cfg.seeds {
        let seed = cfg.seed_at(k);
        let ctx = SeedContext::prepare(cfg, seed)?;
        for row in rows.iter_mut() {
            let run = RunConfig {
                n_neg: row.n_neg,
                ..cfg.student_run(seed, Mode::Aird)
            };
            let start = Instant::now();
            let pairs = mine_dataset_pairs(&ctx.teacher, &ctx.dataset, row.n_neg)?;
            let net =
                distill_student(&run, &ctx.dataset, Some(&ctx.teacher), Some(&pairs))?.network;
            row.seconds += start.elapsed().as_secs_f64();
            row.per_seed.push(ctx.clean_accuracy(&net)?.accuracy);
        }
    }
    for row in rows.iter_mut() {
        row.accuracy = mean(row.per_seed.iter().copied());
    }
    Ok(rows)
}

/// Timing is excluded so the table is reproducible.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n_neg", "accuracy"])?;
    for r in rows {
        w.write_record([r.n_neg.to_string(), format!("{:.6}", r.accuracy)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ShiftConfig;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig {
            seeds: 1,
            data: DataConfig {
                num_ids: 3,
                samples_per_id: 8,
                test_per_id: 4,
                ..DataConfig::default()
            },
            eval: EvalSettings {
                verify_pairs: 12,
                ..EvalSettings::default()
            },
            ..PipelineConfig::default()
        };
        for run in [&mut cfg.teacher, &mut cfg.student] {
            run.epochs = 2;
            run.milestones = vec![1];
            run.batch_size = 6;
        }
        cfg.student.n_neg = 2;
        cfg
    }

    #[test]
    fn config_round_trips() {
        let cfg = tiny();
        let back = PipelineConfig::from_text(Some(&cfg.to_text().unwrap()), &[]).unwrap();
        assert_eq!(back, cfg);
        let over = vec![config::parse_override("student.beta=0.5").unwrap()];
        assert_eq!(
            PipelineConfig::from_text(None, &over).unwrap().student.beta,
            0.5
        );
        let bad = vec![config::parse_override("teacher.mode=aird").unwrap()];
        assert!(PipelineConfig::from_text(None, &bad).is_err());
    }

    #[test]
    fn single_entry_grid_gives_one_row() {
        let rows = run_ablation(&tiny(), &Components::STANDARD[3..]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].components.label(), "cls+ild+rld+facebn");
        assert_eq!(ablation_csv(&rows).unwrap().lines().count(), 2);
        assert!(run_ablation(&tiny(), &[]).is_err());
    }

    #[test]
    fn sweep_bounds_and_single_row() {
        let cfg = tiny();
        let rows = negative_count_sweep(&cfg, &[2]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(negative_count_sweep(&cfg, &[8]).is_err());
    }

    #[test]
    fn shift_is_required_for_adaptation_rows() {
        let mut cfg = tiny();
        cfg.data.shift = ShiftConfig::none();
        assert!(run_ablation(&cfg, &Components::STANDARD[..1]).is_err());
    }
}
