//! Teacher pretraining and student distillation loops.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Mode, NegativeRelation, RunConfig};
use super::kd::vanilla_kd_loss;
use crate::autograd::{Graph, Var};
use crate::distill::{
    ild_loss, mine_pairs, rld_loss, total_loss, Pair, PairRows, PairSet, RelationHeads, RldConfig,
};
use crate::error::{dim_err, Error, Result};
use crate::nn::functional::cross_entropy;
use crate::nn::margin::cosine_logits;
use crate::nn::network::CLASSIFIER_WEIGHT;
use crate::nn::optim::Sgd;
use crate::nn::{Architecture, Network};
use crate::rng::SeedStream;
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;

/// Per-epoch averages over batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub ild: f64,
    pub rld: f64,
    pub train_acc: f64,
    pub h_pos: f64,
    pub h_neg: f64,
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub network: Network,
    pub heads: Option<RelationHeads>,
    pub pairs: Option<PairSet>,
    pub curve: Vec<EpochStats>,
}

pub fn curve_csv(curve: &[EpochStats]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in curve {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Shuffled minibatches of positions `0..n`; a trailing batch smaller than
/// two samples is dropped because batch statistics need two.
fn epoch_batches(n: usize, batch_size: usize, stream: SeedStream, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.index(epoch as u64).rng("shuffle"));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Frozen teacher outputs on the training split.
struct TeacherView {
    feats: Tensor,
    logits: Tensor,
    local: HashMap<usize, usize>,
}

impl TeacherView {
    fn new(teacher: &Network, ds: &Dataset, train: &[usize]) -> Result<Self> {
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for chunk in train.chunks(64) {
            let (f, l) = teacher.forward_embed(&ds.hr_batch(chunk)?)?;
            feats.extend(f.into_data());
            logits.extend(l.into_data());
        }
        let n = train.len();
        Ok(Self {
            feats: Tensor::new(vec![n, teacher.embed_dim()], feats)?,
            logits: Tensor::new(vec![n, teacher.num_classes()], logits)?,
            local: train.iter().enumerate().map(|(l, &g)| (g, l)).collect(),
        })
    }
}

/// Mines pairs on teacher embeddings of the training split; indices in the
/// result refer to the whole dataset.
pub fn mine_dataset_pairs(teacher: &Network, ds: &Dataset, n_neg: usize) -> Result<PairSet> {
    check_teacher(teacher, ds)?;
    let train = ds.indices(Split::Train);
    let view = TeacherView::new(teacher, ds, &train)?;
    let local = mine_pairs(&view.feats, &ds.labels_of(&train), n_neg)?;
    let map = |p: &Pair| Pair {
        anchor: train[p.anchor as usize] as u32,
        other: train[p.other as usize] as u32,
        sim: p.sim,
    };
    PairSet::from_pairs(
        ds.len(),
        n_neg,
        local.positives.iter().map(map).collect(),
        local.negatives.iter().map(map).collect(),
    )
}

fn check_teacher(teacher: &Network, ds: &Dataset) -> Result<()> {
    let s = ds.config.hr_size;
    if teacher.input_shape() != [1, s, s] {
        return dim_err(format!(
            "teacher expects {:?} inputs, dataset HR images are [1, {s}, {s}]",
            teacher.input_shape()
        ));
    }
    if teacher.num_classes() != ds.num_classes() {
        return dim_err(format!(
            "teacher has {} classes, dataset {}",
            teacher.num_classes(),
            ds.num_classes()
        ));
    }
    Ok(())
}

fn check_resolutions(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (hr, lr) = (ds.config.hr_size, ds.config.lr_size());
    if cfg.hr_size != hr || cfg.lr_size != lr {
        return dim_err(format!(
            "resolution mismatch: config expects HR {} / LR {}, dataset has HR {hr} / LR {lr}",
            cfg.hr_size, cfg.lr_size
        ));
    }
    Ok(())
}

fn with_head(mut arch: Architecture, cfg: &RunConfig) -> Architecture {
    arch.classifier.margin = cfg.margin;
    arch.classifier.scale = cfg.scale;
    arch
}

/// Everything the student step needs from the teacher side.
struct DistillState<'a> {
    view: TeacherView,
    pairs: &'a PairSet,
    heads: RelationHeads,
    heads_opt: Sgd,
    negatives: NegativeRelation,
}

fn pair_rows(
    state: &DistillState,
    batch: &[usize],
    max_pos: usize,
) -> Result<(PairRows, PairRows)> {
    let (mut pos, mut neg) = (PairRows::default(), PairRows::default());
    let local =
        |g: u32| {
            state.view.local.get(&(g as usize)).copied().ok_or_else(|| {
                Error::Contract(format!("pair partner {g} is not a training sample"))
            })
        };
    for (row, &a) in batch.iter().enumerate() {
        let ps = state.pairs.positives_of(a);
        let take = if max_pos == 0 {
            ps.len()
        } else {
            max_pos.min(ps.len())
        };
        for p in &ps[..take] {
            pos.push(local(p.other)?, local(p.anchor)?, row);
        }
        match state.negatives {
            NegativeRelation::Partner => {
                for p in state.pairs.negatives_of(a) {
                    neg.push(local(p.other)?, local(p.anchor)?, row);
                }
            }
            NegativeRelation::Swapped => {
                for p in state.pairs.negatives_of(a) {
                    let reference = state
                        .pairs
                        .positives_of(p.other as usize)
                        .first()
                        .ok_or_else(|| {
                            Error::Contract(format!("negative {} has no positive partner", p.other))
                        })?;
                    neg.push(local(reference.other)?, local(p.other)?, row);
                }
            }
        }
    }
    Ok((pos, neg))
}

fn argmax_acc(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn item(g: &Graph, v: Option<Var>) -> f64 {
    v.map(|v| g.value(v).data()[0]).unwrap_or(0.0)
}

/// Shared SGD loop. `images` holds the network's inputs for every dataset
/// index; `train` lists the indices to fit.
fn fit(
    cfg: &RunConfig,
    net: &mut Network,
    images: &Tensor,
    ds: &Dataset,
    train: &[usize],
    mut distill: Option<DistillState>,
) -> Result<(Vec<EpochStats>, Option<RelationHeads>)> {
    let schedule = cfg.schedule();
    let order_stream = SeedStream::new(cfg.seed).child("batch-order");
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let (margin, scale) = (net.arch.classifier.margin, net.arch.classifier.scale);
    let rld_cfg = RldConfig {
        tau: cfg.tau,
        neg_weight: cfg.negative_weight(),
        reduction: cfg.reduction,
        offset: cfg.critic_offset,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.at_epoch(epoch);
        let mut stats = EpochStats {
            epoch,
            lr,
            ..EpochStats::default()
        };
        let batches = epoch_batches(train.len(), cfg.batch_size, order_stream, epoch);
        for (bi, positions) in batches.iter().enumerate() {
            let batch: Vec<usize> = positions.iter().map(|&p| train[p]).collect();
            let labels = ds.labels_of(&batch);
            let x = images.select(&batch)?;

            let mut g = Graph::new();
            let bound = net.params.bind(&mut g, |_| true);
            let head_bound = distill
                .as_ref()
                .map(|d| d.heads.params.bind(&mut g, |_| true));
            let f = net.forward_train(&mut g, &bound, &x)?;
            let cos = cosine_logits(&mut g, f, bound.var(CLASSIFIER_WEIGHT)?)?;
            let margin_logits = g.arc_margin(cos, &labels, margin, scale)?;
            let cls = cross_entropy(&mut g, margin_logits, &labels)?;
            let logits = g.scale(cos, scale);

            let (mut ild, mut rld) = (None, None);
            let mut weights = (0.0, 0.0);
            if let Some(d) = distill.as_ref() {
                let local: Vec<usize> = batch.iter().map(|b| d.view.local[b]).collect();
                let t_logits = d.view.logits.select(&local)?;
                match cfg.mode {
                    Mode::Aird => {
                        weights = (cfg.alpha, cfg.beta);
                        if cfg.alpha != 0.0 {
                            ild = Some(ild_loss(
                                &mut g,
                                &t_logits,
                                logits,
                                &labels,
                                cfg.temperature,
                            )?);
                        }
                        if cfg.beta != 0.0 {
                            let (pos, neg) = pair_rows(d, &batch, cfg.max_positives)?;
                            let out = rld_loss(
                                &mut g,
                                &d.heads,
                                head_bound.as_ref().expect("bound with heads"),
                                &d.view.feats,
                                f,
                                &pos,
                                &neg,
                                &rld_cfg,
                            )?;
                            stats.h_pos += out.mean_h_pos;
                            stats.h_neg += out.mean_h_neg;
                            stats.clamped += out.clamped;
                            rld = Some(out.loss);
                        }
                    }
                    Mode::VanillaKd => {
                        weights = (cfg.alpha, 0.0);
                        if cfg.alpha != 0.0 {
                            ild = Some(vanilla_kd_loss(
                                &mut g,
                                &t_logits,
                                logits,
                                cfg.kd_temperature,
                            )?);
                        }
                    }
                    Mode::Teacher | Mode::ScratchLr => {}
                }
            }
            let total = total_loss(&mut g, cls, ild, rld, weights.0, weights.1).map_err(|e| {
                Error::Diverged(format!(
                    "epoch {epoch} batch {bi}: {e} (cls {}, ild {}, rld {})",
                    item(&g, Some(cls)),
                    item(&g, ild),
                    item(&g, rld)
                ))
            })?;

            stats.loss += item(&g, Some(total));
            stats.cls += item(&g, Some(cls));
            stats.ild += item(&g, ild);
            stats.rld += item(&g, rld);
            stats.train_acc += argmax_acc(g.value(logits), &labels);

            let grads = g
                .backward(total)
                .map_err(|e| Error::Diverged(format!("epoch {epoch} batch {bi}: {e}")))?;
            opt.step(&mut net.params, &bound.gradients(&grads), lr)?;
            if let (Some(d), Some(hb)) = (distill.as_mut(), head_bound.as_ref()) {
                let hg = hb.gradients(&grads);
                d.heads_opt.step(&mut d.heads.params, &hg, lr)?;
            }
        }
        let n = batches.len().max(1) as f64;
        for v in [
            &mut stats.loss,
            &mut stats.cls,
            &mut stats.ild,
            &mut stats.rld,
            &mut stats.train_acc,
            &mut stats.h_pos,
            &mut stats.h_neg,
        ] {
            *v /= n;
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} cls {:.4} ild {:.4} rld {:.4} acc {:.3}",
            stats.loss,
            stats.cls,
            stats.ild,
            stats.rld,
            stats.train_acc
        );
        curve.push(stats);
    }
    Ok((curve, distill.map(|d| d.heads)))
}

/// Trains the high-resolution teacher with margin-softmax cross-entropy.
pub fn train_teacher(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode != Mode::Teacher {
        return Err(Error::Config(format!(
            "train_teacher needs mode teacher, got {}",
            cfg.mode
        )));
    }
    if cfg.hr_size != ds.config.hr_size {
        return dim_err(format!(
            "resolution mismatch: config HR {} vs dataset HR {}",
            cfg.hr_size, ds.config.hr_size
        ));
    }
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let arch = with_head(Architecture::teacher(cfg.hr_size, ds.num_classes()), cfg);
    let mut net = Network::init(arch, SeedStream::new(cfg.seed).child("teacher"))?;
    let (curve, _) = fit(cfg, &mut net, &ds.hr, ds, &train, None)?;
    Ok(TrainOutput {
        network: net,
        heads: None,
        pairs: None,
        curve,
    })
}

/// Trains the low-resolution student. Modes other than `scratch_lr` need
/// the teacher; `aird` mines pairs when none are supplied.
pub fn distill_student(
    cfg: &RunConfig,
    ds: &Dataset,
    teacher: Option<&Network>,
    pairs: Option<&PairSet>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode == Mode::Teacher {
        return Err(Error::Config(
            "distill_student cannot run in teacher mode".into(),
        ));
    }
    check_resolutions(cfg, ds)?;
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let arch = with_head(Architecture::student(cfg.lr_size, ds.num_classes()), cfg);
    let mut net = Network::init(arch, SeedStream::new(cfg.seed).child("student"))?;

    let needs_teacher = match cfg.mode {
        Mode::Aird => cfg.alpha != 0.0 || cfg.beta != 0.0,
        Mode::VanillaKd => cfg.alpha != 0.0,
        _ => false,
    };
    let mut mined = None;
    let distill = if needs_teacher {
        let teacher =
            teacher.ok_or_else(|| Error::Config(format!("mode {} needs a teacher", cfg.mode)))?;
        check_teacher(teacher, ds)?;
        if teacher.embed_dim() != net.embed_dim() {
            return dim_err(format!(
                "teacher embedding {} differs from student embedding {}",
                teacher.embed_dim(),
                net.embed_dim()
            ));
        }
        let view = TeacherView::new(teacher, ds, &train)?;
        let use_pairs = cfg.mode == Mode::Aird && cfg.beta != 0.0;
        if use_pairs && pairs.is_none() {
            mined = Some(mine_dataset_pairs(teacher, ds, cfg.n_neg)?);
        }
        let pairs = match (pairs, mined.as_ref()) {
            (Some(p), _) => {
                if p.num_samples != ds.len() {
                    return Err(Error::Config(format!(
                        "pair set covers {} samples, dataset has {}",
                        p.num_samples,
                        ds.len()
                    )));
                }
                p
            }
            (None, Some(m)) => m,
            (None, None) => EMPTY_PAIRS.get_or_init(empty_pairs),
        };
        let heads = RelationHeads::init(
            net.embed_dim(),
            cfg.rel_dim,
            &mut SeedStream::new(cfg.seed).child("relation").rng("init"),
        )?;
        Some(DistillState {
            view,
            pairs,
            heads,
            heads_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            negatives: cfg.negative_relation,
        })
    } else {
        None
    };
    let (curve, heads) = fit(cfg, &mut net, &ds.lr, ds, &train, distill)?;
    Ok(TrainOutput {
        network: net,
        heads,
        pairs: mined,
        curve,
    })
}

static EMPTY_PAIRS: std::sync::OnceLock<PairSet> = std::sync::OnceLock::new();

fn empty_pairs() -> PairSet {
    PairSet::from_pairs(0, 1, Vec::new(), Vec::new()).expect("empty pair set")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DataConfig, ShiftConfig};

    fn tiny() -> Dataset {
        let cfg = DataConfig {
            num_ids: 3,
            samples_per_id: 6,
            test_per_id: 2,
            shift: ShiftConfig::none(),
            ..DataConfig::default()
        };
        generate_dataset(&cfg, 7).unwrap()
    }

    fn quick(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            epochs: 2,
            batch_size: 6,
            milestones: vec![1],
            n_neg: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny();
        let cfg = RunConfig {
            epochs: 0,
            milestones: vec![],
            ..RunConfig::teacher()
        };
        let out = train_teacher(&cfg, &ds).unwrap();
        let mut arch = Architecture::teacher(32, 3);
        arch.classifier.scale = cfg.scale;
        let init = Network::init(arch, SeedStream::new(0).child("teacher")).unwrap();
        assert_eq!(out.network, init);
    }

    #[test]
    fn zero_weights_reduce_to_scratch() {
        let ds = tiny();
        let teacher = train_teacher(&quick(Mode::Teacher), &ds).unwrap().network;
        let scratch = distill_student(&quick(Mode::ScratchLr), &ds, None, None).unwrap();
        let zero = RunConfig {
            alpha: 0.0,
            beta: 0.0,
            ..quick(Mode::Aird)
        };
        let aird = distill_student(&zero, &ds, Some(&teacher), None).unwrap();
        assert_eq!(scratch.network, aird.network);
        assert_eq!(scratch.curve, aird.curve);
    }

    #[test]
    fn distillation_runs_and_leaves_teacher_alone() {
        let ds = tiny();
        let teacher = train_teacher(&quick(Mode::Teacher), &ds).unwrap().network;
        let before = teacher.digest();
        let out = distill_student(&quick(Mode::Aird), &ds, Some(&teacher), None).unwrap();
        assert_eq!(teacher.digest(), before);
        assert!(out.pairs.is_some() && out.heads.is_some());
        assert!(out.curve.iter().all(|e| e.rld > 0.0 && e.ild >= 0.0));
        let kd = distill_student(&quick(Mode::VanillaKd), &ds, Some(&teacher), None).unwrap();
        assert!(kd.curve[0].ild > 0.0);
    }

    #[test]
    fn missing_teacher_and_resolution_errors() {
        let ds = tiny();
        assert!(matches!(
            distill_student(&quick(Mode::Aird), &ds, None, None),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig {
            lr_size: 16,
            ..quick(Mode::ScratchLr)
        };
        assert!(matches!(
            distill_student(&cfg, &ds, None, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn curve_serializes() {
        let csv = curve_csv(&[EpochStats::default()]).unwrap();
        assert!(csv.starts_with("epoch,lr,loss,cls,ild,rld,train_acc"));
    }
}
