//! One function per verb. Each loads its inputs, runs the stage and
//! commits the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aird::config::parse_override;
use aird::distill::pairs as pair_file;
use aird::eval::{
    evaluate_identification, evaluate_verification, pair_scores, EvalMode, EvalReport,
    FinetuneConfig, HrSide,
};
use aird::facebn::{adapt_network, diagnostics, gallery_batches};
use aird::nn::{checkpoint, Network};
use aird::study::{
    ablation_csv, negative_count_sweep, run_ablation, sweep_csv, Components, PipelineConfig,
};
use aird::synth::{
    build_identify, build_verify, generate_dataset, load_dataset, protocol, save_dataset, Dataset,
    Protocol, Split, VerifyPair,
};
use aird::train::{curve_csv, distill_student, mine_dataset_pairs, Mode};
use aird::Error;
use serde::Serialize;

use crate::run::{artifact, default_out, io_err, CliError, CliResult, RunDir};
use crate::{Common, Named};

pub const DATASET_DIR: &str = "dataset";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const PAIRS_FILE: &str = "pairs.bin";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.cfg";

fn protocol_file(split: Split) -> &'static str {
    match split {
        Split::Train => "verify_train.txt",
        Split::Test => "verify_test.txt",
        Split::TestShifted => "verify_test_shifted.txt",
    }
}

const IDENTIFY_FILE: &str = "identify_test.txt";

fn load_config(common: &Common) -> CliResult<PipelineConfig> {
    let text = match &common.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::MissingArtifact(p.clone()).into());
            }
            Some(fs::read_to_string(p).map_err(|e| io_err(p, e))?)
        }
        None => None,
    };
    let mut overrides = common
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(PipelineConfig::from_text(text.as_deref(), &overrides)?)
}

fn start(verb: &'static str, common: &Common, cfg: &PipelineConfig) -> CliResult<RunDir> {
    let out = common.out.clone().unwrap_or_else(|| default_out(verb));
    let run = RunDir::create(verb, out, common.force)?;
    run.write(CONFIG_FILE, cfg.to_text()?)?;
    Ok(run)
}

fn finish(run: RunDir, cfg: &PipelineConfig) -> CliResult<PathBuf> {
    run.finish(cfg.seed, cfg)
}

fn load_data(run: &mut RunDir, path: &Path) -> CliResult<Dataset> {
    run.input("data", path);
    let nested = path.join(DATASET_DIR);
    let dir = if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    };
    Ok(load_dataset(&dir)?)
}

fn load_net(run: &mut RunDir, role: &str, path: &Path, default: &str) -> CliResult<Network> {
    let p = artifact(path, default)?;
    run.input(role, &p);
    Ok(checkpoint::load(&p)?)
}

fn write_net(run: &RunDir, name: &str, net: &Network) -> CliResult<()> {
    run.write(name, checkpoint::to_bytes(net))
}

fn verify_pairs(
    data: &Path,
    ds: &Dataset,
    split: Split,
    cfg: &PipelineConfig,
) -> CliResult<Vec<VerifyPair>> {
    let stored = data.join(protocol_file(split));
    let p = if stored.is_file() {
        protocol::load(&stored)?
    } else {
        build_verify(ds, split, cfg.eval.verify_pairs, ds.seed)?
    };
    match p {
        Protocol::Verify(pairs) => Ok(pairs),
        Protocol::Identify { .. } => Err(Error::Protocol(format!(
            "{} is not a verification protocol",
            stored.display()
        ))
        .into()),
    }
}

pub fn gen_data(common: &Common) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let run = start("gen-data", common, &cfg)?;
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    save_dataset(&ds, &run.path(DATASET_DIR))?;
    let mut splits = vec![Split::Test];
    if cfg.data.shift.enabled {
        splits.push(Split::TestShifted);
    }
    for split in splits {
        let p = build_verify(&ds, split, cfg.eval.verify_pairs, cfg.seed)?;
        run.write(protocol_file(split), protocol::to_text(&p))?;
    }
    let id = build_identify(&ds, Split::Test, cfg.eval.gallery_per_id, cfg.seed)?;
    run.write(IDENTIFY_FILE, protocol::to_text(&id))?;
    finish(run, &cfg)
}

pub fn train_teacher(common: &Common, data: &Path) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let mut run = start("train-teacher", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let out = aird::train::train_teacher(&cfg.teacher_run(cfg.seed), &ds)?;
    write_net(&run, TEACHER_FILE, &out.network)?;
    run.write("curve.csv", curve_csv(&out.curve)?)?;
    finish(run, &cfg)
}

pub fn mine_pairs(common: &Common, data: &Path, teacher: &Path) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let mut run = start("mine-pairs", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let t = load_net(&mut run, "teacher", teacher, TEACHER_FILE)?;
    let pairs = mine_dataset_pairs(&t, &ds, cfg.student.n_neg)?;
    run.write(PAIRS_FILE, pair_file::to_bytes(&pairs))?;
    finish(run, &cfg)
}

pub fn distill(
    common: &Common,
    data: &Path,
    teacher: Option<&Path>,
    pairs: Option<&Path>,
    mode: Option<Mode>,
) -> CliResult<PathBuf> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.student.mode = m;
    }
    let run_cfg = cfg.student_run(cfg.seed, cfg.student.mode);
    if run_cfg.mode == Mode::Teacher {
        return Err(CliError::Usage(
            "distill trains students; use train-teacher for the teacher".into(),
        ));
    }
    let needs_teacher = run_cfg.mode != Mode::ScratchLr;
    let teacher_path = teacher.map_or_else(|| PathBuf::from(TEACHER_FILE), Path::to_path_buf);
    // Inputs are checked before the output directory is claimed.
    if needs_teacher && artifact(&teacher_path, TEACHER_FILE).is_err() {
        return Err(CliError::Usage(format!(
            "{} mode needs a teacher checkpoint, but {} does not exist; run train-teacher first or pass --teacher",
            run_cfg.mode,
            teacher_path.display()
        )));
    }
    if let Some(p) = pairs {
        artifact(p, PAIRS_FILE)?;
    }
    let mut run = start("distill", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let t = if needs_teacher {
        Some(load_net(&mut run, "teacher", &teacher_path, TEACHER_FILE)?)
    } else {
        None
    };
    let mined = match pairs {
        Some(p) if run_cfg.mode == Mode::Aird => {
            let p = artifact(p, PAIRS_FILE)?;
            run.input("pairs", &p);
            Some(pair_file::load(&p)?)
        }
        _ => None,
    };
    let out = distill_student(&run_cfg, &ds, t.as_ref(), mined.as_ref())?;
    write_net(&run, STUDENT_FILE, &out.network)?;
    run.write("curve.csv", curve_csv(&out.curve)?)?;
    finish(run, &cfg)
}

pub fn adapt(common: &Common, data: &Path, student: &Path, split: Split) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let mut run = start("adapt", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let net = load_net(&mut run, "student", student, STUDENT_FILE)?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("the dataset has no {split:?} samples")).into());
    }
    let adapt_cfg = cfg.adapt.to_config();
    let batches = gallery_batches(&ds.lr_batch(&idx)?, adapt_cfg.batch_size)?;
    let used = adapt_cfg
        .num_batches
        .map_or(batches.len(), |n| n.min(batches.len()));
    let adapted = adapt_network(&net, batches, &adapt_cfg)?;
    write_net(&run, STUDENT_FILE, &adapted)?;
    run.write_json(
        "diagnostics.json",
        &diagnostics(&net, &adapted, &adapt_cfg, used),
    )?;
    finish(run, &cfg)
}

#[derive(Serialize)]
struct NamedReport {
    split: Split,
    checkpoint: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct Summary {
    accuracy: BTreeMap<String, f64>,
    reports: BTreeMap<String, NamedReport>,
}

fn check_names(named: &[&Named]) -> CliResult<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in named {
        if !seen.insert(&n.name) {
            return Err(CliError::Usage(format!(
                "student name {:?} given twice",
                n.name
            )));
        }
    }
    Ok(())
}

pub fn eval_verify(
    common: &Common,
    data: &Path,
    clean: &[Named],
    shifted: &[Named],
    lrhr: bool,
    teacher: Option<&Path>,
) -> CliResult<PathBuf> {
    if clean.is_empty() && shifted.is_empty() {
        return Err(CliError::Usage(
            "give at least one --student or --shifted checkpoint".into(),
        ));
    }
    check_names(&clean.iter().chain(shifted).collect::<Vec<_>>())?;
    let cfg = load_config(common)?;
    if lrhr && teacher.is_none() && !cfg.eval.student_only {
        return Err(CliError::Usage(
            "--lrhr needs --teacher unless eval.student_only is set".into(),
        ));
    }
    let mut run = start("eval-verify", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let t = match teacher {
        Some(p) if lrhr && !cfg.eval.student_only => {
            Some(load_net(&mut run, "teacher", p, TEACHER_FILE)?)
        }
        _ => None,
    };
    let hr = match (&t, lrhr) {
        (Some(t), _) => Some(HrSide::Teacher(t)),
        (None, true) => Some(HrSide::StudentOnly),
        (None, false) => None,
    };
    let data_dir = data.to_path_buf();
    let mut summary = Summary {
        accuracy: BTreeMap::new(),
        reports: BTreeMap::new(),
    };
    for (split, group) in [(Split::Test, clean), (Split::TestShifted, shifted)] {
        if group.is_empty() {
            continue;
        }
        let pairs = verify_pairs(&data_dir, &ds, split, &cfg)?;
        for n in group {
            let p = artifact(&n.path, STUDENT_FILE)?;
            run.input(&n.name, &p);
            let net = checkpoint::load(&p)?;
            let report = evaluate_verification(&net, &ds, &pairs, hr)?;
            log::info!("{}: {split:?} accuracy {:.4}", n.name, report.accuracy);
            summary.accuracy.insert(n.name.clone(), report.accuracy);
            summary.reports.insert(
                n.name.clone(),
                NamedReport {
                    split,
                    checkpoint: p.display().to_string(),
                    report,
                },
            );
        }
    }
    run.write_json(REPORT_FILE, &summary)?;
    finish(run, &cfg)
}

pub fn eval_identify(
    common: &Common,
    data: &Path,
    students: &[Named],
    protocol_path: Option<&Path>,
    ks: &[usize],
) -> CliResult<PathBuf> {
    check_names(&students.iter().collect::<Vec<_>>())?;
    let cfg = load_config(common)?;
    let mut run = start("eval-identify", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let stored = protocol_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.join(IDENTIFY_FILE));
    let proto = if stored.is_file() {
        run.input("protocol", &stored);
        protocol::load(&stored)?
    } else if protocol_path.is_some() {
        return Err(Error::MissingArtifact(stored).into());
    } else {
        build_identify(&ds, Split::Test, cfg.eval.gallery_per_id, ds.seed)?
    };
    let Protocol::Identify { gallery, probes } = proto else {
        return Err(Error::Protocol(format!(
            "{} is not an identification protocol",
            stored.display()
        ))
        .into());
    };
    let finetune = cfg.eval.finetune.then(FinetuneConfig::default);
    let mut summary = Summary {
        accuracy: BTreeMap::new(),
        reports: BTreeMap::new(),
    };
    for n in students {
        let p = artifact(&n.path, STUDENT_FILE)?;
        run.input(&n.name, &p);
        let net = checkpoint::load(&p)?;
        let report = evaluate_identification(&net, &ds, &gallery, &probes, ks, finetune.as_ref())?;
        summary.accuracy.insert(n.name.clone(), report.accuracy);
        summary.reports.insert(
            n.name.clone(),
            NamedReport {
                split: Split::Test,
                checkpoint: p.display().to_string(),
                report,
            },
        );
    }
    run.write_json(REPORT_FILE, &summary)?;
    finish(run, &cfg)
}

pub fn ablate(common: &Common) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let run = start("ablate", common, &cfg)?;
    let rows = run_ablation(&cfg, &Components::STANDARD)?;
    run.write("ablation.csv", ablation_csv(&rows)?)?;
    run.write_json(REPORT_FILE, &rows)?;
    finish(run, &cfg)
}

pub fn sweep_negatives(common: &Common) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let run = start("sweep-negatives", common, &cfg)?;
    let rows = negative_count_sweep(&cfg, &cfg.sweep_negatives)?;
    run.write("sweep.csv", sweep_csv(&rows)?)?;
    // Timings differ between runs, so they stay out of the CSV.
    run.write_json("timing.json", &rows)?;
    finish(run, &cfg)
}

pub fn export_scores(
    common: &Common,
    data: &Path,
    student: &Path,
    split: Split,
    teacher: Option<&Path>,
) -> CliResult<PathBuf> {
    let cfg = load_config(common)?;
    let mut run = start("export-scores", common, &cfg)?;
    let ds = load_data(&mut run, data)?;
    let net = load_net(&mut run, "student", student, STUDENT_FILE)?;
    let t = teacher
        .map(|p| load_net(&mut run, "teacher", p, TEACHER_FILE))
        .transpose()?;
    let pairs = verify_pairs(data, &ds, split, &cfg)?;
    let scores = pair_scores(&net, &ds, &pairs, t.as_ref().map(HrSide::Teacher))?;
    let mut csv = String::from("a,b,same,score\n");
    for (p, s) in pairs.iter().zip(&scores) {
        csv.push_str(&format!("{},{},{},{s}\n", p.a, p.b, u8::from(p.same)));
    }
    run.write("scores.csv", csv)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    let mode = if t.is_some() {
        EvalMode::VerifyLrhr
    } else {
        EvalMode::VerifyLrlr
    };
    let report = EvalReport::from_scores(mode, &scores, &same)?;
    if let Some(h) = &report.histogram {
        run.write("histogram.csv", h.to_csv()?)?;
    }
    finish(run, &cfg)
}
