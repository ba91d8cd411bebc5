use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use log::info;
use mtid_core::classifier::{train_classifier, TaskClassifier};
use mtid_core::interpolation::InterpolationStrategy;
use mtid_core::metrics::{uncertainty_metrics, write_plan_file, PlanEvalReport, PlanRecord};
use mtid_core::objective::TaskScopes;
use mtid_core::pipeline::{
    goal_groups, sample_plans, train_diffusion, Checkpoint, MaskMode, SampleOptions, StepLog, TaskSource,
};
use mtid_core::store::MANIFEST_FILE;
use mtid_core::synthworld::{Dataset, Part, MAX_HORIZON, MIN_HORIZON};
use mtid_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::plot;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CLASSIFIER_CURVE_FILE: &str = "classifier_curve.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PLANS_FILE: &str = "plans.tsv";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InfeasibleWorld(_) | Error::UnsplittableTask { .. } | Error::StepOutOfRange { .. } => 2,
        Error::TraceTooShort { .. }
        | Error::Shape(_)
        | Error::Empty(_)
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Checksum { .. }
        | Error::Malformed { .. }
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Tensor(_) => 1,
    }
}

fn run_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Malformed {
            path: dir.to_path_buf(),
            reason: "no dataset manifest; run gen-data first".into(),
        });
    }
    Dataset::load(dir)
}

/// Accepts either an archive directory or a run directory holding one under
/// `checkpoint/`.
fn archive_dir(dir: &Path) -> PathBuf {
    if dir.join(MANIFEST_FILE).exists() {
        dir.to_path_buf()
    } else {
        dir.join(CHECKPOINT_DIR)
    }
}

/// Writes the archive beside the old one and swaps it in, so an interrupt
/// never leaves a half-written checkpoint behind.
fn replace_dir(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    write(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let ds = Dataset::build(&cfg.world, cfg.train_fraction)?;
    replace_dir(out, |d| ds.save(d))?;
    cfg.write(out)?;
    let w = &ds.world;
    println!(
        "dataset {}: {} tasks, {} actions, {} traces ({} train / {} test)",
        out.display(),
        w.spec.num_tasks,
        w.spec.num_actions,
        w.traces.len(),
        ds.split.train.len(),
        ds.split.test.len()
    );
    for t in MIN_HORIZON..=MAX_HORIZON {
        println!(
            "  T={t}: {} train / {} test instances",
            ds.instances(t, Part::Train)?.len(),
            ds.instances(t, Part::Test)?.len()
        );
    }
    Ok(ds)
}

pub fn cmd_train_classifier(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TaskClassifier> {
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let train = ds.instances(cfg.horizon, Part::Train)?;
    let heldout = ds.instances(cfg.horizon, Part::Test)?;
    let (model, curve) = train_classifier(&train, &heldout, &cfg.classifier_config(&ds.world.spec))?;
    fs::create_dir_all(out)?;
    replace_dir(&out.join(CHECKPOINT_DIR), |d| model.save(d, run_json(cfg)?))?;
    let mut w = csv::Writer::from_path(out.join(CLASSIFIER_CURVE_FILE)).map_err(csv_err)?;
    for row in &curve {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    cfg.write(out)?;
    if let Some(last) = curve.last() {
        println!("classifier: held-out accuracy {:.4} after {} epochs", last.heldout_accuracy, curve.len());
    }
    Ok(model)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Loss-curve rows logged before `step`, for continuing a curve on resume.
fn read_curve_before(path: &Path, step: usize) -> Result<Vec<StepLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for row in r.deserialize::<StepLog>() {
        let row = row.map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if row.step < step {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn write_curve(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub classifier: Option<&'a Path>,
    pub resume: bool,
    /// Stop (with a checkpoint) before the configured total.
    pub stop_at: Option<usize>,
    pub out: &'a Path,
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<Checkpoint> {
    cfg.validate()?;
    let ds = load_dataset(args.data)?;
    let model_cfg = cfg.model_config(&ds.world.spec)?;
    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    let curve_path = args.out.join(LOSS_CURVE_FILE);

    let mut ckpt = if args.resume && ckpt_dir.join(MANIFEST_FILE).exists() {
        let ckpt = Checkpoint::load(&ckpt_dir)?;
        if ckpt.train != cfg.train || *ckpt.model.config() != model_cfg {
            return Err(Error::config("resumed checkpoint was trained with a different configuration"));
        }
        info!("resuming from step {}", ckpt.step);
        ckpt
    } else {
        let scopes = TaskScopes::new(ds.world.spec.num_actions, ds.world.scopes.clone())?;
        Checkpoint::new(&model_cfg, &cfg.train, scopes, DType::F32)?
    };
    if let Some(dir) = args.classifier {
        let c = TaskClassifier::load(archive_dir(dir))?;
        if c.config().num_tasks != model_cfg.dims.num_tasks || c.config().obs_dim != model_cfg.dims.obs_dim {
            return Err(Error::shape("classifier was trained on a different world"));
        }
        ckpt.classifier = Some(c);
    }

    let train = ds.instances(cfg.horizon, Part::Train)?;
    fs::create_dir_all(args.out)?;
    cfg.write(args.out)?;
    let mut curve = read_curve_before(&curve_path, ckpt.step)?;
    let stop = args.stop_at.unwrap_or(usize::MAX).min(cfg.train.total_steps);
    let started = Instant::now();
    while ckpt.step < stop {
        let boundary = ((ckpt.step / cfg.checkpoint_every) + 1) * cfg.checkpoint_every;
        let logs = train_diffusion(&train, &mut ckpt, boundary.min(stop), |l| {
            info!("step {} lr {:.2e} loss {:.5}", l.step, l.lr, l.loss)
        })?;
        curve.extend(logs);
        replace_dir(&ckpt_dir, |d| ckpt.save(d, run_json(cfg)?))?;
        write_curve(&curve_path, &curve)?;
    }
    if !ckpt_dir.join(MANIFEST_FILE).exists() {
        replace_dir(&ckpt_dir, |d| ckpt.save(d, run_json(cfg)?))?;
        write_curve(&curve_path, &curve)?;
    }
    println!(
        "trained to step {} of {} in {:.1}s; final loss {}",
        ckpt.step,
        cfg.train.total_steps,
        started.elapsed().as_secs_f64(),
        curve.last().map(|l| format!("{:.5}", l.loss)).unwrap_or_else(|| "n/a".into())
    );
    Ok(ckpt)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    /// Horizon requested on the command line, checked against the checkpoint.
    pub horizon: Option<usize>,
    pub out: &'a Path,
}

pub fn mask_mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Init => "init",
        MaskMode::Iteration => "iteration",
        MaskMode::None => "none",
    }
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<PlanEvalReport> {
    let ckpt = Checkpoint::load(archive_dir(args.checkpoint))?;
    let dims = ckpt.model.config().dims;
    if let Some(h) = args.horizon {
        if h != dims.horizon {
            return Err(Error::shape(format!("checkpoint plans horizon {}, requested {h}", dims.horizon)));
        }
    }
    let ds = load_dataset(args.data)?;
    let spec = &ds.world.spec;
    if (spec.num_tasks, spec.num_actions, spec.obs_dim) != (dims.num_tasks, dims.num_actions, dims.obs_dim) {
        return Err(Error::shape(format!(
            "dataset world ({}, {}, {}) does not match checkpoint ({}, {}, {})",
            spec.num_tasks, spec.num_actions, spec.obs_dim, dims.num_tasks, dims.num_actions, dims.obs_dim
        )));
    }
    let test = ds.instances(dims.horizon, Part::Test)?;
    if test.is_empty() {
        return Err(Error::Empty(format!("no test instances at horizon {}", dims.horizon)));
    }
    let gt: Vec<Vec<usize>> = test.iter().map(|i| i.actions.clone()).collect();
    let given: Vec<usize> = test.iter().map(|i| i.task_id).collect();
    let tasks = if cfg.eval.oracle_tasks {
        TaskSource::Given(&given)
    } else {
        match &ckpt.classifier {
            Some(c) => {
                println!("classifier accuracy {:.4}", c.accuracy(&test)?);
                TaskSource::Classifier(c)
            }
            None => {
                return Err(Error::config(
                    "checkpoint has no task classifier; train with --classifier or pass --oracle-tasks",
                ))
            }
        }
    };

    let ddim_steps = cfg.eval.ddim_steps.unwrap_or(ckpt.train.ddim_steps);
    let opts = SampleOptions {
        mask_mode: cfg.eval.mask_mode,
        ddim_steps,
        num_samples: 1,
        seed: cfg.eval.sample_seed,
        ..SampleOptions::default()
    };
    let t0 = Instant::now();
    let plans = sample_plans(&test, &ckpt, tasks, &opts)?;
    let seconds = t0.elapsed().as_secs_f64();
    let first: Vec<Vec<usize>> = plans.iter().map(|p| p[0].clone()).collect();
    let label = format!("{}/ddim-{ddim_steps}", mask_mode_name(cfg.eval.mask_mode));
    let mut report = PlanEvalReport::evaluate(label, &first, &gt)?;
    report.sampling_seconds = Some(seconds);

    let mut records: Vec<PlanRecord> = test
        .iter()
        .enumerate()
        .zip(plans)
        .map(|((id, inst), pred)| PlanRecord {
            instance_id: id,
            horizon: inst.horizon,
            gt: inst.actions.clone(),
            pred,
        })
        .collect();
    if let Some(k) = cfg.eval.uncertainty {
        let many = sample_plans(&test, &ckpt, tasks, &SampleOptions { num_samples: k, ..opts.clone() })?;
        report.uncertainty = Some(uncertainty_metrics(&goal_groups(&test, &many)?, k)?);
        for (r, p) in records.iter_mut().zip(many) {
            r.pred = p;
        }
    }

    fs::create_dir_all(args.out)?;
    report.save(args.out.join(REPORT_FILE))?;
    write_plan_file(args.out.join(PLANS_FILE), &records)?;
    cfg.write(args.out)?;
    println!(
        "{}: SR {:.4}  mAcc {:.4}  mIoU {:.4}  ({} instances, sampling {:.2}s)",
        report.label, report.sr, report.macc, report.miou, report.n_instances, seconds
    );
    if let Some(u) = &report.uncertainty {
        println!(
            "uncertainty (K={}): KL {:.4}  NLL {:.4}  ModePrec {:.4}  ModeRec {:.4}",
            u.samples_per_instance, u.kl_div, u.nll, u.mode_prec, u.mode_rec
        );
    }
    Ok(report)
}

pub fn strategy_name(s: &InterpolationStrategy) -> String {
    match s {
        InterpolationStrategy::Learned => "learned".into(),
        InterpolationStrategy::CopyGoal => "copy-gs".into(),
        InterpolationStrategy::CopyLt => "copy-lt".into(),
        InterpolationStrategy::FixedLinear => "fixed-linear".into(),
        InterpolationStrategy::SecondInterpolation(i) => format!("second-interpolation-{i}"),
    }
}

fn enum_name<T: Serialize>(v: &T) -> Result<String> {
    match serde_json::to_value(v)? {
        serde_json::Value::String(s) => Ok(s),
        other => Ok(other.to_string()),
    }
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub loss: String,
    pub mask_loss: String,
    pub strategy: String,
    pub mask_mode: String,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    /// Relative to the sweep directory.
    pub report: PathBuf,
}

pub const SWEEP_SUMMARY_FILE: &str = "summary.json";

pub fn cmd_sweep(cfg: &RunConfig, data: &Path, classifier: Option<&Path>, out: &Path) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let m = &cfg.sweep;
    if m.losses.is_empty() || m.mask_losses.is_empty() || m.mask_modes.is_empty() || m.strategies.is_empty() {
        return Err(Error::config("every sweep axis needs at least one value"));
    }
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for &loss in &m.losses {
        for &mask_loss in &m.mask_losses {
            for strategy in &m.strategies {
                let (ln, mn, sn) = (enum_name(&loss)?, enum_name(&mask_loss)?, strategy_name(strategy));
                let dir = out.join(format!("{ln}_{mn}_{sn}"));
                let mut cell_cfg = cfg.clone();
                cell_cfg.train.loss = loss;
                cell_cfg.train.mask_loss = mask_loss;
                cell_cfg.interpolation.strategy = *strategy;
                cell_cfg.out = Some(dir.clone());
                info!("sweep cell {ln} / {mn} / {sn}");
                cmd_train(
                    &cell_cfg,
                    &TrainArgs {
                        data,
                        classifier,
                        resume: true,
                        stop_at: None,
                        out: &dir,
                    },
                )?;
                for &mode in &m.mask_modes {
                    let mut eval_cfg = cell_cfg.clone();
                    eval_cfg.eval.mask_mode = mode;
                    eval_cfg.eval.oracle_tasks |= classifier.is_none();
                    let rel = PathBuf::from(format!("{ln}_{mn}_{sn}"))
                        .join(format!("eval-{}", mask_mode_name(mode)))
                        .join(REPORT_FILE);
                    let eval_dir = dir.join(format!("eval-{}", mask_mode_name(mode)));
                    let mut report = cmd_eval(
                        &eval_cfg,
                        &EvalArgs {
                            checkpoint: &dir,
                            data,
                            horizon: None,
                            out: &eval_dir,
                        },
                    )?;
                    report.label = format!("{ln}/{mn}/{sn}/{}", mask_mode_name(mode));
                    report.save(eval_dir.join(REPORT_FILE))?;
                    cells.push(SweepCell {
                        loss: ln.clone(),
                        mask_loss: mn.clone(),
                        strategy: sn.clone(),
                        mask_mode: mask_mode_name(mode).into(),
                        sr: report.sr,
                        macc: report.macc,
                        miou: report.miou,
                        report: rel,
                    });
                    reports.push(report);
                }
            }
        }
    }
    fs::write(out.join(SWEEP_SUMMARY_FILE), serde_json::to_string_pretty(&cells)?)?;
    plot::metric_bars(&reports, &out.join(plot::METRICS_SVG))?;
    Ok(cells)
}

pub fn cmd_plot(reports: &[PathBuf], curves: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() && curves.is_empty() {
        return Err(Error::config("plot needs at least one report or curve file"));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if !reports.is_empty() {
        let loaded = reports.iter().map(PlanEvalReport::load).collect::<Result<Vec<_>>>()?;
        let path = out.join(plot::METRICS_SVG);
        plot::metric_bars(&loaded, &path)?;
        written.push(path);
    }
    if !curves.is_empty() {
        let series = curves.iter().map(|p| plot::read_curve(p)).collect::<Result<Vec<_>>>()?;
        let path = out.join(plot::CURVES_SVG);
        plot::curve_lines(&series, &path)?;
        written.push(path);
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}
