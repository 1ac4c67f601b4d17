//! Run orchestration: base training, incremental steps for the frozen-unit
//! method and both baselines, threshold sweeps, ablations and reports.
//!
//! A run lives in `<output root>/<run id>/`:
//!
//! ```text
//! manifest.jsonl   append-only records
//! config.toml      config snapshot
//! checkpoints/     base.ckpt, unit{t}.ckpt, finetune_step{t}.ckpt, joint_step{t}.ckpt
//! digests/         frozen-parameter digests after each step
//! logs/            per-epoch loss records
//! plots/ reports/ masks/
//! ```

pub mod config;
pub mod manifest;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use config::{output_root, DataSection, ExperimentConfig, Overrides, OUTPUT_ROOT_ENV};
pub use manifest::{ArtifactRef, Manifest, ManifestRecord, Method, RunDir, RunLock, TauSource, UnitSweep};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{
    eval_labels, export_dataset, filter_for_base, filter_for_step, labels_to_gray8, Dataset, TaskSchedule,
};
use crate::error::{Error, Result};
use crate::metrics::{render_trajectory_table, trajectory_report, ConfusionMatrix, MetricsReport, Trajectory};
use crate::model::{build_incremental_unit, build_model, ConnectionPoint, IncrementalUnit, SegmentationModel};
use crate::partition::{snapshot_frozen, verify_frozen, FrozenDigest, ParameterPartition};
use crate::routing::{
    default_tau_grid, predict_routed, roc_scores, sweep_scores, RoutingConfig, SweepRow, ThresholdSweep,
};
use crate::trainer::{
    train_base, train_finetune_baseline, train_incremental, train_joint_baseline, EpochLog, StepRecord, TrainOutcome,
};
use manifest::ScheduleSummary;
use plot::{line_chart_svg, Series};

// ----------------------------------------------------------------------------
// evaluation

fn matrix_size(schedule: &TaskSchedule) -> usize {
    schedule.universe().iter().map(|&c| c as usize + 1).max().unwrap_or(0)
}

fn report_from(schedule: &TaskSchedule, t: usize, confusion: ConfusionMatrix) -> Result<MetricsReport> {
    MetricsReport::from_confusion(
        t,
        confusion,
        &schedule.known_through(t),
        &schedule.base_classes,
        &schedule.novel_through(t),
    )
}

/// Metrics of the frozen model routed through `units` after step `t`;
/// classes not yet introduced are ignored in the ground truth.
pub fn evaluate_routed(
    model: &SegmentationModel,
    units: &[IncrementalUnit],
    test: &Dataset,
    schedule: &TaskSchedule,
    t: usize,
    routing: &RoutingConfig,
) -> Result<MetricsReport> {
    let known = schedule.known_through(t);
    let mut cm = ConfusionMatrix::new(matrix_size(schedule));
    for s in &test.samples {
        let routed = predict_routed(model, units, &s.image, routing)?;
        cm.accumulate(routed.label_map.view(), eval_labels(&s.labels, &known).view())?;
    }
    report_from(schedule, t, cm)
}

/// Metrics of a plain argmax model after step `t`.
pub fn evaluate_plain(
    model: &SegmentationModel,
    test: &Dataset,
    schedule: &TaskSchedule,
    t: usize,
) -> Result<MetricsReport> {
    let known = schedule.known_through(t);
    let mut cm = ConfusionMatrix::new(matrix_size(schedule));
    for s in &test.samples {
        let pred = model.predict(&s.image)?;
        cm.accumulate(pred.view(), eval_labels(&s.labels, &known).view())?;
    }
    report_from(schedule, t, cm)
}

/// Digest over every parameter of the model and units.
pub fn full_digest(model: &SegmentationModel, units: &[IncrementalUnit]) -> Result<FrozenDigest> {
    let partition = all_frozen(model, units);
    snapshot_frozen(model, units, &partition)
}

fn all_frozen(model: &SegmentationModel, units: &[IncrementalUnit]) -> ParameterPartition {
    let mut p = ParameterPartition::default();
    p.frozen_names.extend(model.params.names().cloned());
    for u in units {
        p.frozen_names.extend(u.params.names().cloned());
    }
    p
}

// ----------------------------------------------------------------------------
// helpers

fn schedule_summary(s: &TaskSchedule) -> ScheduleSummary {
    ScheduleSummary {
        protocol: s.protocol_name.clone(),
        base_classes: s.base_classes.clone(),
        steps: s.steps.iter().map(|st| st.novel.clone()).collect(),
    }
}

fn log_text(epochs: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in epochs {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

fn open_run(root: &Path, run_id: &str) -> Result<RunDir> {
    let run = RunDir::new(root, run_id)?;
    if !run.exists() {
        return Err(Error::Config(format!("no run `{run_id}` under {}", root.display())));
    }
    Ok(run)
}

/// Checkpoint named by a step entry, hash-checked.
fn step_checkpoint(run: &RunDir, manifest: &Manifest, method: Method, t: usize) -> Result<Checkpoint> {
    let entry = manifest
        .step(method, t)
        .ok_or_else(|| Error::Schedule(format!("{method} step {t} has not been run")))?;
    match (&entry.record.checkpoint, &entry.record.checkpoint_sha256) {
        (Some(path), Some(sha)) => run.load_checkpoint(path, sha),
        _ => Err(Error::Integrity(format!("{method} step {t} has no checkpoint"))),
    }
}

fn load_parallel_units(run: &RunDir, manifest: &Manifest, upto: usize) -> Result<Vec<IncrementalUnit>> {
    (1..=upto)
        .map(|t| step_checkpoint(run, manifest, Method::Parallel, t)?.into_unit())
        .collect()
}

fn routing_for(manifest: &Manifest) -> RoutingConfig {
    RoutingConfig {
        tau: manifest.routing_tau(),
        arbitration: manifest.config().routing.arbitration,
    }
}

// ----------------------------------------------------------------------------
// base training

/// Train the base model for `config` on its `D_0`.
pub fn train_base_model(config: &ExperimentConfig, train: &Dataset) -> Result<(SegmentationModel, TrainOutcome, f64)> {
    let schedule = config.schedule()?;
    let d0 = filter_for_base(train, &schedule);
    let mut model = build_model(&config.model, config.run.seed)?;
    let started = Instant::now();
    let outcome = train_base(&mut model, &d0, &config.base_train(), &mut |_| {})?;
    Ok((model, outcome, started.elapsed().as_secs_f64()))
}

/// Create a run directory around an already trained base model and record
/// step 0.
fn init_run(
    root: &Path,
    config: &ExperimentConfig,
    model: &SegmentationModel,
    outcome: &TrainOutcome,
    wall_time_secs: f64,
    test: &Dataset,
) -> Result<MetricsReport> {
    let run = RunDir::new(root, &config.run.id)?;
    if run.exists() {
        return Err(Error::Config(format!("run `{}` already exists", config.run.id)));
    }
    let _lock = run.lock()?;
    run.create_layout()?;
    let schedule = config.schedule()?;
    run.write_text("config.toml", &config.to_toml()?)?;
    let ckpt = run.save_checkpoint("checkpoints/base.ckpt", &Checkpoint::from_model(model))?;
    run.write_text("logs/base.jsonl", &log_text(&outcome.epochs)?)?;
    let digest = run.write_text("digests/step0.digest", &full_digest(model, &[])?.to_text())?;
    let metrics = evaluate_routed(model, &[], test, &schedule, 0, &config.routing)?;
    if !outcome.final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: outcome.epochs.len(),
            loss: outcome.final_loss,
        });
    }
    let record = StepRecord {
        step_index: 0,
        classes_added: schedule.base_classes.clone(),
        final_loss: outcome.final_loss,
        checkpoint: Some(ckpt.path),
        checkpoint_sha256: Some(ckpt.sha256),
        wall_time_secs,
    };
    run.append(&ManifestRecord::RunStarted {
        run_id: config.run.id.clone(),
        tool_version: manifest::TOOL_VERSION.to_string(),
        config: config.clone(),
        schedule: schedule_summary(&schedule),
    })?;
    run.append(&ManifestRecord::Step {
        method: Method::Parallel,
        record,
        metrics: metrics.clone(),
        digest: Some(digest),
        log: Some("logs/base.jsonl".into()),
    })?;
    Ok(metrics)
}

/// `train-base`: returns the run id and the step-0 metrics.
pub fn cmd_train_base(root: &Path, config: &ExperimentConfig) -> Result<(String, MetricsReport)> {
    config.validate()?;
    if RunDir::new(root, &config.run.id)?.exists() {
        return Err(Error::Config(format!("run `{}` already exists", config.run.id)));
    }
    // data problems surface before anything is written
    let (train, test) = config.load_data()?;
    log::info!("training base model for run `{}`", config.run.id);
    let (model, outcome, secs) = train_base_model(config, &train)?;
    let metrics = init_run(root, config, &model, &outcome, secs, &test)?;
    log::info!("step 0: base mIoU {:.4}", metrics.base_miou);
    Ok((config.run.id.clone(), metrics))
}

// ----------------------------------------------------------------------------
// incremental steps

fn require_previous(manifest: &Manifest, method: Method, t: usize, schedule: &TaskSchedule) -> Result<()> {
    if t == 0 || t > schedule.num_steps() {
        return Err(Error::Schedule(format!(
            "step {t} is outside 1..={} for protocol `{}`",
            schedule.num_steps(),
            schedule.protocol_name
        )));
    }
    if manifest.step(method, t).is_some() {
        return Err(Error::Schedule(format!("{method} step {t} is already recorded")));
    }
    if manifest.step(method, t - 1).is_none() {
        return Err(Error::Schedule(format!("{method} step {} must complete first", t - 1)));
    }
    Ok(())
}

fn load_digest(run: &RunDir, entry_digest: Option<&ArtifactRef>, t: usize) -> Result<FrozenDigest> {
    let d = entry_digest.ok_or_else(|| Error::Integrity(format!("step {t} recorded no digest")))?;
    let path = run.path(&d.path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if crate::checkpoint::sha256_hex(text.as_bytes()) != d.sha256 {
        return Err(Error::Integrity(format!("{} does not match its recorded hash", d.path)));
    }
    FrozenDigest::from_text(&text)
}

fn parallel_step(
    run: &RunDir,
    manifest: &Manifest,
    train: &Dataset,
    test: &Dataset,
    t: usize,
) -> Result<MetricsReport> {
    let config = manifest.config();
    let schedule = config.schedule()?;
    let prev = manifest.step(Method::Parallel, t - 1).expect("checked by require_previous");
    let expected = load_digest(run, prev.digest, t - 1)?;

    // parameters are compared against the digest before the file hashes so
    // a tampered tensor is reported by name
    let model = Checkpoint::load(&run.path("checkpoints/base.ckpt"))?.into_model()?;
    let units: Vec<IncrementalUnit> = (1..t)
        .map(|k| Checkpoint::load(&run.path(&format!("checkpoints/unit{k}.ckpt")))?.into_unit())
        .collect::<Result<_>>()?;
    let report = verify_frozen(&model, &units, &all_frozen(&model, &units), &expected)?;
    if let Some(name) = report.first_mismatch() {
        return Err(Error::Integrity(format!("frozen parameter `{name}` differs from the step {} digest", t - 1)));
    }
    step_checkpoint(run, manifest, Method::Parallel, 0)?;
    load_parallel_units(run, manifest, t - 1)?;

    let step = schedule.step(t)?;
    let dt = filter_for_step(train, &schedule, t)?;
    let mut unit = build_incremental_unit(
        &config.model,
        &step.novel,
        &schedule.known_through(t - 1),
        t,
        config.unit_seed(t),
    )?;
    let started = Instant::now();
    let outcome = train_incremental(
        &model,
        &units,
        &mut unit,
        &dt,
        &config.step_train(t),
        Some(&expected),
        &mut |_| {},
    )?;
    let mut record = StepRecord::new(t, step.novel.clone(), &outcome, started)?;
    let ckpt = run.save_checkpoint(&format!("checkpoints/unit{t}.ckpt"), &Checkpoint::from_unit(&unit))?;
    record.checkpoint = Some(ckpt.path);
    record.checkpoint_sha256 = Some(ckpt.sha256);
    let log = format!("logs/parallel_step{t}.jsonl");
    run.write_text(&log, &log_text(&outcome.epochs)?)?;

    let mut all = units;
    all.push(unit);
    let digest = run.write_text(&format!("digests/step{t}.digest"), &full_digest(&model, &all)?.to_text())?;
    let metrics = evaluate_routed(&model, &all, test, &schedule, t, &routing_for(manifest))?;
    run.append(&ManifestRecord::Step {
        method: Method::Parallel,
        record,
        metrics: metrics.clone(),
        digest: Some(digest),
        log: Some(log),
    })?;
    Ok(metrics)
}

fn finetune_step(
    run: &RunDir,
    manifest: &Manifest,
    train: &Dataset,
    test: &Dataset,
    t: usize,
) -> Result<MetricsReport> {
    let config = manifest.config();
    let schedule = config.schedule()?;
    let prev = if t == 1 { Method::Parallel } else { Method::Finetune };
    let mut model = step_checkpoint(run, manifest, prev, t - 1)?.into_model()?;
    let step = schedule.step(t)?;
    let dt = filter_for_step(train, &schedule, t)?;
    let started = Instant::now();
    let outcome = train_finetune_baseline(&mut model, &dt, &step.novel, &config.step_train(t), &mut |_| {})?;
    let mut record = StepRecord::new(t, step.novel.clone(), &outcome, started)?;
    let ckpt = run.save_checkpoint(&format!("checkpoints/finetune_step{t}.ckpt"), &Checkpoint::from_model(&model))?;
    record.checkpoint = Some(ckpt.path);
    record.checkpoint_sha256 = Some(ckpt.sha256);
    let log = format!("logs/finetune_step{t}.jsonl");
    run.write_text(&log, &log_text(&outcome.epochs)?)?;
    let metrics = evaluate_plain(&model, test, &schedule, t)?;
    run.append(&ManifestRecord::Step {
        method: Method::Finetune,
        record,
        metrics: metrics.clone(),
        digest: None,
        log: Some(log),
    })?;
    Ok(metrics)
}

fn joint_step(
    run: &RunDir,
    manifest: &Manifest,
    train: &Dataset,
    test: &Dataset,
    t: usize,
) -> Result<MetricsReport> {
    let config = manifest.config();
    let schedule = config.schedule()?;
    let mut parts = vec![filter_for_base(train, &schedule)];
    for k in 1..=t {
        parts.push(filter_for_step(train, &schedule, k)?);
    }
    let refs: Vec<&Dataset> = parts.iter().collect();
    let started = Instant::now();
    let (model, outcome) = train_joint_baseline(
        &config.model,
        &schedule.known_through(t),
        &refs,
        t,
        &config.joint_train(t),
        &mut |_| {},
    )?;
    let mut record = StepRecord::new(t, schedule.step(t)?.novel.clone(), &outcome, started)?;
    let ckpt = run.save_checkpoint(&format!("checkpoints/joint_step{t}.ckpt"), &Checkpoint::from_model(&model))?;
    record.checkpoint = Some(ckpt.path);
    record.checkpoint_sha256 = Some(ckpt.sha256);
    let log = format!("logs/joint_step{t}.jsonl");
    run.write_text(&log, &log_text(&outcome.epochs)?)?;
    let metrics = evaluate_plain(&model, test, &schedule, t)?;
    run.append(&ManifestRecord::Step {
        method: Method::Joint,
        record,
        metrics: metrics.clone(),
        digest: None,
        log: Some(log),
    })?;
    Ok(metrics)
}

fn run_step(run: &RunDir, train: &Dataset, test: &Dataset, method: Method, t: usize) -> Result<MetricsReport> {
    let manifest = run.read()?;
    let schedule = manifest.config().schedule()?;
    require_previous(&manifest, method, t, &schedule)?;
    log::info!("{method} step {t}: classes {:?}", schedule.step(t)?.novel);
    let m = match method {
        Method::Parallel => parallel_step(run, &manifest, train, test, t),
        Method::Finetune => finetune_step(run, &manifest, train, test, t),
        Method::Joint => joint_step(run, &manifest, train, test, t),
    }?;
    log::info!(
        "{method} step {t}: overall {:.4} base {:.4} novel {:.4}",
        m.overall_miou,
        m.base_miou,
        m.novel_miou.unwrap_or(f64::NAN)
    );
    Ok(m)
}

/// `train-incremental`: run one step of `method`.
pub fn cmd_train_incremental(root: &Path, run_id: &str, step: usize, method: Method) -> Result<MetricsReport> {
    let run = open_run(root, run_id)?;
    let _lock = run.lock()?;
    let config = run.read()?.config().clone();
    let (train, test) = config.load_data()?;
    run_step(&run, &train, &test, method, step)
}

/// `run-protocol`: every remaining step of each method, in order. Returns
/// the metrics of the steps that were run.
pub fn cmd_run_protocol(root: &Path, run_id: &str, methods: &[Method]) -> Result<Vec<(Method, MetricsReport)>> {
    let run = open_run(root, run_id)?;
    let _lock = run.lock()?;
    let config = run.read()?.config().clone();
    let schedule = config.schedule()?;
    let (train, test) = config.load_data()?;
    let mut out = Vec::new();
    for &method in methods {
        let done = run.read()?.last_step(method).unwrap_or(0);
        for t in done + 1..=schedule.num_steps() {
            out.push((method, run_step(&run, &train, &test, method, t)?));
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------------------
// threshold sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub units: Vec<UnitSweep>,
    pub pooled: ThresholdSweep,
    pub chosen_tau: f64,
    pub source: TauSource,
    pub table: String,
}

fn pooled_sweep(units: &[UnitSweep]) -> ThresholdSweep {
    let n = units.len() as f64;
    let rows: Vec<SweepRow> = (0..units[0].sweep.rows.len())
        .map(|i| {
            let mean = |f: fn(&SweepRow) -> f64| units.iter().map(|u| f(&u.sweep.rows[i])).sum::<f64>() / n;
            SweepRow {
                tau: units[0].sweep.rows[i].tau,
                iou: mean(|r| r.iou),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                f1: mean(|r| r.f1),
            }
        })
        .collect();
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.iou > best.iou {
            best = *r;
        }
    }
    ThresholdSweep {
        best_tau: best.tau,
        rows,
    }
}

fn sweep_table(units: &[UnitSweep], pooled: &ThresholdSweep) -> String {
    let mut out = String::new();
    let mut block = |name: &str, s: &ThresholdSweep, auc: Option<f64>| {
        let _ = writeln!(out, "{name}");
        let _ = writeln!(out, "{:>6} {:>8} {:>9} {:>8} {:>8}", "tau", "iou", "precision", "recall", "f1");
        for r in &s.rows {
            let _ = writeln!(
                out,
                "{:>6.2} {:>8.4} {:>9.4} {:>8.4} {:>8.4}",
                r.tau, r.iou, r.precision, r.recall, r.f1
            );
        }
        let _ = write!(out, "best tau {:.2}", s.best_tau);
        if let Some(a) = auc {
            let _ = write!(out, ", AUC {a:.4}");
        }
        out.push_str("\n\n");
    };
    for u in units {
        block(&format!("unit {}", u.step_index), &u.sweep, Some(u.roc.auc));
    }
    block("mean over units", pooled, None);
    out
}

/// `sweep-tau`: per-unit and pooled threshold sweeps on the held-out split,
/// ROC curves, plots, and a new routing default (`tau` overrides the swept
/// value).
pub fn cmd_sweep_tau(root: &Path, run_id: &str, grid: Option<&[f64]>, tau: Option<f64>) -> Result<SweepSummary> {
    let run = open_run(root, run_id)?;
    let _lock = run.lock()?;
    let manifest = run.read()?;
    let config = manifest.config();
    let last = manifest.last_step(Method::Parallel).unwrap_or(0);
    if last == 0 {
        return Err(Error::Evaluation("no incremental unit has been trained in this run".into()));
    }
    if let Some(t) = tau {
        RoutingConfig {
            tau: t,
            ..Default::default()
        }
        .validate()?;
    }
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(default_tau_grid);
    let model = step_checkpoint(&run, &manifest, Method::Parallel, 0)?.into_model()?;
    let units = load_parallel_units(&run, &manifest, last)?;
    let (_, test) = config.load_data()?;

    let mut scores: Vec<Vec<f32>> = vec![Vec::new(); units.len()];
    let mut truth: Vec<Vec<u8>> = vec![Vec::new(); units.len()];
    for s in &test.samples {
        let (_, probs) = model.forward_with_units(&s.image, &units)?;
        for (k, (u, p)) in units.iter().zip(&probs).enumerate() {
            for ((y, x), &l) in s.labels.indexed_iter() {
                let conf = (0..u.novel_class_ids.len()).map(|c| p[[c, y, x]]).fold(0.0f32, f32::max);
                scores[k].push(conf);
                truth[k].push(if l == crate::data::IGNORE_INDEX {
                    l
                } else {
                    u8::from(u.novel_class_ids.contains(&l))
                });
            }
        }
    }
    let unit_sweeps = units
        .iter()
        .enumerate()
        .map(|(k, u)| {
            Ok(UnitSweep {
                step_index: u.step_index,
                sweep: sweep_scores(&scores[k], &truth[k], &grid)?,
                roc: roc_scores(&scores[k], &truth[k])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = pooled_sweep(&unit_sweeps);
    let (chosen_tau, source) = match tau {
        Some(t) => (t, TauSource::User),
        None => (pooled.best_tau, TauSource::Sweep),
    };

    let table = sweep_table(&unit_sweeps, &pooled);
    run.write_text("reports/tau_sweep.txt", &table)?;
    let mut series = vec![
        Series {
            name: "IoU (mean)".into(),
            points: pooled.rows.iter().map(|r| (r.tau, r.iou)).collect(),
        },
        Series {
            name: "precision (mean)".into(),
            points: pooled.rows.iter().map(|r| (r.tau, r.precision)).collect(),
        },
        Series {
            name: "recall (mean)".into(),
            points: pooled.rows.iter().map(|r| (r.tau, r.recall)).collect(),
        },
    ];
    for u in &unit_sweeps {
        series.push(Series {
            name: format!("IoU unit {}", u.step_index),
            points: u.sweep.rows.iter().map(|r| (r.tau, r.iou)).collect(),
        });
    }
    let svg = line_chart_svg("Novel-class metrics vs threshold", "tau", "value", &series, Some((0.0, 1.0)))?;
    run.write_text("plots/tau_sweep.svg", &svg)?;
    let roc_series: Vec<Series> = unit_sweeps
        .iter()
        .map(|u| Series {
            name: format!("unit {} (AUC {:.3})", u.step_index, u.roc.auc),
            points: u.roc.points.clone(),
        })
        .collect();
    let svg = line_chart_svg("ROC of novel-class heads", "false positive rate", "true positive rate", &roc_series, Some((0.0, 1.0)))?;
    run.write_text("plots/roc.svg", &svg)?;

    run.append(&ManifestRecord::Sweep {
        units: unit_sweeps.clone(),
        pooled: pooled.clone(),
    })?;
    run.append(&ManifestRecord::RoutingDefault {
        tau: chosen_tau,
        source,
    })?;
    Ok(SweepSummary {
        units: unit_sweeps,
        pooled,
        chosen_tau,
        source,
        table,
    })
}

// ----------------------------------------------------------------------------
// ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub connection_point: ConnectionPoint,
    pub run_id: String,
    /// mIoU of the shared frozen base at step 0.
    pub baseline_miou: f64,
    /// Base-class mIoU after the first incremental step.
    pub base_miou: f64,
    /// Overall mIoU after the first incremental step.
    pub overall_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub table: String,
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} | {:>13} | {:>9} | {:>12}", "connection", "baseline mIoU", "base mIoU", "overall mIoU");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} | {:>13.2} | {:>9.2} | {:>12.2}",
            r.connection_point.to_string(),
            r.baseline_miou * 100.0,
            r.base_miou * 100.0,
            r.overall_miou * 100.0
        );
    }
    out
}

/// `ablate-connection`: one base model trained once, then the first
/// incremental step with the unit attached at each of P, I and D. Runs are
/// named `<id>-P`, `<id>-I`, `<id>-D`; the table is written next to them.
pub fn cmd_ablate_connection(root: &Path, config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let schedule = config.schedule()?;
    if schedule.num_steps() == 0 {
        return Err(Error::Schedule("the ablation needs at least one incremental step".into()));
    }
    let ids: Vec<String> = ConnectionPoint::ALL
        .iter()
        .map(|cp| format!("{}-{cp}", config.run.id))
        .collect();
    for id in &ids {
        if RunDir::new(root, id)?.exists() {
            return Err(Error::Config(format!("run `{id}` already exists")));
        }
    }
    let (train, test) = config.load_data()?;
    let (base, outcome, secs) = train_base_model(config, &train)?;
    let mut rows = Vec::new();
    for (cp, id) in ConnectionPoint::ALL.into_iter().zip(&ids) {
        let mut cfg = config.clone();
        cfg.run.id = id.clone();
        cfg.model.connection_point = cp;
        let mut model = base.clone();
        model.config.connection_point = cp;
        let baseline = init_run(root, &cfg, &model, &outcome, secs, &test)?;
        let run = RunDir::new(root, id)?;
        let after = {
            let _lock = run.lock()?;
            run_step(&run, &train, &test, Method::Parallel, 1)?
        };
        log::info!("connection {cp}: overall {:.4}", after.overall_miou);
        rows.push(AblationRow {
            connection_point: cp,
            run_id: id.clone(),
            baseline_miou: baseline.overall_miou,
            base_miou: after.base_miou,
            overall_miou: after.overall_miou,
        });
    }
    let table = ablation_table(&rows);
    let report = AblationReport { rows, table };
    write_atomic(&root.join(format!("{}-ablation.txt", config.run.id)), report.table.as_bytes())?;
    write_atomic(
        &root.join(format!("{}-ablation.json", config.run.id)),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

// ----------------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trajectories: BTreeMap<Method, Trajectory>,
    pub table: String,
    /// Final over step-0 base-class mIoU per method.
    pub retention: BTreeMap<Method, f64>,
    pub masks: Vec<PathBuf>,
}

/// Trajectories of every method with at least one incremental step (the
/// frozen-unit method always appears), read from the manifest alone.
pub fn trajectories(manifest: &Manifest) -> Result<BTreeMap<Method, Trajectory>> {
    let mut out = BTreeMap::new();
    for method in Method::ALL {
        let steps = manifest.steps(method);
        if method != Method::Parallel && steps.len() < 2 {
            continue;
        }
        let reports: Vec<MetricsReport> = steps.iter().map(|e| e.metrics.clone()).collect();
        out.insert(method, trajectory_report(&reports)?);
    }
    Ok(out)
}

/// Fixed colour per class id for mask visualisation; ignore is black.
pub fn palette_color(id: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 12] = [
        [128, 64, 128],
        [107, 142, 35],
        [70, 130, 180],
        [178, 34, 34],
        [220, 220, 0],
        [255, 140, 0],
        [0, 0, 230],
        [220, 20, 60],
        [0, 128, 128],
        [190, 153, 153],
        [152, 251, 152],
        [119, 11, 32],
    ];
    if id == crate::data::IGNORE_INDEX {
        return [0, 0, 0];
    }
    match BASE.get(id as usize) {
        Some(c) => *c,
        None => {
            let h = (id as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        }
    }
}

fn export_masks(run: &RunDir, manifest: &Manifest, count: usize) -> Result<Vec<PathBuf>> {
    let config = manifest.config();
    let last = manifest.last_step(Method::Parallel).unwrap_or(0);
    let model = step_checkpoint(run, manifest, Method::Parallel, 0)?.into_model()?;
    let units = load_parallel_units(run, manifest, last)?;
    let schedule = config.schedule()?;
    let known = schedule.known_through(last);
    let (_, test) = config.load_data()?;
    let routing = routing_for(manifest);
    let mut written = Vec::new();
    for s in test.samples.iter().take(count) {
        let routed = predict_routed(&model, &units, &s.image, &routing)?;
        for (suffix, map) in [("pred", routed.label_map), ("gt", eval_labels(&s.labels, &known))] {
            let path = run.path(&format!("masks/{}_{suffix}.png", s.id));
            save_png(&path, &map)?;
            written.push(path);
        }
    }
    let palette: BTreeMap<String, [u8; 3]> = schedule
        .universe()
        .into_iter()
        .chain([crate::data::IGNORE_INDEX])
        .map(|id| (id.to_string(), palette_color(id)))
        .collect();
    run.write_text("masks/palette.json", &serde_json::to_string_pretty(&palette)?)?;
    Ok(written)
}

fn save_png(path: &Path, map: &Array2<u8>) -> Result<()> {
    let tmp = path.with_extension("png.tmp");
    labels_to_gray8(map)
        .save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: tmp.clone(),
            source: e,
        })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `report`: per-step text tables, trajectory plots and retention ratios from
/// the manifest, plus routed masks for the first few held-out images.
pub fn cmd_report(root: &Path, run_id: &str, export: bool) -> Result<RunReport> {
    let run = open_run(root, run_id)?;
    let _lock = run.lock()?;
    let manifest = run.read()?;
    manifest.verify_artifacts(&run)?;
    let trajectories = trajectories(&manifest)?;
    let named: Vec<(String, Trajectory)> = trajectories
        .iter()
        .map(|(m, t)| (m.to_string(), t.clone()))
        .collect();
    let table = render_trajectory_table(&named);
    run.write_text("reports/trajectory.txt", &table)?;

    let mut records = String::new();
    for method in trajectories.keys() {
        for e in manifest.steps(*method) {
            for mut r in e.metrics.records() {
                r["method"] = serde_json::Value::from(method.as_str());
                records.push_str(&r.to_string());
                records.push('\n');
            }
        }
    }
    run.write_text("reports/metrics.jsonl", &records)?;

    for (file, title, pick) in [
        ("plots/trajectory_overall.svg", "Overall mIoU per step", 0),
        ("plots/trajectory_base.svg", "Base-class mIoU per step", 1),
    ] {
        let series: Vec<Series> = trajectories
            .iter()
            .map(|(m, t)| {
                let (overall, base) = t.curves();
                Series {
                    name: m.to_string(),
                    points: if pick == 0 { overall } else { base },
                }
            })
            .collect();
        run.write_text(file, &line_chart_svg(title, "step", "mIoU", &series, Some((0.0, 1.0)))?)?;
    }

    let masks = if export && manifest.config().report.sample_masks > 0 {
        export_masks(&run, &manifest, manifest.config().report.sample_masks)?
    } else {
        Vec::new()
    };
    let retention = trajectories.iter().map(|(m, t)| (*m, t.retention())).collect();
    Ok(RunReport {
        trajectories,
        table,
        retention,
        masks,
    })
}

// ----------------------------------------------------------------------------
// data export

/// `generate-data`: write the configured synthetic splits as image/label
/// directories under `out/train` and `out/test`.
pub fn cmd_generate_data(config: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    if !matches!(config.data, DataSection::Synthetic { .. }) {
        return Err(Error::Config("generate-data needs a synthetic data section".into()));
    }
    let (train, test) = config.load_data()?;
    export_dataset(&train, &out.join("train"))?;
    export_dataset(&test, &out.join("test"))?;
    Ok((train.len(), test.len()))
}
