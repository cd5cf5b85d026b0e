use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dho2_core::collectives::CommEvent;
use dho2_core::dist_lanczos::SlotKind;
use dho2_core::lanczos::lanczos_budget;
use dho2_core::{train, EpochRecord, TrainConfig, TrainResult, TrainerKind, WorkerGroup};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::problem::build_problem;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const ACCOUNTING_FILE: &str = "accounting.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const METRICS_HEADER: [&str; 10] = [
    "outer_k",
    "inner_l",
    "epoch",
    "iterations",
    "train_loss",
    "train_acc",
    "residual_norm",
    "wallclock_ms",
    "modeled_ms",
    "ese_refresh_flag",
];

pub const LEDGER_HEADER: [&str; 9] = [
    "event_index",
    "op",
    "floats",
    "rank",
    "tag",
    "round",
    "sent",
    "received",
    "words_per_float",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeToTarget {
    pub target: f64,
    pub epoch: usize,
    pub iterations: u64,
    pub modeled_ms: f64,
    pub wallclock_ms: f64,
    /// Wall-clock plus the modeled transfer time of everything sent so far.
    pub wallclock_plus_comm_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub epoch: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub trainer: String,
    pub workers: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub epochs_run: usize,
    pub iterations: u64,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub final_acc: Option<f64>,
    pub final_residual: Option<f64>,
    pub time_to_target: Option<TimeToTarget>,
    pub refreshes: usize,
    pub lanczos_iterations: usize,
    pub second_passes: usize,
    pub total_wallclock_ms: f64,
    pub total_modeled_ms: f64,
    pub total_words_sent: u64,
    pub compute_flops: u64,
    pub aborted: Option<Abort>,
}

/// Everything a run produced, before or after it was written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub train: TrainConfig,
    pub result: TrainResult,
    pub ledger: Vec<CommEvent>,
    pub summary: Summary,
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn aborted(&self) -> bool {
        self.summary.aborted.is_some()
    }
}

/// Trains as configured and, if an output directory is set, writes the
/// artifacts there. An aborted run still writes them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let train_cfg = cfg.validate()?;
    let problem = build_problem(cfg)?;
    let group = WorkerGroup::with_backend(cfg.experiment.workers, cfg.backend()?)?;
    let result = train(
        &train_cfg,
        problem.oracle.as_ref(),
        problem.dataset.as_ref(),
        &problem.w0,
        &group,
    )?;
    let n = problem.dim();
    let m = match (train_cfg.trainer, train_cfg.lanczos_m) {
        (TrainerKind::Sgd, _) => 0,
        (_, Some(m)) => m.min(n),
        (_, None) => lanczos_budget(train_cfg.k, train_cfg.l, n)?,
    };
    let summary = summarize(cfg, &train_cfg, &result, n, m);
    let out = RunOutput {
        train: train_cfg,
        result,
        ledger: group.ledger(),
        summary,
        dir: cfg.output.dir.clone(),
    };
    if let Some(dir) = &out.dir {
        write_artifacts(dir, cfg, &out)?;
    }
    Ok(out)
}

fn summarize(cfg: &ExperimentConfig, t: &TrainConfig, r: &TrainResult, n: usize, m: usize) -> Summary {
    let last = r.metrics.last();
    let comm_ms = |words: u64| (words * 8) as f64 / (t.bandwidth_gbps * 1e9) * 1e3;
    let time_to_target = t.target_loss.and_then(|target| {
        r.first_below(target).map(|rec| TimeToTarget {
            target,
            epoch: rec.epoch,
            iterations: rec.iterations,
            modeled_ms: rec.modeled_ms,
            wallclock_ms: rec.wallclock_ms,
            wallclock_plus_comm_ms: rec.wallclock_ms + comm_ms(rec.words_sent),
        })
    });
    Summary {
        name: cfg.experiment.name.clone(),
        trainer: t.trainer.as_str().into(),
        workers: cfg.experiment.workers,
        seed: t.seed,
        n,
        m,
        k: t.k,
        l: t.l,
        epochs_run: r.metrics.len(),
        iterations: last.map_or(0, |x| x.iterations),
        initial_loss: r.initial_loss,
        final_loss: last.map(|x| x.train_loss),
        final_acc: last.and_then(|x| x.train_acc),
        final_residual: last.and_then(|x| x.residual_norm),
        time_to_target,
        refreshes: r.refreshes,
        lanczos_iterations: r.lanczos_iterations,
        second_passes: r.second_passes,
        total_wallclock_ms: last.map_or(0.0, |x| x.wallclock_ms),
        total_modeled_ms: last.map_or(0.0, |x| x.modeled_ms),
        total_words_sent: r.words_sent.iter().sum(),
        compute_flops: r.compute_flops,
        aborted: r.aborted.clone().map(|(epoch, reason)| Abort { epoch, reason }),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The metrics table. `wallclock_ms` stays empty unless `record_wallclock`
/// is set, so reruns produce identical bytes.
pub fn metrics_csv(records: &[EpochRecord], record_wallclock: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            opt(r.outer_k),
            opt(r.inner_l),
            r.epoch.to_string(),
            r.iterations.to_string(),
            r.train_loss.to_string(),
            opt(r.train_acc),
            opt(r.residual_norm),
            if record_wallclock {
                format!("{:.3}", r.wallclock_ms)
            } else {
                String::new()
            },
            r.modeled_ms.to_string(),
            u8::from(r.ese_refresh).to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn ledger_csv(events: &[CommEvent]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LEDGER_HEADER)?;
    for e in events {
        w.write_record([
            e.event_index.to_string(),
            e.op.as_str().into(),
            e.floats.to_string(),
            e.rank.to_string(),
            e.tag.as_str().into(),
            e.round.to_string(),
            e.sent.to_string(),
            e.received.to_string(),
            e.words_per_float.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Per-rank peaks of tracked float slots, plus traffic and flop counters.
pub fn accounting_csv(r: &TrainResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "d_shard_slots",
        "b_slots",
        "v_hat_partial_slots",
        "v_hat_slots",
        "moment_slots",
        "gs_flops",
        "words_sent",
    ])?;
    for (rank, meter) in r.meters.iter().enumerate() {
        w.write_record([
            rank.to_string(),
            meter.peak(SlotKind::DShard).to_string(),
            meter.peak(SlotKind::B).to_string(),
            meter.peak(SlotKind::VHatPartial).to_string(),
            meter.peak(SlotKind::VHat).to_string(),
            r.base_moment_slots.to_string(),
            meter.gs_flops().to_string(),
            r.words_sent.get(rank).copied().unwrap_or(0).to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, CONFIG_FILE, cfg.to_toml().as_bytes())?;
    write(
        dir,
        METRICS_FILE,
        &metrics_csv(&out.result.metrics, cfg.output.record_wallclock)?,
    )?;
    write(dir, LEDGER_FILE, &ledger_csv(&out.ledger)?)?;
    write(dir, ACCOUNTING_FILE, &accounting_csv(&out.result)?)?;
    let mut json = serde_json::to_vec_pretty(&out.summary)?;
    json.push(b'\n');
    write(dir, SUMMARY_FILE, &json)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
