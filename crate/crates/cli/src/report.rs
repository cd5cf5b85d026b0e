use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dho2_core::collectives::{CollectiveOp, Shard, Tag};
use dho2_core::dist_lanczos::SlotKind;
use dho2_core::lanczos::lanczos_budget;
use dho2_core::oracle::Batch;
use dho2_core::{run_distributed_ese, WorkerGroup};

use crate::config::ExperimentConfig;
use crate::problem::build_problem;
use crate::run::{read_summary, Summary, CONFIG_FILE, LEDGER_FILE};

pub const DEFAULT_SWEEP: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRow {
    pub workers: usize,
    pub rank: usize,
    pub rows: usize,
    pub measured: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub n: usize,
    pub m: usize,
    pub rows: Vec<MemoryRow>,
}

impl MemoryReport {
    /// Largest per-rank `D` shard at `workers`.
    pub fn peak(&self, workers: usize) -> Option<usize> {
        self.rows
            .iter()
            .filter(|r| r.workers == workers)
            .map(|r| r.measured)
            .max()
    }

    pub fn exact(&self) -> bool {
        self.rows.iter().all(|r| r.measured == r.expected)
    }

    /// Peaks never grow with more workers and stay within one shard row of
    /// `(n / C) * (m + 1)`.
    pub fn scales(&self) -> bool {
        let mut sweep: Vec<usize> = self.rows.iter().map(|r| r.workers).collect();
        sweep.dedup();
        let within = sweep.iter().all(|&c| {
            let ideal = self.n as f64 / c as f64 * (self.m + 1) as f64;
            let peak = self.peak(c).unwrap_or(0) as f64;
            (peak - ideal).abs() <= (self.m + 1) as f64
        });
        let monotone = sweep.windows(2).all(|w| self.peak(w[1]) <= self.peak(w[0]));
        within && monotone
    }

    pub fn table(&self) -> String {
        let mut s = format!("n = {}, m = {}\nworkers  rank  rows  measured  expected  ok\n", self.n, self.m);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>7}  {:>4}  {:>4}  {:>8}  {:>8}  {}",
                r.workers,
                r.rank,
                r.rows,
                r.measured,
                r.expected,
                if r.measured == r.expected { "yes" } else { "NO" }
            );
        }
        if let (Some(one), Some(two)) = (self.peak(1), self.peak(2)) {
            let _ = writeln!(s, "slots(2) / slots(1) = {:.4}", two as f64 / one as f64);
        }
        s
    }
}

/// Runs one distributed ESE at the initial point for every worker count and
/// reads back each rank's peak `D` shard slots.
pub fn memory_report(cfg: &ExperimentConfig, sweep: &[usize]) -> Result<MemoryReport> {
    let t = cfg.validate()?;
    let problem = build_problem(cfg)?;
    let n = problem.dim();
    let m = match t.lanczos_m {
        Some(m) => m.min(n),
        None => lanczos_budget(t.k, t.l, n)?,
    };
    let batch = match &problem.dataset {
        Some(d) => d.head(t.curvature_batch.min(d.len())),
        None => Batch::empty(),
    };
    let oracle = problem.oracle.as_ref();
    let w0 = &problem.w0;
    let hvp = |v: &[f64]| oracle.hvp(w0, v, &batch);
    let mut rows = Vec::new();
    for &c in sweep {
        let group = WorkerGroup::new(c)?;
        let results = run_distributed_ese(&group, n, m, &hvp, t.seed, t.k, t.l, &t.lanczos)?;
        for (rank, (_, state)) in results.iter().enumerate() {
            let shard = Shard::new(rank, c, n)?;
            rows.push(MemoryRow {
                workers: c,
                rank,
                rows: shard.len(),
                measured: state.meter.peak(SlotKind::DShard),
                expected: shard.len() * (m + 1),
            });
        }
    }
    Ok(MemoryReport { n, m, rows })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Row {
    index: u64,
    op: Option<CollectiveOp>,
    tag: Option<Tag>,
    floats: usize,
    rank: usize,
    sent: usize,
    received: usize,
}

/// Lanczos traffic between two eigenvector assemblies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefreshCounts {
    pub gathers: usize,
    /// Every gather moved exactly `n` floats.
    pub gathers_full: bool,
    pub projection_reduces: usize,
    /// Largest projection payload; at most `m + 1`.
    pub projection_max_floats: usize,
    pub norm_reduces: usize,
    pub reorth_reduces: usize,
    pub assembly_floats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommReport {
    pub summary: Summary,
    pub refreshes: Vec<RefreshCounts>,
    pub gradient_reduces: usize,
    pub gradient_floats_ok: bool,
    /// Lanczos collectives seen outside any refresh.
    pub stray_lanczos: usize,
    pub floats_sent: usize,
    pub floats_received: usize,
}

impl CommReport {
    /// Every check the report makes, by name.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let s = &self.summary;
        let (n, m, width) = (s.n, s.m, s.k + s.l);
        let mut out = vec![
            ("refresh count matches summary".to_string(), self.refreshes.len() == s.refreshes),
            (
                "gradient all_reduce per iteration".into(),
                self.gradient_reduces as u64 == s.iterations && self.gradient_floats_ok,
            ),
            ("no Lanczos traffic outside refreshes".into(), self.stray_lanczos == 0),
            ("floats sent == floats received".into(), self.floats_sent == self.floats_received),
            (
                "Lanczos iterations match summary".into(),
                self.refreshes.iter().map(|r| r.gathers).sum::<usize>() == s.lanczos_iterations,
            ),
        ];
        for (i, r) in self.refreshes.iter().enumerate() {
            let exact = if s.lanczos_iterations == s.refreshes * m {
                r.gathers == m
            } else {
                r.gathers <= m
            };
            out.push((
                format!("refresh {i}: {0} gathers of n, {0} + {0} reduces, one assembly", r.gathers),
                exact
                    && r.gathers_full
                    && r.projection_reduces == r.gathers
                    && r.norm_reduces == r.gathers
                    && r.projection_max_floats <= m + 1
                    && r.reorth_reduces % 2 == 0
                    && r.assembly_floats == n * width,
            ));
        }
        out
    }

    pub fn ok(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }

    pub fn table(&self) -> String {
        let s = &self.summary;
        let mut t = format!(
            "trainer {}, n = {}, m = {}, k + l = {}, workers = {}\n",
            s.trainer,
            s.n,
            s.m,
            s.k + s.l,
            s.workers
        );
        t.push_str("refresh  gathers  proj_reduces  norm_reduces  reorth_reduces  assembly_floats\n");
        for (i, r) in self.refreshes.iter().enumerate() {
            let _ = writeln!(
                t,
                "{i:>7}  {:>7}  {:>12}  {:>12}  {:>14}  {:>15}",
                r.gathers, r.projection_reduces, r.norm_reduces, r.reorth_reduces, r.assembly_floats
            );
        }
        let _ = writeln!(t, "gradient all_reduces: {} (iterations {})", self.gradient_reduces, s.iterations);
        let _ = writeln!(t, "floats sent {} / received {}", self.floats_sent, self.floats_received);
        for (name, ok) in self.checks() {
            let _ = writeln!(t, "[{}] {name}", if ok { "ok" } else { "FAIL" });
        }
        t
    }
}

fn read_ledger(path: &Path) -> Result<Vec<Row>> {
    let file = fs::File::open(path).with_context(|| format!("opening ledger {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("ledger is missing column `{name}`"))
    };
    let (ci, co, cf, cr, ct, cs, cv) = (
        col("event_index")?,
        col("op")?,
        col("floats")?,
        col("rank")?,
        col("tag")?,
        col("sent")?,
        col("received")?,
    );
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<usize> {
            rec[c]
                .parse()
                .with_context(|| format!("ledger row {}: bad number '{}'", line + 1, &rec[c]))
        };
        rows.push(Row {
            index: num(ci)? as u64,
            op: CollectiveOp::parse(&rec[co]),
            tag: Tag::parse(&rec[ct]),
            floats: num(cf)?,
            rank: num(cr)?,
            sent: num(cs)?,
            received: num(cv)?,
        });
    }
    Ok(rows)
}

/// Recounts the collectives of a finished run from its ledger and checks
/// them against the per-refresh operation counts.
pub fn comm_report(dir: &Path) -> Result<CommReport> {
    let ledger = dir.join(LEDGER_FILE);
    if !ledger.is_file() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("ledger not found: {}", ledger.display())
        ));
    }
    let rows = read_ledger(&ledger)?;
    let summary = read_summary(dir)?;
    let n = summary.n;
    let mut refreshes = Vec::new();
    let mut current = RefreshCounts {
        gathers_full: true,
        ..RefreshCounts::default()
    };
    let mut gradient_reduces = 0;
    let mut gradient_floats_ok = true;
    let mut rank0: Vec<&Row> = rows.iter().filter(|r| r.rank == 0).collect();
    rank0.sort_by_key(|r| r.index);
    for r in rank0 {
        match r.tag {
            Some(Tag::LanczosVector) => {
                current.gathers += 1;
                current.gathers_full &= r.floats == n && r.op == Some(CollectiveOp::AllGather);
            }
            Some(Tag::Projection) => {
                current.projection_reduces += 1;
                current.projection_max_floats = current.projection_max_floats.max(r.floats);
            }
            Some(Tag::Norm) => current.norm_reduces += 1,
            Some(Tag::Reorth) => current.reorth_reduces += 1,
            Some(Tag::EseAssembly) => {
                current.assembly_floats = r.floats;
                refreshes.push(std::mem::replace(
                    &mut current,
                    RefreshCounts {
                        gathers_full: true,
                        ..RefreshCounts::default()
                    },
                ));
            }
            Some(Tag::Gradient) => {
                gradient_reduces += 1;
                gradient_floats_ok &= r.floats == n && r.op == Some(CollectiveOp::AllReduceSum);
            }
            _ => {}
        }
    }
    // A refresh with k + l = 0 has no assembly; its traffic stays in `current`.
    let stray = current.gathers + current.projection_reduces + current.norm_reduces + current.reorth_reduces;
    let (floats_sent, floats_received) = rows.iter().fold((0, 0), |(s, v), r| (s + r.sent, v + r.received));
    Ok(CommReport {
        summary,
        refreshes,
        gradient_reduces,
        gradient_floats_ok,
        stray_lanczos: stray,
        floats_sent,
        floats_received,
    })
}

/// Loads the config a run directory was produced with.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(&dir.join(CONFIG_FILE))?)
}
