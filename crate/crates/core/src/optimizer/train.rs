use std::str::FromStr;
use std::time::Instant;

use super::{
    admm_deltas, admm_dual_update, admm_w_update, fosi_deltas, AdmmState, BaseConfig, BaseOptimizerState,
    DEFAULT_EIGVAL_FLOOR,
};
use crate::collectives::{CollectiveError, Communicator, Tag, WorkerGroup};
use crate::dist_lanczos::{distributed_ese, SlotMeter};
use crate::error::{Error, Result};
use crate::lanczos::{lanczos_budget, EseResult, LanczosOptions};
use crate::linalg::{norm2, Fnv};
use crate::oracle::{worker_part, Batch, Dataset, Oracle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainerKind {
    /// The base optimizer alone, with gradients averaged across workers.
    Sgd,
    Fosi,
    Dho2,
}

impl TrainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Sgd => "sgd",
            TrainerKind::Fosi => "fosi",
            TrainerKind::Dho2 => "dho2",
        }
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(TrainerKind::Sgd),
            "fosi" => Ok(TrainerKind::Fosi),
            "dho2" => Ok(TrainerKind::Dho2),
            other => Err(Error::arg(format!("unknown trainer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub base: BaseConfig,
    /// Largest Ritz pairs kept.
    pub k: usize,
    /// Smallest Ritz pairs kept.
    pub l: usize,
    pub alpha: f64,
    pub eigval_floor: f64,
    /// Lanczos iterations; `None` uses [`lanczos_budget`].
    pub lanczos_m: Option<usize>,
    pub lanczos: LanczosOptions,
    /// Samples in the batch used for Hessian-vector products.
    pub curvature_batch: usize,
    /// FOSI refresh period in iterations; `None` refreshes once per epoch.
    pub refresh_interval: Option<usize>,
    pub outer_rounds: usize,
    pub inner_epochs: usize,
    pub sigma: f64,
    /// Epochs for `sgd` and `fosi`.
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Ends an inner loop early once `||grad f(w_a) + pi||` drops below this.
    pub inner_tol: Option<f64>,
    pub target_loss: Option<f64>,
    pub stop_at_target: bool,
    /// Compare a parameter digest across workers after every epoch.
    pub replication_check: bool,
    /// Throughput assumed by the modeled timings.
    pub compute_gflops: f64,
    /// Link bandwidth in GB/s assumed by the modeled timings.
    pub bandwidth_gbps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::Dho2,
            base: BaseConfig::default(),
            k: 8,
            l: 0,
            alpha: 0.1,
            eigval_floor: DEFAULT_EIGVAL_FLOOR,
            lanczos_m: None,
            lanczos: LanczosOptions::default(),
            curvature_batch: 512,
            refresh_interval: None,
            outer_rounds: 10,
            inner_epochs: 4,
            sigma: 5e-4,
            epochs: 40,
            batch_size: None,
            seed: 0,
            inner_tol: None,
            target_loss: None,
            stop_at_target: false,
            replication_check: true,
            compute_gflops: 10.0,
            bandwidth_gbps: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::arg("model has no parameters"));
        }
        if self.trainer != TrainerKind::Sgd && self.k + self.l > n {
            return Err(Error::arg(format!("k + l = {} exceeds n = {n}", self.k + self.l)));
        }
        if let Some(m) = self.lanczos_m {
            if m == 0 || m < self.k + self.l {
                return Err(Error::arg(format!("lanczos_m = {m} must be >= max(1, k + l)")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg("alpha must be positive"));
        }
        if self.eigval_floor.is_nan() || self.eigval_floor <= 0.0 {
            return Err(Error::arg("eigval_floor must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::arg("sigma must be finite and >= 0"));
        }
        if self.trainer == TrainerKind::Dho2 && self.inner_epochs == 0 {
            return Err(Error::arg("inner_epochs must be >= 1"));
        }
        if self.batch_size == Some(0) || self.refresh_interval == Some(0) || self.curvature_batch == 0 {
            return Err(Error::arg("batch_size, refresh_interval and curvature_batch must be >= 1"));
        }
        if !(self.compute_gflops > 0.0 && self.bandwidth_gbps > 0.0) {
            return Err(Error::arg("compute_gflops and bandwidth_gbps must be positive"));
        }
        Ok(())
    }

    /// Epochs the configured trainer runs when not stopped early.
    pub fn total_epochs(&self) -> usize {
        match self.trainer {
            TrainerKind::Dho2 => self.outer_rounds * self.inner_epochs,
            _ => self.epochs,
        }
    }
}

/// Metrics at the end of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Outer round, for `dho2` only.
    pub outer_k: Option<usize>,
    pub inner_l: Option<usize>,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iterations: u64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    /// `||w_a - w||`, for `dho2` only.
    pub residual_norm: Option<f64>,
    /// Real elapsed time; varies between runs.
    pub wallclock_ms: f64,
    /// Compute and communication time from the cost model.
    pub modeled_ms: f64,
    /// Cumulative words sent by this rank.
    pub words_sent: u64,
    pub compute_flops: u64,
    pub ese_refresh: bool,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Final parameters (`w_a` for `dho2`).
    pub w: Vec<f64>,
    /// Final multiplier, for `dho2` only.
    pub pi: Option<Vec<f64>>,
    pub initial_loss: f64,
    pub metrics: Vec<EpochRecord>,
    /// Set when a non-finite loss or gradient stopped training.
    pub aborted: Option<(usize, String)>,
    /// Peak slot usage per rank over every refresh.
    pub meters: Vec<SlotMeter>,
    pub refreshes: usize,
    pub lanczos_iterations: usize,
    pub second_passes: usize,
    /// Words each rank sent, consensus checks excluded.
    pub words_sent: Vec<u64>,
    pub compute_flops: u64,
    pub base_moment_slots: usize,
}

impl TrainResult {
    /// Turns an aborted run into [`Error::Aborted`].
    pub fn into_result(self) -> Result<Self> {
        match self.aborted {
            Some((epoch, reason)) => Err(Error::Aborted { epoch, reason }),
            None => Ok(self),
        }
    }

    /// First record whose loss is at or below `target`.
    pub fn first_below(&self, target: f64) -> Option<&EpochRecord> {
        self.metrics.iter().find(|r| r.train_loss <= target)
    }
}

pub fn sgd_train<O: Oracle + ?Sized>(
    config: &TrainConfig,
    oracle: &O,
    dataset: Option<&Dataset>,
    w0: &[f64],
    group: &WorkerGroup,
) -> Result<TrainResult> {
    let cfg = TrainConfig {
        trainer: TrainerKind::Sgd,
        ..config.clone()
    };
    train(&cfg, oracle, dataset, w0, group)
}

pub fn fosi_train<O: Oracle + ?Sized>(
    config: &TrainConfig,
    oracle: &O,
    dataset: Option<&Dataset>,
    w0: &[f64],
    group: &WorkerGroup,
) -> Result<TrainResult> {
    let cfg = TrainConfig {
        trainer: TrainerKind::Fosi,
        ..config.clone()
    };
    train(&cfg, oracle, dataset, w0, group)
}

pub fn dho2_train<O: Oracle + ?Sized>(
    config: &TrainConfig,
    oracle: &O,
    dataset: Option<&Dataset>,
    w0: &[f64],
    group: &WorkerGroup,
) -> Result<TrainResult> {
    let cfg = TrainConfig {
        trainer: TrainerKind::Dho2,
        ..config.clone()
    };
    train(&cfg, oracle, dataset, w0, group)
}

/// Trains on `group`. Without a dataset every epoch is a single step on an
/// empty batch, which suits batch-independent objectives.
pub fn train<O: Oracle + ?Sized>(
    config: &TrainConfig,
    oracle: &O,
    dataset: Option<&Dataset>,
    w0: &[f64],
    group: &WorkerGroup,
) -> Result<TrainResult> {
    let n = oracle.dim();
    config.validate(n)?;
    if w0.len() != n {
        return Err(Error::dim("initial parameters", n, w0.len()));
    }
    if dataset.is_some_and(|d| d.is_empty()) {
        return Err(Error::arg("dataset is empty"));
    }
    let outputs = group.run(|comm| async move {
        let mut worker = Worker::new(comm, config, oracle, dataset);
        let out = worker.run(w0).await;
        out.map(|o| (o, worker))
    })?;
    let mut results = Vec::with_capacity(outputs.len());
    for out in outputs {
        results.push(out?);
    }
    let words_sent: Vec<u64> = results.iter().map(|(_, w)| w.comm.words_sent()).collect();
    let meters: Vec<SlotMeter> = results.iter().map(|(_, w)| w.meter.clone()).collect();
    let (first, worker) = results.swap_remove(0);
    for (other, _) in &results {
        if other.w.iter().zip(&first.w).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Divergence("final parameters differ across ranks".into()));
        }
    }
    Ok(TrainResult {
        w: first.w,
        pi: first.pi,
        initial_loss: first.initial_loss,
        metrics: first.metrics,
        aborted: first.aborted,
        meters,
        refreshes: worker.refreshes,
        lanczos_iterations: worker.lanczos_iterations,
        second_passes: worker.second_passes,
        words_sent,
        compute_flops: worker.flops,
        base_moment_slots: first.base_moment_slots,
    })
}

struct WorkerOutput {
    w: Vec<f64>,
    pi: Option<Vec<f64>>,
    initial_loss: f64,
    metrics: Vec<EpochRecord>,
    aborted: Option<(usize, String)>,
    base_moment_slots: usize,
}

enum Flow {
    Continue,
    Stop,
}

struct Worker<'a, O: ?Sized> {
    comm: Communicator,
    cfg: &'a TrainConfig,
    oracle: &'a O,
    data: Option<&'a Dataset>,
    n: usize,
    start: Instant,
    flops: u64,
    iterations: u64,
    refreshes: usize,
    lanczos_iterations: usize,
    second_passes: usize,
    meter: SlotMeter,
    metrics: Vec<EpochRecord>,
    aborted: Option<(usize, String)>,
}

impl<'a, O: Oracle + ?Sized> Worker<'a, O> {
    fn new(comm: Communicator, cfg: &'a TrainConfig, oracle: &'a O, data: Option<&'a Dataset>) -> Self {
        Self {
            comm,
            cfg,
            oracle,
            data,
            n: oracle.dim(),
            start: Instant::now(),
            flops: 0,
            iterations: 0,
            refreshes: 0,
            lanczos_iterations: 0,
            second_passes: 0,
            meter: SlotMeter::default(),
            metrics: Vec::new(),
            aborted: None,
        }
    }

    async fn run(&mut self, w0: &[f64]) -> Result<WorkerOutput> {
        let initial_loss = self.evaluate(w0)?.0;
        let mut base = BaseOptimizerState::new(self.cfg.base, self.n);
        let (w, pi) = match self.cfg.trainer {
            TrainerKind::Dho2 => {
                let st = self.run_dho2(w0, &mut base).await?;
                (st.w_a, Some(st.pi))
            }
            kind => (self.run_first_order(kind, w0, &mut base).await?, None),
        };
        Ok(WorkerOutput {
            w,
            pi,
            initial_loss,
            metrics: std::mem::take(&mut self.metrics),
            aborted: self.aborted.take(),
            base_moment_slots: base.moment_slots(),
        })
    }

    async fn run_first_order(&mut self, kind: TrainerKind, w0: &[f64], base: &mut BaseOptimizerState) -> Result<Vec<f64>> {
        let mut w = w0.to_vec();
        let mut ese = EseResult::empty(self.n);
        let mut t = 0usize;
        'epochs: for epoch in 0..self.cfg.epochs {
            let batches = self.batches(epoch);
            let interval = self.cfg.refresh_interval.unwrap_or(batches.len());
            let mut refreshed = false;
            for batch in &batches {
                if kind == TrainerKind::Fosi && t.is_multiple_of(interval) && self.cfg.k + self.cfg.l > 0 {
                    ese = self.refresh(&w).await?;
                    refreshed = true;
                }
                let g = self.grad(&w, batch).await?;
                let step = match kind {
                    TrainerKind::Fosi => fosi_deltas(&g, &ese, base, self.cfg.alpha, self.cfg.eigval_floor, Some(&w)),
                    _ => base.step(&g, Some(&w)).map(|s| (Vec::new(), s)),
                };
                match step {
                    Ok((d1, d2)) => apply(&mut w, &d1, &d2, ese.width()),
                    Err(Error::Numeric(reason)) => {
                        self.aborted = Some((epoch, reason));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                t += 1;
                self.iterations += 1;
            }
            if let Flow::Stop = self.end_epoch(&w, epoch, None, None, refreshed).await? {
                break;
            }
        }
        Ok(w)
    }

    async fn run_dho2(&mut self, w0: &[f64], base: &mut BaseOptimizerState) -> Result<AdmmState> {
        let cfg = self.cfg;
        let mut st = AdmmState::new(w0, cfg.sigma)?;
        let mut epoch = 0;
        'rounds: for k in 0..cfg.outer_rounds {
            let ese = if cfg.k + cfg.l > 0 {
                self.refresh(&st.w_a).await?
            } else {
                EseResult::empty(self.n)
            };
            let mut refreshed = cfg.k + cfg.l > 0;
            admm_w_update(&mut st);
            st.w_a.copy_from_slice(&st.w);
            for l in 0..cfg.inner_epochs {
                for batch in &self.batches(epoch) {
                    let g = self.grad(&st.w_a, batch).await?;
                    let step = admm_deltas(
                        &g,
                        &st.pi,
                        &ese,
                        base,
                        cfg.alpha,
                        st.sigma,
                        cfg.eigval_floor,
                        Some(&st.w_a),
                    );
                    match step {
                        Ok((d1, d2)) => apply(&mut st.w_a, &d1, &d2, ese.width()),
                        Err(Error::Numeric(reason)) => {
                            self.aborted = Some((epoch, reason));
                            break 'rounds;
                        }
                        Err(e) => return Err(e),
                    }
                    self.iterations += 1;
                }
                let residual = st.residual();
                let flow = self
                    .end_epoch(&st.w_a, epoch, Some((k, l)), Some(residual), refreshed)
                    .await?;
                refreshed = false;
                epoch += 1;
                if let Flow::Stop = flow {
                    break 'rounds;
                }
                if let Some(tol) = cfg.inner_tol {
                    if self.lagrangian_grad_norm(&st.w_a, &st.pi)? <= tol {
                        break;
                    }
                }
            }
            admm_dual_update(&mut st);
        }
        Ok(st)
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        match self.data {
            None => vec![Vec::new()],
            Some(d) => {
                let size = self.cfg.batch_size.unwrap_or(d.len()).min(d.len());
                d.epoch_batches(self.cfg.seed, epoch as u64, size)
            }
        }
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        match self.data {
            None => Batch::empty(),
            Some(d) => d.select(idx),
        }
    }

    /// Gradient on `batch`, averaged over samples across workers.
    async fn grad(&mut self, w: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        let size = self.comm.size();
        let part = worker_part(batch, self.comm.rank(), size);
        let local = self.oracle.grad(w, &self.batch(part))?;
        self.flops += self.oracle.grad_flops(part.len());
        if size == 1 {
            return Ok(self.comm.all_reduce_sum(&local, Tag::Gradient).await?);
        }
        let (weight, total) = match self.data {
            None => (1.0, size as f64),
            Some(_) => (part.len() as f64, batch.len() as f64),
        };
        let scaled: Vec<f64> = local.iter().map(|x| x * weight).collect();
        let sum = self.comm.all_reduce_sum(&scaled, Tag::Gradient).await?;
        if total == 0.0 {
            return Ok(sum);
        }
        Ok(sum.into_iter().map(|x| x / total).collect())
    }

    async fn refresh(&mut self, w: &[f64]) -> Result<EseResult> {
        let cfg = self.cfg;
        let index = self.refreshes as u64;
        let curvature = match self.data {
            None => Batch::empty(),
            Some(d) => {
                let count = cfg.curvature_batch.min(d.len());
                let order = d.epoch_order(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, index);
                d.select(&order[..count])
            }
        };
        let m = match cfg.lanczos_m {
            Some(m) => m.min(self.n),
            None => lanczos_budget(cfg.k, cfg.l, self.n)?,
        };
        let mut h = Fnv::default();
        h.write_u64(cfg.seed);
        h.write_u64(index);
        let oracle = self.oracle;
        let hvp = |v: &[f64]| oracle.hvp(w, v, &curvature);
        let (ese, state) = distributed_ese(&self.comm, self.n, m, &hvp, h.finish(), cfg.k, cfg.l, &cfg.lanczos).await?;
        self.flops += self.oracle.hvp_flops(curvature.len()) * state.m_eff as u64 + state.meter.gs_flops();
        self.refreshes += 1;
        self.lanczos_iterations += state.m_eff;
        self.second_passes += state.second_passes;
        self.meter.merge(&state.meter);
        Ok(ese)
    }

    fn evaluate(&self, w: &[f64]) -> Result<(f64, Option<f64>)> {
        let batch = match self.data {
            None => Batch::empty(),
            Some(d) => d.all().clone(),
        };
        Ok((self.oracle.value(w, &batch)?, self.oracle.accuracy(w, &batch)?))
    }

    fn lagrangian_grad_norm(&self, w_a: &[f64], pi: &[f64]) -> Result<f64> {
        let batch = match self.data {
            None => Batch::empty(),
            Some(d) => d.all().clone(),
        };
        let g = self.oracle.grad(w_a, &batch)?;
        let shifted: Vec<f64> = g.iter().zip(pi).map(|(a, b)| a + b).collect();
        Ok(norm2(&shifted))
    }

    fn modeled_ms(&self) -> f64 {
        let compute = self.flops as f64 / (self.cfg.compute_gflops * 1e9);
        let comm = (self.comm.words_sent() * 8) as f64 / (self.cfg.bandwidth_gbps * 1e9);
        (compute + comm) * 1e3
    }

    async fn end_epoch(
        &mut self,
        w: &[f64],
        epoch: usize,
        outer: Option<(usize, usize)>,
        residual_norm: Option<f64>,
        ese_refresh: bool,
    ) -> Result<Flow> {
        if self.cfg.replication_check {
            let mut h = Fnv::default();
            h.write_f64s(w);
            self.comm.check_consensus(h.finish()).await.map_err(|e| match e {
                CollectiveError::Divergence { round, rank, .. } => Error::Divergence(format!(
                    "parameters differ on rank {rank} after epoch {epoch} (collective round {round})"
                )),
                other => Error::Collective(other),
            })?;
        }
        let (train_loss, train_acc) = self.evaluate(w)?;
        self.metrics.push(EpochRecord {
            outer_k: outer.map(|o| o.0),
            inner_l: outer.map(|o| o.1),
            epoch,
            iterations: self.iterations,
            train_loss,
            train_acc,
            residual_norm,
            wallclock_ms: self.start.elapsed().as_secs_f64() * 1e3,
            modeled_ms: self.modeled_ms(),
            words_sent: self.comm.words_sent(),
            compute_flops: self.flops,
            ese_refresh,
        });
        if !train_loss.is_finite() {
            self.aborted = Some((epoch, format!("non-finite training loss {train_loss}")));
            return Ok(Flow::Stop);
        }
        if self.cfg.stop_at_target && self.cfg.target_loss.is_some_and(|t| train_loss <= t) {
            return Ok(Flow::Stop);
        }
        Ok(Flow::Continue)
    }
}

/// `w += D2`, then `w += D1` unless the subspace is empty.
fn apply(w: &mut [f64], d1: &[f64], d2: &[f64], width: usize) {
    for (wi, d) in w.iter_mut().zip(d2) {
        *wi += d;
    }
    if width > 0 {
        for (wi, d) in w.iter_mut().zip(d1) {
            *wi += d;
        }
    }
}
