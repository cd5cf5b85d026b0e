//! Lanczos with the basis `D` sharded row-wise across workers.
//!
//! Each worker stores only rows `s_c..=e_c` of `D` and a full copy of `B`.
//! Per iteration it gathers the current basis vector, applies the operator
//! locally, and takes part in two exact-sum reductions (projection
//! coefficients and the squared norm). The result is bitwise identical to
//! [`lanczos_single`](crate::lanczos::lanczos_single) for any worker count.

use std::collections::BTreeMap;

use crate::collectives::{CollectiveError, Communicator, Shard, Tag, WorkerGroup};
use crate::error::{Error, Result};
use crate::lanczos::{
    is_breakdown, local_coefficients, needs_second_pass, normalize_signs, ritz_vectors, round_all, select_ritz, OrthoEstimate,
    start_vector, validate, EseResult, LanczosOptions,
};
use crate::linalg::{dot_unchecked, exact_dot, subtract_combination, Fnv, TallMatrix, TridiagMatrix};

/// What a tracked allocation holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotKind {
    /// This worker's rows of the Lanczos basis.
    DShard,
    /// The replicated tridiagonal matrix (diagonal plus off-diagonal).
    B,
    /// This worker's rows of the eigenvector block before assembly.
    VHatPartial,
    /// The assembled eigenvector block.
    VHat,
}

impl SlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotKind::DShard => "d_shard",
            SlotKind::B => "b",
            SlotKind::VHatPartial => "v_hat_partial",
            SlotKind::VHat => "v_hat",
        }
    }
}

/// Per-worker float-slot accounting.
///
/// Records the peak number of `f64` slots held for each [`SlotKind`] and the
/// floating-point operations spent in Gram-Schmidt.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlotMeter {
    peaks: BTreeMap<SlotKind, usize>,
    gs_flops: u64,
}

impl SlotMeter {
    pub fn record(&mut self, kind: SlotKind, slots: usize) {
        let peak = self.peaks.entry(kind).or_insert(0);
        *peak = (*peak).max(slots);
    }

    pub fn peak(&self, kind: SlotKind) -> usize {
        self.peaks.get(&kind).copied().unwrap_or(0)
    }

    pub fn gs_flops(&self) -> u64 {
        self.gs_flops
    }

    fn add_flops(&mut self, flops: u64) {
        self.gs_flops += flops;
    }

    pub fn merge(&mut self, other: &SlotMeter) {
        for (&kind, &slots) in &other.peaks {
            self.record(kind, slots);
        }
        self.gs_flops += other.gs_flops;
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotKind, usize)> + '_ {
        self.peaks.iter().map(|(&k, &v)| (k, v))
    }
}

/// One worker's share of a distributed Lanczos run.
#[derive(Clone, Debug)]
pub struct ShardedLanczosState {
    pub shard: Shard,
    pub d_shard: TallMatrix,
    pub b: TridiagMatrix,
    pub m: usize,
    pub m_eff: usize,
    pub broke_down: bool,
    pub second_passes: usize,
    pub meter: SlotMeter,
    seed: u64,
    divergence_check: bool,
}

impl ShardedLanczosState {
    pub fn active_b(&self) -> TridiagMatrix {
        self.b.leading(self.m_eff).expect("m_eff >= 1")
    }
}

fn replication_digest(seed: u64, m: usize, b: &TridiagMatrix) -> u64 {
    let mut h = Fnv::default();
    h.write_u64(seed);
    h.write_u64(m as u64);
    h.write_u64(b.digest());
    h.finish()
}

async fn consensus(comm: &Communicator, digest: u64, what: &str) -> Result<()> {
    comm.check_consensus(digest).await.map_err(|e| match e {
        CollectiveError::Divergence { round, rank, .. } => {
            Error::Divergence(format!("{what} differs on rank {rank} (collective round {round})"))
        }
        other => Error::Collective(other),
    })
}

/// Runs `m` sharded Lanczos iterations on this worker. Every worker in the
/// group must call this with the same `(n, m, seed)` and the same operator.
pub async fn lanczos_distributed<F>(
    comm: &Communicator,
    n: usize,
    m: usize,
    hvp: &F,
    seed: u64,
    opts: &LanczosOptions,
) -> Result<ShardedLanczosState>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    validate(n, m)?;
    let shard = comm.shard(n);
    let rows = shard.len();
    let mut meter = SlotMeter::default();
    let mut d = TallMatrix::zeros(rows, m + 1);
    meter.record(SlotKind::DShard, d.slots());
    let mut b = TridiagMatrix::zeros(m + 1);
    meter.record(SlotKind::B, 2 * (m + 1) - 1);
    let v1 = start_vector(n, seed);
    d.col_mut(0).copy_from_slice(shard.slice(&v1));
    let mut filled = m;
    let mut broke_down = false;
    let mut second_passes = 0;
    let mut ortho = OrthoEstimate::default();

    for i in 0..m {
        let v = comm.all_gather(d.col(i), shard, Tag::LanczosVector).await?;
        let h_full = hvp(&v)?;
        if h_full.len() != n {
            return Err(Error::dim("hvp output", n, h_full.len()));
        }
        if !h_full.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("hvp returned non-finite values at iteration {i}")));
        }
        let h_norm = exact_dot(&h_full, &h_full).value().sqrt();
        b.set_diag(i, dot_unchecked(&h_full, &v));
        let mut h = shard.slice(&h_full).to_vec();

        let sums = comm.all_reduce_exact(local_coefficients(&d, &h, i + 1), Tag::Projection).await?;
        subtract_combination(&mut h, &d, &round_all(&sums, i + 1));
        let sq = comm.all_reduce_exact(vec![exact_dot(&h, &h)], Tag::Norm).await?;
        let mut beta = sq[0].value().sqrt();
        meter.add_flops(gs_flops(rows, i + 1));
        let mut err = ortho.first(i + 1, h_norm, beta);
        if opts.safeguard && needs_second_pass(err) {
            second_passes += 1;
            let sums = comm.all_reduce_exact(local_coefficients(&d, &h, i + 1), Tag::Reorth).await?;
            subtract_combination(&mut h, &d, &round_all(&sums, i + 1));
            let sq = comm.all_reduce_exact(vec![exact_dot(&h, &h)], Tag::Reorth).await?;
            let beta1 = beta;
            beta = sq[0].value().sqrt();
            err = ortho.second(i + 1, err, beta1, beta);
            meter.add_flops(gs_flops(rows, i + 1));
        }
        ortho.accept(err);
        if is_breakdown(h_norm, beta) {
            filled = i + 1;
            broke_down = true;
        } else {
            b.set_offdiag(i, beta);
            for (dst, x) in d.col_mut(i + 1).iter_mut().zip(&h) {
                *dst = x / beta;
            }
        }
        if opts.divergence_check {
            consensus(comm, replication_digest(seed, m, &b), "Lanczos state").await?;
        }
        if broke_down {
            break;
        }
    }

    Ok(ShardedLanczosState {
        shard,
        d_shard: d,
        b,
        m,
        m_eff: filled,
        broke_down,
        second_passes,
        meter,
        seed,
        divergence_check: opts.divergence_check,
    })
}

/// Coefficient dots, the rank-update and the squared norm over `rows` rows
/// against `cols` basis columns.
fn gs_flops(rows: usize, cols: usize) -> u64 {
    (4 * rows * cols + 2 * rows) as u64
}

/// Eigendecomposes the replicated `B`, forms this worker's rows of `V`, and
/// assembles the full block on every worker with one gather.
pub async fn extract_ese_distributed(
    comm: &Communicator,
    state: &mut ShardedLanczosState,
    k: usize,
    l: usize,
) -> Result<EseResult> {
    let n = state.shard.n();
    if k + l == 0 {
        return Ok(EseResult::empty(n));
    }
    if state.divergence_check {
        consensus(comm, replication_digest(state.seed, state.m, &state.b), "tridiagonal matrix").await?;
    }
    let (eigvals, u_sel) = select_ritz(&state.b, state.m_eff, k, l)?;
    let partial = ritz_vectors(&state.d_shard, &u_sel);
    state.meter.record(SlotKind::VHatPartial, partial.slots());
    let gathered = comm
        .all_gather(&partial.to_row_major(), state.shard.scaled(k + l), Tag::EseAssembly)
        .await?;
    let mut eigvecs = TallMatrix::from_row_major(n, k + l, &gathered)?;
    state.meter.record(SlotKind::VHat, eigvecs.slots());
    normalize_signs(&mut eigvecs);
    Ok(EseResult { eigvals, eigvecs, k, l })
}

/// Lanczos followed by extraction, on one worker.
#[allow(clippy::too_many_arguments)]
pub async fn distributed_ese<F>(
    comm: &Communicator,
    n: usize,
    m: usize,
    hvp: &F,
    seed: u64,
    k: usize,
    l: usize,
    opts: &LanczosOptions,
) -> Result<(EseResult, ShardedLanczosState)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    let mut state = lanczos_distributed(comm, n, m, hvp, seed, opts).await?;
    let ese = extract_ese_distributed(comm, &mut state, k, l).await?;
    Ok((ese, state))
}

/// Runs [`distributed_ese`] on every worker of `group` and returns the
/// per-rank results.
#[allow(clippy::too_many_arguments)]
pub fn run_distributed_ese<F>(
    group: &WorkerGroup,
    n: usize,
    m: usize,
    hvp: &F,
    seed: u64,
    k: usize,
    l: usize,
    opts: &LanczosOptions,
) -> Result<Vec<(EseResult, ShardedLanczosState)>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + ?Sized,
{
    group
        .run(|comm| async move { distributed_ese(&comm, n, m, hvp, seed, k, l, opts).await })?
        .into_iter()
        .collect()
}

/// Stacks the per-rank shards of `D` back into the full `n x (m+1)` basis.
pub fn assemble_d(states: &[ShardedLanczosState]) -> Result<TallMatrix> {
    let first = states.first().ok_or_else(|| Error::arg("no shards to assemble"))?;
    let (n, cols) = (first.shard.n(), first.d_shard.cols());
    let mut out = TallMatrix::zeros(n, cols);
    for s in states {
        if s.d_shard.cols() != cols || s.shard.n() != n {
            return Err(Error::dim("assemble_d", cols, s.d_shard.cols()));
        }
        for j in 0..cols {
            out.col_mut(j)[s.shard.range()].copy_from_slice(s.d_shard.col(j));
        }
    }
    Ok(out)
}
