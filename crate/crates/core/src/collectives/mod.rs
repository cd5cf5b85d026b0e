//! Simulated multi-worker communication.
//!
//! A [`WorkerGroup`] runs one async program per rank. Every cross-rank
//! interaction goes through a [`Communicator`] collective, which acts as a
//! barrier: all ranks must enter each collective exactly once per round.
//! Results are combined in ascending rank order, so they are identical under
//! both execution backends and any interleaving of the workers.

mod ledger;
mod rendezvous;

use std::future::Future;
use std::ops::Range;
use std::panic::AssertUnwindSafe;
use std::pin::Pin;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};
use std::thread::{self, Thread};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{ExactSum, TallMatrix};

pub use ledger::{conservation, CollectiveOp, CommCounts, CommEvent, Tag};
pub use rendezvous::BroadcastValue;
use rendezvous::{CollectiveCall, Contribution, Output, Payload, Shared};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CollectiveError {
    #[error("round {round}: rank {rank} contributed {actual} floats, expected {expected}")]
    Dimension {
        round: u64,
        rank: usize,
        expected: usize,
        actual: usize,
    },
    #[error("round {round}: rank {rank} has an inconsistent shard: {detail}")]
    ShardLayout {
        round: u64,
        rank: usize,
        detail: String,
    },
    #[error("round {round}: rank {rank} called {actual} while rank 0 called {expected}")]
    OpMismatch {
        round: u64,
        expected: CollectiveOp,
        rank: usize,
        actual: CollectiveOp,
    },
    #[error("round {round}: rank {rank} named root {root} (group size {size})")]
    InvalidRoot {
        round: u64,
        rank: usize,
        root: usize,
        size: usize,
    },
    #[error("round {round}: ranks {ranks:?} exited without joining the collective")]
    MissingRank { round: u64, ranks: Vec<usize> },
    #[error("round {round}: rank {rank} timed out waiting for the other ranks")]
    Timeout { round: u64, rank: usize },
    #[error("round {round}: workers stalled with no runnable rank")]
    Deadlock { round: u64 },
    #[error("round {round}: rank {rank} digest {actual:#018x} differs from rank 0 ({expected:#018x})")]
    Divergence {
        round: u64,
        rank: usize,
        expected: u64,
        actual: u64,
    },
    #[error("rank {rank} panicked: {message}")]
    WorkerPanicked { rank: usize, message: String },
    #[error("invalid worker group: {0}")]
    InvalidGroup(String),
}

/// Contiguous row range owned by one rank.
///
/// Every rank but the last holds `ceil(n / C)` rows; the last holds the
/// remainder (possibly fewer, or none when `C` does not divide `n` evenly
/// and `n` is small).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shard {
    rank: usize,
    start: usize,
    len: usize,
    n: usize,
}

impl Shard {
    pub fn new(rank: usize, size: usize, n: usize) -> Result<Self, CollectiveError> {
        if size == 0 || rank >= size {
            return Err(CollectiveError::InvalidGroup(format!(
                "rank {rank} out of range for group of size {size}"
            )));
        }
        let chunk = n.div_ceil(size);
        let start = (rank * chunk).min(n);
        let len = chunk.min(n - start);
        Ok(Self { rank, start, len, n })
    }

    pub fn partition(size: usize, n: usize) -> Result<Vec<Shard>, CollectiveError> {
        (0..size).map(|r| Shard::new(r, size, n)).collect()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// First global index (`s_c`, zero-based).
    pub fn start(&self) -> usize {
        self.start
    }

    /// Last global index, inclusive; `None` for an empty shard.
    pub fn end_inclusive(&self) -> Option<usize> {
        (self.len > 0).then(|| self.start + self.len - 1)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn slice<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.range()]
    }

    /// The same partition of a row-major `n x width` array.
    pub fn scaled(&self, width: usize) -> Shard {
        Shard {
            rank: self.rank,
            start: self.start * width,
            len: self.len * width,
            n: self.n * width,
        }
    }
}

/// One rank's handle on the group.
#[derive(Clone)]
pub struct Communicator {
    rank: usize,
    size: usize,
    shared: Arc<Shared>,
}

impl Communicator {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shard(&self, n: usize) -> Shard {
        Shard::new(self.rank, self.size, n).expect("communicator rank is in range")
    }

    /// 64-bit words this rank has sent since the run started, not counting
    /// consensus checks.
    pub fn words_sent(&self) -> u64 {
        self.shared.words_sent(self.rank)
    }

    async fn call(&self, tag: Tag, payload: Payload) -> Result<Output, CollectiveError> {
        CollectiveCall::new(self.shared.clone(), self.rank, Contribution { tag, payload }).await
    }

    /// Concatenates every rank's segment into the full length-`n` vector.
    pub async fn all_gather(&self, local: &[f64], shard: Shard, tag: Tag) -> Result<Vec<f64>, CollectiveError> {
        let payload = Payload::Gather {
            data: local.to_vec(),
            shard,
        };
        match self.call(tag, payload).await? {
            Output::Vector(v) => Ok(v),
            _ => unreachable!("gather yields a vector"),
        }
    }

    /// Elementwise sum over ranks, accumulated in ascending rank order.
    pub async fn all_reduce_sum(&self, local: &[f64], tag: Tag) -> Result<Vec<f64>, CollectiveError> {
        match self.call(tag, Payload::Reduce(local.to_vec())).await? {
            Output::Vector(v) => Ok(v),
            _ => unreachable!("reduce yields a vector"),
        }
    }

    /// Sum of exact accumulators; the rounded result is independent of both
    /// the number of ranks and how terms were split among them.
    pub async fn all_reduce_exact(&self, local: Vec<ExactSum>, tag: Tag) -> Result<Vec<ExactSum>, CollectiveError> {
        match self.call(tag, Payload::ReduceExact(local)).await? {
            Output::Exact(v) => Ok(v),
            _ => unreachable!("exact reduce yields accumulators"),
        }
    }

    /// Copies `root`'s value to every rank. Non-root ranks pass `None`.
    pub async fn broadcast(
        &self,
        value: Option<BroadcastValue>,
        root: usize,
        tag: Tag,
    ) -> Result<BroadcastValue, CollectiveError> {
        if root >= self.size {
            return Err(CollectiveError::InvalidRoot {
                round: 0,
                rank: self.rank,
                root,
                size: self.size,
            });
        }
        let value = if self.rank == root { value } else { None };
        match self.call(tag, Payload::Broadcast { root, value }).await? {
            Output::Broadcast(v) => Ok(v),
            _ => unreachable!("broadcast yields its payload"),
        }
    }

    pub async fn broadcast_vector(&self, value: Option<Vec<f64>>, root: usize, tag: Tag) -> Result<Vec<f64>, CollectiveError> {
        match self.broadcast(value.map(BroadcastValue::Vector), root, tag).await? {
            BroadcastValue::Vector(v) => Ok(v),
            BroadcastValue::Matrix(m) => Ok(m.as_slice().to_vec()),
        }
    }

    pub async fn broadcast_matrix(&self, value: Option<TallMatrix>, root: usize, tag: Tag) -> Result<TallMatrix, CollectiveError> {
        match self.broadcast(value.map(BroadcastValue::Matrix), root, tag).await? {
            BroadcastValue::Matrix(m) => Ok(m),
            BroadcastValue::Vector(v) => Ok(TallMatrix::from_col_major(v.len(), 1, v).expect("column vector")),
        }
    }

    /// Fails on every rank if any rank's digest differs.
    pub async fn check_consensus(&self, digest: u64) -> Result<(), CollectiveError> {
        self.call(Tag::Consensus, Payload::Consensus(digest)).await.map(|_| ())
    }
}

/// How worker programs are driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// One OS thread per rank, parked between collectives.
    Threaded,
    /// A single thread stepping each rank to its next collective in turn.
    /// With a seed, the visiting order is reshuffled on every pass.
    RoundRobin { schedule_seed: Option<u64> },
}

#[derive(Clone)]
pub struct WorkerGroup {
    size: usize,
    backend: Backend,
    timeout: Option<Duration>,
    events: Arc<Mutex<Vec<CommEvent>>>,
    next_event: Arc<AtomicU64>,
}

impl std::fmt::Debug for WorkerGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerGroup")
            .field("size", &self.size)
            .field("backend", &self.backend)
            .finish()
    }
}

impl WorkerGroup {
    pub fn new(size: usize) -> Result<Self, CollectiveError> {
        Self::with_backend(size, Backend::Threaded)
    }

    pub fn with_backend(size: usize, backend: Backend) -> Result<Self, CollectiveError> {
        if size == 0 {
            return Err(CollectiveError::InvalidGroup("group size must be >= 1".into()));
        }
        Ok(Self {
            size,
            backend,
            timeout: Some(Duration::from_secs(120)),
            events: Arc::new(Mutex::new(Vec::new())),
            next_event: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Per-collective wait limit for the threaded backend; `None` waits forever.
    pub fn timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Every event logged so far, in completion order.
    pub fn ledger(&self) -> Vec<CommEvent> {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn clear_ledger(&self) {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).clear();
        self.next_event.store(0, std::sync::atomic::Ordering::SeqCst);
    }

    /// Runs `program` once per rank and returns the outputs in rank order.
    pub fn run<T, F, Fut>(&self, program: F) -> Result<Vec<T>, CollectiveError>
    where
        F: Fn(Communicator) -> Fut + Sync,
        Fut: Future<Output = T>,
        T: Send,
    {
        let timeout = match self.backend {
            Backend::Threaded => self.timeout,
            Backend::RoundRobin { .. } => None,
        };
        let shared = Arc::new(Shared::new(
            self.size,
            timeout,
            self.events.clone(),
            self.next_event.clone(),
        ));
        let comms: Vec<Communicator> = (0..self.size)
            .map(|rank| Communicator {
                rank,
                size: self.size,
                shared: shared.clone(),
            })
            .collect();
        match self.backend {
            Backend::Threaded => run_threaded(&shared, comms, &program),
            Backend::RoundRobin { schedule_seed } => run_round_robin(&shared, comms, &program, schedule_seed),
        }
    }
}

struct ExitGuard<'a> {
    shared: &'a Shared,
    rank: usize,
}

impl Drop for ExitGuard<'_> {
    fn drop(&mut self) {
        self.shared.mark_exited(self.rank);
    }
}

struct ThreadWaker(Thread);

impl Wake for ThreadWaker {
    fn wake(self: Arc<Self>) {
        self.0.unpark();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.0.unpark();
    }
}

fn block_on<F: Future>(fut: F) -> F::Output {
    let mut fut = std::pin::pin!(fut);
    let waker = Waker::from(Arc::new(ThreadWaker(thread::current())));
    let mut cx = Context::from_waker(&waker);
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            return v;
        }
        // Bounded park so collective timeouts are observed without a wake.
        thread::park_timeout(Duration::from_millis(50));
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

fn run_threaded<T, F, Fut>(shared: &Arc<Shared>, comms: Vec<Communicator>, program: &F) -> Result<Vec<T>, CollectiveError>
where
    F: Fn(Communicator) -> Fut + Sync,
    Fut: Future<Output = T>,
    T: Send,
{
    let results: Vec<thread::Result<T>> = thread::scope(|scope| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|comm| {
                let shared = shared.clone();
                thread::Builder::new()
                    .name(format!("worker-{}", comm.rank))
                    .spawn_scoped(scope, move || {
                        let _guard = ExitGuard {
                            shared: &shared,
                            rank: comm.rank,
                        };
                        block_on(program(comm))
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(rank, r)| {
            r.map_err(|p| CollectiveError::WorkerPanicked {
                rank,
                message: panic_message(p),
            })
        })
        .collect()
}

fn run_round_robin<T, F, Fut>(
    shared: &Arc<Shared>,
    comms: Vec<Communicator>,
    program: &F,
    schedule_seed: Option<u64>,
) -> Result<Vec<T>, CollectiveError>
where
    F: Fn(Communicator) -> Fut + Sync,
    Fut: Future<Output = T>,
{
    let size = comms.len();
    let mut futures: Vec<Pin<Box<Fut>>> = comms.into_iter().map(|c| Box::pin(program(c))).collect();
    let mut outputs: Vec<Option<T>> = (0..size).map(|_| None).collect();
    let mut order: Vec<usize> = (0..size).collect();
    let mut rng = schedule_seed.map(ChaCha8Rng::seed_from_u64);
    let mut cx = Context::from_waker(Waker::noop());
    let mut remaining = size;
    let mut stalled_passes = 0;

    while remaining > 0 {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let before = shared.progress();
        let mut finished_any = false;
        for &rank in &order {
            if outputs[rank].is_some() {
                continue;
            }
            let polled = std::panic::catch_unwind(AssertUnwindSafe(|| futures[rank].as_mut().poll(&mut cx)));
            match polled {
                Ok(Poll::Ready(v)) => {
                    outputs[rank] = Some(v);
                    remaining -= 1;
                    finished_any = true;
                    shared.mark_exited(rank);
                }
                Ok(Poll::Pending) => {}
                Err(p) => {
                    shared.mark_exited(rank);
                    return Err(CollectiveError::WorkerPanicked {
                        rank,
                        message: panic_message(p),
                    });
                }
            }
        }
        if !finished_any && shared.progress() == before {
            stalled_passes += 1;
            if stalled_passes > 1 {
                shared.poison(CollectiveError::Deadlock { round: shared.round() });
            }
        } else {
            stalled_passes = 0;
        }
    }
    Ok(outputs.into_iter().map(|o| o.expect("every rank finished")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn backends() -> Vec<Backend> {
        vec![
            Backend::Threaded,
            Backend::RoundRobin { schedule_seed: None },
            Backend::RoundRobin { schedule_seed: Some(1) },
            Backend::RoundRobin { schedule_seed: Some(2) },
            Backend::RoundRobin { schedule_seed: Some(3) },
        ]
    }

    #[test]
    fn shard_partition_follows_remainder_rule() {
        let lens: Vec<usize> = Shard::partition(4, 10).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![3, 3, 3, 1]);
        let lens: Vec<usize> = Shard::partition(3, 1000).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![334, 334, 332]);
        let s = Shard::new(1, 4, 10).unwrap();
        assert_eq!((s.start(), s.end_inclusive()), (3, Some(5)));
        let lens: Vec<usize> = Shard::partition(5, 8).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![2, 2, 2, 2, 0]);
        assert!(Shard::new(4, 4, 10).is_err());
    }

    #[test]
    fn all_gather_concatenates() {
        for backend in backends() {
            let group = WorkerGroup::with_backend(2, backend).unwrap();
            let parts = [vec![1.0, 2.0], vec![3.0, 4.0]];
            let out = group
                .run(|comm| {
                    let parts = &parts;
                    async move {
                        let shard = comm.shard(4);
                        comm.all_gather(&parts[comm.rank()], shard, Tag::Other).await
                    }
                })
                .unwrap();
            for r in out {
                assert_eq!(r.unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
            }
        }
    }

    #[test]
    fn all_gather_single_rank_is_identity() {
        let group = WorkerGroup::new(1).unwrap();
        let out = group
            .run(|comm| async move { comm.all_gather(&[7.0, 8.0, 9.0], comm.shard(3), Tag::Other).await })
            .unwrap();
        assert_eq!(out[0].as_ref().unwrap(), &vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn all_gather_uneven_round_trip() {
        let original: Vec<f64> = (0..10).map(|i| i as f64 * 1.5 - 3.0).collect();
        for backend in backends() {
            let group = WorkerGroup::with_backend(4, backend).unwrap();
            let out = group
                .run(|comm| {
                    let original = &original;
                    async move {
                        let shard = comm.shard(10);
                        comm.all_gather(shard.slice(original), shard, Tag::Other).await
                    }
                })
                .unwrap();
            for r in out {
                assert_eq!(r.unwrap(), original);
            }
        }
    }

    #[test]
    fn all_gather_rejects_wrong_length() {
        let group = WorkerGroup::with_backend(2, Backend::RoundRobin { schedule_seed: None }).unwrap();
        let out = group
            .run(|comm| async move {
                let shard = comm.shard(4);
                let local = if comm.rank() == 1 { vec![1.0] } else { vec![1.0, 2.0] };
                comm.all_gather(&local, shard, Tag::Other).await
            })
            .unwrap();
        for r in out {
            assert!(matches!(r, Err(CollectiveError::Dimension { rank: 1, .. })));
        }
    }

    #[test]
    fn all_reduce_small_cases() {
        for backend in backends() {
            let group = WorkerGroup::with_backend(2, backend).unwrap();
            let out = group
                .run(|comm| async move {
                    let local = if comm.rank() == 0 { [1.0, 2.0] } else { [3.0, 4.0] };
                    let sum = comm.all_reduce_sum(&local, Tag::Other).await?;
                    let zero = comm.all_reduce_sum(&[0.0, 0.0], Tag::Other).await?;
                    Ok::<_, CollectiveError>((sum, zero))
                })
                .unwrap();
            for r in out {
                let (sum, zero) = r.unwrap();
                assert_eq!(sum, vec![4.0, 6.0]);
                assert_eq!(zero, vec![0.0, 0.0]);
            }
        }
    }

    #[test]
    fn all_reduce_matches_sequential_sum_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| rng.random_range(-1e3..1e3)).collect())
            .collect();
        let want: Vec<f64> = (0..16).map(|i| inputs[0][i] + inputs[1][i] + inputs[2][i]).collect();
        for backend in backends() {
            let group = WorkerGroup::with_backend(3, backend).unwrap();
            let out = group
                .run(|comm| {
                    let inputs = &inputs;
                    async move { comm.all_reduce_sum(&inputs[comm.rank()], Tag::Other).await }
                })
                .unwrap();
            for r in out {
                let got = r.unwrap();
                assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn all_reduce_length_mismatch() {
        let group = WorkerGroup::new(3).unwrap();
        let out = group
            .run(|comm| async move {
                let local = vec![1.0; 2 + comm.rank() / 2];
                comm.all_reduce_sum(&local, Tag::Other).await
            })
            .unwrap();
        for r in out {
            assert!(matches!(r, Err(CollectiveError::Dimension { rank: 2, .. })));
        }
    }

    #[test]
    fn broadcast_copies_root_payload() {
        let payload = TallMatrix::from_row_major(8, 2, &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        for backend in backends() {
            let group = WorkerGroup::with_backend(3, backend).unwrap();
            let out = group
                .run(|comm| {
                    let payload = &payload;
                    async move {
                        let v = comm.broadcast_vector(Some(vec![5.0, 6.0]), 0, Tag::Other).await?;
                        let m = comm.broadcast_matrix(Some(payload.clone()), 2, Tag::Other).await?;
                        Ok::<_, CollectiveError>((v, m))
                    }
                })
                .unwrap();
            for r in out {
                let (v, m) = r.unwrap();
                assert_eq!(v, vec![5.0, 6.0]);
                let same = m.as_slice().iter().zip(payload.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same && m.rows() == 8 && m.cols() == 2);
            }
        }
        let group = WorkerGroup::new(1).unwrap();
        let out = group
            .run(|comm| async move { comm.broadcast_vector(Some(vec![1.0]), 0, Tag::Other).await })
            .unwrap();
        assert_eq!(out[0].as_ref().unwrap(), &vec![1.0]);
    }

    #[test]
    fn broadcast_invalid_root() {
        let group = WorkerGroup::new(2).unwrap();
        let out = group
            .run(|comm| async move { comm.broadcast_vector(Some(vec![1.0]), 5, Tag::Other).await })
            .unwrap();
        for r in out {
            assert!(matches!(r, Err(CollectiveError::InvalidRoot { root: 5, .. })));
        }
    }

    #[test]
    fn missing_rank_is_reported_not_hung() {
        for backend in backends() {
            let group = WorkerGroup::with_backend(3, backend).unwrap();
            let out = group
                .run(|comm| async move {
                    if comm.rank() == 1 {
                        return Ok(vec![]);
                    }
                    comm.all_reduce_sum(&[1.0], Tag::Other).await
                })
                .unwrap();
            assert!(matches!(out[0], Err(CollectiveError::MissingRank { .. })));
            assert!(matches!(out[2], Err(CollectiveError::MissingRank { .. })));
        }
    }

    #[test]
    fn threaded_timeout_fires() {
        // Rank 1 blocks outside any collective, so exit tracking cannot help.
        let group = WorkerGroup::new(2).unwrap().timeout(Some(Duration::from_millis(100)));
        let out = group
            .run(|comm| async move {
                if comm.rank() == 1 {
                    thread::sleep(Duration::from_millis(400));
                    return Err(CollectiveError::InvalidGroup("late".into()));
                }
                comm.all_reduce_sum(&[1.0], Tag::Other).await
            })
            .unwrap();
        assert!(matches!(out[0], Err(CollectiveError::Timeout { .. })));
    }

    #[test]
    fn op_mismatch_detected() {
        let group = WorkerGroup::with_backend(2, Backend::RoundRobin { schedule_seed: Some(9) }).unwrap();
        let out = group
            .run(|comm| async move {
                if comm.rank() == 0 {
                    comm.all_reduce_sum(&[1.0], Tag::Other).await.map(|_| ())
                } else {
                    comm.all_gather(&[1.0], comm.shard(2), Tag::Other).await.map(|_| ())
                }
            })
            .unwrap();
        for r in out {
            assert!(matches!(r, Err(CollectiveError::OpMismatch { .. })));
        }
    }

    #[test]
    fn consensus_flags_divergence() {
        let group = WorkerGroup::new(3).unwrap();
        let out = group
            .run(|comm| async move { comm.check_consensus(if comm.rank() == 2 { 7 } else { 1 }).await })
            .unwrap();
        for r in out {
            assert!(matches!(r, Err(CollectiveError::Divergence { rank: 2, .. })));
        }
    }

    #[test]
    fn worker_panic_is_reported() {
        for backend in [Backend::Threaded, Backend::RoundRobin { schedule_seed: None }] {
            let group = WorkerGroup::with_backend(2, backend).unwrap();
            let res = group.run(|comm| async move {
                if comm.rank() == 0 {
                    panic!("boom");
                }
                comm.all_reduce_sum(&[1.0], Tag::Other).await
            });
            assert!(matches!(res, Err(CollectiveError::WorkerPanicked { rank: 0, .. })));
        }
    }

    #[test]
    fn ledger_conserves_and_counts() {
        let group = WorkerGroup::new(4).unwrap();
        group
            .run(|comm| async move {
                let shard = comm.shard(10);
                let v = comm.all_gather(&vec![1.0; shard.len()], shard, Tag::LanczosVector).await?;
                comm.all_reduce_sum(&v[..3], Tag::Projection).await?;
                comm.broadcast_vector(Some(vec![0.0; 5]), 1, Tag::Other).await?;
                Ok::<_, CollectiveError>(())
            })
            .unwrap();
        let events = group.ledger();
        assert_eq!(events.len(), 12);
        let (sent, received) = conservation(&events);
        assert_eq!(sent, received);
        let counts = CommCounts::from_events(&events);
        assert_eq!((counts.all_gather, counts.all_reduce, counts.broadcast), (1, 1, 1));
        assert!(events.iter().filter(|e| e.op == CollectiveOp::AllGather).all(|e| e.floats == 10));
    }

    /// Scheduling independence: the same program produces bitwise identical
    /// results under every backend and random interleaving.
    #[test]
    fn results_independent_of_schedule() {
        let program = |comm: Communicator| async move {
            let mut state: Vec<f64> = (0..7).map(|i| ((comm.rank() * 7 + i) as f64).cos()).collect();
            for step in 0..20 {
                let shard = comm.shard(7 * comm.size());
                let mut local = vec![0.0; shard.len()];
                for (i, x) in local.iter_mut().enumerate() {
                    *x = state[i % 7] * (step as f64 + 1.0).sqrt();
                }
                let gathered = comm.all_gather(&local, shard, Tag::Other).await?;
                let reduced = comm.all_reduce_sum(&gathered[..7], Tag::Other).await?;
                for (s, r) in state.iter_mut().zip(&reduced) {
                    *s = (*s * 0.5 + r * 0.1).sin();
                }
            }
            Ok::<_, CollectiveError>(state.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        let reference = WorkerGroup::with_backend(3, Backend::RoundRobin { schedule_seed: None })
            .unwrap()
            .run(program)
            .unwrap();
        for backend in backends() {
            let out = WorkerGroup::with_backend(3, backend).unwrap().run(program).unwrap();
            for (a, b) in out.iter().zip(&reference) {
                assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gather_of_split_is_identity(n in 1usize..40, c in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let group = WorkerGroup::with_backend(c, Backend::RoundRobin { schedule_seed: Some(seed) }).unwrap();
            let out = group.run(|comm| {
                let v = &v;
                async move {
                    let shard = comm.shard(v.len());
                    comm.all_gather(shard.slice(v), shard, Tag::Other).await
                }
            }).unwrap();
            for r in out {
                prop_assert_eq!(r.unwrap(), v.clone());
            }
        }

        #[test]
        fn reduce_is_linear(seed in 0u64..1000, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..c).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..c).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let group = WorkerGroup::with_backend(c, Backend::RoundRobin { schedule_seed: Some(seed) }).unwrap();
            let out = group.run(|comm| {
                let (a, b) = (&a, &b);
                async move {
                    let r = comm.rank();
                    let ra = comm.all_reduce_sum(&a[r], Tag::Other).await?;
                    let rb = comm.all_reduce_sum(&b[r], Tag::Other).await?;
                    let ab: Vec<f64> = a[r].iter().zip(&b[r]).map(|(x, y)| x + y).collect();
                    let rab = comm.all_reduce_sum(&ab, Tag::Other).await?;
                    Ok::<_, CollectiveError>((ra, rb, rab))
                }
            }).unwrap();
            for r in out {
                let (ra, rb, rab) = r.unwrap();
                for i in 0..5 {
                    prop_assert!((ra[i] + rb[i] - rab[i]).abs() <= 1e-12);
                }
            }
        }
    }
}
