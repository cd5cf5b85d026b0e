//! Shared rendezvous buffer behind every collective.
//!
//! A round has two phases. While *collecting*, each rank deposits its
//! contribution; the last arrival computes the result in ascending rank order
//! and flips the round to *distributing*. Each rank then takes a copy of the
//! result; the last departure resets the buffer for the next round. A rank
//! cannot enter round `r + 1` until everyone has left round `r`, so results
//! never depend on arrival order.

use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Waker};
use std::time::{Duration, Instant};

use super::ledger::{CollectiveOp, CommEvent, Tag};
use super::{CollectiveError, Shard};
use crate::linalg::{ExactSum, TallMatrix};

const EXACT_WORDS: usize = ExactSum::WIRE_WORDS;

#[derive(Clone, Debug)]
pub enum BroadcastValue {
    Vector(Vec<f64>),
    Matrix(TallMatrix),
}

impl BroadcastValue {
    pub fn len(&self) -> usize {
        match self {
            BroadcastValue::Vector(v) => v.len(),
            BroadcastValue::Matrix(m) => m.slots(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) enum Payload {
    Gather { data: Vec<f64>, shard: Shard },
    Reduce(Vec<f64>),
    ReduceExact(Vec<ExactSum>),
    Broadcast { root: usize, value: Option<BroadcastValue> },
    Consensus(u64),
}

impl Payload {
    fn op(&self) -> CollectiveOp {
        match self {
            Payload::Gather { .. } => CollectiveOp::AllGather,
            Payload::Reduce(_) | Payload::ReduceExact(_) => CollectiveOp::AllReduceSum,
            Payload::Broadcast { .. } => CollectiveOp::Broadcast,
            Payload::Consensus(_) => CollectiveOp::Consensus,
        }
    }
}

pub(crate) struct Contribution {
    pub tag: Tag,
    pub payload: Payload,
}

#[derive(Clone, Debug)]
pub(crate) enum Output {
    Vector(Vec<f64>),
    Exact(Vec<ExactSum>),
    Broadcast(BroadcastValue),
    Unit,
}

type Outcome = Arc<Result<Output, CollectiveError>>;

#[derive(PartialEq, Eq)]
enum Phase {
    Collecting,
    Distributing,
}

struct RoundState {
    round: u64,
    phase: Phase,
    slots: Vec<Option<Contribution>>,
    arrived: usize,
    departed: usize,
    outcome: Option<Outcome>,
    wakers: Vec<Option<Waker>>,
    exited: Vec<bool>,
    poisoned: Option<CollectiveError>,
}

pub(crate) struct Shared {
    size: usize,
    timeout: Option<Duration>,
    state: Mutex<RoundState>,
    events: Arc<Mutex<Vec<CommEvent>>>,
    next_event: Arc<AtomicU64>,
    progress: AtomicU64,
    words_sent: Vec<AtomicU64>,
}

impl Shared {
    pub fn new(
        size: usize,
        timeout: Option<Duration>,
        events: Arc<Mutex<Vec<CommEvent>>>,
        next_event: Arc<AtomicU64>,
    ) -> Self {
        Self {
            size,
            timeout,
            state: Mutex::new(RoundState {
                round: 0,
                phase: Phase::Collecting,
                slots: (0..size).map(|_| None).collect(),
                arrived: 0,
                departed: 0,
                outcome: None,
                wakers: vec![None; size],
                exited: vec![false; size],
                poisoned: None,
            }),
            events,
            next_event,
            progress: AtomicU64::new(0),
            words_sent: (0..size).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// 64-bit words `rank` has sent in this run, consensus checks excluded.
    pub fn words_sent(&self, rank: usize) -> u64 {
        self.words_sent[rank].load(Ordering::SeqCst)
    }

    fn lock(&self) -> MutexGuard<'_, RoundState> {
        // A panicking worker must not wedge the others; they observe the
        // exit through `mark_exited` instead.
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn progress(&self) -> u64 {
        self.progress.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.progress.fetch_add(1, Ordering::SeqCst);
    }

    /// Records that `rank` has finished its program (normally or not).
    pub fn mark_exited(&self, rank: usize) {
        let mut st = self.lock();
        st.exited[rank] = true;
        self.check_missing(&mut st);
        wake_all(&mut st);
        self.bump();
    }

    pub fn round(&self) -> u64 {
        self.lock().round
    }

    pub fn poison(&self, err: CollectiveError) {
        let mut st = self.lock();
        if st.poisoned.is_none() {
            st.poisoned = Some(err);
        }
        wake_all(&mut st);
        self.bump();
    }

    fn check_missing(&self, st: &mut RoundState) {
        if st.phase != Phase::Collecting || st.arrived == 0 || st.poisoned.is_some() {
            return;
        }
        let exited: Vec<usize> = (0..self.size)
            .filter(|&r| st.exited[r] && st.slots[r].is_none())
            .collect();
        if !exited.is_empty() && st.arrived + exited.len() == self.size {
            st.poisoned = Some(CollectiveError::MissingRank {
                round: st.round,
                ranks: exited,
            });
        }
    }

    fn complete_round(&self, st: &mut RoundState) {
        let contributions: Vec<Contribution> = st.slots.iter_mut().map(|s| s.take().unwrap()).collect();
        let round = st.round;
        let result = combine(round, &contributions);
        if result.is_ok() {
            self.log(round, &contributions);
        }
        st.outcome = Some(Arc::new(result));
        st.phase = Phase::Distributing;
    }

    fn log(&self, round: u64, contributions: &[Contribution]) {
        let c = self.size;
        let tag = contributions[0].tag;
        let op = contributions[0].payload.op();
        let mut rows = Vec::with_capacity(c);
        match &contributions[0].payload {
            Payload::Gather { shard, .. } => {
                let n = shard.n();
                for (rank, contrib) in contributions.iter().enumerate() {
                    let Payload::Gather { data, .. } = &contrib.payload else { unreachable!() };
                    rows.push((rank, n, data.len() * (c - 1), n - data.len(), 1));
                }
            }
            Payload::Reduce(v) => {
                let l = v.len();
                rows.extend((0..c).map(|r| (r, l, l * (c - 1), l * (c - 1), 1)));
            }
            Payload::ReduceExact(v) => {
                let l = v.len();
                rows.extend((0..c).map(|r| (r, l, l * (c - 1), l * (c - 1), EXACT_WORDS)));
            }
            Payload::Broadcast { root, .. } => {
                let Payload::Broadcast { value: Some(value), .. } = &contributions[*root].payload else {
                    unreachable!()
                };
                let l = value.len();
                for r in 0..c {
                    if r == *root {
                        rows.push((r, l, l * (c - 1), 0, 1));
                    } else {
                        rows.push((r, l, 0, l, 1));
                    }
                }
            }
            Payload::Consensus(_) => {
                rows.extend((0..c).map(|r| (r, 1, c - 1, c - 1, 1)));
            }
        }
        let index = self.next_event.fetch_add(1, Ordering::SeqCst);
        let mut events = self.events.lock().unwrap_or_else(|p| p.into_inner());
        for (rank, floats, sent, received, words) in rows {
            if op != CollectiveOp::Consensus {
                self.words_sent[rank].fetch_add((sent * words) as u64, Ordering::SeqCst);
            }
            events.push(CommEvent {
                event_index: index,
                round,
                op,
                tag,
                floats,
                rank,
                sent,
                received,
                words_per_float: words,
            });
        }
    }
}

fn wake_all(st: &mut RoundState) {
    for w in st.wakers.iter_mut() {
        if let Some(w) = w.take() {
            w.wake();
        }
    }
}

/// Computes the round's result from all contributions, in rank order.
fn combine(round: u64, contributions: &[Contribution]) -> Result<Output, CollectiveError> {
    let op = contributions[0].payload.op();
    if let Some((rank, other)) = contributions
        .iter()
        .enumerate()
        .find(|(_, c)| c.payload.op() != op)
    {
        return Err(CollectiveError::OpMismatch {
            round,
            expected: op,
            rank,
            actual: other.payload.op(),
        });
    }
    match &contributions[0].payload {
        Payload::Gather { shard: first, .. } => {
            let n = first.n();
            let mut out = Vec::with_capacity(n);
            for (rank, c) in contributions.iter().enumerate() {
                let Payload::Gather { data, shard } = &c.payload else { unreachable!() };
                if shard.n() != n || shard.rank() != rank || shard.start() != out.len() {
                    return Err(CollectiveError::ShardLayout {
                        round,
                        rank,
                        detail: format!(
                            "shard {}..+{} of n={} does not follow offset {}",
                            shard.start(),
                            shard.len(),
                            shard.n(),
                            out.len()
                        ),
                    });
                }
                if data.len() != shard.len() {
                    return Err(CollectiveError::Dimension {
                        round,
                        rank,
                        expected: shard.len(),
                        actual: data.len(),
                    });
                }
                out.extend_from_slice(data);
            }
            if out.len() != n {
                return Err(CollectiveError::ShardLayout {
                    round,
                    rank: contributions.len() - 1,
                    detail: format!("shards cover {} of {n} entries", out.len()),
                });
            }
            Ok(Output::Vector(out))
        }
        Payload::Reduce(first) => {
            let mut acc = first.clone();
            for (rank, c) in contributions.iter().enumerate().skip(1) {
                let Payload::Reduce(v) = &c.payload else {
                    return Err(CollectiveError::OpMismatch {
                        round,
                        expected: op,
                        rank,
                        actual: op,
                    });
                };
                if v.len() != acc.len() {
                    return Err(CollectiveError::Dimension {
                        round,
                        rank,
                        expected: acc.len(),
                        actual: v.len(),
                    });
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            Ok(Output::Vector(acc))
        }
        Payload::ReduceExact(first) => {
            let mut acc = first.clone();
            for (rank, c) in contributions.iter().enumerate().skip(1) {
                let Payload::ReduceExact(v) = &c.payload else {
                    return Err(CollectiveError::OpMismatch {
                        round,
                        expected: op,
                        rank,
                        actual: op,
                    });
                };
                if v.len() != acc.len() {
                    return Err(CollectiveError::Dimension {
                        round,
                        rank,
                        expected: acc.len(),
                        actual: v.len(),
                    });
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            Ok(Output::Exact(acc))
        }
        Payload::Broadcast { root, .. } => {
            let size = contributions.len();
            for (rank, c) in contributions.iter().enumerate() {
                let Payload::Broadcast { root: r, .. } = &c.payload else { unreachable!() };
                if *r != *root || *r >= size {
                    return Err(CollectiveError::InvalidRoot { round, rank, root: *r, size });
                }
            }
            match &contributions[*root].payload {
                Payload::Broadcast { value: Some(v), .. } => Ok(Output::Broadcast(v.clone())),
                _ => Err(CollectiveError::InvalidRoot {
                    round,
                    rank: *root,
                    root: *root,
                    size,
                }),
            }
        }
        Payload::Consensus(first) => {
            for (rank, c) in contributions.iter().enumerate() {
                let Payload::Consensus(d) = &c.payload else { unreachable!() };
                if d != first {
                    return Err(CollectiveError::Divergence {
                        round,
                        rank,
                        expected: *first,
                        actual: *d,
                    });
                }
            }
            Ok(Output::Unit)
        }
    }
}

enum Stage {
    Enter,
    Wait(u64),
    Done,
}

/// Future for one rank's participation in one collective.
pub(crate) struct CollectiveCall {
    shared: Arc<Shared>,
    rank: usize,
    contribution: Option<Contribution>,
    stage: Stage,
    started: Instant,
}

impl CollectiveCall {
    pub fn new(shared: Arc<Shared>, rank: usize, contribution: Contribution) -> Self {
        Self {
            shared,
            rank,
            contribution: Some(contribution),
            stage: Stage::Enter,
            started: Instant::now(),
        }
    }
}

impl Future for CollectiveCall {
    type Output = Result<Output, CollectiveError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        let shared = this.shared.clone();
        let mut st = shared.lock();
        loop {
            if let Some(err) = &st.poisoned {
                this.stage = Stage::Done;
                return Poll::Ready(Err(err.clone()));
            }
            match this.stage {
                Stage::Enter => {
                    if st.phase != Phase::Collecting {
                        break;
                    }
                    let round = st.round;
                    st.slots[this.rank] = this.contribution.take();
                    st.arrived += 1;
                    shared.bump();
                    if st.arrived == shared.size {
                        shared.complete_round(&mut st);
                        wake_all(&mut st);
                    } else {
                        shared.check_missing(&mut st);
                        if st.poisoned.is_some() {
                            wake_all(&mut st);
                        }
                    }
                    this.stage = Stage::Wait(round);
                }
                Stage::Wait(round) => {
                    if st.phase != Phase::Distributing || st.round != round {
                        break;
                    }
                    let outcome = st.outcome.clone().expect("distributing round has an outcome");
                    st.departed += 1;
                    shared.bump();
                    if st.departed == shared.size {
                        st.phase = Phase::Collecting;
                        st.round += 1;
                        st.arrived = 0;
                        st.departed = 0;
                        st.outcome = None;
                        wake_all(&mut st);
                    }
                    this.stage = Stage::Done;
                    return Poll::Ready((*outcome).clone());
                }
                Stage::Done => panic!("collective polled after completion"),
            }
        }

        if let Some(limit) = shared.timeout {
            if this.started.elapsed() > limit {
                let round = st.round;
                st.poisoned = Some(CollectiveError::Timeout { round, rank: this.rank });
                wake_all(&mut st);
                this.stage = Stage::Done;
                return Poll::Ready(Err(CollectiveError::Timeout { round, rank: this.rank }));
            }
        }
        st.wakers[this.rank] = Some(cx.waker().clone());
        Poll::Pending
    }
}
