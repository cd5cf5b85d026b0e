use std::fmt;

/// Which collective primitive an event belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CollectiveOp {
    AllGather,
    AllReduceSum,
    Broadcast,
    /// Digest comparison used for divergence detection. Not one of the
    /// algorithm's data-moving collectives.
    Consensus,
}

impl CollectiveOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveOp::AllGather => "all_gather",
            CollectiveOp::AllReduceSum => "all_reduce_sum",
            CollectiveOp::Broadcast => "broadcast",
            CollectiveOp::Consensus => "consensus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "all_gather" => CollectiveOp::AllGather,
            "all_reduce_sum" => CollectiveOp::AllReduceSum,
            "broadcast" => CollectiveOp::Broadcast,
            "consensus" => CollectiveOp::Consensus,
            _ => return None,
        })
    }
}

impl fmt::Display for CollectiveOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a collective call was issued for; lets reports separate the
/// Lanczos traffic from gradient synchronization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    /// Assembling the current Lanczos vector from its shards.
    LanczosVector,
    /// Gram-Schmidt projection coefficients.
    Projection,
    /// Squared norm of the orthogonalized residual.
    Norm,
    /// Second Gram-Schmidt pass (coefficients or norm) when the safeguard fires.
    Reorth,
    /// Final assembly of the eigenvector block; counts as the broadcast step.
    EseAssembly,
    Gradient,
    Consensus,
    Other,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::LanczosVector => "lanczos_vector",
            Tag::Projection => "projection",
            Tag::Norm => "norm",
            Tag::Reorth => "reorth",
            Tag::EseAssembly => "ese_assembly",
            Tag::Gradient => "gradient",
            Tag::Consensus => "consensus",
            Tag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "lanczos_vector" => Tag::LanczosVector,
            "projection" => Tag::Projection,
            "norm" => Tag::Norm,
            "reorth" => Tag::Reorth,
            "ese_assembly" => Tag::EseAssembly,
            "gradient" => Tag::Gradient,
            "consensus" => Tag::Consensus,
            "other" => Tag::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One rank's view of one completed collective.
///
/// `floats` is the logical payload (e.g. `n` for gathering a Lanczos vector).
/// `sent` / `received` count floats moved under a point-to-point model
/// (every contribution delivered to every other rank), so summed over all
/// ranks of a round they are always equal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommEvent {
    pub event_index: u64,
    pub round: u64,
    pub op: CollectiveOp,
    pub tag: Tag,
    pub floats: usize,
    pub rank: usize,
    pub sent: usize,
    pub received: usize,
    /// 64-bit words per logical float on the wire (exact-sum reductions
    /// carry a fixed-point accumulator per value).
    pub words_per_float: usize,
}

/// Aggregate counts over a slice of events, counting each collective once
/// (rank 0's row).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommCounts {
    pub all_gather: usize,
    pub all_reduce: usize,
    pub broadcast: usize,
    pub consensus: usize,
}

impl CommCounts {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a CommEvent>) -> Self {
        let mut c = CommCounts::default();
        for e in events.into_iter().filter(|e| e.rank == 0) {
            match e.op {
                CollectiveOp::AllGather => c.all_gather += 1,
                CollectiveOp::AllReduceSum => c.all_reduce += 1,
                CollectiveOp::Broadcast => c.broadcast += 1,
                CollectiveOp::Consensus => c.consensus += 1,
            }
        }
        c
    }
}

/// `(total sent, total received)` over all ranks.
pub fn conservation(events: &[CommEvent]) -> (usize, usize) {
    events
        .iter()
        .fold((0, 0), |(s, r), e| (s + e.sent, r + e.received))
}
