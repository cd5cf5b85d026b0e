pub mod collectives;
pub mod dist_lanczos;
pub mod error;
pub mod lanczos;
pub mod linalg;
pub mod optimizer;
pub mod oracle;

pub use error::{Error, Result};

pub use collectives::{Backend, CollectiveError, CommEvent, Communicator, Tag, WorkerGroup};
pub use dist_lanczos::{distributed_ese, lanczos_distributed, run_distributed_ese, SlotKind, SlotMeter};
pub use lanczos::{extract_ese, lanczos_budget, lanczos_single, EseResult, LanczosOptions, LanczosState};
pub use linalg::{TallMatrix, TridiagMatrix};
pub use optimizer::{
    admm_deltas, dho2_train, fosi_deltas, fosi_train, sgd_train, train, AdmmState, BaseConfig, BaseKind,
    BaseOptimizerState, EpochRecord, TrainConfig, TrainResult, TrainerKind,
};
pub use oracle::{quadratic_oracle, Dataset, DatasetKind, Oracle};
