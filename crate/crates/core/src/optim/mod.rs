//! Federated optimizers: FedAvg, FedSAM and FedVSSAM.
//!
//! Devices run [`local`] rounds against a broadcast model (and, for FedVSSAM,
//! the server direction `h`); the [`server`] aggregates the returned models.
//! [`training::Trainer`] drives whole runs round by round.

mod config;
pub mod direction;
pub mod local;
pub mod server;
pub mod training;

pub use config::{AlgoConfig, Algorithm};
pub use direction::{mix_direction, sam_perturb, NORM_THRESHOLD};
pub use local::{
    local_round, local_round_fedavg, local_round_fedsam, local_round_vssam, DeviceUpdate, LocalContext,
    LocalOutcome,
};
pub use server::{aggregate_avg, aggregate_vssam, global_update_vssam, sample_devices, ServerState};
pub use training::{run_training, DeviceTrace, RoundTranscript, Trainer};
