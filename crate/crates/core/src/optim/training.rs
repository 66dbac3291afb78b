//! Round-by-round training driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AlgoConfig, Algorithm};
use super::local::{local_round, LocalContext, LocalOutcome};
use super::server::{aggregate_avg, aggregate_vssam, global_update_vssam, sample_devices, ServerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::params::ParamVector;
use crate::partition::Partition;
use crate::rng::{Purpose, RngStream};
use crate::shard::DeviceShard;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub device: usize,
    pub losses: Vec<f64>,
    /// Recorded `u_i^{t,k}`; only present when direction recording is on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<ParamVector>>,
}

/// What happened in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// `g^{t+1}`; FedVSSAM only.
    pub aggregated: Option<ParamVector>,
    /// `h^{t+1}`; FedVSSAM only.
    pub h_next: Option<ParamVector>,
    /// Per sampled device, ascending by id.
    pub devices: Vec<DeviceTrace>,
}

/// Owns the server state and every device's shard for one run.
///
/// Device work inside a round runs on the current rayon pool unless
/// [`Trainer::sequential`] is set; results are identical either way because
/// every device draws from its own keyed stream and aggregation sums in
/// device-id order.
pub struct Trainer<'a> {
    spec: &'a ModelSpec,
    dataset: &'a Dataset,
    config: AlgoConfig,
    shards: Vec<DeviceShard>,
    state: ServerState,
    record_directions: bool,
    parallel: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a ModelSpec, dataset: &'a Dataset, partition: &Partition, config: AlgoConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if partition.num_devices() != config.num_devices {
            return Err(Error::invalid(format!(
                "partition has {} devices but the config expects {}",
                partition.num_devices(),
                config.num_devices
            )));
        }
        partition.validate(dataset.len())?;
        if spec.kind != crate::model::ModelKind::Quadratic {
            if dataset.input_dim() != spec.input_dim || dataset.num_classes() > spec.num_classes {
                return Err(Error::invalid("dataset shape does not match the model"));
            }
        }
        let shards = partition
            .assignments
            .iter()
            .enumerate()
            .map(|(i, idx)| DeviceShard::new(i, idx.clone(), config.sampling))
            .collect();
        let theta0 = spec.init_params(&mut RngStream::global(config.master_seed, Purpose::ModelInit).rng());
        Ok(Trainer {
            spec,
            dataset,
            config,
            shards,
            state: ServerState::new(theta0),
            record_directions: false,
            parallel: true,
        })
    }

    /// Starts from `theta` instead of the model's default initialization.
    pub fn with_initial_params(mut self, theta: ParamVector) -> Result<Self> {
        theta.ensure_dim(self.spec.param_dim(), "initial params")?;
        self.state = ServerState::new(theta);
        Ok(self)
    }

    pub fn record_directions(mut self, on: bool) -> Self {
        self.record_directions = on;
        self
    }

    pub fn sequential(mut self, on: bool) -> Self {
        self.parallel = !on;
        self
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    /// Executes round `t = state.round`.
    pub fn step(&mut self) -> Result<RoundTranscript> {
        let t = self.state.round;
        self.round(t).map_err(|e| e.at_round(t))
    }

    fn round(&mut self, t: usize) -> Result<RoundTranscript> {
        let cfg = &self.config;
        let sampled = sample_devices(
            cfg.num_devices,
            cfg.devices_per_round,
            RngStream::new(cfg.master_seed, Purpose::DeviceSelection, 0, t),
        )?;
        let ctx = LocalContext {
            spec: self.spec,
            dataset: self.dataset,
            config: cfg,
            record_directions: self.record_directions,
        };
        let theta = &self.state.theta;
        let h = (cfg.algorithm == Algorithm::FedVssam).then_some(&self.state.h);
        let run = |shard: &mut DeviceShard| -> Result<LocalOutcome> {
            let stream = RngStream::new(cfg.master_seed, Purpose::BatchSampling, shard.device_id(), t);
            local_round(&ctx, shard, theta, h, stream)
        };
        let selected = |shard: &&mut DeviceShard| sampled.binary_search(&shard.device_id()).is_ok();
        let outcomes: Vec<LocalOutcome> = if self.parallel {
            self.shards.par_iter_mut().filter(selected).map(run).collect::<Result<_>>()?
        } else {
            self.shards.iter_mut().filter(selected).map(run).collect::<Result<_>>()?
        };

        let updates: Vec<_> = outcomes.iter().map(|o| o.update.clone()).collect();
        let (next, aggregated, h_next) = match cfg.algorithm {
            Algorithm::FedAvg | Algorithm::FedSam => {
                let theta = aggregate_avg(&updates)?;
                let next = ServerState {
                    theta,
                    h: self.state.h.clone(),
                    round: t + 1,
                };
                (next, None, None)
            }
            Algorithm::FedVssam => {
                let g = aggregate_vssam(theta, &updates, cfg.local_lr, cfg.effective_local_steps())?;
                let next = global_update_vssam(&self.state, &g, cfg.gamma_global, cfg.global_lr)?;
                let h_next = next.h.clone();
                (next, Some(g), Some(h_next))
            }
        };
        self.state = next;
        let devices = outcomes
            .into_iter()
            .map(|o| DeviceTrace {
                device: o.update.device_id,
                losses: o.losses,
                directions: o.directions,
            })
            .collect();
        Ok(RoundTranscript {
            round: t,
            sampled,
            aggregated,
            h_next,
            devices,
        })
    }

    /// Runs all remaining rounds.
    pub fn run(&mut self) -> Result<Vec<RoundTranscript>> {
        let mut out = Vec::with_capacity(self.config.rounds.saturating_sub(self.state.round));
        while !self.is_finished() {
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn into_state(self) -> ServerState {
        self.state
    }
}

/// Trains for `config.rounds` rounds from the default initialization.
pub fn run_training(
    spec: &ModelSpec,
    dataset: &Dataset,
    partition: &Partition,
    config: &AlgoConfig,
) -> Result<(ServerState, Vec<RoundTranscript>)> {
    let mut trainer = Trainer::new(spec, dataset, partition, config.clone())?;
    let transcripts = trainer.run()?;
    Ok((trainer.into_state(), transcripts))
}
