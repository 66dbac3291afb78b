//! Device-side local rounds.

use serde::{Deserialize, Serialize};

use super::config::{AlgoConfig, Algorithm};
use super::direction::{mix_direction, sam_perturb};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_loss, gradient, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::rng::RngStream;
use crate::shard::DeviceShard;

/// What a device uploads at the end of a round: its final local model and
/// nothing else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceUpdate {
    pub device_id: usize,
    pub theta_end: ParamVector,
}

/// A local round's upload plus simulator-side bookkeeping that never
/// leaves the device in the modelled protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub update: DeviceUpdate,
    /// Batch loss at `θ_i^{t,k}` on `φ_i^{t,k}` for each local step.
    pub losses: Vec<f64>,
    /// The update directions `u_i^{t,k}`, when recording was requested.
    pub directions: Option<Vec<ParamVector>>,
}

/// Read-only inputs shared by every device in a round.
#[derive(Clone, Copy, Debug)]
pub struct LocalContext<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub config: &'a AlgoConfig,
    pub record_directions: bool,
}

/// Runs the local loop: for each step draw a batch, ask `direction` for the
/// update direction at the current iterate, and take `θ ← θ − η_l u`.
fn run_local<F>(
    ctx: &LocalContext<'_>,
    shard: &mut DeviceShard,
    theta: &ParamVector,
    stream: RngStream,
    mut direction: F,
) -> Result<LocalOutcome>
where
    F: FnMut(&ParamVector, &Batch) -> Result<ParamVector>,
{
    theta.ensure_dim(ctx.spec.param_dim(), "broadcast model")?;
    let device = shard.device_id();
    let steps = ctx.config.effective_local_steps();
    let mut rng = stream.rng();
    let mut local = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    let mut recorded = ctx.record_directions.then(|| Vec::with_capacity(steps));
    for k in 0..steps {
        let mut step = || -> Result<ParamVector> {
            let batch = shard.sample_batch(ctx.dataset, ctx.config.batch_size, &mut rng)?;
            losses.push(forward_loss(ctx.spec, &local, &batch)?);
            direction(&local, &batch)
        };
        let u = step().map_err(|e| e.at_device(device, k))?;
        local.axpy(-ctx.config.local_lr, &u);
        local
            .ensure_finite("local model")
            .map_err(|e| e.at_device(device, k))?;
        if let Some(r) = recorded.as_mut() {
            r.push(u);
        }
    }
    Ok(LocalOutcome {
        update: DeviceUpdate {
            device_id: device,
            theta_end: local,
        },
        losses,
        directions: recorded,
    })
}

/// FedVSSAM local round.
///
/// Each step mixes the stochastic gradient with the broadcast direction `h`
/// to build the perturbation direction, evaluates the gradient at the
/// perturbed point on the same batch, and descends along the same mix of `h`
/// and the perturbed gradient. `h` is only read.
pub fn local_round_vssam(
    ctx: &LocalContext<'_>,
    shard: &mut DeviceShard,
    theta: &ParamVector,
    h: &ParamVector,
    stream: RngStream,
) -> Result<LocalOutcome> {
    h.ensure_dim(theta.dim(), "server direction")?;
    let cfg = ctx.config;
    run_local(ctx, shard, theta, stream, |local, batch| {
        let g = gradient(ctx.spec, local, batch)?;
        let search = mix_direction(h, &g, cfg.gamma_local)?;
        let perturbed = sam_perturb(local, &search, cfg.rho)?;
        let g_tilde = gradient(ctx.spec, &perturbed, batch)?;
        mix_direction(h, &g_tilde, cfg.gamma_local)
    })
}

/// FedSAM local round: perturb along the batch gradient, descend along the
/// gradient at the perturbed point.
pub fn local_round_fedsam(
    ctx: &LocalContext<'_>,
    shard: &mut DeviceShard,
    theta: &ParamVector,
    stream: RngStream,
) -> Result<LocalOutcome> {
    let rho = ctx.config.rho;
    run_local(ctx, shard, theta, stream, |local, batch| {
        let g = gradient(ctx.spec, local, batch)?;
        let perturbed = sam_perturb(local, &g, rho)?;
        gradient(ctx.spec, &perturbed, batch)
    })
}

/// FedAvg local round: plain SGD.
pub fn local_round_fedavg(
    ctx: &LocalContext<'_>,
    shard: &mut DeviceShard,
    theta: &ParamVector,
    stream: RngStream,
) -> Result<LocalOutcome> {
    run_local(ctx, shard, theta, stream, |local, batch| gradient(ctx.spec, local, batch))
}

/// Dispatches on `ctx.config.algorithm`. `h` is required for FedVSSAM.
pub fn local_round(
    ctx: &LocalContext<'_>,
    shard: &mut DeviceShard,
    theta: &ParamVector,
    h: Option<&ParamVector>,
    stream: RngStream,
) -> Result<LocalOutcome> {
    match ctx.config.algorithm {
        Algorithm::FedAvg => local_round_fedavg(ctx, shard, theta, stream),
        Algorithm::FedSam => local_round_fedsam(ctx, shard, theta, stream),
        Algorithm::FedVssam => {
            let h = h.ok_or_else(|| Error::invalid("FedVSSAM local round needs the server direction"))?;
            local_round_vssam(ctx, shard, theta, h, stream)
        }
    }
}
