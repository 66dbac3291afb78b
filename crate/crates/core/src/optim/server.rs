//! Parameter-server side: device selection, aggregation, global update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::local::DeviceUpdate;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParamVector,
    /// Adjusted direction `h^t`; stays zero for FedAvg and FedSAM.
    pub h: ParamVector,
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ParamVector) -> Self {
        let h = ParamVector::zeros(theta.dim());
        ServerState { theta, h, round: 0 }
    }
}

/// `S` distinct device ids from `0..N`, uniformly without replacement
/// (partial Fisher–Yates), returned in ascending order.
pub fn sample_devices(num_devices: usize, per_round: usize, stream: RngStream) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > num_devices {
        return Err(Error::invalid(format!(
            "cannot select {per_round} of {num_devices} devices"
        )));
    }
    let mut rng = stream.rng();
    let mut pool: Vec<usize> = (0..num_devices).collect();
    for i in 0..per_round {
        let j = rng.random_range(i..num_devices);
        pool.swap(i, j);
    }
    let mut chosen = pool[..per_round].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Updates in ascending device order, so sums never depend on arrival order.
fn sorted(updates: &[DeviceUpdate]) -> Result<Vec<&DeviceUpdate>> {
    if updates.is_empty() {
        return Err(Error::invalid("no device updates to aggregate"));
    }
    let mut refs: Vec<&DeviceUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.device_id);
    Ok(refs)
}

/// Plain average of the returned local models.
pub fn aggregate_avg(updates: &[DeviceUpdate]) -> Result<ParamVector> {
    ParamVector::mean(sorted(updates)?.into_iter().map(|u| &u.theta_end))
}

/// `g^{t+1} = (θ^t − mean_i θ_i^t) / (η_l K)`, the average local update
/// direction recovered from the models alone.
pub fn aggregate_vssam(
    theta: &ParamVector,
    updates: &[DeviceUpdate],
    local_lr: f64,
    local_steps: usize,
) -> Result<ParamVector> {
    if !(local_lr > 0.0) || local_steps == 0 {
        return Err(Error::invalid("aggregation needs local_lr > 0 and at least one local step"));
    }
    for u in updates {
        u.theta_end.ensure_dim(theta.dim(), "device update")?;
    }
    let mean = aggregate_avg(updates)?;
    let mut g = theta.sub(&mean);
    g.scale(1.0 / (local_lr * local_steps as f64));
    g.ensure_finite("aggregated direction")?;
    Ok(g)
}

/// `h^{t+1} = (1 − γ_g) h^t + γ_g g^{t+1}`, then `θ^{t+1} = θ^t − η_g h^{t+1}`.
pub fn global_update_vssam(
    server: &ServerState,
    aggregated: &ParamVector,
    gamma_global: f64,
    global_lr: f64,
) -> Result<ServerState> {
    aggregated.ensure_dim(server.theta.dim(), "aggregated direction")?;
    let h = super::direction::mix_direction(&server.h, aggregated, gamma_global)?;
    let mut theta = server.theta.clone();
    theta.axpy(-global_lr, &h);
    theta.ensure_finite("global model")?;
    Ok(ServerState {
        theta,
        h,
        round: server.round + 1,
    })
}
