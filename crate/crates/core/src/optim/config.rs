use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shard::SamplingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedSam,
    FedVssam,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedSam => "fedsam",
            Algorithm::FedVssam => "fedvssam",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one training run.
///
/// `local_lr` is the device step size for all three algorithms. FedAvg and
/// FedSAM ignore `global_lr`, `gamma_local` and `gamma_global`; FedAvg also
/// ignores `rho`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    /// Local gradient iterations per round.
    pub local_steps: usize,
    /// Multiplies `local_steps`; lets "local epochs" style settings be
    /// expressed as a whole number of iteration blocks.
    pub local_step_multiplier: usize,
    pub num_devices: usize,
    pub devices_per_round: usize,
    pub rho: f64,
    pub local_lr: f64,
    pub global_lr: f64,
    pub gamma_local: f64,
    pub gamma_global: f64,
    pub batch_size: usize,
    pub sampling: SamplingMode,
    pub master_seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            algorithm: Algorithm::FedVssam,
            rounds: 200,
            local_steps: 10,
            local_step_multiplier: 1,
            num_devices: 20,
            devices_per_round: 4,
            rho: 0.05,
            local_lr: 0.05,
            global_lr: 1.0,
            gamma_local: 0.4,
            gamma_global: 0.6,
            batch_size: 32,
            sampling: SamplingMode::Epochs,
            master_seed: 0,
        }
    }
}

impl AlgoConfig {
    /// Number of local iterations a device actually performs per round.
    pub fn effective_local_steps(&self) -> usize {
        self.local_steps * self.local_step_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.local_steps == 0 || self.local_step_multiplier == 0 {
            return fail("local_steps and local_step_multiplier must be >= 1".into());
        }
        if self.num_devices == 0 {
            return fail("num_devices must be >= 1".into());
        }
        if self.devices_per_round == 0 || self.devices_per_round > self.num_devices {
            return fail(format!(
                "devices_per_round must be in 1..={}, got {}",
                self.num_devices, self.devices_per_round
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return fail(format!("rho must be finite and >= 0, got {}", self.rho));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return fail(format!("local_lr must be > 0, got {}", self.local_lr));
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return fail(format!("global_lr must be > 0, got {}", self.global_lr));
        }
        for (name, g) in [("gamma_local", self.gamma_local), ("gamma_global", self.gamma_global)] {
            if !(g > 0.0 && g <= 1.0) {
                return fail(format!("{name} must be in (0, 1], got {g}"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AlgoConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            AlgoConfig { gamma_local: 0.0, ..Default::default() },
            AlgoConfig { gamma_global: 1.5, ..Default::default() },
            AlgoConfig { devices_per_round: 21, ..Default::default() },
            AlgoConfig { local_steps: 0, ..Default::default() },
            AlgoConfig { rho: -0.1, ..Default::default() },
            AlgoConfig { local_lr: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
