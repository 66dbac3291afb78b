//! Flatness and gradient-deviation diagnostics.
//!
//! Each device is described by a [`LocalObjective`]: a model plus the
//! device's full local data. Losses `F_i` always use the full local data;
//! perturbation directions may be stochastic.
//!
//! Expectations over batch draws are exact sums over single-sample batches
//! (every sample equally likely), which turns "in expectation" statements
//! into finite identities that can be checked to rounding error.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_loss, gradient, Batch, ModelSpec};
use crate::optim::{mix_direction, sam_perturb};
use crate::params::ParamVector;
use crate::partition::Partition;
use crate::rng::{Purpose, RngStream};

/// One device's objective `F_i`.
#[derive(Clone, Debug)]
pub struct LocalObjective {
    pub spec: ModelSpec,
    pub data: Batch,
}

impl LocalObjective {
    pub fn new(spec: ModelSpec, data: Batch) -> Self {
        LocalObjective { spec, data }
    }

    /// One objective per device, in device-id order.
    pub fn from_partition(spec: &ModelSpec, dataset: &Dataset, partition: &Partition) -> Result<Vec<Self>> {
        partition
            .assignments
            .iter()
            .map(|idx| Ok(LocalObjective::new(spec.clone(), dataset.batch(idx)?)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn loss(&self, theta: &ParamVector) -> Result<f64> {
        forward_loss(&self.spec, theta, &self.data)
    }

    pub fn full_gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        gradient(&self.spec, theta, &self.data)
    }

    pub fn batch_gradient(&self, theta: &ParamVector, rows: &[usize]) -> Result<ParamVector> {
        gradient(&self.spec, theta, &self.data.select(rows)?)
    }

    pub fn batch_loss(&self, theta: &ParamVector, rows: &[usize]) -> Result<f64> {
        forward_loss(&self.spec, theta, &self.data.select(rows)?)
    }

    /// Uniform batch of `min(batch_size, n)` distinct rows.
    fn draw_rows<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        sample_indices(rng, self.len(), batch_size.min(self.len())).into_vec()
    }
}

fn ensure_devices(objectives: &[LocalObjective]) -> Result<()> {
    if objectives.is_empty() {
        return Err(Error::invalid("no devices to evaluate"));
    }
    if let Some(i) = objectives.iter().position(LocalObjective::is_empty) {
        return Err(Error::invalid(format!("device {i} has no data")));
    }
    Ok(())
}

/// `∇F(θ) = (1/N) Σ_i ∇F_i(θ)`, summed in device order.
pub fn global_gradient(objectives: &[LocalObjective], theta: &ParamVector) -> Result<ParamVector> {
    ensure_devices(objectives)?;
    let grads = objectives
        .iter()
        .map(|o| o.full_gradient(theta))
        .collect::<Result<Vec<_>>>()?;
    ParamVector::mean(&grads)
}

/// `F_i(θ + ρ d/‖d‖) − F_i(θ)`, with the zero-direction fallback of
/// [`sam_perturb`].
pub fn flatness_proxy(
    objective: &LocalObjective,
    theta: &ParamVector,
    rho: f64,
    direction: &ParamVector,
) -> Result<f64> {
    let perturbed = sam_perturb(theta, direction, rho)?;
    Ok(objective.loss(&perturbed)? - objective.loss(theta)?)
}

/// How each device's perturbation direction is formed.
#[derive(Clone, Debug, PartialEq)]
pub enum DirectionRule {
    /// Gradient of one random local batch.
    StochasticGradient { batch_size: usize },
    /// Exact local gradient `∇F_i(θ)`.
    FullLocalGradient,
    /// `(1 − γ_l) h + γ_l ĝ_i` with `ĝ_i` a random-batch gradient.
    VssamMixed {
        gamma_local: f64,
        h: ParamVector,
        batch_size: usize,
    },
}

/// Serializable summary of a [`DirectionRule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum RuleTag {
    StochasticGradient { batch_size: usize },
    FullLocalGradient,
    VssamMixed { gamma_local: f64, batch_size: usize },
}

impl DirectionRule {
    pub fn tag(&self) -> RuleTag {
        match self {
            DirectionRule::StochasticGradient { batch_size } => RuleTag::StochasticGradient {
                batch_size: *batch_size,
            },
            DirectionRule::FullLocalGradient => RuleTag::FullLocalGradient,
            DirectionRule::VssamMixed {
                gamma_local, batch_size, ..
            } => RuleTag::VssamMixed {
                gamma_local: *gamma_local,
                batch_size: *batch_size,
            },
        }
    }

    fn direction<R: Rng + ?Sized>(
        &self,
        objective: &LocalObjective,
        theta: &ParamVector,
        rng: &mut R,
    ) -> Result<ParamVector> {
        match self {
            DirectionRule::StochasticGradient { batch_size } => {
                let rows = objective.draw_rows(*batch_size, rng);
                objective.batch_gradient(theta, &rows)
            }
            DirectionRule::FullLocalGradient => objective.full_gradient(theta),
            DirectionRule::VssamMixed {
                gamma_local,
                h,
                batch_size,
            } => {
                let rows = objective.draw_rows(*batch_size, rng);
                let g = objective.batch_gradient(theta, &rows)?;
                mix_direction(h, &g, *gamma_local)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub rho: f64,
    pub direction_rule: RuleTag,
    /// `s_i` per device, in device order.
    pub proxies: Vec<f64>,
    pub mean_proxy: f64,
    /// `(1/N) Σ (s_i − s̄)²`.
    pub delta_fi: f64,
}

/// Population variance of `values` around their mean.
pub fn dispersion(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n
}

impl FlatnessReport {
    fn from_proxies(rho: f64, direction_rule: RuleTag, proxies: Vec<f64>) -> Self {
        let mean_proxy = proxies.iter().sum::<f64>() / proxies.len() as f64;
        let delta_fi = dispersion(&proxies);
        FlatnessReport {
            rho,
            direction_rule,
            proxies,
            mean_proxy,
            delta_fi,
        }
    }

    pub fn recompute_delta_fi(&self) -> f64 {
        dispersion(&self.proxies)
    }
}

/// Flatness incompatibility at `θ` for one draw of every device's direction.
///
/// Device `i` draws its batch from the `(Probe, i, round)` stream under
/// `master_seed`.
pub fn flatness_incompatibility(
    objectives: &[LocalObjective],
    theta: &ParamVector,
    rho: f64,
    rule: &DirectionRule,
    master_seed: u64,
    round: usize,
) -> Result<FlatnessReport> {
    ensure_devices(objectives)?;
    if let DirectionRule::VssamMixed { h, gamma_local, .. } = rule {
        h.ensure_dim(theta.dim(), "server direction")?;
        if !(*gamma_local > 0.0 && *gamma_local <= 1.0) {
            return Err(Error::invalid("gamma_local must be in (0, 1]"));
        }
    }
    let proxies = objectives
        .iter()
        .enumerate()
        .map(|(i, obj)| {
            let mut rng = RngStream::new(master_seed, Purpose::Probe, i, round).rng();
            let d = rule.direction(obj, theta, &mut rng)?;
            flatness_proxy(obj, theta, rho, &d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatnessReport::from_proxies(rho, rule.tag(), proxies))
}

/// Direction built from a single sample, for exact expectations.
#[derive(Clone, Debug, PartialEq)]
pub enum SingleSampleRule {
    Stochastic,
    VssamMixed { gamma_local: f64, h: ParamVector },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedFlatness {
    /// `E[Δ_FI]` over independent uniform single-sample draws per device.
    pub mean: f64,
    /// Monte-Carlo standard error; `None` when the expectation is exact.
    pub std_error: Option<f64>,
    /// Joint outcomes enumerated (exact) or draws taken (Monte Carlo).
    pub outcomes: u64,
}

/// Joint outcome counts up to this size are enumerated exactly.
pub const ENUMERATION_LIMIT: u64 = 2_000_000;
pub const MONTE_CARLO_DRAWS: usize = 10_000;

/// `E[Δ_FI(θ, ρ)]` when every device perturbs along a direction built from
/// one uniformly drawn local sample.
///
/// The per-sample proxies `s_i(j)` are computed once; the expectation then
/// enumerates all `Π n_i` joint draws when that product is at most
/// [`ENUMERATION_LIMIT`], and otherwise averages [`MONTE_CARLO_DRAWS`]
/// joint draws from the `(Probe, device = N, round = 0)` stream.
pub fn expected_flatness_incompatibility(
    objectives: &[LocalObjective],
    theta: &ParamVector,
    rho: f64,
    rule: &SingleSampleRule,
    master_seed: u64,
) -> Result<ExpectedFlatness> {
    ensure_devices(objectives)?;
    let table = objectives
        .iter()
        .map(|obj| {
            (0..obj.len())
                .map(|j| {
                    let g = obj.batch_gradient(theta, &[j])?;
                    let d = match rule {
                        SingleSampleRule::Stochastic => g,
                        SingleSampleRule::VssamMixed { gamma_local, h } => mix_direction(h, &g, *gamma_local)?,
                    };
                    flatness_proxy(obj, theta, rho, &d)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(expected_dispersion(&table, master_seed))
}

/// `E[dispersion(s_1(J_1), …, s_N(J_N))]` for independent uniform `J_i`.
pub fn expected_dispersion(table: &[Vec<f64>], master_seed: u64) -> ExpectedFlatness {
    let total = table
        .iter()
        .try_fold(1u64, |acc, row| acc.checked_mul(row.len() as u64))
        .unwrap_or(u64::MAX);
    let mut values = vec![0.0; table.len()];
    if total <= ENUMERATION_LIMIT {
        let mut idx = vec![0usize; table.len()];
        let mut sum = 0.0;
        'outer: loop {
            for (i, row) in table.iter().enumerate() {
                values[i] = row[idx[i]];
            }
            sum += dispersion(&values);
            for i in (0..idx.len()).rev() {
                idx[i] += 1;
                if idx[i] < table[i].len() {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }
        ExpectedFlatness {
            mean: sum / total as f64,
            std_error: None,
            outcomes: total,
        }
    } else {
        let mut rng = RngStream::new(master_seed, Purpose::Probe, table.len(), 0).rng();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..MONTE_CARLO_DRAWS {
            for (i, row) in table.iter().enumerate() {
                values[i] = row[rng.random_range(0..row.len())];
            }
            let d = dispersion(&values);
            sum += d;
            sum_sq += d * d;
        }
        let n = MONTE_CARLO_DRAWS as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
        ExpectedFlatness {
            mean,
            std_error: Some((var / n).sqrt()),
            outcomes: MONTE_CARLO_DRAWS as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDecomposition {
    pub device: usize,
    /// `‖δ_i‖²` with `δ_i = ∇F_i − ∇F`.
    pub delta_sq: f64,
    /// `E‖ζ_i‖²` with `ζ_i = g_i − ∇F_i`, `g_i` a single-sample gradient.
    pub zeta_sq_mean: f64,
    /// `E⟨δ_i, ζ_i⟩`.
    pub cross_term: f64,
    /// `E‖g_i − ∇F‖²`.
    pub deviation_sq_mean: f64,
}

impl DeviceDecomposition {
    /// `E‖g_i − ∇F‖² − ‖δ_i‖² − E‖ζ_i‖²`; zero when the cross term vanishes.
    pub fn pythagoras_residual(&self) -> f64 {
        self.deviation_sq_mean - self.delta_sq - self.zeta_sq_mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub devices: Vec<DeviceDecomposition>,
    /// `max_i E‖ζ_i‖²`, an empirical bound on the local gradient variance.
    pub sigma_local_sq: f64,
    /// `(1/N) Σ_i ‖δ_i‖²`, the measured heterogeneity.
    pub sigma_global_sq: f64,
    /// Filled by [`DecompositionReport::with_lemma1_bound`].
    pub lemma1_rhs: Option<f64>,
}

impl DecompositionReport {
    pub fn with_lemma1_bound(mut self, rho: f64, smoothness: f64) -> Self {
        self.lemma1_rhs = Some(lemma1_bound(rho, smoothness, &self));
        self
    }
}

/// Splits each device's gradient error into heterogeneity and sampling
/// noise by enumerating every single-sample batch.
pub fn decompose_deviation(objectives: &[LocalObjective], theta: &ParamVector) -> Result<DecompositionReport> {
    ensure_devices(objectives)?;
    let local: Vec<ParamVector> = objectives
        .iter()
        .map(|o| o.full_gradient(theta))
        .collect::<Result<_>>()?;
    let global = ParamVector::mean(&local)?;
    let mut devices = Vec::with_capacity(objectives.len());
    for (i, (obj, grad_i)) in objectives.iter().zip(&local).enumerate() {
        let delta = grad_i.sub(&global);
        let (mut zeta_sq, mut cross, mut dev_sq) = (0.0, 0.0, 0.0);
        for j in 0..obj.len() {
            let g = obj.batch_gradient(theta, &[j])?;
            let zeta = g.sub(grad_i);
            zeta_sq += zeta.norm_sq();
            cross += delta.dot(&zeta);
            dev_sq += g.sub(&global).norm_sq();
        }
        let n = obj.len() as f64;
        devices.push(DeviceDecomposition {
            device: i,
            delta_sq: delta.norm_sq(),
            zeta_sq_mean: zeta_sq / n,
            cross_term: cross / n,
            deviation_sq_mean: dev_sq / n,
        });
    }
    let sigma_local_sq = devices.iter().map(|d| d.zeta_sq_mean).fold(0.0, f64::max);
    let sigma_global_sq = devices.iter().map(|d| d.delta_sq).sum::<f64>() / devices.len() as f64;
    Ok(DecompositionReport {
        devices,
        sigma_local_sq,
        sigma_global_sq,
        lemma1_rhs: None,
    })
}

/// `(3ρ²/N) Σ_i (‖δ_i‖² + 4 E‖ζ_i‖²) + (3/4) L² ρ⁴`.
pub fn lemma1_bound(rho: f64, smoothness: f64, report: &DecompositionReport) -> f64 {
    let n = report.devices.len() as f64;
    let spread: f64 = report
        .devices
        .iter()
        .map(|d| d.delta_sq + 4.0 * d.zeta_sq_mean)
        .sum();
    3.0 * rho * rho / n * spread + 0.75 * smoothness * smoothness * rho.powi(4)
}

/// Reference gradient for tracking error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ReferenceGradient {
    /// Exact device average `∇F(θ)`.
    Exact,
    /// Mean gradient of `batches` IID batches drawn from the pooled data.
    Sampled { batches: usize, batch_size: usize },
}

/// `‖h − ∇F(θ)‖²`.
pub fn tracking_error(h: &ParamVector, objectives: &[LocalObjective], theta: &ParamVector) -> Result<f64> {
    let reference = global_gradient(objectives, theta)?;
    h.ensure_dim(reference.dim(), "server direction")?;
    Ok(h.sub(&reference).norm_sq())
}

/// [`tracking_error`] against a configurable reference. The sampled
/// reference needs every device to share one model spec.
pub fn tracking_error_with(
    h: &ParamVector,
    objectives: &[LocalObjective],
    theta: &ParamVector,
    reference: ReferenceGradient,
    stream: RngStream,
) -> Result<f64> {
    match reference {
        ReferenceGradient::Exact => tracking_error(h, objectives, theta),
        ReferenceGradient::Sampled { batches, batch_size } => {
            ensure_devices(objectives)?;
            if batches == 0 || batch_size == 0 {
                return Err(Error::invalid("sampled reference needs batches >= 1 and batch_size >= 1"));
            }
            let spec = &objectives[0].spec;
            if objectives.iter().any(|o| &o.spec != spec) {
                return Err(Error::NotSupported(
                    "sampled reference gradient requires a shared model across devices".into(),
                ));
            }
            let pooled: Vec<(usize, usize)> = objectives
                .iter()
                .enumerate()
                .flat_map(|(i, o)| (0..o.len()).map(move |j| (i, j)))
                .collect();
            let mut rng = stream.rng();
            let mut grads = Vec::with_capacity(batches);
            for _ in 0..batches {
                let picks = sample_indices(&mut rng, pooled.len(), batch_size.min(pooled.len()));
                let mut features = Vec::new();
                let mut labels = Vec::new();
                for p in picks {
                    let (i, j) = pooled[p];
                    features.extend_from_slice(objectives[i].data.row(j));
                    labels.push(objectives[i].data.label(j));
                }
                let batch = Batch::new(features, labels, objectives[0].data.input_dim())?;
                grads.push(gradient(spec, theta, &batch)?);
            }
            let reference = ParamVector::mean(&grads)?;
            h.ensure_dim(reference.dim(), "server direction")?;
            Ok(h.sub(&reference).norm_sq())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// `φ` and `φ′` are disjoint batches.
    Disjoint,
    /// `φ′ = φ`.
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriendlyAdversaryReport {
    pub pairs: usize,
    /// Fraction of pairs with `F_i(θ + ε_φ; φ′) − F_i(θ; φ′) ≤ 0`.
    pub friendly_fraction: f64,
    /// Fraction of pairs with `⟨g_{φ′}, g_φ⟩ ≤ 0`, the first-order predictor.
    pub predictor_fraction: f64,
}

/// How often a perturbation built on one batch fails to raise the loss of
/// another batch.
pub fn friendly_adversary_rate(
    objective: &LocalObjective,
    theta: &ParamVector,
    rho: f64,
    stream: RngStream,
    pairs: usize,
    batch_size: usize,
    pairing: Pairing,
) -> Result<FriendlyAdversaryReport> {
    if pairs == 0 || batch_size == 0 {
        return Err(Error::invalid("pairs and batch_size must be >= 1"));
    }
    let needed = match pairing {
        Pairing::Disjoint => 2 * batch_size,
        Pairing::Same => batch_size,
    };
    if objective.len() < needed {
        return Err(Error::invalid(format!(
            "shard of {} samples cannot provide {needed} distinct samples per pair",
            objective.len()
        )));
    }
    let mut rng = stream.rng();
    let (mut friendly, mut predicted) = (0usize, 0usize);
    for _ in 0..pairs {
        let picks = sample_indices(&mut rng, objective.len(), needed).into_vec();
        let phi = &picks[..batch_size];
        let phi_prime = match pairing {
            Pairing::Disjoint => &picks[batch_size..],
            Pairing::Same => phi,
        };
        let g = objective.batch_gradient(theta, phi)?;
        let g_prime = objective.batch_gradient(theta, phi_prime)?;
        let perturbed = sam_perturb(theta, &g, rho)?;
        let change = objective.batch_loss(&perturbed, phi_prime)? - objective.batch_loss(theta, phi_prime)?;
        friendly += usize::from(change <= 0.0);
        predicted += usize::from(g_prime.dot(&g) <= 0.0);
    }
    Ok(FriendlyAdversaryReport {
        pairs,
        friendly_fraction: friendly as f64 / pairs as f64,
        predictor_fraction: predicted as f64 / pairs as f64,
    })
}
