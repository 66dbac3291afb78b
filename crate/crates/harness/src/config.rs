//! Experiment configuration (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [model]
//! kind = "logistic-regression"
//!
//! [data]
//! partition = "dirichlet"
//! alpha = 0.1
//!
//! [algorithm]
//! algorithms = ["fedavg", "fedsam", "fedvssam"]
//! rounds = 200
//! ```
//!
//! Every section field has a default; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vssam_core::data::SyntheticSpec;
use vssam_core::model::{ModelKind, ModelSpec};
use vssam_core::optim::{AlgoConfig, Algorithm};
use vssam_core::partition::Scheme;
use vssam_core::shard::SamplingMode;
use vssam_core::ParamVector;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub data: DataSection,
    pub algorithm: AlgorithmSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Input width and class count come from the `data` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub l2_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_center: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Dirichlet,
    Pathological,
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub holdout_fraction: f64,
    pub num_devices: usize,
    pub partition: PartitionKind,
    pub alpha: f64,
    pub classes_per_device: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 10,
            input_dim: 20,
            samples_per_class: 100,
            cluster_spread: 0.3,
            holdout_fraction: 0.2,
            num_devices: 20,
            partition: PartitionKind::Dirichlet,
            alpha: 0.1,
            classes_per_device: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSection {
    pub algorithms: Vec<Algorithm>,
    pub rounds: usize,
    pub local_steps: usize,
    pub local_step_multiplier: usize,
    pub devices_per_round: usize,
    pub rho: f64,
    pub local_lr: f64,
    pub global_lr: f64,
    pub gamma_local: f64,
    pub gamma_global: f64,
    pub batch_size: usize,
    pub sampling: SamplingMode,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        let d = AlgoConfig::default();
        AlgorithmSection {
            algorithms: vec![Algorithm::FedVssam],
            rounds: d.rounds,
            local_steps: d.local_steps,
            local_step_multiplier: d.local_step_multiplier,
            devices_per_round: d.devices_per_round,
            rho: d.rho,
            local_lr: d.local_lr,
            global_lr: d.global_lr,
            gamma_local: d.gamma_local,
            gamma_global: d.gamma_global,
            batch_size: d.batch_size,
            sampling: d.sampling,
        }
    }
}

/// Perturbation direction used for the Δ_FI diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlatnessRule {
    /// FedVSSAM runs use its own mixed search direction with the current
    /// server direction; other algorithms use a stochastic batch gradient.
    Matched,
    Stochastic,
    FullLocalGradient,
    /// Skip the diagnostic.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingReference {
    Exact,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Evaluate every `cadence` rounds, plus round 0 and the final round.
    pub cadence: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    pub delta_fi: FlatnessRule,
    /// Defaults to `algorithm.rho`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flatness_rho: Option<f64>,
    /// Defaults to `algorithm.batch_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flatness_batch_size: Option<usize>,
    pub tracking_error: bool,
    pub tracking_reference: TrackingReference,
    pub reference_batches: usize,
    pub reference_batch_size: usize,
    /// Fill `wall_clock_ms`. Off by default so that reruns are byte-identical.
    pub wall_clock: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            cadence: 10,
            target_accuracy: None,
            delta_fi: FlatnessRule::Matched,
            flatness_rho: None,
            flatness_batch_size: None,
            tracking_error: true,
            tracking_reference: TrackingReference::Exact,
            reference_batches: 10,
            reference_batch_size: 32,
            wall_clock: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Jsonl,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            formats: vec![OutputFormat::Jsonl, OutputFormat::Csv],
        }
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
    parse_config(&text, path)
}

/// Parses and validates config text; `origin` is only used in messages.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        HarnessError::Parse {
            path: origin.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

fn check(ok: bool, field: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::invalid(field, message()))
    }
}

fn positive(value: f64, field: &str) -> Result<()> {
    check(value > 0.0 && value.is_finite(), field, || format!("must be > 0, got {value}"))
}

fn unit_interval(value: f64, field: &str) -> Result<()> {
    check(value > 0.0 && value <= 1.0, field, || format!("must be in (0, 1], got {value}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(!self.seeds.is_empty(), "seeds", || "at least one seed is required".into())?;
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        check(seeds.len() == self.seeds.len(), "seeds", || "seeds must be distinct".into())?;

        let m = &self.model;
        check(m.l2_coeff >= 0.0 && m.l2_coeff.is_finite(), "model.l2_coeff", || {
            format!("must be >= 0, got {}", m.l2_coeff)
        })?;
        match m.kind {
            ModelKind::Mlp2 => check(m.hidden_dim >= 1, "model.hidden_dim", || "mlp2 needs hidden_dim >= 1".into())?,
            ModelKind::Quadratic => {
                let len = m.quadratic_center.as_ref().map(Vec::len);
                check(len == Some(self.data.input_dim), "model.quadratic_center", || {
                    format!("quadratic model needs a center of length data.input_dim = {}", self.data.input_dim)
                })?;
            }
            ModelKind::LogisticRegression => {}
        }
        if m.kind != ModelKind::Quadratic {
            check(m.quadratic_center.is_none(), "model.quadratic_center", || {
                "only used by the quadratic model".into()
            })?;
        }

        let d = &self.data;
        check(d.num_classes >= 2, "data.num_classes", || format!("must be >= 2, got {}", d.num_classes))?;
        check(d.input_dim >= d.num_classes, "data.input_dim", || {
            format!("must be >= data.num_classes ({}), got {}", d.num_classes, d.input_dim)
        })?;
        check(d.samples_per_class >= 1, "data.samples_per_class", || "must be >= 1".into())?;
        check(d.cluster_spread >= 0.0 && d.cluster_spread.is_finite(), "data.cluster_spread", || {
            format!("must be >= 0, got {}", d.cluster_spread)
        })?;
        check((0.0..1.0).contains(&d.holdout_fraction), "data.holdout_fraction", || {
            format!("must be in [0, 1), got {}", d.holdout_fraction)
        })?;
        check(d.num_devices >= 1, "data.num_devices", || "must be >= 1".into())?;
        match d.partition {
            PartitionKind::Dirichlet => positive(d.alpha, "data.alpha")?,
            PartitionKind::Pathological => {
                check((1..=d.num_classes).contains(&d.classes_per_device), "data.classes_per_device", || {
                    format!("must be in 1..={}, got {}", d.num_classes, d.classes_per_device)
                })?
            }
            PartitionKind::Iid => {}
        }

        let a = &self.algorithm;
        check(!a.algorithms.is_empty(), "algorithm.algorithms", || "list at least one algorithm".into())?;
        let mut algos = a.algorithms.clone();
        algos.sort_by_key(|x| x.name());
        algos.dedup();
        check(algos.len() == a.algorithms.len(), "algorithm.algorithms", || "algorithms must be distinct".into())?;
        check(a.local_steps >= 1, "algorithm.local_steps", || "must be >= 1".into())?;
        check(a.local_step_multiplier >= 1, "algorithm.local_step_multiplier", || "must be >= 1".into())?;
        check(
            (1..=d.num_devices).contains(&a.devices_per_round),
            "algorithm.devices_per_round",
            || format!("must be in 1..={}, got {}", d.num_devices, a.devices_per_round),
        )?;
        check(a.rho >= 0.0 && a.rho.is_finite(), "algorithm.rho", || format!("must be >= 0, got {}", a.rho))?;
        positive(a.local_lr, "algorithm.local_lr")?;
        positive(a.global_lr, "algorithm.global_lr")?;
        unit_interval(a.gamma_local, "algorithm.gamma_local")?;
        unit_interval(a.gamma_global, "algorithm.gamma_global")?;
        check(a.batch_size >= 1, "algorithm.batch_size", || "must be >= 1".into())?;

        let mt = &self.metrics;
        check(mt.cadence >= 1, "metrics.cadence", || "must be >= 1".into())?;
        if let Some(t) = mt.target_accuracy {
            check((0.0..=1.0).contains(&t), "metrics.target_accuracy", || format!("must be in [0, 1], got {t}"))?;
        }
        if let Some(r) = mt.flatness_rho {
            check(r >= 0.0 && r.is_finite(), "metrics.flatness_rho", || format!("must be >= 0, got {r}"))?;
        }
        if let Some(b) = mt.flatness_batch_size {
            check(b >= 1, "metrics.flatness_batch_size", || "must be >= 1".into())?;
        }
        check(mt.reference_batches >= 1, "metrics.reference_batches", || "must be >= 1".into())?;
        check(mt.reference_batch_size >= 1, "metrics.reference_batch_size", || "must be >= 1".into())?;
        check(!self.output.formats.is_empty(), "output.formats", || "list at least one format".into())?;

        // Cross-check against the core validators.
        self.model_spec().validate()?;
        for &algo in &a.algorithms {
            self.algo_config(algo, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        let d = &self.data;
        let spec = match m.kind {
            ModelKind::Quadratic => {
                let center = m.quadratic_center.clone().unwrap_or_else(|| vec![0.0; d.input_dim]);
                let mut spec = ModelSpec::quadratic(ParamVector::from_vec(center));
                spec.num_classes = d.num_classes;
                spec
            }
            ModelKind::LogisticRegression => ModelSpec::logistic(d.input_dim, d.num_classes),
            ModelKind::Mlp2 => ModelSpec::mlp2(d.input_dim, m.hidden_dim, d.num_classes),
        };
        spec.with_l2(m.l2_coeff)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data.num_classes,
            input_dim: self.data.input_dim,
            samples_per_class: self.data.samples_per_class,
            cluster_spread: self.data.cluster_spread,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self.data.partition {
            PartitionKind::Dirichlet => Scheme::Dirichlet { alpha: self.data.alpha },
            PartitionKind::Pathological => Scheme::Pathological {
                classes_per_device: self.data.classes_per_device,
            },
            PartitionKind::Iid => Scheme::Iid,
        }
    }

    pub fn algo_config(&self, algorithm: Algorithm, seed: u64) -> AlgoConfig {
        let a = &self.algorithm;
        AlgoConfig {
            algorithm,
            rounds: a.rounds,
            local_steps: a.local_steps,
            local_step_multiplier: a.local_step_multiplier,
            num_devices: self.data.num_devices,
            devices_per_round: a.devices_per_round,
            rho: a.rho,
            local_lr: a.local_lr,
            global_lr: a.global_lr,
            gamma_local: a.gamma_local,
            gamma_global: a.gamma_global,
            batch_size: a.batch_size,
            sampling: a.sampling,
            master_seed: seed,
        }
    }

    pub fn flatness_rho(&self) -> f64 {
        self.metrics.flatness_rho.unwrap_or(self.algorithm.rho)
    }

    pub fn flatness_batch_size(&self) -> usize {
        self.metrics.flatness_batch_size.unwrap_or(self.algorithm.batch_size)
    }

    pub fn writes(&self, format: OutputFormat) -> bool {
        self.output.formats.contains(&format)
    }

    /// The config with every default spelled out.
    pub fn render(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kind = "logistic-regression"

[data]
num_devices = 5

[algorithm]
algorithms = ["fedvssam"]
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.algorithm.rho, 0.05);
        assert_eq!(c.algorithm.local_steps, 10);
        assert_eq!((c.algorithm.gamma_local, c.algorithm.gamma_global), (0.4, 0.6));
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.metrics.cadence, 10);
        assert!(!c.metrics.wall_clock);
    }

    #[test]
    fn rendered_config_parses_back() {
        let c = parse(MINIMAL).unwrap();
        let text = c.render().unwrap();
        assert_eq!(parse(&text).unwrap(), c);
    }

    #[test]
    fn zero_gamma_is_rejected_by_name() {
        let text = MINIMAL.replace("algorithms = [\"fedvssam\"]", "algorithms = [\"fedvssam\"]\ngamma_local = 0.0");
        match parse(&text) {
            Err(HarnessError::Invalid { field, .. }) => assert_eq!(field, "algorithm.gamma_local"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named_with_position() {
        let text = MINIMAL.replace("[algorithm]\n", "[algorithm]\nlearning_rte = 0.1\n");
        let err = parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rte"), "{msg}");
        match err {
            HarnessError::Parse { line, column, .. } => {
                assert_eq!(line, 9);
                assert_eq!(column, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse("[model]\nkind = \n").unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn quadratic_needs_matching_center() {
        let text = MINIMAL.replace("\"logistic-regression\"", "\"quadratic\"");
        assert!(matches!(parse(&text), Err(HarnessError::Invalid { field, .. }) if field == "model.quadratic_center"));
    }

    #[test]
    fn too_many_devices_per_round() {
        let text = MINIMAL.replace("algorithms = [\"fedvssam\"]", "algorithms = [\"fedvssam\"]\ndevices_per_round = 6");
        assert!(matches!(parse(&text), Err(HarnessError::Invalid { field, .. }) if field == "algorithm.devices_per_round"));
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
