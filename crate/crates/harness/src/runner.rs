//! Orchestration: one training run per (algorithm, seed), evaluated at the
//! configured cadence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use vssam_core::data::{generate_synthetic, Dataset};
use vssam_core::flatness::{
    flatness_incompatibility, tracking_error_with, DirectionRule, LocalObjective, ReferenceGradient,
};
use vssam_core::model::{accuracy, Batch, ModelKind, ModelSpec};
use vssam_core::optim::{Algorithm, ServerState, Trainer};
use vssam_core::partition::{partition, Partition};
use vssam_core::rng::{Purpose, RngStream};

use crate::compare::{compare_table, ComparisonTable};
use crate::config::{ExperimentConfig, FlatnessRule, OutputFormat, TrackingReference};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRecord, RunSummary};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_ECHO_FILE: &str = "effective-config.toml";
pub const RUNS_DIR: &str = "runs";

/// Everything derived from a seed before training starts.
pub struct RunSetup {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub holdout: Dataset,
    pub partition: Partition,
    pub objectives: Vec<LocalObjective>,
}

/// Generates the dataset, splits off the holdout set, and partitions the
/// training part. All three steps are keyed by `seed`.
pub fn build_setup(config: &ExperimentConfig, seed: u64) -> Result<RunSetup> {
    let spec = config.model_spec();
    let full = generate_synthetic(config.synthetic_spec(), seed)?;
    let (train, holdout) = full.split_holdout(config.data.holdout_fraction, seed)?;
    let partition = partition(&train, config.scheme(), config.data.num_devices, seed)?;
    let objectives = LocalObjective::from_partition(&spec, &train, &partition)?;
    Ok(RunSetup {
        spec,
        train,
        holdout,
        partition,
        objectives,
    })
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    setup: &'a RunSetup,
    holdout: Option<Batch>,
    algorithm: Algorithm,
    seed: u64,
    started: Instant,
}

impl Evaluator<'_> {
    fn evaluate(&self, state: &ServerState) -> Result<MetricRecord> {
        let m = &self.config.metrics;
        let objs = &self.setup.objectives;
        let theta = &state.theta;
        let train_loss = objs.iter().map(|o| o.loss(theta)).sum::<vssam_core::Result<f64>>()? / objs.len() as f64;
        let holdout_accuracy = match &self.holdout {
            Some(batch) => Some(accuracy(&self.setup.spec, theta, batch)?),
            None => None,
        };
        let batch_size = self.config.flatness_batch_size();
        let rule = match (m.delta_fi, self.algorithm) {
            (FlatnessRule::None, _) => None,
            (FlatnessRule::Matched, Algorithm::FedVssam) => Some(DirectionRule::VssamMixed {
                gamma_local: self.config.algorithm.gamma_local,
                h: state.h.clone(),
                batch_size,
            }),
            (FlatnessRule::Matched | FlatnessRule::Stochastic, _) => {
                Some(DirectionRule::StochasticGradient { batch_size })
            }
            (FlatnessRule::FullLocalGradient, _) => Some(DirectionRule::FullLocalGradient),
        };
        let delta_fi = match rule {
            Some(rule) => Some(
                flatness_incompatibility(objs, theta, self.config.flatness_rho(), &rule, self.seed, state.round)?
                    .delta_fi,
            ),
            None => None,
        };
        let tracking_error = if m.tracking_error && self.algorithm == Algorithm::FedVssam {
            let reference = match m.tracking_reference {
                TrackingReference::Exact => ReferenceGradient::Exact,
                TrackingReference::Sampled => ReferenceGradient::Sampled {
                    batches: m.reference_batches,
                    batch_size: m.reference_batch_size,
                },
            };
            let stream = RngStream::new(self.seed, Purpose::Reference, 0, state.round);
            Some(tracking_error_with(&state.h, objs, theta, reference, stream)?)
        } else {
            None
        };
        Ok(MetricRecord {
            seed: self.seed,
            round: state.round,
            algorithm: self.algorithm.name().to_string(),
            train_loss,
            holdout_accuracy,
            delta_fi,
            tracking_error,
            wall_clock_ms: m.wall_clock.then(|| self.started.elapsed().as_secs_f64() * 1e3),
        })
    }
}

fn is_eval_round(round: usize, cadence: usize, last: usize) -> bool {
    round % cadence == 0 || round == last
}

/// Runs one (algorithm, seed) pair, handing each record to `sink` as soon
/// as it is computed. Returns the records produced so far and, on failure,
/// the error that stopped the run.
pub fn run_single(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> (Vec<MetricRecord>, Option<HarnessError>) {
    let mut records = Vec::new();
    let outcome = (|| -> Result<()> {
        let started = Instant::now();
        let setup = build_setup(config, seed)?;
        let holdout = match setup.spec.kind {
            ModelKind::Quadratic => None,
            _ if setup.holdout.is_empty() => None,
            _ => Some(setup.holdout.full_batch()?),
        };
        let eval = Evaluator {
            config,
            setup: &setup,
            holdout,
            algorithm,
            seed,
            started,
        };
        let mut trainer = Trainer::new(&setup.spec, &setup.train, &setup.partition, config.algo_config(algorithm, seed))?;
        let last = config.algorithm.rounds;
        let mut emit = |record: MetricRecord| -> Result<()> {
            sink(&record)?;
            records.push(record);
            Ok(())
        };
        emit(eval.evaluate(trainer.state())?)?;
        while !trainer.is_finished() {
            trainer.step()?;
            let state = trainer.state();
            if is_eval_round(state.round, config.metrics.cadence, last) {
                emit(eval.evaluate(state)?)?;
            }
        }
        Ok(())
    })();
    (records, outcome.err())
}

/// Result of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub summaries: Vec<RunSummary>,
    pub table: ComparisonTable,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.summaries.iter().filter(|s| s.error.is_some()).count()
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(format!("creating {}", path.display()), e))
}

fn run_file(dir: &Path, algorithm: Algorithm, seed: u64) -> PathBuf {
    dir.join(RUNS_DIR).join(format!("{}-seed{seed}.jsonl", algorithm.name()))
}

/// Runs every configured (algorithm, seed) pair on the current rayon pool.
///
/// Each run streams its records to `runs/<algorithm>-seed<seed>.jsonl`,
/// flushing after every line. Once all runs finish, the per-run files are
/// concatenated in config order (algorithms, then seeds) into
/// `metrics.jsonl` and one summary row per run is written to `summary.csv`.
/// A failed run is reported in its summary row and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = config.output.dir.clone();
    let io = |what: &Path| {
        let what = what.display().to_string();
        move |e| HarnessError::io(what, e)
    };
    fs::create_dir_all(dir.join(RUNS_DIR)).map_err(io(&dir))?;
    let echo = dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, config.render()?).map_err(io(&echo))?;

    let jsonl = config.writes(OutputFormat::Jsonl);
    let jobs: Vec<(Algorithm, u64)> = config
        .algorithm
        .algorithms
        .iter()
        .flat_map(|&a| config.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let summaries = jobs
        .par_iter()
        .map(|&(algorithm, seed)| -> Result<RunSummary> {
            let mut file = if jsonl { Some(create_file(&run_file(&dir, algorithm, seed))?) } else { None };
            let mut sink = |r: &MetricRecord| -> Result<()> {
                if let Some(f) = file.as_mut() {
                    serde_json::to_writer(&mut *f, r)?;
                    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| HarnessError::io("writing metrics", e))?;
                }
                Ok(())
            };
            let (records, err) = run_single(config, algorithm, seed, &mut sink);
            let message = err.map(|e| format!("{algorithm} seed {seed}: {e}"));
            RunSummary::from_records(algorithm.name(), seed, &records, config.metrics.target_accuracy, message)
        })
        .collect::<Result<Vec<_>>>()?;

    if jsonl {
        let path = dir.join(METRICS_FILE);
        let mut out = create_file(&path)?;
        for &(algorithm, seed) in &jobs {
            let part = run_file(&dir, algorithm, seed);
            let bytes = fs::read(&part).map_err(io(&part))?;
            out.write_all(&bytes).map_err(io(&path))?;
        }
        out.flush().map_err(io(&path))?;
    }
    if config.writes(OutputFormat::Csv) {
        let path = dir.join(SUMMARY_FILE);
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        for s in &summaries {
            w.serialize(s)?;
        }
        w.flush().map_err(io(&path))?;
    }
    let table = compare_table(&summaries);
    Ok(ExperimentReport {
        out_dir: dir,
        summaries,
        table,
    })
}

/// Like [`run_experiment`], on a dedicated pool of `threads` workers
/// (rayon's default when `None`).
pub fn run_experiment_with_threads(config: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentReport> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build()?.install(|| run_experiment(config))
}

/// Per-device label histograms for one seed, one line per device.
pub fn partition_stats(config: &ExperimentConfig, seed: u64) -> Result<String> {
    let setup = build_setup(config, seed)?;
    let hist = setup.partition.label_histograms(&setup.train);
    let mut out = String::new();
    let classes = config.data.num_classes;
    let header: Vec<String> = (0..classes).map(|k| format!("c{k}")).collect();
    out.push_str(&format!("seed {seed}: {:?}, {} devices\n", config.scheme(), hist.len()));
    out.push_str(&format!("{:>6} {:>6} {}\n", "device", "size", header.iter().map(|h| format!("{h:>5}")).collect::<String>()));
    for (i, h) in hist.iter().enumerate() {
        let counts: String = h.iter().map(|c| format!("{c:>5}")).collect();
        out.push_str(&format!("{i:>6} {:>6} {counts}\n", h.iter().sum::<usize>()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_rounds_include_start_cadence_and_end() {
        let rounds: Vec<usize> = (0..=25).filter(|&r| is_eval_round(r, 10, 25)).collect();
        assert_eq!(rounds, vec![0, 10, 20, 25]);
        let rounds: Vec<usize> = (0..=0).filter(|&r| is_eval_round(r, 10, 0)).collect();
        assert_eq!(rounds, vec![0]);
    }
}
