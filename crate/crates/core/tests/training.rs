use proptest::prelude::*;
use vssam_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use vssam_core::model::ModelSpec;
use vssam_core::optim::{run_training, AlgoConfig, Algorithm, Trainer};
use vssam_core::partition::{partition, Scheme};
use vssam_core::shard::SamplingMode;
use vssam_core::ParamVector;

fn small_task(seed: u64) -> (ModelSpec, Dataset) {
    let ds = generate_synthetic(
        SyntheticSpec {
            num_classes: 3,
            input_dim: 4,
            samples_per_class: 20,
            cluster_spread: 0.5,
        },
        seed,
    )
    .unwrap();
    (ModelSpec::logistic(4, 3), ds)
}

fn base_config(algorithm: Algorithm, seed: u64) -> AlgoConfig {
    AlgoConfig {
        algorithm,
        rounds: 3,
        local_steps: 4,
        num_devices: 5,
        devices_per_round: 3,
        rho: 0.05,
        local_lr: 0.1,
        global_lr: 1.0,
        gamma_local: 0.4,
        gamma_global: 0.6,
        batch_size: 5,
        master_seed: seed,
        ..AlgoConfig::default()
    }
}

fn trajectory(spec: &ModelSpec, ds: &Dataset, cfg: &AlgoConfig) -> Vec<ParamVector> {
    let p = partition(ds, Scheme::Dirichlet { alpha: 0.5 }, cfg.num_devices, cfg.master_seed).unwrap();
    let mut trainer = Trainer::new(spec, ds, &p, cfg.clone()).unwrap();
    let mut out = vec![trainer.state().theta.clone()];
    while !trainer.is_finished() {
        trainer.step().unwrap();
        out.push(trainer.state().theta.clone());
    }
    out
}

fn max_gap(a: &[ParamVector], b: &[ParamVector]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vssam_with_unit_mixing_is_fedsam(seed in 0u64..10_000, lr in 0.01f64..0.3, rho in 0.0f64..0.2) {
        let (spec, ds) = small_task(seed);
        let mut sam = base_config(Algorithm::FedSam, seed);
        sam.local_lr = lr;
        sam.rho = rho;
        let mut vssam = sam.clone();
        vssam.algorithm = Algorithm::FedVssam;
        vssam.gamma_local = 1.0;
        vssam.gamma_global = 1.0;
        vssam.global_lr = lr * vssam.local_steps as f64;
        let gap = max_gap(&trajectory(&spec, &ds, &sam), &trajectory(&spec, &ds, &vssam));
        prop_assert!(gap <= 1e-10, "gap {}", gap);
    }

    #[test]
    fn fedsam_without_radius_is_fedavg(seed in 0u64..10_000) {
        let (spec, ds) = small_task(seed);
        let mut sam = base_config(Algorithm::FedSam, seed);
        sam.rho = 0.0;
        let avg = AlgoConfig { algorithm: Algorithm::FedAvg, ..sam.clone() };
        let gap = max_gap(&trajectory(&spec, &ds, &sam), &trajectory(&spec, &ds, &avg));
        prop_assert!(gap <= 1e-10, "gap {}", gap);
    }
}

#[test]
fn aggregated_direction_is_mean_of_local_directions() {
    let (spec, ds) = small_task(8);
    let cfg = AlgoConfig {
        rounds: 20,
        ..base_config(Algorithm::FedVssam, 8)
    };
    let p = partition(&ds, Scheme::Iid, cfg.num_devices, 8).unwrap();
    let mut trainer = Trainer::new(&spec, &ds, &p, cfg.clone()).unwrap().record_directions(true);
    for transcript in trainer.run().unwrap() {
        let all: Vec<&ParamVector> = transcript
            .devices
            .iter()
            .flat_map(|d| d.directions.as_ref().unwrap())
            .collect();
        assert_eq!(all.len(), cfg.devices_per_round * cfg.local_steps);
        let mean = ParamVector::mean(all).unwrap();
        let g = transcript.aggregated.unwrap();
        assert!(g.max_abs_diff(&mean) <= 1e-12, "round {}", transcript.round);
    }
}

#[test]
fn two_device_quadratic_telescopes() {
    // F_i = ½‖θ − c‖²; full participation, two local steps, γ = 1, ρ = 0:
    // each local step contracts θ − c by (1 − η), so the aggregate is
    // (θ − c)(1 − (1 − η)²)/(η K).
    let c = ParamVector::from_vec(vec![1.0, -2.0, 0.5]);
    let spec = ModelSpec::quadratic(c.clone());
    let ds = Dataset::new(vec![0.0; 4], vec![0, 1, 0, 1], 1, 2).unwrap();
    let p = partition(&ds, Scheme::Iid, 2, 0).unwrap();
    let cfg = AlgoConfig {
        algorithm: Algorithm::FedVssam,
        rounds: 1,
        local_steps: 2,
        num_devices: 2,
        devices_per_round: 2,
        rho: 0.0,
        local_lr: 0.25,
        global_lr: 1.0,
        gamma_local: 1.0,
        gamma_global: 1.0,
        batch_size: 1,
        ..AlgoConfig::default()
    };
    let theta0 = ParamVector::from_vec(vec![3.0, 0.0, -1.0]);
    let mut trainer = Trainer::new(&spec, &ds, &p, cfg).unwrap().with_initial_params(theta0.clone()).unwrap();
    let t = trainer.step().unwrap();
    let factor = (1.0 - 0.75f64 * 0.75) / (0.25 * 2.0);
    let expected = theta0.sub(&c).scaled(factor);
    assert!(t.aggregated.unwrap().max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn thread_count_does_not_change_results() {
    let (spec, ds) = small_task(3);
    let cfg = AlgoConfig {
        rounds: 6,
        sampling: SamplingMode::WithReplacement,
        ..base_config(Algorithm::FedVssam, 3)
    };
    let p = partition(&ds, Scheme::Dirichlet { alpha: 0.3 }, 5, 3).unwrap();
    let sequential = Trainer::new(&spec, &ds, &p, cfg.clone()).unwrap().sequential(true).run().unwrap();
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let parallel = pool.install(|| Trainer::new(&spec, &ds, &p, cfg.clone()).unwrap().run().unwrap());
        assert_eq!(parallel, sequential, "{threads} threads");
    }
}

#[test]
fn zero_rounds_returns_the_initial_model() {
    let (spec, ds) = small_task(1);
    let cfg = AlgoConfig {
        rounds: 0,
        ..base_config(Algorithm::FedVssam, 1)
    };
    let p = partition(&ds, Scheme::Iid, 5, 1).unwrap();
    let (state, transcripts) = run_training(&spec, &ds, &p, &cfg).unwrap();
    assert!(transcripts.is_empty());
    assert_eq!(state.round, 0);
    assert_eq!(state.theta, ParamVector::zeros(spec.param_dim()));
}

#[test]
fn every_algorithm_lowers_the_loss() {
    let (spec, ds) = small_task(5);
    let p = partition(&ds, Scheme::Iid, 5, 5).unwrap();
    let full = ds.full_batch().unwrap();
    let start = vssam_core::model::forward_loss(&spec, &ParamVector::zeros(spec.param_dim()), &full).unwrap();
    for algorithm in [Algorithm::FedAvg, Algorithm::FedSam, Algorithm::FedVssam] {
        let cfg = AlgoConfig {
            rounds: 30,
            global_lr: 0.4,
            ..base_config(algorithm, 5)
        };
        let (state, _) = run_training(&spec, &ds, &p, &cfg).unwrap();
        let end = vssam_core::model::forward_loss(&spec, &state.theta, &full).unwrap();
        assert!(end < 0.5 * start, "{algorithm}: {start} -> {end}");
    }
}
