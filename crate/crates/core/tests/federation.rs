mod common;

use common::{centralized_run, small_config, small_data};
use fssda_core::data;
use fssda_core::experiment::runner::{self, build_federation, execute, PreparedData, RunKind};
use fssda_core::experiment::{ExperimentConfig, Mode};
use fssda_core::federation::{
    self, DeviceState, Federation, FederationConfig, LabeledSet, LambdaMode, Schedule,
};
use fssda_core::model::{self, ModelSpec};

fn fed_config(
    config: &ExperimentConfig,
    data: &PreparedData,
    lambda: LambdaMode,
) -> FederationConfig {
    config.federation_config(1, lambda, Schedule::Parallel, data.federation_seed)
}

#[test]
fn one_device_equals_centralized_training() {
    let mut config = small_config(15);
    config.federation.num_devices = 1;
    config.federation.local_epochs = 2;
    let data = small_data(&config, Mode::NonIid, 4);
    let fc = fed_config(&config, &data, LambdaMode::Adaptive);
    let out = federation::run_fssda(&fc, &mut build_federation(&data, &[0]).unwrap()).unwrap();
    let central = centralized_run(&fc, &data);
    let accs: Vec<u64> = out.metrics.iter().map(|m| m.target_acc.to_bits()).collect();
    assert_eq!(
        accs,
        central
            .target_accs
            .iter()
            .map(|a| a.to_bits())
            .collect::<Vec<_>>()
    );
    assert_eq!(out.global_sources[0], central.source);
    assert_eq!(out.global_target, central.target);
}

#[test]
fn zero_learning_rate_leaves_models_unchanged() {
    let config = small_config(1);
    let data = small_data(&config, Mode::Iid, 1);
    let mut fc = fed_config(&config, &data, LambdaMode::Adaptive);
    fc.learning_rate = 0.0;
    fc.local_epochs = 3;
    let shard = LabeledSet::from_dataset(&data.sources[0].train).unwrap();
    let all: Vec<usize> = (0..data.target.view().len()).collect();
    let mut device = DeviceState::new(0, vec![shard], data.target.shard(&all));
    let (sources, target) = federation::init_globals(data.spec, 1, 9);
    let updated = federation::device_source_update(&sources, &mut device, &fc).unwrap();
    assert_eq!(updated[0].as_ref(), Some(&sources[0]));
    let t = federation::device_target_update(&target, &[&sources[0]], &mut device, &fc)
        .unwrap()
        .unwrap();
    assert_eq!(t.params, target);
}

#[test]
fn identical_devices_aggregate_to_the_single_device_run() {
    let mut config = small_config(8);
    config.federation.num_devices = 1;
    let data = small_data(&config, Mode::Iid, 2);
    let fc = fed_config(&config, &data, LambdaMode::Adaptive);
    let single = federation::run_fssda(&fc, &mut build_federation(&data, &[0]).unwrap()).unwrap();

    let all: Vec<usize> = (0..data.target.view().len()).collect();
    let devices = (0..3)
        .map(|k| {
            let shard = LabeledSet::from_dataset(&data.sources[0].train).unwrap();
            DeviceState::new(k, vec![shard], data.target.shard(&all))
        })
        .collect();
    let mut fed = Federation::new(
        data.spec,
        devices,
        vec![LabeledSet::from_dataset(&data.sources[0].test).unwrap()],
        LabeledSet::from_dataset(&data.target_test).unwrap(),
    )
    .unwrap();
    let fc3 = FederationConfig {
        num_devices: 3,
        ..fc
    };
    let triple = federation::run_fssda(&fc3, &mut fed).unwrap();
    assert_eq!(triple.global_target, single.global_target);
    assert_eq!(triple.global_sources, single.global_sources);
}

#[test]
fn thread_count_does_not_change_results() {
    for (batch_size, lambda) in [(0, LambdaMode::Adaptive), (16, LambdaMode::Fixed(0.3))] {
        let mut config = small_config(10);
        config.federation.batch_size = batch_size;
        config.federation.local_epochs = 2;
        let data = small_data(&config, Mode::NonIid, 6);
        for kind in [
            RunKind::Parallel(lambda),
            RunKind::Serial(lambda),
            RunKind::Ssdaonly(lambda),
            RunKind::Floly,
        ] {
            config.federation.threads = 1;
            let one = execute(&config, &data, &[0], kind).unwrap();
            config.federation.threads = 4;
            let four = execute(&config, &data, &[0], kind).unwrap();
            assert_eq!(one, four, "{kind:?}");
        }
    }
}

#[test]
fn ssdaonly_with_one_device_equals_fssda() {
    let mut config = small_config(12);
    config.federation.num_devices = 1;
    let data = small_data(&config, Mode::Iid, 3);
    let fssda = execute(
        &config,
        &data,
        &[0],
        RunKind::Parallel(LambdaMode::Adaptive),
    )
    .unwrap();
    let ssda = execute(
        &config,
        &data,
        &[0],
        RunKind::Ssdaonly(LambdaMode::Adaptive),
    )
    .unwrap();
    assert_eq!(fssda.metrics, ssda.metrics);
}

#[test]
fn floly_equals_fixed_hard_weight_when_everything_is_labeled() {
    let mix = data::MixtureSpec {
        num_classes: 3,
        feature_dim: 4,
        class_separation: 2.0,
        class_std: 1.0,
    };
    let (source, target) =
        data::make_domain_pair(5, &mix, 90, 150, &data::ShiftSpec::new(0.3, 1.0, 0.1)).unwrap();
    // Keep an equal count per class so that every target row can be labeled.
    let per_class = *target.class_counts().iter().min().unwrap();
    let mut keep = Vec::new();
    for c in 0..3 {
        keep.extend(
            (0..target.len())
                .filter(|&i| target.labels()[i] == c)
                .take(per_class),
        );
    }
    keep.sort_unstable();
    let target = target.subset(&keep);
    let masked = data::mask_labels(&target, per_class, 1).unwrap();
    assert_eq!(masked.view().num_labeled(), target.len());

    let k = 2;
    let plan = data::dirichlet_partition(target.labels(), 3, k, 1.0, 3).unwrap();
    let source_plan = data::dirichlet_partition(source.labels(), 3, k, 1.0, 4).unwrap();
    let build = || {
        let devices = (0..k)
            .map(|d| {
                let s =
                    LabeledSet::from_dataset(&source.subset(&source_plan.assignments[d])).unwrap();
                DeviceState::new(d, vec![s], masked.shard(&plan.assignments[d]))
            })
            .collect();
        Federation::new(
            ModelSpec::linear(4, 3).unwrap(),
            devices,
            vec![LabeledSet::from_dataset(&source).unwrap()],
            LabeledSet::from_dataset(&target).unwrap(),
        )
        .unwrap()
    };
    let fc = FederationConfig {
        num_devices: k,
        rounds: 10,
        learning_rate: 0.5,
        lambda_mode: LambdaMode::Fixed(1.0),
        seed: 8,
        ..FederationConfig::default()
    };
    let floly = federation::run_floly(&fc, &mut build()).unwrap();
    let fixed = federation::run_fssda(&fc, &mut build()).unwrap();
    assert_eq!(floly.global_target, fixed.global_target);
    let acc =
        |o: &federation::RunOutput| o.metrics.iter().map(|m| m.target_acc).collect::<Vec<_>>();
    assert_eq!(acc(&floly), acc(&fixed));
}

#[test]
fn serial_source_phase_never_touches_target_data() {
    let config = small_config(5);
    let data = small_data(&config, Mode::NonIid, 7);
    let fc = config.federation_config(
        1,
        LambdaMode::Adaptive,
        Schedule::Serial,
        data.federation_seed,
    );
    let mut fed = build_federation(&data, &[0]).unwrap();
    let phase = federation::run_serial_source_phase(&fc, &mut fed).unwrap();
    assert!(phase.source_phase_rounds > 0);
    assert_eq!(phase.target_aggregations, 0);
    for d in fed.devices() {
        assert_eq!(d.target_access_count(), 0, "device {}", d.device_id());
        assert_eq!(d.held_out_label_reads(), 0);
    }
}

#[test]
fn training_never_reads_held_out_labels() {
    let config = small_config(5);
    let data = small_data(&config, Mode::NonIid, 8);
    for kind in [
        RunKind::Parallel(LambdaMode::Adaptive),
        RunKind::Serial(LambdaMode::Adaptive),
        RunKind::Ssdaonly(LambdaMode::Adaptive),
        RunKind::Floly,
    ] {
        execute(&config, &data, &[0], kind).unwrap();
    }
    assert_eq!(data.target.true_labels().read_count(), 0);
    let mut fed = build_federation(&data, &[0]).unwrap();
    let fc = fed_config(&config, &data, LambdaMode::Adaptive);
    federation::run_fssda(&fc, &mut fed).unwrap();
    assert!(fed.devices().iter().all(|d| d.target_access_count() > 0));
    assert!(fed.devices().iter().all(|d| d.held_out_label_reads() == 0));
}

#[test]
fn aggregation_counts_follow_the_schedule() {
    let config = small_config(7);
    let data = small_data(&config, Mode::Iid, 9);
    let parallel = execute(
        &config,
        &data,
        &[0],
        RunKind::Parallel(LambdaMode::Adaptive),
    )
    .unwrap();
    assert_eq!(parallel.source_aggregations, 7);
    assert_eq!(parallel.target_aggregations, 7);
    assert_eq!(parallel.metrics.len(), 7);

    let serial = execute(&config, &data, &[0], RunKind::Serial(LambdaMode::Adaptive)).unwrap();
    let rs = serial.source_phase_rounds;
    assert!(rs >= 1 && rs <= config.federation.serial_max_source_rounds);
    assert_eq!(serial.source_aggregations, rs);
    assert_eq!(serial.target_aggregations, 7);
    let rounds: Vec<usize> = serial.metrics.iter().map(|m| m.round).collect();
    assert_eq!(rounds, (1..=rs + 7).collect::<Vec<_>>());
}

#[test]
fn serial_phase_two_equals_training_against_frozen_sources() {
    let config = small_config(6);
    let data = small_data(&config, Mode::Iid, 10);
    let fc = config.federation_config(
        1,
        LambdaMode::Adaptive,
        Schedule::Serial,
        data.federation_seed,
    );
    let serial = federation::run_serial(&fc, &mut build_federation(&data, &[0]).unwrap()).unwrap();
    let frozen = federation::run_target_with_frozen_sources(
        &fc,
        &mut build_federation(&data, &[0]).unwrap(),
        &serial.global_sources,
    )
    .unwrap();
    let tail: Vec<f64> = serial.metrics[serial.source_phase_rounds..]
        .iter()
        .map(|m| m.target_acc)
        .collect();
    let phase2: Vec<f64> = frozen.metrics.iter().map(|m| m.target_acc).collect();
    assert_eq!(tail, phase2);
    assert_eq!(serial.global_target, frozen.global_target);
}

#[test]
fn zero_rounds_return_initial_models() {
    let config = small_config(0);
    let data = small_data(&config, Mode::Iid, 1);
    let fc = fed_config(&config, &data, LambdaMode::Adaptive);
    let out = federation::run_fssda(&fc, &mut build_federation(&data, &[0]).unwrap()).unwrap();
    assert!(out.metrics.is_empty());
    let (s, t) = federation::init_globals(data.spec, 1, fc.seed);
    assert_eq!(out.global_sources, s);
    assert_eq!(out.global_target, t);
}

#[test]
fn unlabeled_devices_use_lambda_zero() {
    let mut config = small_config(1);
    config.benchmark.labeled_per_class = 0;
    config.federation.local_epochs = 3;
    let data = small_data(&config, Mode::Iid, 2);
    let fc = fed_config(&config, &data, LambdaMode::Adaptive);
    let out = federation::run_fssda(&fc, &mut build_federation(&data, &[0]).unwrap()).unwrap();
    for device in &out.metrics[0].device_weights {
        assert_eq!(device.len(), 3);
        assert!(device.iter().all(|w| w == &vec![0.0, 1.0]));
    }
}

#[test]
fn logged_weights_are_feasible() {
    let mut config = small_config(4);
    config.federation.local_epochs = 2;
    let ms = config.multisource.clone();
    let data = runner::prepare_data(&config, &ms.sources, &ms.target, Mode::NonIid, 3).unwrap();
    let out = execute(
        &config,
        &data,
        &[0, 1],
        RunKind::Parallel(LambdaMode::Adaptive),
    )
    .unwrap();
    for m in &out.metrics {
        for w in m.device_weights.iter().flatten() {
            assert_eq!(w.len(), 3);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn small_steps_reduce_local_source_loss() {
    let config = small_config(1);
    for seed in 0..20 {
        let data = small_data(&config, Mode::NonIid, seed);
        let mut fc = fed_config(&config, &data, LambdaMode::Adaptive);
        fc.learning_rate = 0.001;
        let fed = build_federation(&data, &[0]).unwrap();
        let (sources, _) = federation::init_globals(data.spec, 1, seed);
        let shard = fed.devices()[0].source_shards()[0].clone();
        let before = model::loss(&sources[0], shard.batch(), 1.0).unwrap();
        let all: Vec<usize> = (0..data.target.view().len()).collect();
        let mut device = DeviceState::new(0, vec![shard.clone()], data.target.shard(&all));
        let after = federation::device_source_update(&sources, &mut device, &fc).unwrap()[0]
            .clone()
            .unwrap();
        assert!(
            model::loss(&after, shard.batch(), 1.0).unwrap() <= before,
            "seed {seed}"
        );
    }
}

#[test]
fn default_benchmark_improves_on_the_initial_model() {
    let config = ExperimentConfig::default();
    for seed in 1..=5 {
        let data = runner::prepare_data(
            &config,
            &[fssda_core::experiment::ShiftConfig::new(
                "source", 0.0, 1.0, 0.0,
            )],
            &config.pairs[0],
            Mode::Iid,
            seed,
        )
        .unwrap();
        let out = execute(
            &config,
            &data,
            &[0],
            RunKind::Parallel(LambdaMode::Adaptive),
        )
        .unwrap();
        let (_, init) = federation::init_globals(data.spec, 1, data.federation_seed);
        let test = LabeledSet::from_dataset(&data.target_test).unwrap();
        let initial = model::accuracy(&init, test.features(), test.labels()).unwrap();
        let last = out.metrics.last().unwrap().target_acc;
        assert!(last > initial, "seed {seed}: {last} vs {initial}");
    }
}
