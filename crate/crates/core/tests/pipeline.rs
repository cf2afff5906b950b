use mim_core::checkpoint::Checkpoint;
use mim_core::degradation::DegradationKind;
use mim_core::experiment::{ablate, ablation_table, restore, train, DataConfig, ExperimentConfig, TrainConfig, Variant};
use mim_core::MimError;

#[test]
fn training_lowers_the_smoothed_loss_on_a_single_kind() {
    let cfg = ExperimentConfig {
        seed: 5,
        train: TrainConfig {
            steps: 500,
            ..TrainConfig::default()
        },
        data: DataConfig {
            count: 64,
            held_out: 0,
            kinds: vec![DegradationKind::Blur],
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let data = cfg.build_dataset().unwrap();
    assert_eq!(data.len(), 64);
    let report = train(&cfg, &data.samples).unwrap();
    let (first, last) = (report.initial_loss().unwrap(), report.final_loss().unwrap());
    assert!(last < first, "smoothed loss went from {first} to {last}");
    assert_eq!(report.log.len(), 5);
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let cfg = ExperimentConfig {
        seed: 9,
        train: TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        },
        data: DataConfig {
            count: 8,
            held_out: 0,
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let data = cfg.build_dataset().unwrap();
    let a = train(&cfg, &data.samples).unwrap().checkpoint.to_bytes();
    let b = train(&cfg, &data.samples).unwrap().checkpoint.to_bytes();
    assert_eq!(a, b);
    let other = ExperimentConfig { seed: 10, ..cfg };
    assert_ne!(a, train(&other, &data.samples).unwrap().checkpoint.to_bytes());
}

#[test]
fn ablation_rows_share_a_schema_and_no_intra_is_smaller() {
    let cfg = ExperimentConfig {
        train: TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            count: 8,
            held_out: 2,
            ..DataConfig::default()
        },
        sampler: mim_core::flow::SamplerConfig { steps: 4 },
        ..ExperimentConfig::default()
    };
    let data = cfg.build_dataset().unwrap();
    let rows = ablate(&cfg, &[Variant::Full, Variant::NoIntra], &data).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].params < rows[0].params, "{} vs {}", rows[1].params, rows[0].params);
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    let widths: Vec<usize> = lines.iter().map(|l| l.split_whitespace().count()).collect();
    assert_eq!(widths, vec![5, 5, 5]);
    assert!(lines[1].starts_with("full ") && lines[2].starts_with("no_intra "));
}

#[test]
fn mismatched_checkpoint_is_a_contract_error_naming_fields() {
    let cfg = ExperimentConfig::default();
    let (_, store) = mim_core::backbone::MimDit::new(&cfg.model, 0).unwrap();
    let ck = Checkpoint::new(&cfg.model, &store);
    let mut other = cfg.model.clone();
    other.top_k = 1;
    other.block_count = 3;
    match ck.expect_config(&other) {
        Err(MimError::Contract(msg)) => assert!(msg.contains("top_k") && msg.contains("block_count"), "{msg}"),
        r => panic!("expected a contract error, got {r:?}"),
    }
}

#[test]
fn trained_model_restores_better_than_the_degraded_input() {
    let cfg = ExperimentConfig {
        data: DataConfig {
            kinds: vec![DegradationKind::Lowlight],
            severity_min: 0.8,
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let data = cfg.build_dataset().unwrap();
    let (train_set, held_out) = data.split(cfg.data.held_out).unwrap();
    let report = train(&cfg, &train_set.samples).unwrap();
    let out = restore(&report.checkpoint, &held_out.samples, &cfg.sampler, cfg.seed).unwrap();
    let all = out.metrics.overall();
    assert_eq!(all.count, held_out.len());
    assert!(all.mse < all.degraded_mse, "restored {} vs degraded {}", all.mse, all.degraded_mse);
}
