use mostfuse::data::{generate_synthetic, load_csv, standardize, write_csv, CsvSchema, SyntheticSpec};
use mostfuse::eval::{evaluate, inject_noise, noise_sweep, uncertainty_density, EvalOptions, NoiseSpec};
use mostfuse::model::{
    train, Activation, Checkpoint, ModelSpec, MultimodalClassifier, TrainConfig, CHECKPOINT_FORMAT_VERSION,
};
use mostfuse::provenance::config_hash;
use mostfuse::Error;

fn small() -> SyntheticSpec {
    SyntheticSpec { n_per_class: 40, ..SyntheticSpec::default() }
}

fn quick_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, max_epochs: 15, ..TrainConfig::default() }
}

#[test]
fn csv_round_trip_preserves_every_value() {
    let spec = small();
    let (train_ds, _, _) = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    write_csv(&train_ds, &path).unwrap();
    let back = load_csv(&path, &CsvSchema { classes: spec.classes, dims: spec.dims.clone() }).unwrap();
    assert_eq!(back.labels, train_ds.labels);
    assert_eq!(back.modalities, train_ds.modalities);
}

#[test]
fn trained_checkpoint_reloads_to_identical_predictions() {
    let (tr, va, te) = generate_synthetic(&small()).unwrap();
    let (tr, rest, stats) = standardize(&tr, &[&va, &te]).unwrap();
    let spec = ModelSpec::uniform(&tr.dims(), &[8], Activation::Tanh, tr.classes);
    let mut model = MultimodalClassifier::new(spec, 3).unwrap();
    let cfg = quick_config();
    let report = train(&mut model, &tr, Some(&rest[0]), &cfg).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);

    let ck = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: config_hash(&cfg).unwrap(),
        init_seed: 3,
        train_config: cfg,
        standardization: Some(stats),
        model,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let opts = EvalOptions::default();
    assert_eq!(evaluate(&loaded.model, &rest[1], &opts).unwrap(), evaluate(&ck.model, &rest[1], &opts).unwrap());

    let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::FormatVersion(9))));
}

#[test]
fn training_is_deterministic_given_seeds() {
    let (tr, _, _) = generate_synthetic(&small()).unwrap();
    let run = || {
        let mut m = MultimodalClassifier::new(ModelSpec::uniform(&tr.dims(), &[8], Activation::Tanh, 3), 11).unwrap();
        let r = train(&mut m, &tr, None, &quick_config()).unwrap();
        (m, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn sweep_at_zero_sigma_matches_evaluation_and_noise_spares_other_modality() {
    let (tr, _, te) = generate_synthetic(&small()).unwrap();
    let mut m = MultimodalClassifier::new(ModelSpec::uniform(&tr.dims(), &[8], Activation::Tanh, 3), 5).unwrap();
    train(&mut m, &tr, None, &quick_config()).unwrap();
    let opts = EvalOptions::default();
    let plain = evaluate(&m, &te, &opts).unwrap();
    let sweep = noise_sweep(&m, &te, &[0.0], 1, &[0, 1], &opts).unwrap();
    for row in &sweep.rows {
        assert_eq!(row.acc, plain.metrics.acc);
        assert_eq!(row.ece, plain.metrics.ece);
        assert_eq!(row.mean_unc_fused, plain.mean_unc_fused);
    }
    let noisy = inject_noise(&te, &NoiseSpec { modality_index: 1, sigma: 0.5, seed: 0 }).unwrap();
    assert_eq!(noisy.modalities[0], te.modalities[0]);
    assert_ne!(noisy.modalities[1], te.modalities[1]);

    let density = uncertainty_density(&m, &noisy, 64).unwrap();
    assert_eq!(density.edges.len(), 65);
    for h in &density.histograms {
        assert_eq!(h.counts.iter().sum::<usize>(), te.n_samples());
    }
}
