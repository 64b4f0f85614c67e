use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mostfuse::data::{self, CsvSchema, Dataset, DatasetMeta, Split, Standardization, SyntheticSpec};
use mostfuse::eval::{self, EvalOptions, Evaluation, KappaWeighting, MetricsReport, NoiseSpec, SweepAggregate, SweepRow};
use mostfuse::fusion::fuse_many;
use mostfuse::model::{
    self, Activation, Checkpoint, ModelSpec, MultimodalClassifier, TrainConfig, CHECKPOINT_FORMAT_VERSION,
};
use mostfuse::provenance::config_hash;
use mostfuse::StudentT;
use serde::{Deserialize, Serialize};

use crate::output::{emit, ensure_dir, read_json, to_json, write_json, write_table};
use crate::{CliError, CliResult, EvaluateArgs, FuseArgs, GenerateArgs, ReportArgs, SweepArgs, TrainArgs};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const META_FILE: &str = "meta.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const RUN_FILE: &str = "run.json";
const TIMESTAMPS_FILE: &str = "timestamps.json";

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn split_file(split: Split) -> String {
    format!("{}.csv", split.as_str())
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(invalid(format!("unknown split `{other}` (expected train, val or test)"))),
    }
}

fn parse_activation(s: &str) -> CliResult<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(invalid(format!("unknown activation `{other}` (expected relu or tanh)"))),
    }
}

fn parse_kappa(s: &str) -> CliResult<KappaWeighting> {
    match s {
        "unweighted" => Ok(KappaWeighting::Unweighted),
        "quadratic" => Ok(KappaWeighting::Quadratic),
        other => Err(invalid(format!("unknown kappa weighting `{other}` (expected unweighted or quadratic)"))),
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn generate_data(a: GenerateArgs) -> CliResult<()> {
    let defaults = SyntheticSpec::default();
    let split_counts = match a.split_counts {
        None => None,
        Some(c) if c.len() == 3 => Some([c[0], c[1], c[2]]),
        Some(c) => return Err(invalid(format!("--split-counts needs three values, got {}", c.len()))),
    };
    let spec = SyntheticSpec {
        classes: a.classes.unwrap_or(defaults.classes),
        n_per_class: a.per_class.unwrap_or(defaults.n_per_class),
        dims: a.dims.unwrap_or(defaults.dims),
        separation: a.sep.unwrap_or(defaults.separation),
        seed: a.seed.unwrap_or(defaults.seed),
        split_counts,
    };
    let out = a.out.unwrap_or_else(|| PathBuf::from("data"));
    let (train, val, test) = data::generate_synthetic(&spec)?;
    let stats = Standardization::fit(&train)?;
    ensure_dir(&out)?;
    for ds in [&train, &val, &test] {
        data::write_csv(ds, &out.join(split_file(ds.split)))?;
    }
    let meta = DatasetMeta {
        classes: spec.classes,
        dims: spec.dims.clone(),
        seed: spec.seed,
        split_sizes: [train.n_samples(), val.n_samples(), test.n_samples()],
        standardization: stats,
        config_hash: config_hash(&spec)?,
        spec,
    };
    write_json(&out.join(META_FILE), &meta)?;
    emit(&to_json(&meta)?)?;
    Ok(())
}

fn load_meta(dir: &Path) -> CliResult<DatasetMeta> {
    read_json(&dir.join(META_FILE))
}

fn load_split(dir: &Path, meta: &DatasetMeta, split: Split) -> CliResult<Dataset> {
    let schema = CsvSchema { classes: meta.classes, dims: meta.dims.clone() };
    Ok(data::load_csv(&dir.join(split_file(split)), &schema)?.with_split(split))
}

/// Everything that determines a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_config_hash: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifact {
    /// SHA-256 of the run configuration, seeds included.
    pub run_id: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    /// Fused metrics per split after training.
    pub final_metrics: BTreeMap<String, MetricsReport>,
    /// Output files, relative to the run directory.
    pub files: BTreeMap<String, String>,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let data_dir = a.data.ok_or_else(|| invalid("--data is required"))?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("run"));
    let defaults = TrainConfig::default();
    let seed = a.seed.unwrap_or(defaults.seed);
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        max_epochs: a.epochs.unwrap_or(defaults.max_epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lambda: a.lambda.unwrap_or(defaults.lambda),
        seed,
        freeze_encoders: a.freeze_encoders.unwrap_or(false),
        select_best: a.select_best.unwrap_or(false),
        ..defaults
    };
    cfg.validate()?;
    let activation = parse_activation(a.activation.as_deref().unwrap_or("tanh"))?;
    let hidden = a.hidden.unwrap_or_else(|| model::DEFAULT_HIDDEN.to_vec());

    let meta = load_meta(&data_dir)?;
    let train_raw = load_split(&data_dir, &meta, Split::Train)?;
    let val_raw = load_split(&data_dir, &meta, Split::Val)?;
    let test_path = data_dir.join(split_file(Split::Test));
    let test_raw = if test_path.exists() { Some(load_split(&data_dir, &meta, Split::Test)?) } else { None };
    let stats = Standardization::fit(&train_raw)?;
    let train_set = stats.apply(&train_raw)?;
    let val_set = stats.apply(&val_raw)?;
    let test_set = test_raw.map(|t| stats.apply(&t)).transpose()?;

    let spec = ModelSpec::uniform(&meta.dims, &hidden, activation, meta.classes);
    let run_cfg = RunConfig { data_config_hash: meta.config_hash.clone(), model: spec.clone(), train: cfg.clone(), init_seed: seed };
    let run_id = config_hash(&run_cfg)?;
    let started = unix_now();

    let mut net = MultimodalClassifier::new(spec, seed)?;
    let report = model::train(&mut net, &train_set, Some(&val_set), &cfg)?;

    let opts = EvalOptions::default();
    let mut final_metrics = BTreeMap::new();
    final_metrics.insert("val".to_string(), eval::evaluate(&net, &val_set, &opts)?.metrics);
    if let Some(t) = &test_set {
        final_metrics.insert("test".to_string(), eval::evaluate(&net, t, &opts)?.metrics);
    }

    ensure_dir(&out)?;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: run_id.clone(),
        init_seed: seed,
        train_config: cfg,
        standardization: Some(stats),
        model: net,
    };
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    let files = BTreeMap::from([
        ("checkpoint".to_string(), CHECKPOINT_FILE.to_string()),
        ("artifact".to_string(), RUN_FILE.to_string()),
        ("timestamps".to_string(), TIMESTAMPS_FILE.to_string()),
    ]);
    let artifact = RunArtifact {
        run_id: run_id.clone(),
        tool_version: TOOL_VERSION.to_string(),
        config: run_cfg,
        seed,
        initial_loss: report.initial_loss,
        epoch_losses: report.epoch_losses,
        val_losses: report.val_losses,
        best_epoch: report.best_epoch,
        final_metrics,
        files,
    };
    write_json(&out.join(RUN_FILE), &artifact)?;
    let stamps = serde_json::json!({ "run_id": run_id, "started_unix": started, "finished_unix": unix_now() });
    write_json(&out.join(TIMESTAMPS_FILE), &stamps)?;

    let last = artifact.epoch_losses.last().copied().unwrap_or(artifact.initial_loss);
    emit(&format!("run {run_id}: loss {:.6} -> {last:.6}, wrote {}\n", artifact.initial_loss, out.display()))?;
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    dataset: Dataset,
}

fn load_for_eval(checkpoint: Option<PathBuf>, data_dir: Option<PathBuf>, split: Split) -> CliResult<Loaded> {
    let ck_path = checkpoint.ok_or_else(|| invalid("--checkpoint is required"))?;
    let data_dir = data_dir.ok_or_else(|| invalid("--data is required"))?;
    let checkpoint = Checkpoint::load(&ck_path)?;
    let meta = load_meta(&data_dir)?;
    let spec = &checkpoint.model.spec;
    let model_dims: Vec<usize> = spec.encoders.iter().map(|e| e.input_dim).collect();
    if model_dims != meta.dims || spec.classes != meta.classes {
        return Err(invalid(format!(
            "dataset (dims {:?}, {} classes) does not match checkpoint (dims {:?}, {} classes)",
            meta.dims, meta.classes, model_dims, spec.classes
        )));
    }
    let raw = load_split(&data_dir, &meta, split)?;
    let dataset = match &checkpoint.standardization {
        Some(s) => s.apply(&raw)?,
        None => raw,
    };
    Ok(Loaded { checkpoint, dataset })
}

#[derive(Debug, Serialize)]
struct EvalSettings<'a> {
    command: &'a str,
    run_id: &'a str,
    split: &'a str,
    options: EvalOptions,
    sigmas: Vec<f64>,
    modalities: Vec<usize>,
    noise_seeds: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct EvaluateDoc {
    run_id: String,
    config_hash: String,
    split: String,
    evaluation: Evaluation,
}

fn options(bins: Option<usize>, kappa: Option<String>) -> CliResult<EvalOptions> {
    Ok(EvalOptions {
        n_bins: bins.unwrap_or(eval::DEFAULT_ECE_BINS),
        kappa: parse_kappa(kappa.as_deref().unwrap_or("unweighted"))?,
    })
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let split_name = a.split.unwrap_or_else(|| "test".into());
    let split = parse_split(&split_name)?;
    let opts = options(a.bins, a.kappa)?;
    let loaded = load_for_eval(a.checkpoint, a.data, split)?;
    let run_id = loaded.checkpoint.config_hash.clone();
    let settings = EvalSettings {
        command: "evaluate",
        run_id: &run_id,
        split: &split_name,
        options: opts,
        sigmas: vec![],
        modalities: vec![],
        noise_seeds: vec![],
    };
    let hash = config_hash(&settings)?;
    let evaluation = eval::evaluate(&loaded.checkpoint.model, &loaded.dataset, &opts)?;
    let doc = EvaluateDoc { run_id, config_hash: hash.clone(), split: split_name, evaluation };
    let text = to_json(&doc)?;
    if let Some(out) = a.out {
        ensure_dir(&out)?;
        crate::output::write_text(&out.join("metrics.json"), &text)?;
        let rows: Vec<Vec<String>> = doc
            .evaluation
            .metrics
            .per_bin
            .iter()
            .map(|b| {
                vec![
                    b.lower.to_string(),
                    b.upper.to_string(),
                    b.confidence.to_string(),
                    b.accuracy.to_string(),
                    b.count.to_string(),
                    hash.clone(),
                ]
            })
            .collect();
        write_table(
            &out.join("metrics.csv"),
            &["bin_lower", "bin_upper", "confidence", "accuracy", "count", "config_hash"],
            &rows,
        )?;
    }
    emit(&text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepDoc {
    run_id: String,
    config_hash: String,
    split: String,
    rows: Vec<SweepRow>,
    aggregates: Vec<SweepAggregate>,
}

pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

fn modality_index(m: usize, count: usize) -> CliResult<usize> {
    if m == 0 || m > count {
        return Err(invalid(format!("modality {m} out of range 1..={count}")));
    }
    Ok(m - 1)
}

pub fn noise_sweep(a: SweepArgs) -> CliResult<()> {
    let split_name = a.split.unwrap_or_else(|| "test".into());
    let split = parse_split(&split_name)?;
    let opts = options(a.bins, a.kappa)?;
    let sigmas = a.sigmas.unwrap_or_else(|| DEFAULT_SIGMAS.to_vec());
    let modalities = a.modality.unwrap_or_else(|| vec![1, 2]);
    let seeds = a.noise_seeds.unwrap_or_else(|| vec![0, 1, 2]);
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(invalid(format!("noise sigma must be >= 0, got {s}")));
    }
    let loaded = load_for_eval(a.checkpoint, a.data, split)?;
    let model = &loaded.checkpoint.model;
    let run_id = loaded.checkpoint.config_hash.clone();
    let settings = EvalSettings {
        command: "noise-sweep",
        run_id: &run_id,
        split: &split_name,
        options: opts,
        sigmas: sigmas.clone(),
        modalities: modalities.clone(),
        noise_seeds: seeds.clone(),
    };
    let hash = config_hash(&settings)?;

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for &m in &modalities {
        let idx = modality_index(m, model.modalities())?;
        let sweep = eval::noise_sweep(model, &loaded.dataset, &sigmas, idx, &seeds, &opts)?;
        rows.extend(sweep.rows);
        aggregates.extend(sweep.aggregates);
    }
    let doc = SweepDoc { run_id, config_hash: hash.clone(), split: split_name, rows, aggregates };
    let text = to_json(&doc)?;
    if let Some(out) = a.out {
        ensure_dir(&out)?;
        crate::output::write_text(&out.join("sweep.json"), &text)?;
        let table: Vec<Vec<String>> = doc
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.sigma.to_string(),
                    r.modality.to_string(),
                    r.seed.to_string(),
                    r.acc.to_string(),
                    r.kappa.to_string(),
                    r.ece.to_string(),
                    r.mean_unc_m1.to_string(),
                    r.mean_unc_m2.to_string(),
                    r.mean_unc_fused.to_string(),
                    r.mean_ep_m1.to_string(),
                    r.mean_ep_m2.to_string(),
                    r.acc_m1.to_string(),
                    r.acc_m2.to_string(),
                    hash.clone(),
                ]
            })
            .collect();
        write_table(
            &out.join("sweep.csv"),
            &[
                "sigma",
                "modality",
                "seed",
                "acc",
                "kappa",
                "ece",
                "mean_unc_m1",
                "mean_unc_m2",
                "mean_unc_fused",
                "mean_ep_m1",
                "mean_ep_m2",
                "acc_m1",
                "acc_m2",
                "config_hash",
            ],
            &table,
        )?;
    }
    emit(&text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DensityDoc {
    run_id: String,
    config_hash: String,
    split: String,
    noise: Option<NoiseSpec>,
    density: eval::UncertaintyDensity,
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let split_name = a.split.unwrap_or_else(|| "test".into());
    let split = parse_split(&split_name)?;
    let bins = a.bins.unwrap_or(eval::DEFAULT_DENSITY_BINS);
    let loaded = load_for_eval(a.checkpoint, a.data, split)?;
    let model = &loaded.checkpoint.model;
    let sigma = a.sigma.unwrap_or(0.0);
    let noise = match a.modality {
        Some(m) => Some(NoiseSpec {
            modality_index: modality_index(m, model.modalities())?,
            sigma,
            seed: a.noise_seed.unwrap_or(0),
        }),
        None if sigma != 0.0 => return Err(invalid("--sigma needs --modality")),
        None => None,
    };
    let dataset = match &noise {
        Some(n) => eval::inject_noise(&loaded.dataset, n)?,
        None => loaded.dataset.clone(),
    };
    let run_id = loaded.checkpoint.config_hash.clone();
    let hash = config_hash(&(("report", &run_id, &split_name, bins), &noise))?;
    let density = eval::uncertainty_density(model, &dataset, bins)?;
    let doc = DensityDoc { run_id, config_hash: hash.clone(), split: split_name, noise, density };
    let text = to_json(&doc)?;
    if let Some(out) = a.out {
        ensure_dir(&out)?;
        crate::output::write_text(&out.join("density.json"), &text)?;
        let d = &doc.density;
        let mut header = vec!["bin_lower", "bin_upper"];
        header.extend(d.histograms.iter().map(|h| h.source.as_str()));
        header.push("config_hash");
        let rows: Vec<Vec<String>> = (0..d.edges.len() - 1)
            .map(|b| {
                let mut row = vec![d.edges[b].to_string(), d.edges[b + 1].to_string()];
                row.extend(d.histograms.iter().map(|h| h.counts[b].to_string()));
                row.push(hash.clone());
                row
            })
            .collect();
        write_table(&out.join("density.csv"), &header, &rows)?;
    }
    emit(&text)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StudentTInput {
    Triple([f64; 3]),
    Named { u: f64, sigma: f64, v: f64 },
}

#[derive(Debug, Serialize)]
struct FuseDoc {
    u: f64,
    sigma: f64,
    v: f64,
    source_index: usize,
    prediction: f64,
    uncertainty: f64,
    config_hash: String,
}

pub fn fuse(a: FuseArgs) -> CliResult<()> {
    let path = a.input.ok_or_else(|| invalid("--in is required"))?;
    let inputs: Vec<StudentTInput> = read_json(&path)?;
    let dists = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (u, sigma, v) = match *s {
                StudentTInput::Triple([u, sigma, v]) => (u, sigma, v),
                StudentTInput::Named { u, sigma, v } => (u, sigma, v),
            };
            StudentT::new(u, sigma, v).map_err(|e| invalid(format!("input {i}: {e}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let fused = fuse_many(&dists)?;
    let (prediction, uncertainty) = fused.prediction();
    let doc = FuseDoc {
        u: fused.st.u(),
        sigma: fused.st.sigma(),
        v: fused.st.v(),
        source_index: fused.source_index,
        prediction,
        uncertainty,
        config_hash: config_hash(&dists)?,
    };
    emit(&to_json(&doc)?)?;
    Ok(())
}
