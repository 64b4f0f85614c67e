//! Classification metrics, noise injection and the robustness / uncertainty
//! analyses built on them.
//!
//! Noise is added in whatever feature space the dataset is in; callers
//! standardize first. For a noise seed `s`, the perturbation is `σ · z` with
//! `z` drawn from [`Gaussian::new(s)`](crate::rng::Gaussian) in row-major
//! order over the chosen modality's matrix. Sweeps therefore reuse the same
//! `z` across σ values for a given seed.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{MultimodalClassifier, Prediction};
use crate::rng::Gaussian;

fn check_pair(preds: usize, labels: usize) -> Result<()> {
    if preds == 0 {
        return Err(Error::EmptyInput("metric needs at least one sample"));
    }
    if preds != labels {
        return Err(Error::DimensionMismatch { context: "predictions vs labels", expected: labels, actual: preds });
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    #[default]
    Unweighted,
    Quadratic,
}

/// Cohen's kappa from the confusion matrix with marginal-product chance
/// agreement. Returns 0 when chance agreement is 1 (a single class in both
/// predictions and labels).
pub fn cohen_kappa(preds: &[usize], labels: &[usize], classes: usize, weighting: KappaWeighting) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let n = preds.len() as f64;
    let mut confusion = vec![vec![0.0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1.0;
    }
    let rows: Vec<f64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..classes).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();

    // Integer disagreement weights keep both sums exact; the quadratic
    // normalization cancels in the ratio.
    let weight = |i: usize, j: usize| -> f64 {
        match weighting {
            KappaWeighting::Unweighted => (i != j) as u8 as f64,
            KappaWeighting::Quadratic => (i.abs_diff(j) * i.abs_diff(j)) as f64,
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..classes {
        for j in 0..classes {
            observed += weight(i, j) * confusion[i][j];
            expected += weight(i, j) * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Ok(0.0);
    }
    Ok((expected - n * observed) / expected)
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean confidence of the bin, 0 when empty.
    pub confidence: f64,
    /// Accuracy of the bin, 0 when empty.
    pub accuracy: f64,
    pub count: usize,
}

pub const DEFAULT_ECE_BINS: usize = 10;

/// Bin of `c` among `n` right-closed bins (0, 1/n], (1/n, 2/n], ...; zero goes
/// to the first bin.
fn bin_index(c: f64, n: usize) -> usize {
    let mut idx = ((c * n as f64).ceil() as usize).clamp(1, n) - 1;
    if idx > 0 && c <= idx as f64 / n as f64 {
        idx -= 1;
    }
    idx
}

/// Expected calibration error Σ_b (n_b / N)·|acc_b − conf_b|.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    check_pair(confidences.len(), correct.len())?;
    if n_bins == 0 {
        return Err(Error::InvalidParameter("ece needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidParameter(format!("confidence {c} outside [0, 1]")));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        conf_sum[b] += c;
        hit_sum[b] += ok as u8 as f64;
        counts[b] += 1;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (confidence, accuracy) = if counts[b] > 0 {
                (conf_sum[b] / counts[b] as f64, hit_sum[b] / counts[b] as f64)
            } else {
                (0.0, 0.0)
            };
            total += counts[b] as f64 / n * (accuracy - confidence).abs();
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                confidence,
                accuracy,
                count: counts[b],
            }
        })
        .collect();
    Ok((total, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub kappa: f64,
    pub ece: f64,
    pub n_samples: usize,
    pub per_bin: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_bins: usize,
    pub kappa: KappaWeighting,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_bins: DEFAULT_ECE_BINS, kappa: KappaWeighting::Unweighted }
    }
}

/// Fused metrics plus per-modality readouts of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Mean AL + EP per modality, each read at the modality's own argmax channel.
    pub mean_unc_modality: Vec<f64>,
    pub mean_ep_modality: Vec<f64>,
    /// Mean fused Û of the predicted channel.
    pub mean_unc_fused: f64,
    /// Accuracy of each modality's argmax-γ readout.
    pub acc_modality: Vec<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate_predictions(preds: &[Prediction], labels: &[usize], classes: usize, opts: &EvalOptions) -> Result<Evaluation> {
    check_pair(preds.len(), labels.len())?;
    let classes_pred: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let confidences: Vec<f64> = preds.iter().map(|p| p.confidence[p.class]).collect();
    let correct: Vec<bool> = classes_pred.iter().zip(labels).map(|(p, l)| p == l).collect();
    let (ece_value, per_bin) = ece(&confidences, &correct, opts.n_bins)?;
    let metrics = MetricsReport {
        acc: accuracy(&classes_pred, labels)?,
        kappa: cohen_kappa(&classes_pred, labels, classes, opts.kappa)?,
        ece: ece_value,
        n_samples: preds.len(),
        per_bin,
    };
    let m = preds[0].modality_class.len();
    let acc_modality = (0..m)
        .map(|i| {
            let readout: Vec<usize> = preds.iter().map(|p| p.modality_class[i]).collect();
            accuracy(&readout, labels)
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        metrics,
        mean_unc_modality: (0..m).map(|i| mean(preds.iter().map(|p| p.modality_uncertainty(i)))).collect(),
        mean_ep_modality: (0..m).map(|i| mean(preds.iter().map(|p| p.modality_epistemic[i]))).collect(),
        mean_unc_fused: mean(preds.iter().map(|p| p.fused_uncertainty)),
        acc_modality,
    })
}

pub fn evaluate(model: &MultimodalClassifier, ds: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let preds = model.predict_dataset(ds)?;
    evaluate_predictions(&preds, &ds.labels, ds.classes, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// 0-based modality index.
    pub modality_index: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// Adds i.i.d. N(0, σ²) noise to every feature of one modality.
pub fn inject_noise(ds: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    let count = ds.modalities.len();
    if spec.modality_index >= count {
        return Err(Error::InvalidModality { index: spec.modality_index, count });
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {}", spec.sigma)));
    }
    let mut out = ds.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let mut gauss = Gaussian::new(spec.seed);
    for x in out.modalities[spec.modality_index].data.iter_mut() {
        *x += spec.sigma * gauss.sample();
    }
    Ok(out)
}

/// One (σ, seed) evaluation of a two-modality model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    /// 1-based modality that was corrupted.
    pub modality: usize,
    pub seed: u64,
    pub acc: f64,
    pub kappa: f64,
    pub ece: f64,
    pub mean_unc_m1: f64,
    pub mean_unc_m2: f64,
    pub mean_unc_fused: f64,
    pub mean_ep_m1: f64,
    pub mean_ep_m2: f64,
    pub acc_m1: f64,
    pub acc_m2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = mean(xs.iter().copied());
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

/// Seed aggregate of the rows sharing one σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub sigma: f64,
    pub modality: usize,
    pub n_seeds: usize,
    pub acc: MeanStd,
    pub kappa: MeanStd,
    pub ece: MeanStd,
    pub mean_unc_m1: MeanStd,
    pub mean_unc_m2: MeanStd,
    pub mean_unc_fused: MeanStd,
    pub mean_ep_m1: MeanStd,
    pub mean_ep_m2: MeanStd,
    pub acc_m1: MeanStd,
    pub acc_m2: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

impl NoiseSweep {
    pub fn aggregate_at(&self, sigma: f64) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.sigma == sigma)
    }
}

/// Evaluates `model` on `ds` with modality `modality_index` (0-based)
/// corrupted at every σ and seed. Rows are ordered by σ, then seed.
pub fn noise_sweep(
    model: &MultimodalClassifier,
    ds: &Dataset,
    sigmas: &[f64],
    modality_index: usize,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<NoiseSweep> {
    if model.modalities() != 2 {
        return Err(Error::DimensionMismatch { context: "noise sweep modalities", expected: 2, actual: model.modalities() });
    }
    if sigmas.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("noise sweep needs at least one sigma and one seed"));
    }
    let mut rows = Vec::with_capacity(sigmas.len() * seeds.len());
    let mut aggregates = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let start = rows.len();
        for &seed in seeds {
            let noisy = inject_noise(ds, &NoiseSpec { modality_index, sigma, seed })?;
            let e = evaluate(model, &noisy, opts)?;
            rows.push(SweepRow {
                sigma,
                modality: modality_index + 1,
                seed,
                acc: e.metrics.acc,
                kappa: e.metrics.kappa,
                ece: e.metrics.ece,
                mean_unc_m1: e.mean_unc_modality[0],
                mean_unc_m2: e.mean_unc_modality[1],
                mean_unc_fused: e.mean_unc_fused,
                mean_ep_m1: e.mean_ep_modality[0],
                mean_ep_m2: e.mean_ep_modality[1],
                acc_m1: e.acc_modality[0],
                acc_m2: e.acc_modality[1],
            });
        }
        let group = &rows[start..];
        let agg = |f: fn(&SweepRow) -> f64| MeanStd::of(&group.iter().map(f).collect::<Vec<_>>());
        aggregates.push(SweepAggregate {
            sigma,
            modality: modality_index + 1,
            n_seeds: group.len(),
            acc: agg(|r| r.acc),
            kappa: agg(|r| r.kappa),
            ece: agg(|r| r.ece),
            mean_unc_m1: agg(|r| r.mean_unc_m1),
            mean_unc_m2: agg(|r| r.mean_unc_m2),
            mean_unc_fused: agg(|r| r.mean_unc_fused),
            mean_ep_m1: agg(|r| r.mean_ep_m1),
            mean_ep_m2: agg(|r| r.mean_ep_m2),
            acc_m1: agg(|r| r.acc_m1),
            acc_m2: agg(|r| r.acc_m2),
        });
    }
    Ok(NoiseSweep { rows, aggregates })
}

pub const DEFAULT_DENSITY_BINS: usize = 64;

/// Counts of one uncertainty source over the shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub source: String,
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Histograms of per-sample uncertainty for every modality (AL + EP at the
/// modality's own predicted channel) and for the fused Û, on common
/// equal-width bins spanning the pooled min–max. The last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDensity {
    pub edges: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

pub fn uncertainty_density(model: &MultimodalClassifier, ds: &Dataset, n_bins: usize) -> Result<UncertaintyDensity> {
    let preds = model.predict_dataset(ds)?;
    density_from_predictions(&preds, n_bins)
}

pub fn density_from_predictions(preds: &[Prediction], n_bins: usize) -> Result<UncertaintyDensity> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("uncertainty density needs samples"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter("density needs at least one bin".into()));
    }
    let m = preds[0].modality_class.len();
    let mut sources: Vec<(String, Vec<f64>)> = (0..m)
        .map(|i| (format!("m{}", i + 1), preds.iter().map(|p| p.modality_uncertainty(i)).collect()))
        .collect();
    sources.push(("fused".into(), preds.iter().map(|p| p.fused_uncertainty).collect()));

    let all = sources.iter().flat_map(|(_, v)| v.iter().copied());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + i as f64 * width }).collect();

    let histograms = sources
        .into_iter()
        .map(|(source, values)| {
            let mut counts = vec![0usize; n_bins];
            for &x in &values {
                let b = (((x - lo) / width) as usize).min(n_bins - 1);
                counts[b] += 1;
            }
            Histogram { mean: mean(values.iter().copied()), source, counts }
        })
        .collect();
    Ok(UncertaintyDensity { edges, histograms })
}
