//! Per-modality MLP encoders with evidential heads, trained end to end with
//! Adam on the combined unimodal + fused objective.
//!
//! Head layout: for `K` classes the head emits `4K` raw values, grouped per
//! class as `(γ, δ, α, β)`. See [`head_constrain`] for the output map.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::distributions::{NigParams, StudentT};
use crate::error::{Error, Result};
use crate::fusion::{fuse_classwise, FusedStudentT};
use crate::losses::{loss_gradients, one_hot, softmax};
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter("encoder input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "encoder needs at least one positive hidden layer, got {:?}",
                self.hidden_dims
            )));
        }
        Ok(())
    }

    fn output_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Architecture of a [`MultimodalClassifier`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoders: Vec<EncoderSpec>,
    pub classes: usize,
    /// Whether the evidential heads carry a bias vector.
    #[serde(default = "default_true")]
    pub head_bias: bool,
}

fn default_true() -> bool {
    true
}

/// Default encoder hidden layers.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_ACTIVATION: Activation = Activation::Tanh;

impl ModelSpec {
    /// Default architecture: two tanh hidden layers of 64 units per modality.
    pub fn with_defaults(dims: &[usize], classes: usize) -> Self {
        Self::uniform(dims, &DEFAULT_HIDDEN, DEFAULT_ACTIVATION, classes)
    }

    /// One encoder per entry of `dims`, all with the same hidden layers.
    pub fn uniform(dims: &[usize], hidden_dims: &[usize], activation: Activation, classes: usize) -> Self {
        Self {
            encoders: dims
                .iter()
                .map(|&d| EncoderSpec { input_dim: d, hidden_dims: hidden_dims.to_vec(), activation })
                .collect(),
            classes,
            head_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::EmptyInput("model needs at least one modality"));
        }
        if self.classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.encoders.iter().try_for_each(EncoderSpec::validate)
    }
}

/// Fully connected layer; `weights` is `out_dim × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    /// Uniform in ±√(6 / (fan_in + fan_out)), zero bias.
    fn xavier(in_dim: usize, out_dim: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { in_dim, out_dim, weights, bias: bias.then(|| vec![0.0; out_dim]) }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                let dot: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum();
                dot + self.bias.as_ref().map_or(0.0, |b| b[o])
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` (weights then bias) and
    /// returns the gradient with respect to `x`.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut g_in = vec![0.0; self.in_dim];
        for (o, &g) in g_out.iter().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let g_row = &mut grad[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                g_row[i] += g * x[i];
                g_in[i] += g * row[i];
            }
        }
        if self.bias.is_some() {
            let offset = self.weights.len();
            for (gb, g) in grad[offset..offset + self.out_dim].iter_mut().zip(g_out) {
                *gb += g;
            }
        }
        g_in
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    fn read_params(&mut self, src: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&src[..nw]);
        if let Some(b) = &mut self.bias {
            let nb = b.len();
            b.copy_from_slice(&src[nw..nw + nb]);
        }
    }

    fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|x| x * x).sum();
        let b: f64 = self.bias.iter().flatten().map(|x| x * x).sum();
        (w + b).sqrt()
    }
}

/// Numerically stable ln(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const DELTA_FLOOR: f64 = 1e-6;
pub const ALPHA_FLOOR: f64 = 1e-4;
pub const BETA_FLOOR: f64 = 1e-6;

/// Maps four raw head outputs to valid NIG parameters:
/// γ = r₀, δ = softplus(r₁) + 1e-6, α = 1 + softplus(r₂) + 1e-4,
/// β = softplus(r₃) + 1e-6.
pub fn head_constrain(raw: &[f64; 4]) -> Result<NigParams> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite head output {raw:?}")));
    }
    NigParams::new(
        raw[0],
        softplus(raw[1]) + DELTA_FLOOR,
        1.0 + softplus(raw[2]) + ALPHA_FLOOR,
        softplus(raw[3]) + BETA_FLOOR,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidentialHead {
    pub classes: usize,
    pub layer: Dense,
}

/// Everything the forward pass produces for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialOutput {
    /// `nig[m][k]`: modality `m`, class channel `k`.
    pub nig: Vec<Vec<NigParams>>,
    pub student_t: Vec<Vec<StudentT>>,
    /// One fused distribution per class channel.
    pub fused: Vec<FusedStudentT>,
    /// Argmax of the fused locations, lowest index on ties.
    pub predicted: usize,
}

impl EvidentialOutput {
    pub fn from_nig(nig: Vec<Vec<NigParams>>) -> Result<Self> {
        let student_t: Vec<Vec<StudentT>> = nig
            .iter()
            .map(|m| {
                m.iter()
                    .map(|p| {
                        let st = p.to_student_t();
                        StudentT::new(st.u(), st.sigma(), st.v())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let fused = fuse_classwise(&student_t)?;
        let predicted = argmax(fused.iter().map(|f| f.st.u()));
        Ok(Self { nig, student_t, fused, predicted })
    }

    pub fn fused_locations(&self) -> Vec<f64> {
        self.fused.iter().map(|f| f.st.u()).collect()
    }

    /// Softmax over the fused locations.
    pub fn confidence(&self) -> Vec<f64> {
        softmax(&self.fused_locations())
    }

    /// Û_F = Σ_F v_F / (v_F − 2) of the predicted channel.
    pub fn fused_uncertainty(&self) -> f64 {
        self.fused[self.predicted].prediction().1
    }

    /// Argmax of modality `m`'s γ across classes.
    pub fn modality_prediction(&self, m: usize) -> usize {
        argmax(self.nig[m].iter().map(NigParams::gamma))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-sample prediction summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: Vec<f64>,
    pub fused_uncertainty: f64,
    /// Each modality's own argmax-γ class.
    pub modality_class: Vec<usize>,
    /// Aleatoric and epistemic uncertainty of each modality, read at that
    /// modality's own predicted class channel.
    pub modality_aleatoric: Vec<f64>,
    pub modality_epistemic: Vec<f64>,
}

impl Prediction {
    pub fn from_output(out: &EvidentialOutput) -> Self {
        let modality_class: Vec<usize> = (0..out.nig.len()).map(|m| out.modality_prediction(m)).collect();
        let chosen: Vec<&NigParams> = out.nig.iter().zip(&modality_class).map(|(m, &k)| &m[k]).collect();
        Self {
            class: out.predicted,
            confidence: out.confidence(),
            fused_uncertainty: out.fused_uncertainty(),
            modality_aleatoric: chosen.iter().map(|p| p.aleatoric()).collect(),
            modality_epistemic: chosen.iter().map(|p| p.epistemic()).collect(),
            modality_class,
        }
    }

    /// AL + EP of modality `m`.
    pub fn modality_uncertainty(&self, m: usize) -> f64 {
        self.modality_aleatoric[m] + self.modality_epistemic[m]
    }
}

struct Trace {
    /// Input followed by every hidden activation, per modality.
    activations: Vec<Vec<Vec<f64>>>,
    raw: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalClassifier {
    pub spec: ModelSpec,
    pub encoders: Vec<Encoder>,
    pub heads: Vec<EvidentialHead>,
}

impl MultimodalClassifier {
    /// Xavier-uniform initialization from a ChaCha8 stream seeded with `seed`,
    /// layer by layer in modality order.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut encoders = Vec::new();
        let mut heads = Vec::new();
        for es in &spec.encoders {
            let mut layers = Vec::new();
            let mut prev = es.input_dim;
            for &h in &es.hidden_dims {
                layers.push(Dense::xavier(prev, h, true, &mut rng));
                prev = h;
            }
            encoders.push(Encoder { spec: es.clone(), layers });
            heads.push(EvidentialHead {
                classes: spec.classes,
                layer: Dense::xavier(es.output_dim(), 4 * spec.classes, spec.head_bias, &mut rng),
            });
        }
        Ok(Self { spec, encoders, heads })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoders.iter().zip(&self.heads).flat_map(|(e, h)| e.layers.iter().chain(std::iter::once(&h.layer)))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoders
            .iter_mut()
            .zip(self.heads.iter_mut())
            .flat_map(|(e, h)| e.layers.iter_mut().chain(std::iter::once(&mut h.layer)))
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(Dense::n_params).sum()
    }

    /// All parameters in a fixed order: per modality, each encoder layer then
    /// the head; within a layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.layers().for_each(|l| l.write_params(&mut out));
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { context: "parameter vector", expected: self.n_params(), actual: flat.len() });
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let n = l.n_params();
            l.read_params(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Euclidean norm of each layer's parameters, in [`Self::params`] order.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers().map(Dense::norm).collect()
    }

    /// Mask over [`Self::params`] that is true for encoder parameters.
    fn encoder_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.n_params());
        for (e, h) in self.encoders.iter().zip(&self.heads) {
            for l in &e.layers {
                mask.extend(std::iter::repeat_n(true, l.n_params()));
            }
            mask.extend(std::iter::repeat_n(false, h.layer.n_params()));
        }
        mask
    }

    fn trace(&self, sample: &[&[f64]]) -> Result<Trace> {
        if sample.len() != self.modalities() {
            return Err(Error::DimensionMismatch { context: "modalities", expected: self.modalities(), actual: sample.len() });
        }
        let mut activations = Vec::with_capacity(sample.len());
        let mut raw = Vec::with_capacity(sample.len());
        for ((x, enc), head) in sample.iter().zip(&self.encoders).zip(&self.heads) {
            if x.len() != enc.spec.input_dim {
                return Err(Error::DimensionMismatch {
                    context: "modality features",
                    expected: enc.spec.input_dim,
                    actual: x.len(),
                });
            }
            let mut acts = vec![x.to_vec()];
            for layer in &enc.layers {
                let mut h = layer.forward(acts.last().unwrap());
                h.iter_mut().for_each(|v| *v = enc.spec.activation.apply(*v));
                acts.push(h);
            }
            raw.push(head.layer.forward(acts.last().unwrap()));
            activations.push(acts);
        }
        Ok(Trace { activations, raw })
    }

    fn nig_from_raw(&self, raw: &[Vec<f64>]) -> Result<Vec<Vec<NigParams>>> {
        raw.iter()
            .map(|r| r.chunks_exact(4).map(|c| head_constrain(&[c[0], c[1], c[2], c[3]])).collect())
            .collect()
    }

    /// Encoders → heads → NIG per modality → Student's t → class-wise fusion.
    pub fn forward(&self, sample: &[&[f64]]) -> Result<EvidentialOutput> {
        let trace = self.trace(sample)?;
        EvidentialOutput::from_nig(self.nig_from_raw(&trace.raw)?)
    }

    pub fn predict(&self, sample: &[&[f64]]) -> Result<Prediction> {
        Ok(Prediction::from_output(&self.forward(sample)?))
    }

    /// Total loss of one sample and its gradient, added into `grad` (laid out
    /// as [`Self::params`]).
    pub fn accumulate_gradient(&self, sample: &[&[f64]], label: usize, lambda: f64, grad: &mut [f64]) -> Result<f64> {
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange { label, classes: self.classes() });
        }
        let trace = self.trace(sample)?;
        let nig = self.nig_from_raw(&trace.raw)?;
        let lg = loss_gradients(&nig, &one_hot(label, self.classes()), lambda)?;

        let mut offset = 0;
        for (m, (enc, head)) in self.encoders.iter().zip(&self.heads).enumerate() {
            let enc_params: usize = enc.layers.iter().map(Dense::n_params).sum();
            let head_offset = offset + enc_params;

            let raw = &trace.raw[m];
            let mut g_raw = vec![0.0; raw.len()];
            for (k, g) in lg.nig[m].iter().enumerate() {
                g_raw[4 * k] = g.gamma;
                g_raw[4 * k + 1] = g.delta * sigmoid(raw[4 * k + 1]);
                g_raw[4 * k + 2] = g.alpha * sigmoid(raw[4 * k + 2]);
                g_raw[4 * k + 3] = g.beta * sigmoid(raw[4 * k + 3]);
            }
            let acts = &trace.activations[m];
            let head_grad = &mut grad[head_offset..head_offset + head.layer.n_params()];
            let mut g = head.layer.backward(acts.last().unwrap(), &g_raw, head_grad);

            let mut layer_end = head_offset;
            for (li, layer) in enc.layers.iter().enumerate().rev() {
                let out = &acts[li + 1];
                for (gi, a) in g.iter_mut().zip(out) {
                    *gi *= enc.spec.activation.derivative_from_output(*a);
                }
                let start = layer_end - layer.n_params();
                g = layer.backward(&acts[li], &g, &mut grad[start..layer_end]);
                layer_end = start;
            }
            offset = head_offset + head.layer.n_params();
        }
        Ok(lg.breakdown.total)
    }

    /// Total loss of one sample.
    pub fn sample_loss(&self, sample: &[&[f64]], label: usize, lambda: f64) -> Result<f64> {
        let mut scratch = vec![0.0; self.n_params()];
        self.accumulate_gradient(sample, label, lambda, &mut scratch)
    }

    /// Mean total loss over a dataset, summed in sample order.
    pub fn mean_loss(&self, ds: &Dataset, lambda: f64) -> Result<f64> {
        if ds.n_samples() == 0 {
            return Err(Error::EmptyInput("mean_loss needs samples"));
        }
        let mut total = 0.0;
        for i in 0..ds.n_samples() {
            total += self.loss_only(&ds.sample(i), ds.labels[i], lambda)?;
        }
        Ok(total / ds.n_samples() as f64)
    }

    fn loss_only(&self, sample: &[&[f64]], label: usize, lambda: f64) -> Result<f64> {
        let out = self.forward(sample)?;
        let fused: Vec<StudentT> = out.fused.iter().map(|f| f.st).collect();
        let b = crate::losses::total_loss(&out.nig, &fused, &one_hot(label, self.classes()), lambda)?;
        Ok(b.total)
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Prediction>> {
        (0..ds.n_samples()).map(|i| self.predict(&ds.sample(i))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Only update the heads.
    pub freeze_encoders: bool,
    /// Keep the weights with the lowest validation loss instead of the last.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 100,
            batch_size: 16,
            lambda: 0.5,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            freeze_encoders: false,
            select_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("optimizer moments must lie in [0, 1) with epsilon > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss over the full training set after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean validation loss after each epoch, when a validation set is given.
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept, when `select_best` is on.
    pub best_epoch: Option<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, mask: Option<&[bool]>) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            if mask.is_some_and(|m| m[i]) {
                continue;
            }
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Mini-batch Adam on the mean per-sample total loss.
///
/// Each epoch reshuffles the training indices with a ChaCha8 stream seeded by
/// `cfg.seed`; gradients are summed in batch order, so the result is a pure
/// function of (model, data, config).
pub fn train(
    model: &mut MultimodalClassifier,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.n_samples() == 0 {
        return Err(Error::EmptyInput("training set is empty"));
    }
    if train_set.classes != model.classes() {
        return Err(Error::DimensionMismatch { context: "classes", expected: model.classes(), actual: train_set.classes });
    }
    if cfg.select_best && val_set.is_none() {
        return Err(Error::InvalidParameter("select_best requires a validation set".into()));
    }

    let initial_loss = model.mean_loss(train_set, cfg.lambda).map_err(|e| numerical(e, 0, 0, model))?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, param_norms: model.layer_norms() });
    }
    let mask = cfg.freeze_encoders.then(|| model.encoder_mask());
    let mut rng = seeded(cfg.seed);
    let mut adam = Adam::new(model.n_params());
    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train_set.n_samples()).collect();
    let mut report = TrainReport { initial_loss, epoch_losses: Vec::new(), val_losses: Vec::new(), best_epoch: None };
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += model
                    .accumulate_gradient(&train_set.sample(i), train_set.labels[i], cfg.lambda, &mut grad)
                    .map_err(|e| numerical(e, epoch, b + 1, model))?;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, param_norms: model.layer_norms() });
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grad, cfg, mask.as_deref());
            model.set_params(&params)?;
        }
        let epoch_loss = model.mean_loss(train_set, cfg.lambda).map_err(|e| numerical(e, epoch, 0, model))?;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, param_norms: model.layer_norms() });
        }
        report.epoch_losses.push(epoch_loss);
        if let Some(val) = val_set {
            let vl = model.mean_loss(val, cfg.lambda)?;
            report.val_losses.push(vl);
            if cfg.select_best && best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, params.clone()));
                report.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, p)) = best {
        model.set_params(&p)?;
    }
    Ok(report)
}

/// Head outputs that overflow the parameter constraints surface as invalid
/// parameters; during training they are reported as a non-finite loss.
fn numerical(e: Error, epoch: usize, batch: usize, model: &MultimodalClassifier) -> Error {
    match e {
        Error::InvalidParameter(_) => Error::NonFiniteLoss { epoch, batch, param_norms: model.layer_norms() },
        other => other,
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON checkpoint. Floats are written with shortest round-trip formatting,
/// so loading reproduces every weight bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub init_seed: u64,
    pub train_config: TrainConfig,
    /// Train-split statistics the model's inputs were standardized with.
    pub standardization: Option<Standardization>,
    pub model: MultimodalClassifier,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion(version));
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.model.spec.validate()?;
        Ok(ck)
    }
}
