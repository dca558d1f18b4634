//! Generator training against a frozen captioning backend.
//!
//! Each step runs a Tencode batch through the generator, backpropagates the
//! Sobel fidelity loss against the paired RGB frames, and adds a semantic
//! term whose gradient comes from one of two strategies:
//!
//! - `spsa`: a zeroth-order estimate at the generator output. Each pair draws
//!   one Rademacher perturbation shared across the batch, captions both
//!   perturbed outputs and differences their Jaccard losses. The estimate is
//!   injected as the upstream gradient of the output image.
//! - `staged`: fidelity-only updates; the semantic loss is measured on the
//!   validation set after each epoch (past the warmup) and drives checkpoint
//!   selection and early stopping.
//!
//! The backend is only ever asked for captions. Reference captions of RGB
//! frames are requested once per sample and cached.
//!
//! Runs are reproducible: the epoch order depends on `(seed, epoch)` and the
//! perturbations on `(seed, step)`, so resuming from a checkpoint continues
//! exactly where the uninterrupted run would be.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array, Array3, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::events_io::{load_events, DatasetIndex, EventsError};
use crate::generator::{
    crop, load_checkpoint, pad_to, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, CropRecord, Generator,
    GeneratorError, Mode, OptimizerMoments,
};
use crate::llm_client::{complete_many, CaptionRequest, LlmBackend, LlmError, CAPTION_PROMPT};
use crate::losses::{dual_loss, fidelity_loss, fidelity_loss_and_grad, jaccard_loss, DualLossBreakdown, LossError, LossWeights};
use crate::representation::{encode_tencode, load_png, RepImage, RepKind, RepresentationError};

pub const METRICS_HEADER: &str = "step,semantic,fidelity,dual,lr,wall_ms";

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {id} has no paired RGB frame")]
    MissingRgbPair { id: String },
    #[error("backend failure: {source}{}", checkpoint.as_ref().map(|p| format!(" (resumable checkpoint at {})", p.display())).unwrap_or_default())]
    BackendFailure {
        #[source]
        source: LlmError,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

fn backend_err(source: LlmError) -> TrainerError {
    TrainerError::BackendFailure { source, checkpoint: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticStrategy {
    #[default]
    Spsa,
    Staged,
}

impl std::str::FromStr for SemanticStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spsa" => Ok(SemanticStrategy::Spsa),
            "staged" => Ok(SemanticStrategy::Staged),
            other => Err(format!("unknown semantic strategy {other:?} (expected spsa or staged)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub semantic_strategy: SemanticStrategy,
    pub spsa_pairs_per_batch: usize,
    pub spsa_step: f64,
    /// Epochs without semantic evaluation (staged strategy).
    pub warmup_epochs: u64,
    /// Stop after this many validations without improvement.
    pub patience: Option<u64>,
    pub seed: u64,
    /// Save `last.ckpt` every this many steps (0 disables).
    pub checkpoint_interval: u64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Hard stop after this many total steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            semantic_strategy: SemanticStrategy::Spsa,
            spsa_pairs_per_batch: 1,
            spsa_step: 0.05,
            warmup_epochs: 0,
            patience: None,
            seed: 0,
            checkpoint_interval: 100,
            grad_clip: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.spsa_pairs_per_batch == 0 {
            return bad("spsa_pairs_per_batch must be at least 1");
        }
        if !(self.spsa_step > 0.0 && self.spsa_step.is_finite()) {
            return bad("spsa_step must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        self.weights.validate()?;
        Ok(())
    }

    fn semantic_in_steps(&self) -> bool {
        self.semantic_strategy == SemanticStrategy::Spsa && self.weights.lambda_semantic > 0.0
    }
}

/// A Tencode frame and the RGB frame it should be aligned with, both `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub input: Array3<f64>,
    pub rgb: Array3<f64>,
}

/// Full-window Tencode inputs plus RGB frames resized to the sensor size.
pub fn load_pairs(index: &DatasetIndex, sensor: Option<(u32, u32)>) -> Result<Vec<TrainPair>> {
    index
        .samples()
        .iter()
        .map(|s| {
            let rgb_path = s
                .rgb_path
                .as_ref()
                .ok_or_else(|| TrainerError::MissingRgbPair { id: s.id.clone() })?;
            let stream = load_events(&s.events_path, sensor)?;
            let (t0, t1) = stream.full_window();
            let input = encode_tencode(&stream, t0, t1)?.pixels;
            let rgb = load_png(rgb_path, RepKind::ExternalFrame, Some((stream.width(), stream.height())))?;
            Ok(TrainPair {
                id: s.id.clone(),
                input,
                rgb: rgb.pixels,
            })
        })
        .collect()
}

/// One metrics log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: DualLossBreakdown,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss.semantic, self.loss.fidelity, self.loss.dual, self.lr, self.wall_ms
        )
    }
}

/// Validation result after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub epoch: u64,
    pub step: u64,
    pub loss: DualLossBreakdown,
}

/// Progress counters persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
    pub best_val_dual: Option<f64>,
    pub best_epoch: Option<u64>,
    pub stale_validations: u64,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub moments: OptimizerMoments,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        Self {
            moments: OptimizerMoments {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], config: &TrainConfig) {
        let m = &mut self.moments;
        m.step += 1;
        let t = m.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (config.learning_rate, config.adam_eps);
        for (((p, g), mt), vt) in params.iter_mut().zip(grads).zip(&mut m.first).zip(&mut m.second) {
            Zip::from(p).and(g).and(mt).and(vt).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Rademacher (+1 / -1) array.
pub fn rademacher<D: Dimension>(shape: D, rng: &mut impl Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Two-sided SPSA estimate of the gradient of `loss` at `x`, averaged over
/// `pairs` perturbations of size `step`.
pub fn spsa_gradient<D, E>(
    x: &Array<f64, D>,
    pairs: usize,
    step: f64,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&Array<f64, D>) -> Result<f64, E>,
) -> Result<Array<f64, D>, E>
where
    D: Dimension,
{
    assert!(pairs >= 1 && step > 0.0, "SPSA needs pairs >= 1 and step > 0");
    let mut g = Array::zeros(x.raw_dim());
    for _ in 0..pairs {
        let delta = rademacher(x.raw_dim(), rng);
        let plus = loss(&(x + &(&delta * step)))?;
        let minus = loss(&(x - &(&delta * step)))?;
        g.scaled_add((plus - minus) / (2.0 * step) / pairs as f64, &delta);
    }
    Ok(g)
}

/// Caption-based SPSA for a batch of generator outputs.
///
/// Every pair draws one perturbation over the largest image and crops it for
/// the smaller ones, so all images in the batch share it. Perturbed images
/// are clamped to `[0, 1]` before captioning. Returns the per-image gradient
/// estimate and the mean perturbed semantic loss per image.
pub fn spsa_semantic_batch(
    outputs: &[Array3<f64>],
    references: &[String],
    backend: &dyn LlmBackend,
    pairs: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Array3<f64>>, Vec<f64>)> {
    if pairs == 0 || !(step > 0.0) {
        return Err(TrainerError::InvalidConfig("SPSA needs pairs >= 1 and step > 0".into()));
    }
    assert_eq!(outputs.len(), references.len());
    let h = outputs.iter().map(|o| o.dim().0).max().unwrap_or(0);
    let w = outputs.iter().map(|o| o.dim().1).max().unwrap_or(0);
    let deltas: Vec<Array3<f64>> = (0..pairs).map(|_| rademacher(ndarray::Dim([h, w, 3]), rng)).collect();
    let mut requests = Vec::with_capacity(pairs * outputs.len() * 2);
    for delta in &deltas {
        for out in outputs {
            let (oh, ow, _) = out.dim();
            let d = delta.slice(s![..oh, ..ow, ..]);
            for sign in [1.0, -1.0] {
                let mut img = out.clone();
                img.scaled_add(sign * step, &d);
                img.mapv_inplace(|v| v.clamp(0.0, 1.0));
                requests.push(CaptionRequest::new(RepImage::new(img, RepKind::Evrep), CAPTION_PROMPT));
            }
        }
    }
    let texts = run_requests(backend, &requests)?;
    let mut grads: Vec<Array3<f64>> = outputs.iter().map(|o| Array3::zeros(o.raw_dim())).collect();
    let mut semantic = vec![0.0; outputs.len()];
    let n = outputs.len();
    for (p, delta) in deltas.iter().enumerate() {
        for b in 0..n {
            let i = 2 * (p * n + b);
            let plus = jaccard_loss(&texts[i], &references[b]);
            let minus = jaccard_loss(&texts[i + 1], &references[b]);
            let (oh, ow, _) = outputs[b].dim();
            grads[b].scaled_add((plus - minus) / (2.0 * step) / pairs as f64, &delta.slice(s![..oh, ..ow, ..]));
            semantic[b] += (plus + minus) / (2.0 * pairs as f64);
        }
    }
    Ok((grads, semantic))
}

/// Single-image form of [`spsa_semantic_batch`].
pub fn semantic_gradient_spsa(
    output: &Array3<f64>,
    reference_caption: &str,
    backend: &dyn LlmBackend,
    pairs: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let (mut g, _) = spsa_semantic_batch(
        std::slice::from_ref(output),
        &[reference_caption.to_string()],
        backend,
        pairs,
        step,
        rng,
    )?;
    Ok(g.pop().expect("one image"))
}

/// Captions in request order.
fn run_requests(backend: &dyn LlmBackend, requests: &[CaptionRequest]) -> Result<Vec<String>> {
    let mut texts = vec![String::new(); requests.len()];
    for (i, r) in complete_many(backend, requests, backend.max_concurrency()) {
        texts[i] = r.map_err(backend_err)?.text;
    }
    Ok(texts)
}

fn caption_all(backend: &dyn LlmBackend, images: impl IntoIterator<Item = Array3<f64>>, kind: RepKind) -> Result<Vec<String>> {
    let requests: Vec<CaptionRequest> = images
        .into_iter()
        .map(|img| CaptionRequest::new(RepImage::new(img, kind), CAPTION_PROMPT))
        .collect();
    run_requests(backend, &requests)
}

/// Anything mapping a Tencode frame to a representation image.
pub trait Representer {
    fn represent(&self, input: &Array3<f64>) -> Result<Array3<f64>>;
}

impl Representer for Generator {
    fn represent(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.generate(input)?)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Representer for Identity {
    fn represent(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(input.clone())
    }
}

/// Mean Jaccard loss between captions of the generated representations and
/// of the paired RGB frames.
pub fn evaluate_semantic(generator: &dyn Representer, val: &[TrainPair], backend: &dyn LlmBackend) -> Result<f64> {
    if val.is_empty() {
        return Err(TrainerError::InvalidConfig("validation set is empty".into()));
    }
    let outputs = val.iter().map(|p| generator.represent(&p.input)).collect::<Result<Vec<_>>>()?;
    let refs = caption_all(backend, val.iter().map(|p| p.rgb.clone()), RepKind::ExternalFrame)?;
    Ok(semantic_against(backend, outputs, &refs)?.iter().sum::<f64>() / val.len() as f64)
}

fn semantic_against(backend: &dyn LlmBackend, outputs: Vec<Array3<f64>>, refs: &[String]) -> Result<Vec<f64>> {
    let texts = caption_all(backend, outputs, RepKind::Evrep)?;
    Ok(texts.iter().zip(refs).map(|(e, r)| jaccard_loss(e, r)).collect())
}

/// Best validation so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestRecord {
    pub epoch: u64,
    pub loss: DualLossBreakdown,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: Generator,
    pub metrics: Vec<MetricsRow>,
    pub validation: Vec<ValidationRow>,
    pub best: Option<BestRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub state: TrainState,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    generator: Generator,
    adam: Adam,
    state: TrainState,
    backend: &'a dyn LlmBackend,
    out_dir: Option<PathBuf>,
    reference_captions: HashMap<String, String>,
    metrics: Vec<MetricsRow>,
    validation: Vec<ValidationRow>,
    best: Option<BestRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(generator: Generator, backend: &'a dyn LlmBackend, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(generator.params()),
            generator,
            config,
            state: TrainState::default(),
            backend,
            out_dir: None,
            reference_captions: HashMap::new(),
            metrics: Vec::new(),
            validation: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(checkpoint: Checkpoint, backend: &'a dyn LlmBackend, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(checkpoint.generator, backend, config)?;
        if let Some(m) = checkpoint.optimizer {
            t.adam.moments = m;
        }
        t.state = serde_json::from_value(checkpoint.meta.extra["state"].clone()).unwrap_or(TrainState {
            step: checkpoint.meta.step,
            epoch: checkpoint.meta.epoch,
            ..Default::default()
        });
        if let (Some(epoch), Some(v)) = (t.state.best_epoch, t.state.best_val_dual) {
            let w = t.config.weights;
            t.best = Some(BestRecord {
                epoch,
                loss: DualLossBreakdown {
                    semantic: f64::NAN,
                    fidelity: f64::NAN,
                    dual: v,
                    lambda: w.lambda_semantic,
                    gamma: w.gamma_fidelity,
                },
                path: None,
            });
        }
        Ok(t)
    }

    pub fn resume_from(path: &Path, backend: &'a dyn LlmBackend, config: TrainConfig) -> Result<Self> {
        Self::resume(load_checkpoint(path)?, backend, config)
    }

    /// Directory for `metrics.csv`, `last.ckpt` and `best.ckpt`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            seed: self.config.seed,
            step: self.state.step,
            epoch: self.state.epoch,
            loss_tail: self.metrics.iter().rev().take(20).rev().map(|m| m.loss).collect(),
            extra: serde_json::json!({ "state": self.state, "config": self.config }),
        };
        save_checkpoint(path, &self.generator, &meta, Some(&self.adam.moments))?;
        Ok(())
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.step.wrapping_add(1));
        rng
    }

    fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_0F_E90C);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn references(&mut self, batch: &[&TrainPair]) -> Result<Vec<String>> {
        let missing: Vec<&TrainPair> = batch
            .iter()
            .copied()
            .filter(|p| !self.reference_captions.contains_key(&p.id))
            .collect();
        if !missing.is_empty() {
            let texts = caption_all(self.backend, missing.iter().map(|p| p.rgb.clone()), RepKind::ExternalFrame)?;
            for (p, t) in missing.iter().zip(texts) {
                self.reference_captions.insert(p.id.clone(), t);
            }
        }
        Ok(batch.iter().map(|p| self.reference_captions[&p.id].clone()).collect())
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, batch: &[&TrainPair]) -> Result<MetricsRow> {
        let start = Instant::now();
        if batch.is_empty() {
            return Err(TrainerError::InvalidConfig("empty batch".into()));
        }
        for p in batch {
            if p.input.dim() != p.rgb.dim() {
                return Err(TrainerError::InvalidConfig(format!(
                    "sample {}: input {:?} and RGB {:?} differ in size",
                    p.id,
                    p.input.dim(),
                    p.rgb.dim()
                )));
            }
        }
        let f = self.generator.config().grid_factor();
        let ph = batch.iter().map(|p| p.input.dim().0).max().unwrap().div_ceil(f) * f;
        let pw = batch.iter().map(|p| p.input.dim().1).max().unwrap().div_ceil(f) * f;
        let (padded, records): (Vec<Array3<f64>>, Vec<CropRecord>) =
            batch.iter().map(|p| pad_to(&p.input, ph, pw)).unzip();
        let input = crate::generator::images_to_batch(&padded)?;

        let mut graph = Graph::new();
        let pass = self.generator.forward_graph(&mut graph, &input, Mode::Train)?;
        let out_batch = graph.value(pass.output);
        let outputs: Vec<Array3<f64>> = crate::generator::batch_to_images(out_batch)
            .iter()
            .zip(&records)
            .map(|(img, r)| crop(img, r))
            .collect();

        let w = self.config.weights;
        let nb = batch.len() as f64;
        let mut seed = Tensor::zeros(out_batch.raw_dim());
        let mut fidelity = 0.0;
        for (b, (out, pair)) in outputs.iter().zip(batch).enumerate() {
            let (loss, grad) = fidelity_loss_and_grad(out.view(), pair.rgb.view())?;
            fidelity += loss / nb;
            add_hwc(&mut seed, b, &grad, w.gamma_fidelity / nb);
        }

        let mut semantic = 0.0;
        if self.config.semantic_in_steps() {
            let refs = self.references(batch)?;
            let mut rng = self.step_rng();
            let (grads, sems) = spsa_semantic_batch(
                &outputs,
                &refs,
                self.backend,
                self.config.spsa_pairs_per_batch,
                self.config.spsa_step,
                &mut rng,
            )?;
            for (b, g) in grads.iter().enumerate() {
                add_hwc(&mut seed, b, g, w.lambda_semantic / nb);
            }
            semantic = sems.iter().sum::<f64>() / nb;
        }

        let mut grads = graph.backward(pass.output, seed);
        let mut param_grads: Vec<Tensor> = pass
            .params
            .iter()
            .zip(self.generator.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.raw_dim())))
            .collect();
        clip_global_norm(&mut param_grads, self.config.grad_clip);
        self.adam.update(self.generator.params_mut(), &param_grads, &self.config);
        self.generator.update_running_stats(&pass.batch_stats);

        self.state.step += 1;
        let row = MetricsRow {
            step: self.state.step,
            loss: dual_loss(semantic, fidelity, &w)?,
            lr: self.config.learning_rate,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        self.metrics.push(row);
        Ok(row)
    }

    /// Validation fidelity and (when weighted in) semantic loss.
    pub fn validate(&mut self, val: &[TrainPair]) -> Result<DualLossBreakdown> {
        let outputs = val
            .iter()
            .map(|p| self.generator.generate(&p.input))
            .collect::<Result<Vec<_>, _>>()?;
        let mut fid = 0.0;
        for (o, p) in outputs.iter().zip(val) {
            fid += fidelity_loss(o.view(), p.rgb.view())?;
        }
        fid /= val.len() as f64;
        let sem = if self.config.weights.lambda_semantic > 0.0 {
            let refs = self.references(&val.iter().collect::<Vec<_>>())?;
            semantic_against(self.backend, outputs, &refs)?.iter().sum::<f64>() / val.len() as f64
        } else {
            0.0
        };
        Ok(dual_loss(sem, fid, &self.config.weights)?)
    }

    fn should_validate(&self, epoch: u64) -> bool {
        match self.config.semantic_strategy {
            SemanticStrategy::Staged => epoch + 1 > self.config.warmup_epochs,
            SemanticStrategy::Spsa => true,
        }
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    fn append_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        let Some(path) = self.out_path("metrics.csv") else { return Ok(()) };
        let io = |source| TrainerError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        for r in rows {
            text.push_str(&r.csv_line());
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(io)
    }

    fn save_last(&self) -> Result<Option<PathBuf>> {
        match self.out_path("last.ckpt") {
            Some(p) => {
                self.save(&p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }

    fn fail_backend(&self, err: TrainerError) -> TrainerError {
        match err {
            TrainerError::BackendFailure { source, .. } => {
                let checkpoint = match self.save_last() {
                    Ok(p) => p,
                    Err(e) => {
                        log::error!("could not save checkpoint after backend failure: {e}");
                        None
                    }
                };
                TrainerError::BackendFailure { source, checkpoint }
            }
            other => other,
        }
    }

    /// Trains until `epochs`, `max_steps` or early stopping.
    pub fn fit(&mut self, train: &[TrainPair], val: &[TrainPair]) -> Result<TrainOutcome> {
        if train.is_empty() && self.config.epochs > 0 {
            return Err(TrainerError::InvalidConfig("training set is empty".into()));
        }
        let bs = self.config.batch_size;
        let batches = train.len().div_ceil(bs) as u64;
        let mut stopped = false;
        let mut flushed = self.metrics.len();
        while self.state.epoch < self.config.epochs && !stopped {
            let epoch = self.state.epoch;
            let order = self.epoch_order(train.len(), epoch);
            while self.state.batch_in_epoch < batches {
                if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                    stopped = true;
                    break;
                }
                let k = self.state.batch_in_epoch as usize;
                let batch: Vec<&TrainPair> = order[k * bs..((k + 1) * bs).min(train.len())]
                    .iter()
                    .map(|&i| &train[i])
                    .collect();
                if let Err(e) = self.step(&batch) {
                    self.append_metrics(&self.metrics[flushed..])?;
                    return Err(self.fail_backend(e));
                }
                self.state.batch_in_epoch += 1;
                let interval = self.config.checkpoint_interval;
                if interval > 0 && self.state.step % interval == 0 {
                    self.append_metrics(&self.metrics[flushed..])?;
                    flushed = self.metrics.len();
                    self.save_last()?;
                }
            }
            if stopped {
                break;
            }
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            if !val.is_empty() && self.should_validate(epoch) {
                let loss = self.validate(val).map_err(|e| self.fail_backend(e))?;
                self.validation.push(ValidationRow {
                    epoch,
                    step: self.state.step,
                    loss,
                });
                log::info!(
                    "epoch {epoch}: validation semantic {:.4} fidelity {:.6} dual {:.6}",
                    loss.semantic,
                    loss.fidelity,
                    loss.dual
                );
                if self.state.best_val_dual.is_none_or(|b| loss.dual < b) {
                    self.state.best_val_dual = Some(loss.dual);
                    self.state.best_epoch = Some(epoch);
                    self.state.stale_validations = 0;
                    let path = self.out_path("best.ckpt");
                    if let Some(p) = &path {
                        self.save(p)?;
                    }
                    self.best = Some(BestRecord { epoch, loss, path });
                } else {
                    self.state.stale_validations += 1;
                    if self.config.patience.is_some_and(|p| self.state.stale_validations >= p) {
                        log::info!("early stop after epoch {epoch}");
                        stopped = true;
                    }
                }
            }
        }
        self.append_metrics(&self.metrics[flushed..])?;
        let final_checkpoint = self.save_last()?;
        Ok(TrainOutcome {
            generator: self.generator.clone(),
            metrics: self.metrics.clone(),
            validation: self.validation.clone(),
            best: self.best.clone(),
            final_checkpoint,
            state: self.state,
        })
    }
}

fn add_hwc(seed: &mut Tensor, b: usize, grad: &Array3<f64>, scale: f64) {
    let (h, w, c) = grad.dim();
    let mut plane = seed.slice_mut(s![b, ..c, ..h, ..w]);
    Zip::from(&mut plane)
        .and(&grad.view().permuted_axes([2, 0, 1]))
        .for_each(|s, &g| *s += scale * g);
}

/// Trains `generator` from scratch state; see [`Trainer`].
pub fn train(
    train_set: &[TrainPair],
    val_set: &[TrainPair],
    generator: Generator,
    backend: &dyn LlmBackend,
    config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(generator, backend, config)?;
    if let Some(d) = out_dir {
        t = t.with_output_dir(d);
    }
    t.fit(train_set, val_set)
}

/// Reads a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64, f64, f64, f64, u64)>> {
    let text = fs::read_to_string(path).map_err(|source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || TrainerError::InvalidConfig(format!("malformed metrics row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            num(1)?,
            num(2)?,
            num(3)?,
            num(4)?,
            f[5].parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}
