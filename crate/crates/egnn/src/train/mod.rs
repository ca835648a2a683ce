//! Optimizer, losses, metrics, learning-rate schedules and the
//! experiment loops.
//!
//! Training is single threaded and fully seeded: one Adam step per
//! batch, gradients accumulated across the per-graph tapes of the
//! batch, explicit zero-grad in between.

pub mod experiments;

use crate::error::{Error, Result};
use crate::graphs::PlainGraph;
use crate::model::ModelConfig;
use crate::nn::{Binder, ParamRecord};
use crate::rng::substream;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};

/// Adam with decoupled multiplicative weight decay. Moments are keyed
/// by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update to every visited parameter that has a
    /// gradient. Parameters without gradients are left alone.
    pub fn step(
        &mut self,
        lr: f64,
        visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        let mut failure: Option<Error> = None;
        visit(&mut |name: String, tensor: &mut Tensor| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = tensor.grad() else {
                return;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                failure = Some(Error::Numeric(format!("non-finite gradient in {name}")));
                return;
            }
            let grad = grad.to_vec();
            let m = m_map.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = v_map.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
            if wd != 0.0 {
                let shrink = 1.0 - lr * wd;
                for p in tensor.data_mut() {
                    *p *= shrink;
                }
            }
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dim {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Tape version of [`mse_loss`].
pub fn mse_traced(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean_all(sq))
}

/// Summed binary cross entropy between a decoded adjacency and the
/// ground truth, diagonal excluded, probabilities clamped at 1e-12.
pub fn bce_loss(pred: &Tensor, graph: &PlainGraph) -> Result<f64> {
    let (m, cols) = pred.dims2()?;
    if m != cols || m != graph.num_nodes() {
        return Err(Error::Dim {
            op: "bce",
            lhs: pred.shape().to_vec(),
            rhs: vec![graph.num_nodes(), graph.num_nodes()],
        });
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let p = pred.get(i, j).clamp(1e-12, 1.0 - 1e-12);
            let a = if graph.has_edge(i, j) { 1.0 } else { 0.0 };
            total -= a * p.ln() + (1.0 - a) * (1.0 - p).ln();
        }
    }
    Ok(total)
}

/// Confusion counts over off-diagonal ordered pairs; mergeable across
/// graphs so dataset-level scores use global counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeCounts {
    pub wrong: usize,
    pub total: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EdgeCounts {
    pub fn merge(&mut self, other: EdgeCounts) {
        self.wrong += other.wrong;
        self.total += other.total;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Percentage of wrongly predicted edges over all potential edges.
    pub fn pct_error(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.wrong as f64 / self.total as f64 * 100.0
        }
    }

    /// F1 on the edge-present class; 0.0 when there are no true or
    /// predicted edges (the all-missing baseline convention).
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Threshold a decoded adjacency against the truth.
pub fn edge_counts(pred: &Tensor, graph: &PlainGraph, threshold: f64) -> Result<EdgeCounts> {
    let (m, cols) = pred.dims2()?;
    if m != cols || m != graph.num_nodes() {
        return Err(Error::Dim {
            op: "edge metrics",
            lhs: pred.shape().to_vec(),
            rhs: vec![graph.num_nodes(), graph.num_nodes()],
        });
    }
    let mut counts = EdgeCounts::default();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            counts.total += 1;
            let predicted = pred.get(i, j) > threshold;
            let actual = graph.has_edge(i, j);
            if predicted != actual {
                counts.wrong += 1;
            }
            match (predicted, actual) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

/// (pct_error, f1) at the standard 0.5 threshold.
pub fn edge_metrics(pred: &Tensor, graph: &PlainGraph, threshold: f64) -> Result<(f64, f64)> {
    let counts = edge_counts(pred, graph, threshold)?;
    Ok((counts.pct_error(), counts.f1()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// lr(0) = base; the cosine form decays to 0 at the final epoch.
    pub fn lr_at(self, base: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total_epochs <= 1 {
                    base
                } else {
                    let progress = epoch as f64 / (total_epochs - 1) as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Nbody,
    Autoencoder,
    InvariantRegression,
}

/// Which encoder the autoencoder experiment wraps around the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Egnn,
    Gnn,
    NoiseGnn,
    RadialField,
}

fn default_true() -> bool {
    true
}

/// Small noise scales keep the
/// distance decoder out of its saturated regime at initialization
/// (the value is recorded in run metadata).
fn default_noise_sigma() -> f64 {
    0.3
}

fn default_embed_dim() -> usize {
    8
}

fn default_synth_nodes() -> usize {
    5
}

fn default_synth_train() -> usize {
    200
}

fn default_synth_test() -> usize {
    100
}

/// Full description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    /// Directory holding train/val/test JSON-line files. Unused by the
    /// synthetic invariant-regression task.
    #[serde(default)]
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub early_stopping: bool,
    /// Symmetry-breaking noise scale for the autoencoder.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Embedding dimension n of the autoencoder latent space.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Autoencoder encoder selection; defaults to the model kind.
    #[serde(default)]
    pub encoder: Option<EncoderKind>,
    /// Optional cap on the number of training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Resample autoencoder noise per presentation (generalization
    /// setting) or keep each graph's fixed draw (overfitting setting).
    #[serde(default = "default_true")]
    pub resample_noise: bool,
    /// Stop an autoencoder run early once the training-set F1 reaches
    /// this value (checked every few epochs).
    #[serde(default)]
    pub stop_train_f1: Option<f64>,
    #[serde(default = "default_synth_nodes")]
    pub synth_nodes: usize,
    #[serde(default = "default_synth_train")]
    pub synth_train: usize,
    #[serde(default = "default_synth_test")]
    pub synth_test: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        self.model.validate()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Timing {
    pub fwd_ms_per_batch: f64,
    pub train_s: f64,
}

/// Machine-readable run outcome. `timing` is the only
/// non-deterministic part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub init_scheme: String,
    pub per_epoch: Vec<[f64; 2]>,
    pub test: BTreeMap<String, f64>,
    pub timing: Timing,
}

impl MetricsReport {
    /// JSON with timing zeroed, for byte-identical determinism checks.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.timing = Timing::default();
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

/// A trainable experiment: model parameters plus a per-sample traced
/// loss. `noise_rng` feeds bundles that draw symmetry-breaking noise
/// per presentation; deterministic bundles ignore it.
pub trait Bundle {
    type Sample;

    fn traced_loss(
        &self,
        tape: &mut Tape,
        sample: &Self::Sample,
        noise_rng: &mut ChaCha20Rng,
        binder: &mut Binder,
    ) -> Result<NodeId>;

    /// Deterministic evaluation loss (fixed noise where applicable).
    fn eval_loss(&self, sample: &Self::Sample) -> Result<f64>;

    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    fn param_records(&self) -> Vec<ParamRecord> {
        let mut records = Vec::new();
        crate::nn::collect_records(|f| self.visit_params(f), &mut records);
        records
    }

    fn load_param_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        crate::nn::load_records(records, |f| self.visit_params_mut(f))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub early_stopping: bool,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            schedule: cfg.lr_schedule,
            weight_decay: cfg.weight_decay,
            early_stopping: cfg.early_stopping,
            seed: cfg.seed,
        }
    }
}

pub struct TrainOutcome {
    pub per_epoch: Vec<[f64; 2]>,
    pub best_epoch: usize,
}

/// The shared loop: shuffle, accumulate per-sample gradients over each
/// batch, one Adam step per batch, track validation loss, optionally
/// restore the best parameters afterwards.
pub fn train_bundle<B: Bundle>(
    bundle: &mut B,
    train: &[B::Sample],
    val: &[B::Sample],
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    train_bundle_with(bundle, train, val, settings, |_, _| Ok(false))
}

/// [`train_bundle`] with an after-epoch callback; returning `true`
/// stops training early.
pub fn train_bundle_with<B: Bundle>(
    bundle: &mut B,
    train: &[B::Sample],
    val: &[B::Sample],
    settings: &TrainSettings,
    mut after_epoch: impl FnMut(&B, usize) -> Result<bool>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut adam = AdamState::new(settings.weight_decay);
    let mut shuffle_rng = substream(settings.seed, "shuffle");
    let mut noise_rng = substream(settings.seed, "noise");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut per_epoch = Vec::with_capacity(settings.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<ParamRecord>> = None;

    for epoch in 0..settings.epochs {
        let lr = settings.schedule.lr_at(settings.lr, epoch, settings.epochs);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            bundle.zero_grad();
            for &idx in chunk {
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let loss = bundle.traced_loss(&mut tape, &train[idx], &mut noise_rng, &mut binder)?;
                let raw = tape.value(loss)[0];
                if !raw.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss at epoch {epoch}"
                    )));
                }
                loss_sum += raw;
                let scaled = tape.scale(loss, 1.0 / chunk.len() as f64);
                tape.backward(scaled)?;
                binder.absorb(&tape, |f| bundle.visit_params_mut(f));
            }
            adam.step(lr, |f| bundle.visit_params_mut(f))?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for sample in val {
                s += bundle.eval_loss(sample)?;
            }
            s / val.len() as f64
        };
        per_epoch.push([train_loss, val_loss]);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            if settings.early_stopping {
                best_params = Some(bundle.param_records());
            }
        }
        if after_epoch(bundle, epoch)? {
            break;
        }
    }
    if let Some(records) = best_params {
        bundle.load_param_records(&records)?;
    }
    Ok(TrainOutcome {
        per_epoch,
        best_epoch,
    })
}
