//! The three experiment loops: N-body forecasting, graph
//! autoencoding, and the invariant-regression readout demo.
//!
//! Each experiment wraps the core layer stack in a *bundle* holding
//! the task-specific input embeddings and output heads, so the shared
//! trainer in the parent module can drive all of them.

use super::{
    edge_counts, mse_traced, train_bundle, Bundle, EdgeCounts, EncoderKind, ExperimentConfig,
    MetricsReport, TaskKind, Timing, TrainSettings,
};
use crate::equivariance::{random_transform, EuclideanTransform};
use crate::error::{Error, Result};
use crate::graphs::PlainGraph;
use crate::model::{
    decode_adjacency_logits_traced, fully_connected_edges, Checkpoint, EdgeAttrs, GeometricGraph,
    Model, ModelConfig, ModelKind, TracedGraph,
};
use crate::nbody::Trajectory;
use crate::nn::{self, Activation, Binder, LinearLayer, Mlp, ReadoutHead};
use crate::rng::substream;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Everything a finished run produces.
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
}

fn linear_block(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Result<Mlp> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Mlp::new(vec![LinearLayer {
        weight: Tensor::matrix(in_dim, out_dim, data)?,
        bias: Tensor::zeros(vec![out_dim]),
        activation: Activation::None,
    }])
}

fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent")
}

// ---------------------------------------------------------------------------
// N-body forecasting
// ---------------------------------------------------------------------------

pub struct NbodySample {
    /// Geometry handed to the model: x = p0, v = v0, full edges,
    /// attrs a_ij = c_i·c_j.
    pub geometry: GeometricGraph,
    /// ‖v0‖ per node, embedded into h0 for the equivariant models.
    pub vnorm: Tensor,
    /// [p0, v0] rows, embedded into h0 for the plain baseline.
    pub pv: Tensor,
    pub target: Tensor,
}

impl NbodySample {
    pub fn from_trajectory(t: &Trajectory) -> Result<Self> {
        let (n, dim) = t.p0.dims2()?;
        let mut attrs = EdgeAttrs::new(1);
        let edges = fully_connected_edges(n);
        for &(i, j) in &edges {
            attrs.insert((i, j), vec![(t.charges[i] * t.charges[j]) as f64]);
        }
        let vnorm: Vec<f64> = (0..n)
            .map(|i| {
                t.v0.row_slice(i)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut pv = Vec::with_capacity(n * 2 * dim);
        for i in 0..n {
            pv.extend_from_slice(t.p0.row_slice(i));
            pv.extend_from_slice(t.v0.row_slice(i));
        }
        Ok(Self {
            geometry: GeometricGraph::new(
                Tensor::matrix(n, 1, vnorm.clone())?,
                t.p0.clone(),
                Some(t.v0.clone()),
                edges,
                Some(attrs),
            )?,
            vnorm: Tensor::matrix(n, 1, vnorm)?,
            pv: Tensor::matrix(n, 2 * dim, pv)?,
            target: t.target.clone(),
        })
    }
}

/// Core model plus the position/velocity input embedding and, for the
/// plain baseline, the output head that maps features back to
/// positions.
pub struct NbodyBundle {
    pub core: Model,
    pub embed: Option<Mlp>,
    pub head: Option<Mlp>,
}

impl NbodyBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init");
        let nf = config.hidden_dim;
        let coord = config.coord_dim;
        let (embed, head) = match config.kind {
            ModelKind::Gnn => (
                Some(linear_block(2 * coord, nf, &mut rng)?),
                Some(Mlp::new(vec![
                    LinearLayer {
                        weight: gaussian_matrix(nf, nf, 1.0 / (nf as f64).sqrt(), &mut rng),
                        bias: Tensor::zeros(vec![nf]),
                        activation: Activation::Swish,
                    },
                    LinearLayer {
                        weight: gaussian_matrix(nf, coord, 1.0 / (nf as f64).sqrt(), &mut rng),
                        bias: Tensor::zeros(vec![coord]),
                        activation: Activation::None,
                    },
                ])?),
            ),
            ModelKind::RadialField => (None, None),
            _ => (Some(linear_block(1, nf, &mut rng)?), None),
        };
        let core = Model::new(config, &mut rng)?;
        Ok(Self { core, embed, head })
    }
}

impl Bundle for NbodyBundle {
    type Sample = NbodySample;

    fn traced_loss(
        &self,
        tape: &mut Tape,
        sample: &NbodySample,
        _noise_rng: &mut ChaCha20Rng,
        binder: &mut Binder,
    ) -> Result<NodeId> {
        let ctx = self.core.graph_ctx(tape, &sample.geometry)?;
        let x = tape.leaf(&sample.geometry.x)?;
        let h = match (&self.embed, self.core.config.kind) {
            (Some(embed), ModelKind::Gnn) => {
                let pv = tape.leaf(&sample.pv)?;
                embed.forward(tape, pv, binder, "embed")?
            }
            (Some(embed), _) => {
                let vn = tape.leaf(&sample.vnorm)?;
                embed.forward(tape, vn, binder, "embed")?
            }
            (None, _) => tape.leaf(&Tensor::ones(vec![ctx.num_nodes, self.core.config.hidden_dim]))?,
        };
        let v = match self.core.config.kind {
            ModelKind::EgnnVelocity => Some(tape.leaf(sample.geometry.v.as_ref().expect("validated"))?),
            _ => None,
        };
        let out = self
            .core
            .forward_from(tape, TracedGraph { h, x, v }, &ctx, binder)?;
        let pred = match (&self.head, self.core.config.kind) {
            (Some(head), ModelKind::Gnn) => head.forward(tape, out.h, binder, "head")?,
            _ => out.x,
        };
        let target = tape.leaf(&sample.target)?;
        mse_traced(tape, pred, target)
    }

    fn eval_loss(&self, sample: &NbodySample) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut rng = substream(0, "unused");
        let loss = self.traced_loss(&mut tape, sample, &mut rng, &mut binder)?;
        Ok(tape.value(loss)[0])
    }

    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(embed) = &self.embed {
            embed.visit_params("embed", f);
        }
        self.core.visit_params(f);
        if let Some(head) = &self.head {
            head.visit_params("head", f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(embed) = &mut self.embed {
            embed.visit_params_mut("embed", f);
        }
        self.core.visit_params_mut(f);
        if let Some(head) = &mut self.head {
            head.visit_params_mut("head", f);
        }
    }
}

/// Least-squares time constant for the drift predictor
/// p̂ = p0 + v0·t̂ over a training set.
pub fn linear_baseline_fit(train: &[Trajectory]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in train {
        for (i, v) in t.v0.data().iter().enumerate() {
            num += v * (t.target.data()[i] - t.p0.data()[i]);
            den += v * v;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn linear_baseline_mse(t_hat: f64, set: &[Trajectory]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in set {
        for (i, target) in t.target.data().iter().enumerate() {
            let pred = t.p0.data()[i] + t.v0.data()[i] * t_hat;
            sum += (pred - target) * (pred - target);
            count += 1;
        }
    }
    sum / count as f64
}

pub fn load_nbody_split(dir: &Path, name: &str) -> Result<Vec<Trajectory>> {
    crate::nbody::read_dataset(&dir.join(format!("{name}.jsonl")))
}

pub fn mean_eval_loss<B: Bundle>(bundle: &B, samples: &[B::Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        sum += bundle.eval_loss(s)?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

pub fn run_nbody(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if cfg.task != TaskKind::Nbody {
        return Err(Error::config("run_nbody needs task = nbody"));
    }
    if cfg.model.attr_dim != 1 {
        return Err(Error::config("n-body models take a_ij = c_i·c_j (attr_dim = 1)"));
    }
    let dir = Path::new(&cfg.dataset);
    let mut train_raw = load_nbody_split(dir, "train")?;
    if let Some(limit) = cfg.train_limit {
        train_raw.truncate(limit);
    }
    let val_raw = load_nbody_split(dir, "val")?;
    let test_raw = load_nbody_split(dir, "test")?;
    if train_raw.is_empty() || test_raw.is_empty() {
        return Err(Error::config("n-body dataset has empty splits"));
    }

    let to_samples = |ts: &[Trajectory]| -> Result<Vec<NbodySample>> {
        ts.iter().map(NbodySample::from_trajectory).collect()
    };
    let train = to_samples(&train_raw)?;
    let val = to_samples(&val_raw)?;
    let test = to_samples(&test_raw)?;

    let mut bundle = NbodyBundle::new(cfg.model.clone(), cfg.seed)?;
    let started = Instant::now();
    let outcome = train_bundle(&mut bundle, &train, &val, &TrainSettings::from_config(cfg))?;
    let train_s = started.elapsed().as_secs_f64();

    let mse = mean_eval_loss(&bundle, &test)?;
    let t_hat = linear_baseline_fit(&train_raw);
    let linear_mse = linear_baseline_mse(t_hat, &test_raw);

    let timed = Instant::now();
    let batch = test.len().min(cfg.batch_size);
    for sample in &test[..batch] {
        bundle.eval_loss(sample)?;
    }
    let fwd_ms_per_batch = timed.elapsed().as_secs_f64() * 1e3;

    let mut test_metrics = BTreeMap::new();
    test_metrics.insert("mse".into(), mse);
    test_metrics.insert("linear_mse".into(), linear_mse);
    test_metrics.insert("linear_t".into(), t_hat);
    test_metrics.insert("best_epoch".into(), outcome.best_epoch as f64);

    Ok(RunArtifacts {
        report: MetricsReport {
            config_digest: cfg.digest(),
            init_scheme: nn::INIT_SCHEME.into(),
            per_epoch: outcome.per_epoch,
            test: test_metrics,
            timing: Timing {
                fwd_ms_per_batch,
                train_s,
            },
        },
        checkpoint: Checkpoint {
            config: cfg.model.clone(),
            blocks: bundle.param_records(),
            rng_seed: cfg.seed,
        },
    })
}

// ---------------------------------------------------------------------------
// Graph autoencoding
// ---------------------------------------------------------------------------

pub struct AeSample {
    pub graph: PlainGraph,
    /// Geometry placeholder: zero coordinates, full edges,
    /// a_ij = A_ij.
    pub geometry: GeometricGraph,
    /// Row-major M² adjacency targets and the off-diagonal mask.
    pub target: Vec<f64>,
    pub mask: Vec<f64>,
    /// Fixed noise used for deterministic evaluation.
    pub eval_noise: Tensor,
}

fn ae_sample(
    graph: PlainGraph,
    kind: EncoderKind,
    nf: usize,
    embed_dim: usize,
    sigma: f64,
    noise_rng: &mut ChaCha20Rng,
) -> Result<AeSample> {
    let m = graph.num_nodes();
    let edges = fully_connected_edges(m);
    let mut attrs = EdgeAttrs::new(1);
    for &(i, j) in &edges {
        attrs.insert((i, j), vec![if graph.has_edge(i, j) { 1.0 } else { 0.0 }]);
    }
    let geometry = GeometricGraph::new(
        Tensor::ones(vec![m, 1]),
        Tensor::zeros(vec![m, embed_dim]),
        None,
        edges,
        Some(attrs),
    )?;
    let mut target = graph.flat_f64();
    let mut mask = vec![1.0; m * m];
    for i in 0..m {
        target[i * m + i] = 0.0;
        mask[i * m + i] = 0.0;
    }
    let eval_noise = match kind {
        EncoderKind::NoiseGnn => gaussian_matrix(m, nf, sigma, noise_rng),
        _ => gaussian_matrix(m, embed_dim, sigma, noise_rng),
    };
    Ok(AeSample {
        graph,
        geometry,
        target,
        mask,
        eval_noise,
    })
}

/// Encoder, latent projection where needed, and the two decoder
/// scalars.
pub struct AutoencoderBundle {
    pub kind: EncoderKind,
    pub core: Model,
    pub proj: Option<Mlp>,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub noise_sigma: f64,
    pub embed_dim: usize,
    /// Resample the symmetry-breaking noise on every presentation
    /// (the generalization setting) or reuse each sample's fixed draw
    /// (the overfitting setting).
    pub resample_noise: bool,
}

impl AutoencoderBundle {
    pub fn new(
        kind: EncoderKind,
        num_layers: usize,
        hidden_dim: usize,
        embed_dim: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, "init");
        let core_kind = match kind {
            EncoderKind::Egnn => ModelKind::Egnn,
            EncoderKind::Gnn | EncoderKind::NoiseGnn => ModelKind::Gnn,
            EncoderKind::RadialField => ModelKind::RadialField,
        };
        let config = ModelConfig {
            kind: core_kind,
            num_layers,
            hidden_dim,
            coord_dim: embed_dim,
            attr_dim: 1,
            use_soft_edges: false,
            update_coords: matches!(kind, EncoderKind::Egnn | EncoderKind::RadialField),
            restrict_to_edges: false,
        };
        let proj = match kind {
            EncoderKind::Gnn | EncoderKind::NoiseGnn => {
                Some(linear_block(hidden_dim, embed_dim, &mut rng)?)
            }
            _ => None,
        };
        let core = Model::new(config, &mut rng)?;
        Ok(Self {
            kind,
            core,
            proj,
            dec_w: Tensor::scalar(1.0),
            dec_b: Tensor::scalar(0.0),
            noise_sigma,
            embed_dim,
            resample_noise: true,
        })
    }

    /// Trace the encoder on one sample, with the noise entering as
    /// coordinates (equivariant kinds) or as features (NoiseGnn).
    fn encode_traced(
        &self,
        tape: &mut Tape,
        sample: &AeSample,
        noise: &Tensor,
        binder: &mut Binder,
    ) -> Result<NodeId> {
        let m = sample.graph.num_nodes();
        let nf = self.core.config.hidden_dim;
        let ctx = self.core.graph_ctx(tape, &sample.geometry)?;
        let (h, x) = match self.kind {
            EncoderKind::Egnn | EncoderKind::RadialField => {
                (tape.leaf(&Tensor::ones(vec![m, nf]))?, tape.leaf(noise)?)
            }
            EncoderKind::Gnn => (
                tape.leaf(&Tensor::ones(vec![m, nf]))?,
                tape.leaf(&sample.geometry.x)?,
            ),
            EncoderKind::NoiseGnn => (tape.leaf(noise)?, tape.leaf(&sample.geometry.x)?),
        };
        let out = self
            .core
            .forward_from(tape, TracedGraph { h, x, v: None }, &ctx, binder)?;
        match &self.proj {
            Some(proj) => proj.forward(tape, out.h, binder, "proj"),
            None => Ok(out.x),
        }
    }

    /// Encode with the given noise and return the loss node plus the
    /// decoded probabilities node.
    fn traced_with_noise(
        &self,
        tape: &mut Tape,
        sample: &AeSample,
        noise: &Tensor,
        binder: &mut Binder,
    ) -> Result<(NodeId, NodeId)> {
        let z = self.encode_traced(tape, sample, noise, binder)?;
        let w = binder.bind(tape, "decoder.w".into(), &self.dec_w)?;
        let b = binder.bind(tape, "decoder.b".into(), &self.dec_b)?;
        let logits = decode_adjacency_logits_traced(tape, z, w, b)?;
        let loss = tape.bce_logits_masked(logits, &sample.target, &sample.mask)?;
        let a_hat = tape.sigmoid(logits);
        Ok((loss, a_hat))
    }

    fn fresh_noise(&self, m: usize, rng: &mut ChaCha20Rng) -> Tensor {
        match self.kind {
            EncoderKind::NoiseGnn => {
                gaussian_matrix(m, self.core.config.hidden_dim, self.noise_sigma, rng)
            }
            _ => gaussian_matrix(m, self.embed_dim, self.noise_sigma, rng),
        }
    }

    /// Latent node embedding under the sample's fixed evaluation
    /// noise.
    pub fn encode(&self, sample: &AeSample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let z = self.encode_traced(&mut tape, sample, &sample.eval_noise, &mut binder)?;
        Ok(tape.to_tensor(z))
    }

    /// Deterministic metrics for one sample: summed BCE and the
    /// thresholded confusion counts.
    pub fn eval_sample(&self, sample: &AeSample) -> Result<(f64, EdgeCounts)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (loss, a_hat) = self.traced_with_noise(&mut tape, sample, &sample.eval_noise, &mut binder)?;
        let m = sample.graph.num_nodes();
        let probs = Tensor::matrix(m, m, tape.value(a_hat).to_vec())?;
        let counts = edge_counts(&probs, &sample.graph, 0.5)?;
        Ok((tape.value(loss)[0], counts))
    }
}

impl Bundle for AutoencoderBundle {
    type Sample = AeSample;

    fn traced_loss(
        &self,
        tape: &mut Tape,
        sample: &AeSample,
        noise_rng: &mut ChaCha20Rng,
        binder: &mut Binder,
    ) -> Result<NodeId> {
        let loss = if self.resample_noise {
            let noise = self.fresh_noise(sample.graph.num_nodes(), noise_rng);
            self.traced_with_noise(tape, sample, &noise, binder)?.0
        } else {
            self.traced_with_noise(tape, sample, &sample.eval_noise, binder)?.0
        };
        Ok(loss)
    }

    fn eval_loss(&self, sample: &AeSample) -> Result<f64> {
        Ok(self.eval_sample(sample)?.0)
    }

    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.core.visit_params(f);
        if let Some(proj) = &self.proj {
            proj.visit_params("proj", f);
        }
        f("decoder.w".into(), &self.dec_w);
        f("decoder.b".into(), &self.dec_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.core.visit_params_mut(f);
        if let Some(proj) = &mut self.proj {
            proj.visit_params_mut("proj", f);
        }
        f("decoder.w".into(), &mut self.dec_w);
        f("decoder.b".into(), &mut self.dec_b);
    }
}

pub fn load_graph_split(dir: &Path, name: &str) -> Result<Vec<PlainGraph>> {
    crate::graphs::read_dataset(&dir.join(format!("{name}.jsonl")))
}

/// Dataset-level autoencoder metrics: mean summed BCE per graph plus
/// confusion counts pooled over every off-diagonal pair.
pub fn evaluate_autoencoder(
    bundle: &AutoencoderBundle,
    samples: &[AeSample],
) -> Result<(f64, EdgeCounts)> {
    let mut bce = 0.0;
    let mut counts = EdgeCounts::default();
    for s in samples {
        let (b, c) = bundle.eval_sample(s)?;
        bce += b;
        counts.merge(c);
    }
    Ok((bce / samples.len().max(1) as f64, counts))
}

/// Confusion counts of the predict-nothing baseline.
pub fn baseline_counts(graphs: &[&PlainGraph]) -> EdgeCounts {
    let mut counts = EdgeCounts::default();
    for g in graphs {
        let m = g.num_nodes();
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                counts.total += 1;
                if g.has_edge(i, j) {
                    counts.wrong += 1;
                    counts.fn_ += 1;
                }
            }
        }
    }
    counts
}

pub fn encoder_kind_for(cfg: &ExperimentConfig) -> Result<EncoderKind> {
    if let Some(kind) = cfg.encoder {
        return Ok(kind);
    }
    Ok(match cfg.model.kind {
        ModelKind::Egnn => EncoderKind::Egnn,
        ModelKind::Gnn => EncoderKind::Gnn,
        ModelKind::RadialField => EncoderKind::RadialField,
        other => {
            return Err(Error::Config(format!(
                "no autoencoder encoder for model kind {other:?}"
            )))
        }
    })
}

pub fn build_ae_samples(
    graphs: Vec<PlainGraph>,
    kind: EncoderKind,
    hidden_dim: usize,
    embed_dim: usize,
    sigma: f64,
    noise_rng: &mut ChaCha20Rng,
) -> Result<Vec<AeSample>> {
    graphs
        .into_iter()
        .filter(|g| g.num_nodes() >= 2)
        .map(|g| ae_sample(g, kind, hidden_dim, embed_dim, sigma, noise_rng))
        .collect()
}

pub fn run_autoencoder(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if cfg.task != TaskKind::Autoencoder {
        return Err(Error::config("run_autoencoder needs task = autoencoder"));
    }
    let kind = encoder_kind_for(cfg)?;
    if cfg.model.coord_dim != cfg.embed_dim {
        return Err(Error::config(
            "autoencoder expects model.coord_dim == embed_dim",
        ));
    }
    let dir = Path::new(&cfg.dataset);
    let mut train_graphs = load_graph_split(dir, "train")?;
    if let Some(limit) = cfg.train_limit {
        train_graphs.truncate(limit);
    }
    let val_graphs = load_graph_split(dir, "val")?;
    let test_graphs = load_graph_split(dir, "test")?;

    let mut eval_noise_rng = substream(cfg.seed, "noise-eval");
    let nf = cfg.model.hidden_dim;
    let train = build_ae_samples(train_graphs, kind, nf, cfg.embed_dim, cfg.noise_sigma, &mut eval_noise_rng)?;
    let val = build_ae_samples(val_graphs, kind, nf, cfg.embed_dim, cfg.noise_sigma, &mut eval_noise_rng)?;
    let test = build_ae_samples(test_graphs, kind, nf, cfg.embed_dim, cfg.noise_sigma, &mut eval_noise_rng)?;
    if train.is_empty() {
        return Err(Error::config("autoencoder training split is empty"));
    }

    let mut bundle = AutoencoderBundle::new(
        kind,
        cfg.model.num_layers,
        nf,
        cfg.embed_dim,
        cfg.noise_sigma,
        cfg.seed,
    )?;
    bundle.resample_noise = cfg.resample_noise;
    let started = Instant::now();
    let stop_f1 = cfg.stop_train_f1;
    let train_ref = &train;
    let outcome = super::train_bundle_with(
        &mut bundle,
        &train,
        &val,
        &TrainSettings::from_config(cfg),
        |bundle, epoch| match stop_f1 {
            Some(target) if (epoch + 1) % 10 == 0 => {
                let (_, counts) = evaluate_autoencoder(bundle, train_ref)?;
                Ok(counts.f1() >= target)
            }
            _ => Ok(false),
        },
    )?;
    let train_s = started.elapsed().as_secs_f64();

    let (train_bce, train_counts) = evaluate_autoencoder(&bundle, &train)?;
    let eval_set = if test.is_empty() { &train } else { &test };
    let (bce, counts) = evaluate_autoencoder(&bundle, eval_set)?;
    let baseline = baseline_counts(&eval_set.iter().map(|s| &s.graph).collect::<Vec<_>>());

    let timed = Instant::now();
    let batch = eval_set.len().min(cfg.batch_size);
    for s in &eval_set[..batch] {
        bundle.eval_loss(s)?;
    }
    let fwd_ms_per_batch = timed.elapsed().as_secs_f64() * 1e3;

    let mut test_metrics = BTreeMap::new();
    test_metrics.insert("bce".into(), bce);
    test_metrics.insert("pct_error".into(), counts.pct_error());
    test_metrics.insert("f1".into(), counts.f1());
    test_metrics.insert("baseline_pct_error".into(), baseline.pct_error());
    test_metrics.insert("baseline_f1".into(), baseline.f1());
    test_metrics.insert("train_bce".into(), train_bce);
    test_metrics.insert("train_pct_error".into(), train_counts.pct_error());
    test_metrics.insert("train_f1".into(), train_counts.f1());
    test_metrics.insert("best_epoch".into(), outcome.best_epoch as f64);

    Ok(RunArtifacts {
        report: MetricsReport {
            config_digest: cfg.digest(),
            init_scheme: nn::INIT_SCHEME.into(),
            per_epoch: outcome.per_epoch,
            test: test_metrics,
            timing: Timing {
                fwd_ms_per_batch,
                train_s,
            },
        },
        checkpoint: Checkpoint {
            config: bundle.core.config.clone(),
            blocks: bundle.param_records(),
            rng_seed: cfg.seed,
        },
    })
}

// ---------------------------------------------------------------------------
// Invariant regression
// ---------------------------------------------------------------------------

pub struct RegressionSample {
    pub geometry: GeometricGraph,
    pub target: f64,
}

/// The fixed smooth E(n)-invariant target:
/// y = Σ_{i<j} exp(−‖x_i − x_j‖²).
pub fn invariant_target(points: &Tensor) -> f64 {
    let (m, n) = points.dims2().expect("rank <= 2");
    let mut y = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let mut d2 = 0.0;
            for c in 0..n {
                let d = points.get(i, c) - points.get(j, c);
                d2 += d * d;
            }
            y += (-d2).exp();
        }
    }
    y
}

pub fn regression_sample(points: Tensor) -> Result<RegressionSample> {
    let m = points.dims2()?.0;
    let target = invariant_target(&points);
    Ok(RegressionSample {
        geometry: GeometricGraph::new(
            Tensor::ones(vec![m, 1]),
            points,
            None,
            fully_connected_edges(m),
            None,
        )?,
        target,
    })
}

pub fn synth_regression_data(
    count: usize,
    nodes: usize,
    coord_dim: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<RegressionSample>> {
    (0..count)
        .map(|_| regression_sample(gaussian_matrix(nodes, coord_dim, 1.0, rng)))
        .collect()
}

/// Invariant-mode stack (or the coordinate-embedding baseline) with a
/// pooled scalar readout.
pub struct RegressionBundle {
    pub core: Model,
    pub head: ReadoutHead,
    pub embed: Option<Mlp>,
}

impl RegressionBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init");
        if config.kind == ModelKind::Egnn && config.update_coords {
            return Err(Error::config(
                "invariant regression runs the equivariant stack with update_coords = false",
            ));
        }
        let embed = match config.kind {
            ModelKind::Gnn => Some(linear_block(config.coord_dim, config.hidden_dim, &mut rng)?),
            _ => None,
        };
        let head = nn::build_readout(config.hidden_dim, config.hidden_dim, &mut rng)?;
        let core = Model::new(config, &mut rng)?;
        Ok(Self { core, head, embed })
    }

    pub fn predict(&self, geometry: &GeometricGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pred = self.traced_prediction(&mut tape, geometry, &mut binder)?;
        Ok(tape.value(pred)[0])
    }

    fn traced_prediction(
        &self,
        tape: &mut Tape,
        geometry: &GeometricGraph,
        binder: &mut Binder,
    ) -> Result<NodeId> {
        let m = geometry.num_nodes();
        let nf = self.core.config.hidden_dim;
        let ctx = self.core.graph_ctx(tape, geometry)?;
        let x = tape.leaf(&geometry.x)?;
        let h = match &self.embed {
            Some(embed) => embed.forward(tape, x, binder, "embed")?,
            None => tape.leaf(&Tensor::ones(vec![m, nf]))?,
        };
        let out = self
            .core
            .forward_from(tape, TracedGraph { h, x, v: None }, &ctx, binder)?;
        self.head.forward(tape, out.h, binder, "head")
    }
}

impl Bundle for RegressionBundle {
    type Sample = RegressionSample;

    fn traced_loss(
        &self,
        tape: &mut Tape,
        sample: &RegressionSample,
        _noise_rng: &mut ChaCha20Rng,
        binder: &mut Binder,
    ) -> Result<NodeId> {
        let pred = self.traced_prediction(tape, &sample.geometry, binder)?;
        let target = tape.leaf(&Tensor::scalar(sample.target))?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    }

    fn eval_loss(&self, sample: &RegressionSample) -> Result<f64> {
        let pred = self.predict(&sample.geometry)?;
        Ok((pred - sample.target) * (pred - sample.target))
    }

    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(embed) = &self.embed {
            embed.visit_params("embed", f);
        }
        self.core.visit_params(f);
        self.head.visit_params("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(embed) = &mut self.embed {
            embed.visit_params_mut("embed", f);
        }
        self.core.visit_params_mut(f);
        self.head.visit_params_mut("head", f);
    }
}

pub fn regression_mae(bundle: &RegressionBundle, samples: &[RegressionSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        sum += (bundle.predict(&s.geometry)? - s.target).abs();
    }
    Ok(sum / samples.len().max(1) as f64)
}

fn transformed_geometry(s: &RegressionSample, t: &EuclideanTransform) -> Result<RegressionSample> {
    Ok(RegressionSample {
        geometry: t.apply_graph(&s.geometry),
        target: s.target,
    })
}

pub fn run_invariant_regression(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if cfg.task != TaskKind::InvariantRegression {
        return Err(Error::config(
            "run_invariant_regression needs task = invariant_regression",
        ));
    }
    let mut data_rng = substream(cfg.seed, "synth");
    let train = synth_regression_data(cfg.synth_train, cfg.synth_nodes, cfg.model.coord_dim, &mut data_rng)?;
    let test = synth_regression_data(cfg.synth_test, cfg.synth_nodes, cfg.model.coord_dim, &mut data_rng)?;

    let mut bundle = RegressionBundle::new(cfg.model.clone(), cfg.seed)?;
    let started = Instant::now();
    let outcome = train_bundle(&mut bundle, &train, &[], &TrainSettings::from_config(cfg))?;
    let train_s = started.elapsed().as_secs_f64();

    let mae = regression_mae(&bundle, &test)?;
    let mut rotation_rng = substream(cfg.seed, "rotations");
    let mut rotated = Vec::with_capacity(test.len());
    for s in &test {
        let reflect = rotation_rng.gen_bool(0.5);
        let t = random_transform(cfg.model.coord_dim, &mut rotation_rng, reflect)?;
        rotated.push(transformed_geometry(s, &t)?);
    }
    let mae_rotated = regression_mae(&bundle, &rotated)?;

    // worst prediction change under random transforms of a test input
    let mut deviation: f64 = 0.0;
    for s in test.iter().take(5) {
        let base = bundle.predict(&s.geometry)?;
        for k in 0..20 {
            let t = random_transform(cfg.model.coord_dim, &mut rotation_rng, k % 2 == 0)?;
            let moved = transformed_geometry(s, &t)?;
            deviation = deviation.max((bundle.predict(&moved.geometry)? - base).abs());
        }
    }

    let timed = Instant::now();
    let batch = test.len().min(cfg.batch_size);
    for s in &test[..batch] {
        bundle.eval_loss(s)?;
    }
    let fwd_ms_per_batch = timed.elapsed().as_secs_f64() * 1e3;

    let mut test_metrics = BTreeMap::new();
    test_metrics.insert("mae".into(), mae);
    test_metrics.insert("mae_rotated".into(), mae_rotated);
    test_metrics.insert("pred_deviation_max".into(), deviation);
    test_metrics.insert("best_epoch".into(), outcome.best_epoch as f64);

    Ok(RunArtifacts {
        report: MetricsReport {
            config_digest: cfg.digest(),
            init_scheme: nn::INIT_SCHEME.into(),
            per_epoch: outcome.per_epoch,
            test: test_metrics,
            timing: Timing {
                fwd_ms_per_batch,
                train_s,
            },
        },
        checkpoint: Checkpoint {
            config: cfg.model.clone(),
            blocks: bundle.param_records(),
            rng_seed: cfg.seed,
        },
    })
}

/// Dispatch a training run by task.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    match cfg.task {
        TaskKind::Nbody => run_nbody(cfg),
        TaskKind::Autoencoder => run_autoencoder(cfg),
        TaskKind::InvariantRegression => run_invariant_regression(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbody::{simulate, SimParams};

    fn tiny_nbody_cfg(dir: &Path, kind: ModelKind) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskKind::Nbody,
            model: ModelConfig {
                kind,
                num_layers: 2,
                hidden_dim: 8,
                coord_dim: 3,
                attr_dim: 1,
                use_soft_edges: false,
                update_coords: true,
                restrict_to_edges: false,
            },
            dataset: dir.display().to_string(),
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            lr_schedule: super::super::LrSchedule::Constant,
            seed: 11,
            early_stopping: false,
            noise_sigma: 1.0,
            embed_dim: 8,
            weight_decay: 0.0,
            encoder: None,
            train_limit: None,
            resample_noise: true,
            stop_train_f1: None,
            synth_nodes: 5,
            synth_train: 20,
            synth_test: 10,
        }
    }

    fn write_tiny_nbody(dir: &Path) {
        let params = SimParams {
            total_steps: 120,
            burn_in: 60,
            slice_len: 60,
            ..SimParams::default()
        };
        let gen = |offset: u64, count: usize| -> Vec<Trajectory> {
            (0..count).map(|i| simulate(offset + i as u64, &params).unwrap()).collect()
        };
        crate::nbody::write_dataset(&gen(0, 8), &dir.join("train.jsonl")).unwrap();
        crate::nbody::write_dataset(&gen(100, 4), &dir.join("val.jsonl")).unwrap();
        crate::nbody::write_dataset(&gen(200, 4), &dir.join("test.jsonl")).unwrap();
    }

    #[test]
    fn nbody_run_trains_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny_nbody(dir.path());
        let cfg = tiny_nbody_cfg(dir.path(), ModelKind::EgnnVelocity);
        let a = run_nbody(&cfg).unwrap();
        let b = run_nbody(&cfg).unwrap();
        assert_eq!(a.report.deterministic_json(), b.report.deterministic_json());
         assert!(a.report.test["mse"].is_finite());
    }

    #[test]
    fn forced_zero_updates_reduce_to_drift() {
        // φ_x ≡ 0 and φ_v ≡ 1 make the velocity stack a pure
        // L-step drift: x^L = p0 + L·v0.
        let dir = tempfile::tempdir().unwrap();
        write_tiny_nbody(dir.path());
        let cfg = tiny_nbody_cfg(dir.path(), ModelKind::EgnnVelocity);
        let mut bundle = NbodyBundle::new(cfg.model.clone(), 3).unwrap();
        bundle.visit_params_mut(&mut |name, t| {
            if name.contains("coord_fn") {
                t.data_mut().fill(0.0);
            }
            if name.contains("vel_fn") {
                t.data_mut().fill(0.0);
                if name.ends_with("layer1.bias") {
                    t.data_mut().fill(1.0);
                }
            }
        });
        let trajectories = load_nbody_split(dir.path(), "test").unwrap();
        let sample = NbodySample::from_trajectory(&trajectories[0]).unwrap();

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut rng = substream(0, "x");
        bundle.traced_loss(&mut tape, &sample, &mut rng, &mut binder).unwrap();
        // recompute prediction by hand: p0 + L·v0
        let t = &trajectories[0];
        let layers = bundle.core.config.num_layers as f64;
        let mut drift_mse = 0.0;
        for (i, target) in t.target.data().iter().enumerate() {
            let pred = t.p0.data()[i] + layers * t.v0.data()[i];
            drift_mse += (pred - target) * (pred - target);
        }
        drift_mse /= t.target.numel() as f64;
        let model_mse = bundle.eval_loss(&sample).unwrap();
        assert!((model_mse - drift_mse).abs() < 1e-10, "{model_mse} vs {drift_mse}");
    }

    #[test]
    fn linear_baseline_on_zero_velocity_predicts_p0() {
        let params = SimParams {
            total_steps: 60,
            burn_in: 30,
            slice_len: 30,
            ..SimParams::default()
        };
        let mut t = simulate(1, &params).unwrap();
        t.v0 = Tensor::zeros(vec![5, 3]);
        let t_hat = linear_baseline_fit(std::slice::from_ref(&t));
        assert_eq!(t_hat, 0.0);
        let mse = linear_baseline_mse(t_hat, std::slice::from_ref(&t));
        let direct = crate::train::mse_loss(&t.p0, &t.target).unwrap();
        assert!((mse - direct).abs() < 1e-15);
    }

    #[test]
    fn invariant_regression_smoke() {
        let cfg = ExperimentConfig {
            task: TaskKind::InvariantRegression,
            model: ModelConfig {
                kind: ModelKind::Egnn,
                num_layers: 2,
                hidden_dim: 8,
                coord_dim: 3,
                attr_dim: 0,
                use_soft_edges: true,
                update_coords: false,
                restrict_to_edges: false,
            },
            dataset: String::new(),
            epochs: 2,
            batch_size: 5,
            lr: 1e-3,
            lr_schedule: super::super::LrSchedule::Cosine,
            seed: 3,
            early_stopping: false,
            noise_sigma: 1.0,
            embed_dim: 8,
            weight_decay: 0.0,
            encoder: None,
            train_limit: None,
            resample_noise: true,
            stop_train_f1: None,
            synth_nodes: 4,
            synth_train: 12,
            synth_test: 6,
        };
        let artifacts = run_invariant_regression(&cfg).unwrap();
        // untrained-quality MAE is fine; invariance must hold already
        assert!(artifacts.report.test["pred_deviation_max"] <= 1e-9);
    }

    #[test]
    fn early_stopping_restores_the_best_validation_checkpoint() {
        let mut rng = substream(31, "synth");
        let train = synth_regression_data(12, 4, 3, &mut rng).unwrap();
        let val = synth_regression_data(6, 4, 3, &mut rng).unwrap();
        let cfg = ModelConfig {
            kind: ModelKind::Egnn,
            num_layers: 1,
            hidden_dim: 6,
            coord_dim: 3,
            attr_dim: 0,
            use_soft_edges: false,
            update_coords: false,
            restrict_to_edges: false,
        };
        let mut bundle = RegressionBundle::new(cfg, 3).unwrap();
        // an aggressive rate makes the validation curve non-monotone
        let settings = super::super::TrainSettings {
            epochs: 30,
            batch_size: 4,
            lr: 0.3,
            schedule: super::super::LrSchedule::Constant,
            weight_decay: 0.0,
            early_stopping: true,
            seed: 3,
        };
        let outcome = train_bundle(&mut bundle, &train, &val, &settings).unwrap();
        let best_val = outcome.per_epoch[outcome.best_epoch][1];
        let min_val = outcome
            .per_epoch
            .iter()
            .map(|e| e[1])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best_val, min_val);
        // restored parameters reproduce the best epoch's validation loss
        let mut restored = 0.0;
        for s in &val {
            restored += bundle.eval_loss(s).unwrap();
        }
        restored /= val.len() as f64;
        assert!((restored - best_val).abs() < 1e-12, "{restored} vs {best_val}");
    }

    #[test]
    fn zero_noise_gives_degenerate_constant_decoding() {
        // σ = 0 collapses every coordinate to the origin: embeddings
        // coincide and the decoded matrix is constant off-diagonal,
        // the expected-failure witness for symmetry breaking.
        let g = crate::graphs::cycle_graph(4).unwrap();
        let mut noise_rng = substream(9, "noise-eval");
        let samples = build_ae_samples(vec![g], EncoderKind::Egnn, 8, 4, 0.0, &mut noise_rng).unwrap();
        let bundle = AutoencoderBundle::new(EncoderKind::Egnn, 2, 8, 4, 0.0, 1).unwrap();
        let z = bundle.encode(&samples[0]).unwrap();
        for i in 1..4 {
            assert_eq!(z.row_slice(i), z.row_slice(0));
        }
        let (_, counts) = bundle.eval_sample(&samples[0]).unwrap();
        // constant predictions are all right or all wrong per class
        assert!(counts.f1() == 0.0 || counts.pct_error() == 4.0 / 12.0 * 100.0);
    }

    #[test]
    fn constant_target_is_learnable_by_bias() {
        let mut rng = substream(77, "synth");
        let mut train = synth_regression_data(30, 4, 3, &mut rng).unwrap();
        for s in &mut train {
            s.target = 2.5;
        }
        let cfg = ModelConfig {
            kind: ModelKind::Egnn,
            num_layers: 1,
            hidden_dim: 8,
            coord_dim: 3,
            attr_dim: 0,
            use_soft_edges: false,
            update_coords: false,
            restrict_to_edges: false,
        };
        let mut bundle = RegressionBundle::new(cfg, 4).unwrap();
        let settings = super::super::TrainSettings {
            epochs: 800,
            batch_size: 5,
            lr: 1e-2,
            schedule: super::super::LrSchedule::Cosine,
            weight_decay: 0.0,
            early_stopping: false,
            seed: 4,
        };
        train_bundle(&mut bundle, &train, &[], &settings).unwrap();
        let mae = regression_mae(&bundle, &train).unwrap();
        assert!(mae <= 1e-3, "constant-target MAE {mae}");
    }

    #[test]
    fn autoencoder_overfits_one_cycle_graph() {
        let dir = tempfile::tempdir().unwrap();
        let graphs = vec![crate::graphs::cycle_graph(4).unwrap()];
        crate::graphs::write_dataset(&graphs, &dir.path().join("train.jsonl")).unwrap();
        crate::graphs::write_dataset(&graphs, &dir.path().join("val.jsonl")).unwrap();
        crate::graphs::write_dataset(&graphs, &dir.path().join("test.jsonl")).unwrap();
        let cfg = ExperimentConfig {
            task: TaskKind::Autoencoder,
            model: ModelConfig {
                kind: ModelKind::Egnn,
                num_layers: 2,
                hidden_dim: 16,
                coord_dim: 4,
                attr_dim: 1,
                use_soft_edges: false,
                update_coords: true,
                restrict_to_edges: false,
            },
            dataset: dir.path().display().to_string(),
            epochs: 2000,
            batch_size: 1,
            lr: 1e-3,
            lr_schedule: super::super::LrSchedule::Constant,
            seed: 4,
            early_stopping: false,
            noise_sigma: 0.3,
            embed_dim: 4,
            weight_decay: 0.0,
            encoder: None,
            train_limit: None,
            resample_noise: false,
            stop_train_f1: Some(0.999),
            synth_nodes: 5,
            synth_train: 10,
            synth_test: 5,
        };
        let artifacts = run_autoencoder(&cfg).unwrap();
        assert!(
            artifacts.report.test["train_f1"] >= 0.999,
            "train F1 {}",
            artifacts.report.test["train_f1"]
        );
        assert_eq!(artifacts.report.test["train_pct_error"], 0.0);
    }
}
