//! The `egnn` command-line entry point.
//!
//! One verb per workflow step: dataset generation (`gen-nbody`,
//! `gen-graphs`), training (`train`), evaluation of a finished run
//! (`eval`), the equivariance audit (`audit-equivariance`), and
//! distance-geometry reconstruction (`reconstruct-distances`). Every
//! run writes a copy of its config plus machine-readable outputs into
//! the chosen directory; existing non-empty directories are never
//! overwritten without `--force`.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2
//! runtime/numerical failure.

use crate::equivariance::{check_equivariance, random_transform, reconstruct_from_distances};
use crate::error::{Error, Result};
use crate::graphs::PlainGraph;
use crate::model::{Checkpoint, GeometricGraph, Model, ModelKind};
use crate::nbody::{simulate, SimParams, Trajectory};
use crate::rng::{subseed, substream};
use crate::tensor::Tensor;
use crate::train::experiments::{
    build_ae_samples, encoder_kind_for, evaluate_autoencoder, linear_baseline_fit,
    linear_baseline_mse, load_graph_split, load_nbody_split, mean_eval_loss, regression_mae,
    run_experiment, synth_regression_data, AutoencoderBundle, NbodyBundle, NbodySample,
    RegressionBundle,
};
use crate::train::{Bundle, ExperimentConfig, TaskKind};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "egnn", version, about = "Equivariant graph networks: data, training, auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent)
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate charged-particle trajectory datasets
    GenNbody(RunArgs),
    /// Generate random-graph datasets
    GenGraphs(RunArgs),
    /// Train a model per an experiment config
    Train(RunArgs),
    /// Re-evaluate a finished training run
    Eval(RunArgs),
    /// Check a model checkpoint for E(n) equivariance
    AuditEquivariance {
        /// Checkpoint JSON produced by `train`
        #[arg(long)]
        model: PathBuf,
        /// Number of random transforms
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Space dimension (defaults to the checkpoint's)
        #[arg(long)]
        dims: Option<usize>,
        /// Per-channel deviation tolerance
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Optional report destination (stdout otherwise)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recover coordinates from a squared-distance matrix
    ReconstructDistances(RunArgs),
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints --help/--version to stdout with success
            if e.use_stderr() {
                eprint!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenNbody(args) => gen_nbody(&args),
        Command::GenGraphs(args) => gen_graphs(&args),
        Command::Train(args) => train(&args),
        Command::Eval(args) => eval(&args),
        Command::AuditEquivariance {
            model,
            trials,
            dims,
            tol,
            out,
            seed,
        } => audit_equivariance(&model, trials, dims, tol, out.as_deref(), seed),
        Command::ReconstructDistances(args) => reconstruct_distances(&args),
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenNbodyConfig {
    #[serde(default = "default_train_count")]
    train: usize,
    #[serde(default = "default_eval_count")]
    val: usize,
    #[serde(default = "default_eval_count")]
    test: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    sim: SimParams,
}

fn default_train_count() -> usize {
    3000
}

fn default_eval_count() -> usize {
    2000
}

fn gen_nbody(args: &RunArgs) -> Result<()> {
    let mut cfg: GenNbodyConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    prepare_out_dir(&args.out, args.force)?;

    let mut resamples = 0usize;
    let mut offset = 0u64;
    let mut generate = |count: usize| -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let t = simulate(subseed(cfg.seed, "nbody-dataset", offset + i as u64), &cfg.sim)?;
            resamples += t.meta.resamples;
            out.push(t);
        }
        offset += count as u64;
        Ok(out)
    };
    let train = generate(cfg.train)?;
    let val = generate(cfg.val)?;
    let test = generate(cfg.test)?;
    crate::nbody::write_dataset(&train, &args.out.join("train.jsonl"))?;
    crate::nbody::write_dataset(&val, &args.out.join("val.jsonl"))?;
    crate::nbody::write_dataset(&test, &args.out.join("test.jsonl"))?;

    write_json(&args.out.join("config.json"), &cfg)?;
    write_json(
        &args.out.join("meta.json"),
        &serde_json::json!({
            "train": cfg.train,
            "val": cfg.val,
            "test": cfg.test,
            "seed": cfg.seed,
            "total_resamples": resamples,
        }),
    )?;
    println!(
        "wrote {} train / {} val / {} test trajectories to {}",
        cfg.train,
        cfg.val,
        cfg.test,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum GraphGenerator {
    ErdosRenyi,
    TwoBlock,
    Cycle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenGraphsConfig {
    generator: GraphGenerator,
    #[serde(default = "default_m_range")]
    m_range: (usize, usize),
    #[serde(default = "default_p_e")]
    p_e: f64,
    #[serde(default = "default_p_in")]
    p_in: f64,
    #[serde(default = "default_p_out")]
    p_out: f64,
    #[serde(default = "default_graph_train")]
    train: usize,
    #[serde(default = "default_graph_eval")]
    val: usize,
    #[serde(default = "default_graph_eval")]
    test: usize,
    #[serde(default)]
    seed: u64,
}

fn default_m_range() -> (usize, usize) {
    (7, 16)
}

fn default_p_e() -> f64 {
    0.25
}

fn default_p_in() -> f64 {
    0.7
}

fn default_p_out() -> f64 {
    0.05
}

fn default_graph_train() -> usize {
    5000
}

fn default_graph_eval() -> usize {
    500
}

fn gen_graphs(args: &RunArgs) -> Result<()> {
    let mut cfg: GenGraphsConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    prepare_out_dir(&args.out, args.force)?;

    let mut split_index = 0u64;
    let mut generate = |count: usize| -> Result<Vec<PlainGraph>> {
        let seed = subseed(cfg.seed, "graph-dataset", split_index);
        split_index += 1;
        match cfg.generator {
            GraphGenerator::ErdosRenyi => crate::graphs::erdos_renyi(cfg.m_range, cfg.p_e, count, seed),
            GraphGenerator::TwoBlock => {
                let mut rng = substream(seed, "two-block-sizes");
                (0..count)
                    .map(|i| {
                        let m = rng.gen_range(cfg.m_range.0..=cfg.m_range.1);
                        crate::graphs::two_block(m, cfg.p_in, cfg.p_out, subseed(seed, "two-block", i as u64))
                    })
                    .collect()
            }
            GraphGenerator::Cycle => {
                let mut rng = substream(seed, "cycle-sizes");
                (0..count)
                    .map(|_| crate::graphs::cycle_graph(rng.gen_range(cfg.m_range.0..=cfg.m_range.1)))
                    .collect()
            }
        }
    };
    let train = generate(cfg.train)?;
    let val = generate(cfg.val)?;
    let test = generate(cfg.test)?;
    crate::graphs::write_dataset(&train, &args.out.join("train.jsonl"))?;
    crate::graphs::write_dataset(&val, &args.out.join("val.jsonl"))?;
    crate::graphs::write_dataset(&test, &args.out.join("test.jsonl"))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    println!(
        "wrote {} train / {} val / {} test graphs to {}",
        train.len(),
        val.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    prepare_out_dir(&args.out, args.force)?;
    let artifacts = run_experiment(&cfg)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    write_json(&args.out.join("metrics.json"), &artifacts.report)?;
    write_json(&args.out.join("checkpoint.json"), &artifacts.checkpoint)?;
    println!("test metrics: {:?}", artifacts.report.test);
    println!("run artifacts in {}", args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalConfig {
    /// Directory produced by `train` (config.json + checkpoint.json).
    run: PathBuf,
    /// Optional dataset override.
    #[serde(default)]
    dataset: Option<String>,
}

fn eval(args: &RunArgs) -> Result<()> {
    let eval_cfg: EvalConfig = read_json(&args.config)?;
    let mut cfg: ExperimentConfig = read_json(&eval_cfg.run.join("config.json"))?;
    if let Some(dataset) = eval_cfg.dataset {
        cfg.dataset = dataset;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    prepare_out_dir(&args.out, args.force)?;
    let checkpoint: Checkpoint = read_json(&eval_cfg.run.join("checkpoint.json"))?;

    let mut test_metrics: BTreeMap<String, f64> = BTreeMap::new();
    match cfg.task {
        TaskKind::Nbody => {
            let dir = Path::new(&cfg.dataset);
            let test_raw = load_nbody_split(dir, "test")?;
            let train_raw = load_nbody_split(dir, "train")?;
            let test: Vec<NbodySample> = test_raw
                .iter()
                .map(NbodySample::from_trajectory)
                .collect::<Result<_>>()?;
            let mut bundle = NbodyBundle::new(cfg.model.clone(), cfg.seed)?;
            bundle.load_param_records(&checkpoint.blocks)?;
            test_metrics.insert("mse".into(), mean_eval_loss(&bundle, &test)?);
            let t_hat = linear_baseline_fit(&train_raw);
            test_metrics.insert("linear_mse".into(), linear_baseline_mse(t_hat, &test_raw));
        }
        TaskKind::Autoencoder => {
            let kind = encoder_kind_for(&cfg)?;
            let dir = Path::new(&cfg.dataset);
            let graphs = load_graph_split(dir, "test")?;
            let mut noise_rng = substream(cfg.seed, "noise-eval-cli");
            let samples = build_ae_samples(
                graphs,
                kind,
                cfg.model.hidden_dim,
                cfg.embed_dim,
                cfg.noise_sigma,
                &mut noise_rng,
            )?;
            let mut bundle = AutoencoderBundle::new(
                kind,
                cfg.model.num_layers,
                cfg.model.hidden_dim,
                cfg.embed_dim,
                cfg.noise_sigma,
                cfg.seed,
            )?;
            bundle.load_param_records(&checkpoint.blocks)?;
            let (bce, counts) = evaluate_autoencoder(&bundle, &samples)?;
            test_metrics.insert("bce".into(), bce);
            test_metrics.insert("pct_error".into(), counts.pct_error());
            test_metrics.insert("f1".into(), counts.f1());
        }
        TaskKind::InvariantRegression => {
            let mut data_rng = substream(cfg.seed, "synth");
            let _train = synth_regression_data(
                cfg.synth_train,
                cfg.synth_nodes,
                cfg.model.coord_dim,
                &mut data_rng,
            )?;
            let test = synth_regression_data(
                cfg.synth_test,
                cfg.synth_nodes,
                cfg.model.coord_dim,
                &mut data_rng,
            )?;
            let mut bundle = RegressionBundle::new(cfg.model.clone(), cfg.seed)?;
            bundle.load_param_records(&checkpoint.blocks)?;
            test_metrics.insert("mae".into(), regression_mae(&bundle, &test)?);
        }
    }
    write_json(
        &args.out.join("metrics.json"),
        &serde_json::json!({ "config_digest": cfg.digest(), "test": test_metrics }),
    )?;
    println!("eval metrics: {test_metrics:?}");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrialDeviation {
    pub dx: f64,
    pub dv: Option<f64>,
    pub dh: f64,
    pub reflect: bool,
}

#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub trials: usize,
    pub dims: usize,
    pub tol: f64,
    pub max_dx: f64,
    pub max_dv: f64,
    pub max_dh: f64,
    pub pass: bool,
    pub per_trial: Vec<TrialDeviation>,
}

/// Random compatible graph for auditing a checkpointed model.
fn audit_graph(
    model: &Model,
    dims: usize,
    nodes: usize,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<GeometricGraph> {
    let cfg = &model.config;
    let gaussian = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha20Rng| {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("consistent")
    };
    let h = gaussian(nodes, cfg.hidden_dim, rng);
    let x = gaussian(nodes, dims, rng);
    let v = (cfg.kind == ModelKind::EgnnVelocity).then(|| gaussian(nodes, dims, rng));
    let edges = crate::model::fully_connected_edges(nodes);
    let attrs = (cfg.attr_dim > 0).then(|| {
        let mut attrs = crate::model::EdgeAttrs::new(cfg.attr_dim);
        for &(i, j) in &edges {
            attrs.insert(
                (i, j),
                (0..cfg.attr_dim).map(|_| rng.sample(StandardNormal)).collect(),
            );
        }
        attrs
    });
    GeometricGraph::new(h, x, v, edges, attrs)
}

pub fn audit_model(model: &Model, trials: usize, dims: usize, tol: f64, seed: u64) -> Result<AuditReport> {
    let mut rng = substream(seed, "audit");
    let mut per_trial = Vec::with_capacity(trials);
    let (mut max_dx, mut max_dv, mut max_dh) = (0.0f64, 0.0f64, 0.0f64);
    let mut config = model.config.clone();
    config.coord_dim = dims;
    let model_at_dims = Model {
        config,
        layers: model.layers.clone(),
    };
    for trial in 0..trials {
        let graph = audit_graph(&model_at_dims, dims, 5, &mut rng)?;
        let reflect = trial % 2 == 1;
        let transform = random_transform(dims, &mut rng, reflect)?;
        let report = check_equivariance(
            &|g: &GeometricGraph| model_at_dims.forward(g),
            &graph,
            &transform,
            tol,
        )?;
        max_dx = max_dx.max(report.dx);
        max_dv = max_dv.max(report.dv.unwrap_or(0.0));
        max_dh = max_dh.max(report.dh);
        per_trial.push(TrialDeviation {
            dx: report.dx,
            dv: report.dv,
            dh: report.dh,
            reflect,
        });
    }
    let pass = max_dx <= tol && max_dv <= tol && max_dh <= tol;
    Ok(AuditReport {
        trials,
        dims,
        tol,
        max_dx,
        max_dv,
        max_dh,
        pass,
        per_trial,
    })
}

fn audit_equivariance(
    model_path: &Path,
    trials: usize,
    dims: Option<usize>,
    tol: f64,
    out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let checkpoint: Checkpoint = read_json(model_path)?;
    let model = Model::from_checkpoint(&checkpoint)?;
    let dims = dims.unwrap_or(model.config.coord_dim);
    let report = audit_model(&model, trials, dims, tol, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, &json)?;
        }
        None => println!("{json}"),
    }
    eprintln!(
        "audit: {} trials at dims {}, max deviations dx={:.3e} dv={:.3e} dh={:.3e}, tol {:.1e}: {}",
        report.trials,
        report.dims,
        report.max_dx,
        report.max_dv,
        report.max_dh,
        report.tol,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "equivariance audit failed: max deviation {:.3e} above tol {:.1e}",
            report.max_dx.max(report.max_dv).max(report.max_dh),
            report.tol
        )))
    }
}

#[derive(Debug, Deserialize)]
struct ReconstructConfig {
    squared_distances: Vec<Vec<f64>>,
}

fn reconstruct_distances(args: &RunArgs) -> Result<()> {
    let cfg: ReconstructConfig = read_json(&args.config)?;
    prepare_out_dir(&args.out, args.force)?;
    let m = cfg.squared_distances.len();
    let mut flat = Vec::with_capacity(m * m);
    for row in &cfg.squared_distances {
        if row.len() != m {
            return Err(Error::config("squared_distances must be square"));
        }
        flat.extend_from_slice(row);
    }
    let d = Tensor::matrix(m, m, flat)?;
    let coords = reconstruct_from_distances(&d)?;
    let (rows, cols) = coords.dims2()?;
    let rows_out: Vec<Vec<f64>> = (0..rows).map(|i| coords.row_slice(i).to_vec()).collect();
    write_json(
        &args.out.join("coordinates.json"),
        &serde_json::json!({ "dimension": cols, "coordinates": rows_out }),
    )?;
    println!(
        "embedded {m} points into dimension {cols}; coordinates in {}",
        args.out.join("coordinates.json").display()
    );
    Ok(())
}
