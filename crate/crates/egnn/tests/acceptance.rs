//! Acceptance suite: every theorem-level and ordering-level guarantee
//! the crate makes, each with its tolerance pinned and a printed
//! PASS/FAIL line (visible under `--nocapture`).
//!
//! Run with:
//! `cargo test -p egnn --test acceptance -- --nocapture`

use egnn::equivariance::{
    check_equivariance, procrustes_residual, random_transform, reconstruct_from_distances,
};
use egnn::graphs::cycle_graph;
use egnn::model::{GeometricGraph, Model, ModelConfig, ModelKind};
use egnn::nbody::{simulate, write_dataset, SimParams};
use egnn::nn::Binder;
use egnn::rng::substream;
use egnn::tensor::{Tape, Tensor};
use egnn::train::experiments::{
    build_ae_samples, evaluate_autoencoder, run_autoencoder, run_invariant_regression, run_nbody,
    AutoencoderBundle,
};
use egnn::train::{
    train_bundle, EncoderKind, ExperimentConfig, LrSchedule, TaskKind, TrainSettings,
};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_graph(m: usize, nf: usize, n: usize, with_v: bool, rng: &mut ChaCha20Rng) -> GeometricGraph {
    let mat = |rows: usize, cols: usize, rng: &mut ChaCha20Rng| {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let h = mat(m, nf, rng);
    let x = mat(m, n, rng);
    let v = with_v.then(|| mat(m, n, rng));
    GeometricGraph::fully_connected(h, x, v).unwrap()
}

fn equivariance_sweep(kind: ModelKind, tol_shallow: f64, tol_deep: f64) -> (f64, f64, bool) {
    let mut worst_shallow = 0.0f64;
    let mut worst_deep = 0.0f64;
    let mut v_translation_ok = true;
    for dims in [2usize, 3, 5, 8] {
        for layers in [1usize, 4] {
            let config = ModelConfig {
                kind,
                num_layers: layers,
                hidden_dim: 16,
                coord_dim: dims,
                attr_dim: 0,
                use_soft_edges: false,
                update_coords: true,
                restrict_to_edges: false,
            };
            let mut init = substream(40 + dims as u64, "acceptance-init");
            let model = Model::new(config, &mut init).unwrap();
            let mut graph_rng = substream(50 + layers as u64, "acceptance-graphs");
            let graph = random_graph(5, 16, dims, kind == ModelKind::EgnnVelocity, &mut graph_rng);
            let mut transform_rng = substream(60, "acceptance-transforms");
            let tol = if layers == 1 { tol_shallow } else { tol_deep };
            // 100 random transforms per (dims, depth) cell
            for trial in 0..100 {
                let reflect = trial % 2 == 1;
                let t = random_transform(dims, &mut transform_rng, reflect).unwrap();
                let report =
                    check_equivariance(&|g| model.forward(g), &graph, &t, tol).unwrap();
                let worst = if layers == 1 {
                    &mut worst_shallow
                } else {
                    &mut worst_deep
                };
                *worst = worst.max(report.max_deviation());
                if kind == ModelKind::EgnnVelocity {
                    // translation must leave v untouched: repeat with a
                    // pure translation and compare v bit-for-bit
                    if trial == 0 {
                        let pure_translation = egnn::equivariance::EuclideanTransform {
                            q: egnn::equivariance::EuclideanTransform::identity(dims).q,
                            translation: t.translation.clone(),
                            det_sign: 1.0,
                        };
                        let plain = model.forward(&graph).unwrap();
                        let moved = model
                            .forward(&pure_translation.apply_graph(&graph))
                            .unwrap();
                        let dv: f64 = plain
                            .v
                            .as_ref()
                            .unwrap()
                            .data()
                            .iter()
                            .zip(moved.v.as_ref().unwrap().data())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        if dv > 1e-9 {
                            v_translation_ok = false;
                        }
                    }
                }
            }
        }
    }
    (worst_shallow, worst_deep, v_translation_ok)
}

#[test]
fn criterion_1_egcl_equivariance() {
    let start = Instant::now();
    let (worst_shallow, worst_deep, _) = equivariance_sweep(ModelKind::Egnn, 1e-9, 1e-8);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_shallow <= 1e-9 && worst_deep <= 1e-8 && elapsed < 30.0;
    verdict(
        "1 (EGCL equivariance)",
        pass,
        &format!(
            "max deviation L=1: {worst_shallow:.2e} (tol 1e-9), L=4: {worst_deep:.2e} (tol 1e-8), {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_2_velocity_equivariance_and_zero_velocity_equality() {
    let start = Instant::now();
    let (worst_shallow, worst_deep, v_translation_ok) =
        equivariance_sweep(ModelKind::EgnnVelocity, 1e-9, 1e-8);

    // v0 = 0: the velocity layer's first step equals the plain layer
    // exactly at f64.
    let config = ModelConfig {
        kind: ModelKind::EgnnVelocity,
        num_layers: 1,
        hidden_dim: 12,
        coord_dim: 3,
        attr_dim: 0,
        use_soft_edges: false,
        update_coords: true,
        restrict_to_edges: false,
    };
    let mut init = substream(70, "acceptance-init");
    let model = Model::new(config.clone(), &mut init).unwrap();
    let params = match &model.layers[0] {
        egnn::model::LayerParams::Egcl(p) => p.clone(),
        _ => unreachable!(),
    };
    let mut graph_rng = substream(71, "acceptance-graphs");
    let mut graph = random_graph(5, 12, 3, false, &mut graph_rng);
    graph.v = Some(Tensor::zeros(vec![5, 3]));
    let velocity_out = egnn::model::egcl_velocity_forward(&graph, &params, &config).unwrap();
    let mut plain_config = config;
    plain_config.kind = ModelKind::Egnn;
    let plain_out = egnn::model::egcl_forward(&graph, &params, &plain_config).unwrap();
    let bitwise = velocity_out.x.data() == plain_out.x.data()
        && velocity_out.h.data() == plain_out.h.data();

    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_shallow <= 1e-9 && worst_deep <= 1e-8 && v_translation_ok && bitwise;
    verdict(
        "2 (velocity equivariance + v0=0 equality)",
        pass,
        &format!(
            "max deviation L=1: {worst_shallow:.2e}, L=4: {worst_deep:.2e}, v translation-invariant: {v_translation_ok}, v0=0 bitwise: {bitwise}, {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_3_distance_uniqueness_round_trip() {
    let start = Instant::now();
    let mut rng = substream(80, "acceptance-points");
    let mut worst = 0.0f64;
    let mut cases = 0;
    'outer: for n in [2usize, 3, 5] {
        for m in 3usize..=10 {
            for _ in 0..3 {
                if cases >= 50 {
                    break 'outer;
                }
                cases += 1;
                let points = Tensor::matrix(
                    m,
                    n,
                    (0..m * n)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect(),
                )
                .unwrap();
                let mut d = vec![0.0; m * m];
                for i in 0..m {
                    for j in 0..m {
                        let mut sum = 0.0;
                        for c in 0..n {
                            let diff = points.get(i, c) - points.get(j, c);
                            sum += diff * diff;
                        }
                        d[i * m + j] = sum;
                    }
                }
                let rebuilt =
                    reconstruct_from_distances(&Tensor::matrix(m, m, d).unwrap()).unwrap();
                worst = worst.max(procrustes_residual(&rebuilt, &points).unwrap());
            }
        }
    }

    // a triangle-inequality violation must be rejected
    let impossible =
        Tensor::matrix(3, 3, vec![0.0, 1.0, 16.0, 1.0, 0.0, 1.0, 16.0, 1.0, 0.0]).unwrap();
    let rejected = matches!(
        reconstruct_from_distances(&impossible),
        Err(egnn::Error::NonRealizable(_))
    );

    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-7 && rejected && elapsed < 10.0 && cases == 50;
    verdict(
        "3 (distance uniqueness)",
        pass,
        &format!("{cases} round trips, worst residual {worst:.2e} (tol 1e-7), non-realizable rejected: {rejected}, {elapsed:.1}s"),
    );
}

/// Scalar probe of a whole model: sum of every output channel.
fn model_scalar_loss(model: &Model, graph: &GeometricGraph) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = model.forward_traced(&mut tape, graph, &mut binder).unwrap();
    let hsum = tape.sum_all(out.h);
    let xsum = tape.sum_all(out.x);
    let mut total = tape.add(hsum, xsum).unwrap();
    if let Some(v) = out.v {
        let vsum = tape.sum_all(v);
        total = tape.add(total, vsum).unwrap();
    }
    let value = tape.value(total)[0];
    tape.backward(total).unwrap();
    let mut model_mut = model.clone();
    binder.absorb(&tape, |f| model_mut.visit_params_mut(f));
    let mut grads = Vec::new();
    model_mut.visit_params(&mut |name, t| {
        grads.push((name, t.grad().map(|g| g.to_vec()).unwrap_or_default()));
    });
    (value, grads)
}

#[test]
fn criterion_4_gradient_correctness_all_model_kinds() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for kind in [
        ModelKind::Egnn,
        ModelKind::EgnnVelocity,
        ModelKind::Gnn,
        ModelKind::RadialField,
        ModelKind::SchnetInvariant,
    ] {
        for draw in 0..5u64 {
            let config = ModelConfig {
                kind,
                num_layers: 2,
                hidden_dim: 6,
                coord_dim: 3,
                attr_dim: 0,
                use_soft_edges: kind == ModelKind::Egnn,
                update_coords: true,
                restrict_to_edges: false,
            };
            let mut init = substream(90 + draw, "acceptance-init");
            let model = Model::new(config, &mut init).unwrap();
            let mut graph_rng = substream(95 + draw, "acceptance-graphs");
            let graph = random_graph(4, 6, 3, kind == ModelKind::EgnnVelocity, &mut graph_rng);

            let (_, analytic) = model_scalar_loss(&model, &graph);
            // central finite differences over every parameter entry
            for (name, grad) in &analytic {
                let mut param_data = Vec::new();
                model.visit_params(&mut |n, t| {
                    if &n == name {
                        param_data = t.data().to_vec();
                    }
                });
                for idx in 0..param_data.len() {
                    let probe = |delta: f64| -> f64 {
                        let mut perturbed = model.clone();
                        perturbed.visit_params_mut(&mut |n, t| {
                            if &n == name {
                                t.data_mut()[idx] += delta;
                            }
                        });
                        model_scalar_loss(&perturbed, &graph).0
                    };
                    let step = 1e-5;
                    let numeric = (probe(step) - probe(-step)) / (2.0 * step);
                    let a = grad[idx];
                    let denom = a.abs().max(numeric.abs()).max(1e-8);
                    if (a - numeric).abs() / denom > 1e-4 && (a - numeric).abs() > 1e-8 {
                        failures.push(format!(
                            "{kind:?} draw {draw} {name}[{idx}]: analytic {a:.6e} vs numeric {numeric:.6e}"
                        ));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 60.0;
    verdict(
        "4 (gradient correctness)",
        pass,
        &format!(
            "5 kinds x 5 draws, {} mismatches, {elapsed:.1}s{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!("; first: {f}"))
                .unwrap_or_default()
        ),
    );
}

fn embedding_spread(z: &Tensor) -> f64 {
    let (m, n) = z.dims2().unwrap();
    let mut spread = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mut d2 = 0.0;
            for c in 0..n {
                let d = z.get(i, c) - z.get(j, c);
                d2 += d * d;
            }
            spread = spread.max(d2.sqrt());
        }
    }
    spread
}

#[test]
fn criterion_5_symmetry_problem_and_noise_escape() {
    let start = Instant::now();
    let graph = cycle_graph(4).unwrap();

    // plain encoder on a featureless cycle: identical embeddings
    let mut noise_rng = substream(100, "noise-eval");
    let gnn_samples =
        build_ae_samples(vec![graph.clone()], EncoderKind::Gnn, 32, 8, 0.3, &mut noise_rng)
            .unwrap();
    let gnn = AutoencoderBundle::new(EncoderKind::Gnn, 4, 32, 8, 0.3, 1).unwrap();
    let gnn_spread = embedding_spread(&gnn.encode(&gnn_samples[0]).unwrap());

    // equivariant encoder with noise coordinates: distinct embeddings
    let mut noise_rng = substream(100, "noise-eval");
    let samples =
        build_ae_samples(vec![graph], EncoderKind::Egnn, 32, 8, 0.3, &mut noise_rng).unwrap();
    let mut egnn = AutoencoderBundle::new(EncoderKind::Egnn, 4, 32, 8, 0.3, 1).unwrap();
    egnn.resample_noise = false;
    let egnn_spread = embedding_spread(&egnn.encode(&samples[0]).unwrap());

    // overfit the single graph for at most 2000 steps (batch 1 on one
    // graph: one optimizer step per epoch)
    let mut steps_used = 0;
    let mut pct_error = f64::INFINITY;
    for _ in 0..40 {
        let chunk = TrainSettings {
            epochs: 50,
            batch_size: 1,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            early_stopping: false,
            seed: 1,
        };
        train_bundle(&mut egnn, &samples, &[], &chunk).unwrap();
        steps_used += 50;
        let (_, counts) = evaluate_autoencoder(&egnn, &samples).unwrap();
        pct_error = counts.pct_error();
        if pct_error == 0.0 {
            break;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = gnn_spread <= 1e-10 && egnn_spread > 1e-6 && pct_error == 0.0 && steps_used <= 2000;
    verdict(
        "5 (symmetry problem)",
        pass,
        &format!(
            "plain-encoder spread {gnn_spread:.2e} (tol 1e-10), noise-coordinate spread {egnn_spread:.2e}, %error {pct_error} after {steps_used} steps, {elapsed:.1}s"
        ),
    );
}

fn overfit_config(dir: &std::path::Path, kind: ModelKind, encoder: Option<EncoderKind>, lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::Autoencoder,
        model: ModelConfig {
            kind,
            num_layers: 4,
            hidden_dim: 32,
            coord_dim: 16,
            attr_dim: 1,
            use_soft_edges: false,
            update_coords: kind != ModelKind::Gnn,
            restrict_to_edges: false,
        },
        dataset: dir.display().to_string(),
        epochs: 600,
        batch_size: 1,
        lr,
        lr_schedule: LrSchedule::Constant,
        seed: 1,
        early_stopping: false,
        noise_sigma: 0.3,
        embed_dim: 16,
        weight_decay: 0.0,
        encoder,
        train_limit: None,
        resample_noise: false,
        stop_train_f1: Some(0.995),
        synth_nodes: 5,
        synth_train: 0,
        synth_test: 0,
    }
}

#[test]
fn criterion_6_overfitting_study() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let graphs = egnn::graphs::erdos_renyi((7, 16), 0.25, 100, 42).unwrap();
    egnn::graphs::write_dataset(&graphs, &dir.path().join("train.jsonl")).unwrap();
    egnn::graphs::write_dataset(&[], &dir.path().join("val.jsonl")).unwrap();
    egnn::graphs::write_dataset(&[], &dir.path().join("test.jsonl")).unwrap();

    let egnn_run = run_autoencoder(&overfit_config(dir.path(), ModelKind::Egnn, None, 1e-3)).unwrap();
    let egnn_f1 = egnn_run.report.test["train_f1"];

    // the plain encoder gets its own best-performing learning rate
    let gnn_run = run_autoencoder(&overfit_config(dir.path(), ModelKind::Gnn, None, 3e-4)).unwrap();
    let gnn_f1 = gnn_run.report.test["train_f1"];

    let elapsed = start.elapsed().as_secs_f64();
    let pass = egnn_f1 >= 0.99 && gnn_f1 <= egnn_f1 - 0.05 && elapsed < 20.0 * 60.0;
    verdict(
        "6 (overfitting study)",
        pass,
        &format!(
            "equivariant train F1 {egnn_f1:.4} (needs >= 0.99), plain train F1 {gnn_f1:.4} (needs gap >= 0.05), {elapsed:.0}s"
        ),
    );
}

fn nbody_config(dir: &std::path::Path, kind: ModelKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::Nbody,
        model: ModelConfig {
            kind,
            num_layers: 4,
            hidden_dim: 32,
            coord_dim: 3,
            attr_dim: 1,
            use_soft_edges: false,
            update_coords: true,
            restrict_to_edges: false,
        },
        dataset: dir.display().to_string(),
        epochs: 200,
        batch_size: 100,
        lr: 1e-3,
        lr_schedule: LrSchedule::Constant,
        seed,
        early_stopping: true,
        noise_sigma: 0.3,
        embed_dim: 8,
        weight_decay: 0.0,
        encoder: None,
        train_limit: Some(500),
        resample_noise: true,
        stop_train_f1: None,
        synth_nodes: 5,
        synth_train: 0,
        synth_test: 0,
    }
}

#[test]
fn criterion_7_nbody_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let params = SimParams::default();
    let gen = |offset: u64, count: usize| -> Vec<_> {
        (0..count)
            .map(|i| simulate(offset + i as u64, &params).unwrap())
            .collect()
    };
    write_dataset(&gen(0, 500), &dir.path().join("train.jsonl")).unwrap();
    write_dataset(&gen(10_000, 100), &dir.path().join("val.jsonl")).unwrap();
    write_dataset(&gen(20_000, 200), &dir.path().join("test.jsonl")).unwrap();

    let mut wins = 0;
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let egnn_run = run_nbody(&nbody_config(dir.path(), ModelKind::EgnnVelocity, seed)).unwrap();
        let gnn_run = run_nbody(&nbody_config(dir.path(), ModelKind::Gnn, seed)).unwrap();
        let egnn_mse = egnn_run.report.test["mse"];
        let gnn_mse = gnn_run.report.test["mse"];
        let linear_mse = egnn_run.report.test["linear_mse"];
        // 10% relative margin on both orderings
        let win = egnn_mse < 0.9 * gnn_mse && egnn_mse < 0.9 * linear_mse;
        if win {
            wins += 1;
        }
        details.push(format!(
            "seed {seed}: egnn {egnn_mse:.5} vs gnn {gnn_mse:.5} vs linear {linear_mse:.5} -> {}",
            if win { "win" } else { "loss" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = wins >= 2 && elapsed < 45.0 * 60.0;
    verdict(
        "7 (n-body ordering)",
        pass,
        &format!("{wins}/3 seeds with >=10% margins; {}; {elapsed:.0}s", details.join("; ")),
    );
}

fn regression_config(kind: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::InvariantRegression,
        model: ModelConfig {
            kind,
            num_layers: 4,
            hidden_dim: 32,
            coord_dim: 3,
            attr_dim: 0,
            use_soft_edges: kind == ModelKind::Egnn,
            update_coords: false,
            restrict_to_edges: false,
        },
        dataset: String::new(),
        epochs: 100,
        batch_size: 10,
        lr: 1e-3,
        lr_schedule: LrSchedule::Cosine,
        seed: 5,
        early_stopping: false,
        noise_sigma: 0.3,
        embed_dim: 8,
        weight_decay: 0.0,
        encoder: None,
        train_limit: None,
        resample_noise: true,
        stop_train_f1: None,
        synth_nodes: 5,
        synth_train: 200,
        synth_test: 100,
    }
}

#[test]
fn criterion_8_invariant_regression() {
    let start = Instant::now();
    let egnn_run = run_invariant_regression(&regression_config(ModelKind::Egnn)).unwrap();
    let gnn_run = run_invariant_regression(&regression_config(ModelKind::Gnn)).unwrap();

    let deviation = egnn_run.report.test["pred_deviation_max"];
    let gnn_mae = gnn_run.report.test["mae"];
    let gnn_mae_rotated = gnn_run.report.test["mae_rotated"];
    let egnn_mae_rotated = egnn_run.report.test["mae_rotated"];

    let elapsed = start.elapsed().as_secs_f64();
    let pass = deviation <= 1e-9
        && gnn_mae_rotated >= 2.0 * gnn_mae
        && egnn_mae_rotated < gnn_mae_rotated;
    verdict(
        "8 (invariant regression)",
        pass,
        &format!(
            "prediction drift {deviation:.2e} (tol 1e-9), plain baseline MAE {gnn_mae:.4} -> {gnn_mae_rotated:.4} rotated (needs >= 2x), invariant rotated MAE {egnn_mae_rotated:.4}, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    // synthetic regression: no files, full train loop
    let cfg = {
        let mut cfg = regression_config(ModelKind::Egnn);
        cfg.epochs = 4;
        cfg.synth_train = 20;
        cfg.synth_test = 10;
        cfg
    };
    let a = run_invariant_regression(&cfg).unwrap();
    let b = run_invariant_regression(&cfg).unwrap();
    let regression_identical = a.report.deterministic_json() == b.report.deterministic_json();

    // autoencoder with per-presentation noise
    let dir = tempfile::tempdir().unwrap();
    let graphs = egnn::graphs::erdos_renyi((6, 9), 0.3, 6, 7).unwrap();
    egnn::graphs::write_dataset(&graphs, &dir.path().join("train.jsonl")).unwrap();
    egnn::graphs::write_dataset(&graphs, &dir.path().join("val.jsonl")).unwrap();
    egnn::graphs::write_dataset(&graphs, &dir.path().join("test.jsonl")).unwrap();
    let mut ae_cfg = overfit_config(dir.path(), ModelKind::Egnn, None, 1e-3);
    ae_cfg.epochs = 5;
    ae_cfg.resample_noise = true;
    ae_cfg.stop_train_f1 = None;
    let a = run_autoencoder(&ae_cfg).unwrap();
    let b = run_autoencoder(&ae_cfg).unwrap();
    let autoencoder_identical = a.report.deterministic_json() == b.report.deterministic_json();

    let elapsed = start.elapsed().as_secs_f64();
    let pass = regression_identical && autoencoder_identical;
    verdict(
        "9 (determinism)",
        pass,
        &format!(
            "regression identical: {regression_identical}, autoencoder identical: {autoencoder_identical}, {elapsed:.0}s"
        ),
    );
}
