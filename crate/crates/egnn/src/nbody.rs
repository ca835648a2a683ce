//! Charged-particle trajectory generation.
//!
//! Five unit-mass particles with charges ±1 interact through the
//! pairwise force
//!
//! ```text
//! F_i = Σ_{j≠i} k · c_i c_j · (x_i − x_j) / (‖x_i − x_j‖³ + ε)
//! ```
//!
//! so like charges repel and opposite charges attract. Integration is
//! leapfrog (kick-drift-kick). A trajectory sample holds the state
//! after a burn-in phase and the positions `slice_len` steps later as
//! the prediction target. Datasets are JSON lines, one trajectory per
//! line.

use crate::error::{Error, Result};
use crate::rng::{subseed, substream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    pub n_particles: usize,
    pub dt: f64,
    pub total_steps: usize,
    pub burn_in: usize,
    pub slice_len: usize,
    pub coupling: f64,
    pub softening: f64,
    /// Any coordinate beyond this magnitude counts as a blow-up and
    /// triggers a resample.
    pub blowup_limit: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n_particles: 5,
            dt: 1e-3,
            total_steps: 5000,
            burn_in: 3000,
            slice_len: 1000,
            coupling: 1.0,
            softening: 0.1,
            blowup_limit: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub dt: f64,
    pub t_steps: usize,
    pub seed: u64,
    pub resamples: usize,
}

/// One N-body sample: state at the start of the slice plus the target
/// positions at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub p0: Tensor,        // [N × 3]
    pub v0: Tensor,        // [N × 3]
    pub charges: Vec<i8>,  // ±1
    pub target: Tensor,    // [N × 3]
    pub meta: TrajectoryMeta,
}

/// Pairwise forces under the charge-product law.
pub fn forces(positions: &Tensor, charges: &[i8], coupling: f64, softening: f64) -> Tensor {
    let (n, dim) = positions.dims2().expect("rank <= 2");
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut r2 = 0.0;
            for c in 0..dim {
                let d = positions.get(i, c) - positions.get(j, c);
                r2 += d * d;
            }
            let denom = r2.powf(1.5) + softening;
            let scale = coupling * (charges[i] as f64) * (charges[j] as f64) / denom;
            for c in 0..dim {
                out[i * dim + c] += scale * (positions.get(i, c) - positions.get(j, c));
            }
        }
    }
    Tensor::matrix(n, dim, out).expect("consistent")
}

/// Advance the state by `steps` leapfrog steps in place. Returns false
/// if a coordinate left the `blowup_limit` box.
pub fn leapfrog(
    positions: &mut Tensor,
    velocities: &mut Tensor,
    charges: &[i8],
    steps: usize,
    params: &SimParams,
) -> bool {
    let (n, dim) = positions.dims2().expect("rank <= 2");
    let half = 0.5 * params.dt;
    let mut f = forces(positions, charges, params.coupling, params.softening);
    for _ in 0..steps {
        for i in 0..n * dim {
            velocities.data_mut()[i] += half * f.data()[i];
            positions.data_mut()[i] += params.dt * velocities.data()[i];
        }
        f = forces(positions, charges, params.coupling, params.softening);
        for i in 0..n * dim {
            velocities.data_mut()[i] += half * f.data()[i];
        }
        if positions
            .data()
            .iter()
            .any(|v| !v.is_finite() || v.abs() > params.blowup_limit)
        {
            return false;
        }
    }
    true
}

fn sample_state(seed: u64, n: usize) -> (Tensor, Tensor, Vec<i8>) {
    let mut rng = substream(seed, "nbody-init");
    let p: Vec<f64> = (0..n * 3).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..n * 3).map(|_| rng.sample(StandardNormal)).collect();
    let charges: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
    (
        Tensor::matrix(n, 3, p).expect("consistent"),
        Tensor::matrix(n, 3, v).expect("consistent"),
        charges,
    )
}

/// Generate one trajectory. Diverged integrations are resampled with
/// the next sub-seed; the count lands in the metadata.
pub fn simulate(seed: u64, params: &SimParams) -> Result<Trajectory> {
    if params.total_steps < params.burn_in + params.slice_len {
        return Err(Error::contract(
            "total_steps must cover burn_in + slice_len",
        ));
    }
    let mut resamples = 0usize;
    loop {
        if resamples > 100 {
            return Err(Error::Numeric(format!(
                "trajectory for seed {seed} diverged in 100 consecutive resamples"
            )));
        }
        let attempt_seed = if resamples == 0 {
            seed
        } else {
            subseed(seed, "nbody-resample", resamples as u64)
        };
        let (mut p, mut v, charges) = sample_state(attempt_seed, params.n_particles);
        if !leapfrog(&mut p, &mut v, &charges, params.burn_in, params) {
            resamples += 1;
            continue;
        }
        let p0 = p.clone();
        let v0 = v.clone();
        if !leapfrog(&mut p, &mut v, &charges, params.slice_len, params) {
            resamples += 1;
            continue;
        }
        return Ok(Trajectory {
            p0,
            v0,
            charges,
            target: p,
            meta: TrajectoryMeta {
                dt: params.dt,
                t_steps: params.slice_len,
                seed,
                resamples,
            },
        });
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    p0: Vec<Vec<f64>>,
    v0: Vec<Vec<f64>>,
    c: Vec<i8>,
    target: Vec<Vec<f64>>,
    meta: TrajectoryMeta,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2().expect("rank <= 2");
    (0..m).map(|i| t.row_slice(i).to_vec()).collect()
}

impl Trajectory {
    fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            p0: to_rows(&self.p0),
            v0: to_rows(&self.v0),
            c: self.charges.clone(),
            target: to_rows(&self.target),
            meta: self.meta.clone(),
        }
    }

    fn from_record(r: TrajectoryRecord) -> Result<Self> {
        Ok(Self {
            p0: Tensor::from_rows(&r.p0)?,
            v0: Tensor::from_rows(&r.v0)?,
            charges: r.c,
            target: Tensor::from_rows(&r.target)?,
            meta: r.meta,
        })
    }
}

pub fn write_dataset(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for t in trajectories {
        serde_json::to_writer(&mut w, &t.to_record())?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record: idx,
            msg: e.to_string(),
        })?;
        out.push(Trajectory::from_record(record).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record: idx,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariance::random_transform;
    use rand::SeedableRng;

    fn small_params() -> SimParams {
        SimParams {
            total_steps: 400,
            burn_in: 200,
            slice_len: 200,
            ..SimParams::default()
        }
    }

    fn two_particle_state(charges: [i8; 2]) -> (Tensor, Tensor, Vec<i8>) {
        let p = Tensor::matrix(2, 3, vec![-0.5, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let v = Tensor::zeros(vec![2, 3]);
        (p, v, charges.to_vec())
    }

    fn distance(p: &Tensor) -> f64 {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = p.get(0, c) - p.get(1, c);
            d2 += d * d;
        }
        d2.sqrt()
    }

    #[test]
    fn opposite_charges_attract() {
        let (mut p, mut v, charges) = two_particle_state([1, -1]);
        let before = distance(&p);
        assert!(leapfrog(&mut p, &mut v, &charges, 50, &SimParams::default()));
        assert!(distance(&p) < before);
    }

    #[test]
    fn like_charges_repel() {
        let (mut p, mut v, charges) = two_particle_state([1, 1]);
        let before = distance(&p);
        assert!(leapfrog(&mut p, &mut v, &charges, 50, &SimParams::default()));
        assert!(distance(&p) > before);
    }

    /// Pair potential U(r) = k·c_i·c_j·∫_r^∞ s/(s³+ε) ds by Simpson
    /// quadrature, the independent energy oracle for the force law.
    fn pair_potential(r: f64, cc: f64, k: f64, eps: f64) -> f64 {
        let integrand = |s: f64| s / (s * s * s + eps);
        let upper = 1e4;
        let steps = 20_000;
        let h = (upper - r) / steps as f64;
        let mut acc = integrand(r) + integrand(upper);
        for i in 1..steps {
            let s = r + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * integrand(s);
        }
        // analytic tail beyond the truncation: ∫ s⁻² ds = 1/upper
        k * cc * (acc * h / 3.0 + 1.0 / upper)
    }

    fn total_energy(p: &Tensor, v: &Tensor, charges: &[i8], params: &SimParams) -> f64 {
        let n = charges.len();
        let mut e = 0.0;
        for i in 0..n {
            for c in 0..3 {
                e += 0.5 * v.get(i, c) * v.get(i, c);
            }
            for j in i + 1..n {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let d = p.get(i, c) - p.get(j, c);
                    d2 += d * d;
                }
                e += pair_potential(
                    d2.sqrt(),
                    charges[i] as f64 * charges[j] as f64,
                    params.coupling,
                    params.softening,
                );
            }
        }
        e
    }

    #[test]
    fn leapfrog_energy_drift_is_below_one_percent() {
        let params = SimParams::default();
        let (mut p, mut v, charges) = sample_state(4242, 5);
        assert!(leapfrog(&mut p, &mut v, &charges, params.burn_in, &params));
        let e0 = total_energy(&p, &v, &charges, &params);
        assert!(leapfrog(&mut p, &mut v, &charges, params.slice_len, &params));
        let e1 = total_energy(&p, &v, &charges, &params);
        assert!(
            (e1 - e0).abs() <= 0.01 * e0.abs(),
            "energy drift {:.3e} of {:.3e}",
            (e1 - e0).abs(),
            e0
        );
    }

    #[test]
    fn momentum_is_conserved_per_step() {
        let params = SimParams::default();
        let (mut p, mut v, charges) = sample_state(7, 5);
        let momentum = |v: &Tensor| -> [f64; 3] {
            let mut m = [0.0; 3];
            for i in 0..5 {
                for c in 0..3 {
                    m[c] += v.get(i, c);
                }
            }
            m
        };
        let before = momentum(&v);
        for _ in 0..100 {
            assert!(leapfrog(&mut p, &mut v, &charges, 1, &params));
            let after = momentum(&v);
            for c in 0..3 {
                assert!((after[c] - before[c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn simulation_commutes_with_euclidean_motion() {
        let params = small_params();
        let (p, v, charges) = sample_state(11, 5);
        let mut p_plain = p.clone();
        let mut v_plain = v.clone();
        assert!(leapfrog(&mut p_plain, &mut v_plain, &charges, 150, &params));

        let t = random_transform(3, &mut rand_chacha::ChaCha20Rng::seed_from_u64(1), true).unwrap();
        let mut p_moved = t.apply_points(&p);
        let mut v_moved = t.apply_vectors(&v);
        assert!(leapfrog(&mut p_moved, &mut v_moved, &charges, 150, &params));

        let expected = t.apply_points(&p_plain);
        for (a, b) in p_moved.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let params = small_params();
        let a = simulate(3, &params).unwrap();
        let b = simulate(3, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blowup_triggers_resample_accounting() {
        let mut params = small_params();
        params.blowup_limit = 1e-12; // every draw "diverges"
        match simulate(5, &params) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("resamples")),
            other => panic!("expected numeric failure, got {other:?}"),
        }

        // a forgiving limit keeps the count at zero
        let t = simulate(5, &small_params()).unwrap();
        assert_eq!(t.meta.resamples, 0);
    }

    #[test]
    fn short_budget_is_rejected() {
        let mut params = small_params();
        params.total_steps = 10;
        assert!(matches!(simulate(0, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let params = small_params();
        let trajectories: Vec<Trajectory> =
            (0..4).map(|s| simulate(s, &params).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nbody.jsonl");
        write_dataset(&trajectories, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(trajectories, back);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&[], &path).unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let params = small_params();
        let t = simulate(1, &params).unwrap();
        write_dataset(&[t], &path).unwrap();
        let mut contents = std::fs::read_to_string(&path).unwrap();
        contents.push_str("{\"p0\": [[1.0, 2.0\n");
        std::fs::write(&path, contents).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
