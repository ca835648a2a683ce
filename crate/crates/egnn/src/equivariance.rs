//! Random Euclidean transforms, equivariance checks, and the
//! distance-geometry oracle.
//!
//! Orthogonal matrices are sampled Haar-uniformly by QR-factorizing a
//! Gaussian matrix with sign-corrected R diagonal; a biased Q would
//! weaken every property test built on top of this module. The
//! reconstruction path recovers point coordinates from pairwise
//! squared distances through the anchored Gram matrix
//! `G_ij = (D_i0 + D_j0 − D_ij)/2` and a Jacobi eigendecomposition,
//! and Procrustes alignment (one-sided Jacobi SVD) measures how well a
//! reconstructed set matches the original modulo E(n).

use crate::error::{Error, Result};
use crate::model::GeometricGraph;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// An element of E(n): orthogonal `q` (with `det_sign` ±1) plus a
/// translation.
#[derive(Debug, Clone)]
pub struct EuclideanTransform {
    pub q: Tensor,        // [n × n]
    pub translation: Tensor, // [n]
    pub det_sign: f64,
}

impl EuclideanTransform {
    pub fn dim(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn identity(n: usize) -> Self {
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            q[i * n + i] = 1.0;
        }
        Self {
            q: Tensor::matrix(n, n, q).expect("consistent"),
            translation: Tensor::zeros(vec![n]),
            det_sign: 1.0,
        }
    }

    /// Rows of `points` are mapped x ↦ Qx + t.
    pub fn apply_points(&self, points: &Tensor) -> Tensor {
        let (m, n) = points.dims2().expect("rank <= 2");
        assert_eq!(n, self.dim(), "transform dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for r in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    s += self.q.get(r, c) * points.get(i, c);
                }
                out[i * n + r] = s + self.translation.data()[r];
            }
        }
        Tensor::matrix(m, n, out).expect("consistent")
    }

    /// Velocities rotate but do not translate.
    pub fn apply_vectors(&self, vectors: &Tensor) -> Tensor {
        let (m, n) = vectors.dims2().expect("rank <= 2");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for r in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    s += self.q.get(r, c) * vectors.get(i, c);
                }
                out[i * n + r] = s;
            }
        }
        Tensor::matrix(m, n, out).expect("consistent")
    }

    /// Transform a whole graph: coordinates get Qx + t, velocities Qv,
    /// features and edges untouched.
    pub fn apply_graph(&self, g: &GeometricGraph) -> GeometricGraph {
        let mut out = g.clone();
        out.x = self.apply_points(&g.x);
        if let Some(v) = &g.v {
            out.v = Some(self.apply_vectors(v));
        }
        out
    }

    /// self ∘ inner: apply `inner` first, then `self`. The result has
    /// Q = Q_self·Q_inner and t = Q_self·t_inner + t_self.
    pub fn compose(&self, inner: &Self) -> Self {
        let n = self.dim();
        let q = matmul_plain(self.q.data(), inner.q.data(), n, n, n);
        let t_rot = self.apply_vectors(&Tensor::matrix(1, n, inner.translation.data().to_vec()).unwrap());
        let t: Vec<f64> = t_rot
            .data()
            .iter()
            .zip(self.translation.data())
            .map(|(a, b)| a + b)
            .collect();
        Self {
            q: Tensor::matrix(n, n, q).expect("consistent"),
            translation: Tensor::row(&t),
            det_sign: self.det_sign * inner.det_sign,
        }
    }

    /// ‖QᵀQ − I‖∞, useful for asserting orthogonality.
    pub fn orthogonality_defect(&self) -> f64 {
        let n = self.dim();
        let qt = transpose_plain(self.q.data(), n, n);
        let prod = matmul_plain(&qt, self.q.data(), n, n, n);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[i * n + j] - expect).abs());
            }
        }
        worst
    }
}

fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

fn transpose_plain(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| {
                m[i * n + k]
                    .abs()
                    .partial_cmp(&m[j * n + k].abs())
                    .expect("finite")
            })
            .expect("non-empty");
        if m[pivot * n + k] == 0.0 {
            return 0.0;
        }
        if pivot != k {
            for j in 0..n {
                m.swap(k * n + j, pivot * n + j);
            }
            det = -det;
        }
        det *= m[k * n + k];
        for i in k + 1..n {
            let f = m[i * n + k] / m[k * n + k];
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    det
}

/// Householder QR of a square matrix; returns (Q, R) with A = QR.
fn householder_qr(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for k in 0..n.saturating_sub(1) {
        let mut norm = 0.0;
        for i in k..n {
            norm += r[i * n + k] * r[i * n + k];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k * n + k] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in k..n {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        // R ← (I − 2vvᵀ/‖v‖²) R
        for j in k..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * r[i * n + j];
            }
            let f = 2.0 * dot / vnorm_sq;
            for i in k..n {
                r[i * n + j] -= f * v[i];
            }
        }
        // Q ← Q (I − 2vvᵀ/‖v‖²)
        for i in 0..n {
            let mut dot = 0.0;
            for j in k..n {
                dot += q[i * n + j] * v[j];
            }
            let f = 2.0 * dot / vnorm_sq;
            for j in k..n {
                q[i * n + j] -= f * v[j];
            }
        }
    }
    (q, r)
}

/// Haar-uniform random element of E(n). `reflect` selects the
/// determinant −1 component; otherwise a proper rotation is returned.
/// Translations are uniform in [−10, 10] per coordinate.
pub fn random_transform(n: usize, rng: &mut impl Rng, reflect: bool) -> Result<EuclideanTransform> {
    if n == 0 {
        return Err(Error::contract("transform dimension must be >= 1"));
    }
    let q = loop {
        let gauss: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let (mut q, r) = householder_qr(&gauss, n);
        // Degenerate draws give a rank-deficient R; resample.
        if (0..n).any(|k| r[k * n + k].abs() < 1e-12) {
            continue;
        }
        // Sign correction for Haar uniformity.
        for k in 0..n {
            if r[k * n + k] < 0.0 {
                for i in 0..n {
                    q[i * n + k] = -q[i * n + k];
                }
            }
        }
        break q;
    };
    let mut q = q;
    let desired = if reflect { -1.0 } else { 1.0 };
    if determinant(&q, n) * desired < 0.0 {
        for i in 0..n {
            q[i * n] = -q[i * n];
        }
    }
    let translation: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..=10.0)).collect();
    Ok(EuclideanTransform {
        q: Tensor::matrix(n, n, q)?,
        translation: Tensor::row(&translation),
        det_sign: desired,
    })
}

/// Per-channel maximum deviations of `f` from exact equivariance under
/// one transform.
#[derive(Debug, Clone)]
pub struct EquivarianceReport {
    pub dx: f64,
    pub dv: Option<f64>,
    pub dh: f64,
    pub tol: f64,
}

impl EquivarianceReport {
    pub fn pass(&self) -> bool {
        self.dx <= self.tol && self.dv.is_none_or(|d| d <= self.tol) && self.dh <= self.tol
    }

    pub fn max_deviation(&self) -> f64 {
        self.dx.max(self.dv.unwrap_or(0.0)).max(self.dh)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Compare f(T·g) against T·f(g): coordinates must transform, the
/// velocity channel must rotate without translating, and features
/// must be invariant.
pub fn check_equivariance(
    f: &dyn Fn(&GeometricGraph) -> Result<GeometricGraph>,
    g: &GeometricGraph,
    transform: &EuclideanTransform,
    tol: f64,
) -> Result<EquivarianceReport> {
    let plain = f(g)?;
    let transformed_in = transform.apply_graph(g);
    let transformed_out = f(&transformed_in)?;

    let expected_x = transform.apply_points(&plain.x);
    let dx = max_abs_diff(transformed_out.x.data(), expected_x.data());
    let dh = max_abs_diff(transformed_out.h.data(), plain.h.data());
    let dv = match (&plain.v, &transformed_out.v) {
        (Some(v), Some(v_out)) => {
            let expected_v = transform.apply_vectors(v);
            Some(max_abs_diff(v_out.data(), expected_v.data()))
        }
        _ => None,
    };
    Ok(EquivarianceReport { dx, dv, dh, tol })
}

fn pairwise_sq_dists(points: &Tensor) -> Vec<f64> {
    let (m, n) = points.dims2().expect("rank <= 2");
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..n {
                let diff = points.get(i, c) - points.get(j, c);
                s += diff * diff;
            }
            d[i * m + j] = s;
        }
    }
    d
}

/// Do all pairwise ℓ2 distances survive the transform within 1e-10?
pub fn distances_invariant(points: &Tensor, transform: &EuclideanTransform) -> bool {
    let before = pairwise_sq_dists(points);
    let after = pairwise_sq_dists(&transform.apply_points(points));
    before
        .iter()
        .zip(&after)
        .all(|(a, b)| (a.sqrt() - b.sqrt()).abs() <= 1e-10)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and eigenvectors as matching columns of V.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .expect("finite eigenvalues")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }
    (eigenvalues, vectors)
}

/// Eigenvalues below this are treated as a violation of realizability.
pub const GRAM_NEG_TOL: f64 = -1e-8;

/// Recover coordinates from a matrix of pairwise *squared* distances.
///
/// Points are anchored at index 0 (the proof's "subtract x₀ from
/// all"), the anchored Gram matrix is factorized, and the positive
/// eigenpairs give the embedding. Output dimension is the detected
/// rank (at least 1).
pub fn reconstruct_from_distances(d_sq: &Tensor) -> Result<Tensor> {
    let (m, cols) = d_sq.dims2()?;
    if m != cols || m == 0 {
        return Err(Error::contract("distance matrix must be square and non-empty"));
    }
    for i in 0..m {
        if d_sq.get(i, i) != 0.0 {
            return Err(Error::contract("distance matrix must have a zero diagonal"));
        }
        for j in 0..m {
            if (d_sq.get(i, j) - d_sq.get(j, i)).abs() > 1e-9 {
                return Err(Error::contract("distance matrix must be symmetric"));
            }
            if d_sq.get(i, j) < 0.0 {
                return Err(Error::NonRealizable(format!(
                    "negative squared distance at ({i}, {j})"
                )));
            }
        }
    }

    // G_ij = <x_i − x_0, x_j − x_0> = (D_i0 + D_j0 − D_ij) / 2
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] = 0.5 * (d_sq.get(i, 0) + d_sq.get(j, 0) - d_sq.get(i, j));
        }
    }
    let (eigenvalues, vectors) = jacobi_eigh(&gram, m);
    if let Some(&lambda) = eigenvalues.iter().find(|&&l| l < GRAM_NEG_TOL) {
        return Err(Error::NonRealizable(format!(
            "Gram matrix has eigenvalue {lambda:.3e}"
        )));
    }
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
    let rank = eigenvalues
        .iter()
        .take_while(|&&l| l > 1e-9 * scale)
        .count()
        .max(1);
    let mut coords = vec![0.0; m * rank];
    for (k, &lambda) in eigenvalues.iter().take(rank).enumerate() {
        let root = lambda.max(0.0).sqrt();
        for i in 0..m {
            coords[i * rank + k] = vectors[i * m + k] * root;
        }
    }
    Tensor::matrix(m, rank, coords)
}

/// One-sided Jacobi SVD of a square matrix: A = U·diag(σ)·Vᵀ. Zero
/// singular directions get U columns from an orthonormal completion.
fn jacobi_svd(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    app += u[i * n + p] * u[i * n + p];
                    aqq += u[i * n + q] * u[i * n + q];
                    apq += u[i * n + p] * u[i * n + q];
                }
                if apq.abs() <= 1e-15 * (app * aqq).sqrt().max(1e-300) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let uip = u[i * n + p];
                    let uiq = u[i * n + q];
                    u[i * n + p] = c * uip - s * uiq;
                    u[i * n + q] = s * uip + c * uiq;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = vec![0.0; n];
    for j in 0..n {
        let mut norm = 0.0;
        for i in 0..n {
            norm += u[i * n + j] * u[i * n + j];
        }
        sigma[j] = norm.sqrt();
        if sigma[j] > 1e-12 {
            for i in 0..n {
                u[i * n + j] /= sigma[j];
            }
        }
    }
    // Complete null columns to an orthonormal basis.
    for j in 0..n {
        if sigma[j] > 1e-12 {
            continue;
        }
        for basis in 0..n {
            let mut candidate = vec![0.0; n];
            candidate[basis] = 1.0;
            for k in 0..n {
                // Project out established columns: the non-null ones
                // and null columns already completed.
                if k != j && (sigma[k] > 1e-12 || k < j) {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += candidate[i] * u[i * n + k];
                    }
                    for i in 0..n {
                        candidate[i] -= dot * u[i * n + k];
                    }
                }
            }
            let norm: f64 = candidate.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..n {
                    u[i * n + j] = candidate[i] / norm;
                }
                break;
            }
        }
    }
    (u, sigma, v)
}

/// Maximum entry deviation between centered `a` mapped through the
/// optimal orthogonal alignment and centered `b`. Column counts may
/// differ; the narrower set is zero-padded.
pub fn procrustes_residual(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ma, na) = a.dims2()?;
    let (mb, nb) = b.dims2()?;
    if ma != mb {
        return Err(Error::Dim {
            op: "procrustes",
            lhs: vec![ma, na],
            rhs: vec![mb, nb],
        });
    }
    let n = na.max(nb);
    let pad = |t: &Tensor, cols: usize| -> Vec<f64> {
        let (m, c) = t.dims2().expect("rank <= 2");
        let mut centered = vec![0.0; m * n];
        let mut centroid = vec![0.0; c];
        for i in 0..m {
            for (j, acc) in centroid.iter_mut().enumerate() {
                *acc += t.get(i, j) / m as f64;
            }
        }
        for i in 0..m {
            for j in 0..cols {
                centered[i * n + j] = t.get(i, j) - centroid[j];
            }
        }
        centered
    };
    let ac = pad(a, na);
    let bc = pad(b, nb);

    // H = Acᵀ·Bc, R = U·Vᵀ from H = U·Σ·Vᵀ (reflections allowed).
    let mut h = vec![0.0; n * n];
    for i in 0..ma {
        for r in 0..n {
            for c in 0..n {
                h[r * n + c] += ac[i * n + r] * bc[i * n + c];
            }
        }
    }
    let (u, _sigma, v) = jacobi_svd(&h, n);
    let vt = transpose_plain(&v, n, n);
    let rot = matmul_plain(&u, &vt, n, n, n);

    let mut worst: f64 = 0.0;
    for i in 0..ma {
        for c in 0..n {
            let mut mapped = 0.0;
            for r in 0..n {
                mapped += ac[i * n + r] * rot[r * n + c];
            }
            worst = worst.max((mapped - bc[i * n + c]).abs());
        }
    }
    Ok(worst)
}
