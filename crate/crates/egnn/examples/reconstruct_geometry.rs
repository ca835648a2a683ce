//! Pairwise distance norms identify a point cloud up to E(n): build
//! the squared-distance matrix of random points, reconstruct
//! coordinates from it alone, and align the reconstruction back onto
//! the original with Procrustes.
//!
//! Run with: `cargo run --release --example reconstruct_geometry`

use egnn::equivariance::{procrustes_residual, reconstruct_from_distances};
use egnn::rng::substream;
use egnn::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

fn squared_distances(points: &Tensor) -> Tensor {
    let (m, n) = points.dims2().unwrap();
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
    Tensor::matrix(m, m, d).unwrap()
}

fn main() -> egnn::Result<()> {
    let mut rng = substream(21, "example-points");
    println!("{:<10} {:>4} {:>10} {:>16}", "points", "dim", "rank", "align residual");
    for (m, n) in [(4usize, 2usize), (6, 3), (8, 5), (10, 3)] {
        let points = Tensor::matrix(m, n, (0..m * n).map(|_| rng.sample(StandardNormal)).collect())?;
        let d = squared_distances(&points);
        let rebuilt = reconstruct_from_distances(&d)?;
        let residual = procrustes_residual(&rebuilt, &points)?;
        println!(
            "{:<10} {:>4} {:>10} {:>16.3e}",
            m,
            n,
            rebuilt.dims2()?.1,
            residual
        );
    }

    // A matrix that violates the triangle inequality has no Euclidean
    // realization and is rejected.
    let impossible = Tensor::matrix(3, 3, vec![0.0, 1.0, 16.0, 1.0, 0.0, 1.0, 16.0, 1.0, 0.0])?;
    match reconstruct_from_distances(&impossible) {
        Err(e) => println!("\nimpossible geometry rejected: {e}"),
        Ok(_) => println!("\nunexpected: impossible geometry accepted"),
    }
    Ok(())
}
