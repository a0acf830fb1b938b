//! Shared fixtures for the benchmark targets.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pcad_core::PointCloud;

/// Random cloud with unit normals biased toward +z, as produced by a
/// single-view scan.
pub fn scan_like_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = StdRng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    let normals = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.5..1.5),
            )
            .normalize()
        })
        .collect();
    PointCloud {
        points,
        normals: Some(normals),
        grid_index: None,
    }
}

pub fn feature_rows(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    Array2::from_shape_fn((n, dim), |_| rng.random_range(0.0..5.0))
}

pub fn score_pairs(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..0.5)])
        .collect()
}
