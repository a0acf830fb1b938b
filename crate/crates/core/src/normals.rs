//! Normal estimation by covariance analysis of local neighborhoods.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::build_knn_index;

/// Estimated normals plus a per-point flag for degenerate neighborhoods
/// (collinear or coincident points), where the normal falls back to the view
/// direction.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<bool>,
}

/// Estimates a unit normal per point as the smallest-eigenvalue eigenvector
/// of the covariance over the point and its `m` nearest neighbors, oriented
/// so that `normal . view_direction >= 0` (toward the sensor).
pub fn estimate_normals(
    cloud: &PointCloud,
    m: usize,
    view_direction: &Vector3<f64>,
) -> Result<NormalEstimate> {
    cloud.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter(
            "neighbor count m must be at least 1".into(),
        ));
    }
    if cloud.len() < m + 1 {
        return Err(Error::InvalidParameter(format!(
            "normal estimation over m = {m} neighbors needs at least {} points, got {}",
            m + 1,
            cloud.len()
        )));
    }
    let norm = view_direction.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(
            "view direction must be a unit vector".into(),
        ));
    }
    let view = view_direction / norm;
    let index = build_knn_index(cloud)?;

    let results: Vec<(Vector3<f64>, bool)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nbrs = index
                .knn_query(i, m, true)
                .expect("validated index and bounds");
            neighborhood_normal(&cloud.points, i, &nbrs.indices, &view)
        })
        .collect();

    let mut out = cloud.clone();
    out.normals = Some(results.iter().map(|(n, _)| *n).collect());
    Ok(NormalEstimate {
        cloud: out,
        degenerate: results.into_iter().map(|(_, d)| d).collect(),
    })
}

fn neighborhood_normal(
    points: &[Vector3<f64>],
    center: usize,
    neighbors: &[usize],
    view: &Vector3<f64>,
) -> (Vector3<f64>, bool) {
    let mut mean = points[center];
    for &j in neighbors {
        mean += points[j];
    }
    mean /= (neighbors.len() + 1) as f64;

    let mut cov = Matrix3::zeros();
    let mut accumulate = |p: &Vector3<f64>| {
        let d = p - mean;
        cov += d * d.transpose();
    };
    accumulate(&points[center]);
    for &j in neighbors {
        accumulate(&points[j]);
    }

    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (idx[0], idx[1], idx[2]);

    // Rank < 2 leaves the normal direction undefined.
    let max_ev = eig.eigenvalues[hi];
    if max_ev <= 0.0 || eig.eigenvalues[mid] <= 1e-12 * max_ev {
        return (*view, true);
    }

    let mut normal: Vector3<f64> = eig.eigenvectors.column(lo).into();
    normal.normalize_mut();
    if normal.dot(view) < 0.0 {
        normal = -normal;
    }
    (normal, false)
}
