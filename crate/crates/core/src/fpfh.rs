//! Fast Point Feature Histogram descriptors.
//!
//! For a center point with normal `n_i` and a neighbor at unit offset `d`,
//! the pair frame is `mu = n_i`, `nu = mu x d`, `omega = mu x nu`, and the
//! angle triple is `alpha = nu . n_j`, `gamma = mu . d`,
//! `theta = atan2(omega . n_j, mu . n_j)`. A point's simplified histogram
//! concatenates the per-angle histograms over its `m` nearest neighbors; the
//! full descriptor adds the distance-weighted mean of the neighbors'
//! simplified histograms.

use ndarray::Array2;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::{build_knn_index, KnnQueryResult};

/// Neighborhood size from the reference parameterization.
pub const DEFAULT_NEIGHBORS: usize = 30;
/// Bins per angle; three angles give a 33-dimensional descriptor.
pub const DEFAULT_BINS: usize = 11;

const COINCIDENT_EPS: f64 = 1e-12;

/// Pair angles in the center point's frame. `alpha` and `gamma` are
/// dimensionless dot products in `[-1, 1]`; `theta` is in radians in
/// `[-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleTuple {
    pub alpha: f64,
    pub gamma: f64,
    pub theta: f64,
}

/// Concatenated per-angle histograms, each normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpfhHistogram {
    bins: usize,
    values: Vec<f64>,
}

impl SpfhHistogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn alpha_hist(&self) -> &[f64] {
        &self.values[..self.bins]
    }

    pub fn gamma_hist(&self) -> &[f64] {
        &self.values[self.bins..2 * self.bins]
    }

    pub fn theta_hist(&self) -> &[f64] {
        &self.values[2 * self.bins..]
    }
}

/// Per-point descriptors aligned with cloud point order, one row per point.
pub type FeatureMatrix = Array2<f64>;

/// Computes the angle triple for a (center, neighbor) pair. Both normals
/// must be unit length; coincident positions have no defined frame.
pub fn compute_angle_tuple(
    center_point: &nalgebra::Vector3<f64>,
    center_normal: &nalgebra::Vector3<f64>,
    neighbor_point: &nalgebra::Vector3<f64>,
    neighbor_normal: &nalgebra::Vector3<f64>,
) -> Result<AngleTuple> {
    let diff = neighbor_point - center_point;
    let dist = diff.norm();
    if dist <= COINCIDENT_EPS {
        return Err(Error::CoincidentPoints);
    }
    let d = diff / dist;
    let mu = center_normal;
    let nu = mu.cross(&d);
    let omega = mu.cross(&nu);
    Ok(AngleTuple {
        alpha: nu.dot(neighbor_normal),
        gamma: mu.dot(&d),
        theta: omega.dot(neighbor_normal).atan2(mu.dot(neighbor_normal)),
    })
}

/// Bin index over `[lo, hi]`: values exactly on an interior edge go to the
/// higher bin, the maximum goes to the last bin.
fn bin_index(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((value.clamp(lo, hi) - lo) / (hi - lo) * bins as f64).floor() as usize;
    t.min(bins - 1)
}

fn spfh_from_neighbors(
    cloud: &PointCloud,
    center: usize,
    neighbors: &[usize],
    bins: usize,
) -> Result<SpfhHistogram> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let normals = cloud.require_normals()?;
    let mut values = vec![0.0; 3 * bins];
    for &j in neighbors {
        let t = compute_angle_tuple(
            &cloud.points[center],
            &normals[center],
            &cloud.points[j],
            &normals[j],
        )?;
        values[bin_index(t.alpha, -1.0, 1.0, bins)] += 1.0;
        values[bins + bin_index(t.gamma, -1.0, 1.0, bins)] += 1.0;
        values[2 * bins
            + bin_index(t.theta, -std::f64::consts::PI, std::f64::consts::PI, bins)] += 1.0;
    }
    let inv = 1.0 / neighbors.len() as f64;
    for v in &mut values {
        *v *= inv;
    }
    Ok(SpfhHistogram { bins, values })
}

/// Simplified histogram of point `i` over its `m` nearest neighbors.
pub fn compute_spfh(
    cloud: &PointCloud,
    index: &crate::knn::KnnIndex,
    i: usize,
    m: usize,
    bins: usize,
) -> Result<SpfhHistogram> {
    validate_bins(bins)?;
    let nbrs = index.knn_query(i, m, true)?;
    spfh_from_neighbors(cloud, i, &nbrs.indices, bins)
}

fn validate_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be at least 1".into()));
    }
    Ok(())
}

/// Full descriptor matrix: for each point, its simplified histogram plus the
/// inverse-distance weighted mean of its neighbors' simplified histograms.
pub fn compute_fpfh(cloud: &PointCloud, m: usize, bins: usize) -> Result<FeatureMatrix> {
    validate_bins(bins)?;
    cloud.validate()?;
    cloud.require_normals()?;
    if m == 0 {
        return Err(Error::InvalidParameter(
            "neighbor count m must be at least 1".into(),
        ));
    }
    if cloud.len() < m + 1 {
        return Err(Error::InvalidParameter(format!(
            "FPFH over m = {m} neighbors needs at least {} points, got {}",
            m + 1,
            cloud.len()
        )));
    }
    let index = build_knn_index(cloud)?;
    let neighborhoods: Vec<KnnQueryResult> = (0..cloud.len())
        .into_par_iter()
        .map(|i| index.knn_query(i, m, true).expect("bounds validated"))
        .collect();
    let spfhs: Vec<SpfhHistogram> = (0..cloud.len())
        .into_par_iter()
        .map(|i| spfh_from_neighbors(cloud, i, &neighborhoods[i].indices, bins))
        .collect::<Result<_>>()?;

    let dim = 3 * bins;
    let rows: Vec<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nbrs = &neighborhoods[i];
            let weighted = weighted_neighbor_term(&spfhs, nbrs, m, dim);
            spfhs[i]
                .values
                .iter()
                .zip(&weighted)
                .map(|(s, w)| s + w)
                .collect()
        })
        .collect();

    let mut out = Array2::zeros((cloud.len(), dim));
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            out[[i, k]] = v;
        }
    }
    Ok(out)
}

/// The inverse-distance weighted sum of neighbor histograms, accumulated in
/// neighbor query order.
fn weighted_neighbor_term(
    spfhs: &[SpfhHistogram],
    neighbors: &KnnQueryResult,
    m: usize,
    dim: usize,
) -> Vec<f64> {
    let inv_m = 1.0 / m as f64;
    let mut weighted = vec![0.0; dim];
    for (&j, &dist) in neighbors.indices.iter().zip(&neighbors.distances) {
        let w = inv_m / dist;
        for (acc, v) in weighted.iter_mut().zip(&spfhs[j].values) {
            *acc += w * v;
        }
    }
    weighted
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v.normalize()
    }

    /// Random cloud with random unit normals, kept away from angle-bin edges
    /// with overwhelming probability by the continuous sampling.
    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = StdRng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let normals = (0..n)
            .map(|_| {
                unit(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..=1.0) + 1.5,
                ))
            })
            .collect();
        PointCloud {
            points,
            normals: Some(normals),
            grid_index: None,
        }
    }

    #[test]
    fn coplanar_identical_normals_give_zero_tuple() {
        let n = Vector3::new(0.0, 0.0, 1.0);
        let t = compute_angle_tuple(
            &Vector3::new(0.0, 0.0, 0.0),
            &n,
            &Vector3::new(0.7, -0.4, 0.0),
            &n,
        )
        .unwrap();
        assert!(t.alpha.abs() < 1e-12);
        assert!(t.gamma.abs() < 1e-12);
        assert!(t.theta.abs() < 1e-12);
    }

    #[test]
    fn hand_computed_tuple() {
        // Frame: nu = (0,1,0), omega = (-1,0,0); neighbor normal (1,0,0)
        // gives alpha = 0, gamma = 0, theta = atan2(-1, 0) = -pi/2.
        let t = compute_angle_tuple(
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert!(t.alpha.abs() < 1e-15);
        assert!(t.gamma.abs() < 1e-15);
        assert!((t.theta + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn tuple_is_asymmetric_in_general() {
        let a = (Vector3::new(0.0, 0.0, 0.0), unit(Vector3::new(0.1, 0.0, 1.0)));
        let b = (Vector3::new(1.0, 0.2, 0.1), unit(Vector3::new(0.9, 0.1, 0.4)));
        let t_ab = compute_angle_tuple(&a.0, &a.1, &b.0, &b.1).unwrap();
        let t_ba = compute_angle_tuple(&b.0, &b.1, &a.0, &a.1).unwrap();
        assert!(t_ab != t_ba);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let n = Vector3::new(0.0, 0.0, 1.0);
        assert!(matches!(
            compute_angle_tuple(&p, &n, &p, &n),
            Err(Error::CoincidentPoints)
        ));
    }

    #[test]
    fn flat_plane_spfh_concentrates_in_zero_bins() {
        let mut points = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                points.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let n = points.len();
        let cloud = PointCloud {
            points,
            normals: Some(vec![Vector3::new(0.0, 0.0, 1.0); n]),
            grid_index: None,
        };
        let index = build_knn_index(&cloud).unwrap();
        let h = compute_spfh(&cloud, &index, 14, 8, 11).unwrap();
        // All three angles are exactly 0: alpha/gamma fall in bin 5 of 11,
        // theta falls in bin 5 as well (t = 0.5 * 11 = 5.5 -> floor 5).
        assert!((h.alpha_hist()[5] - 1.0).abs() < 1e-12);
        assert!((h.gamma_hist()[5] - 1.0).abs() < 1e-12);
        assert!((h.theta_hist()[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_neighbor_histogram_bins_match_hand_tuple() {
        let cloud = PointCloud {
            points: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            normals: Some(vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)]),
            grid_index: None,
        };
        let index = build_knn_index(&cloud).unwrap();
        let h = compute_spfh(&cloud, &index, 0, 1, 11).unwrap();
        // (alpha, gamma, theta) = (0, 0, -pi/2): bins 5, 5, and
        // floor((pi/2) / (2 pi) * 11) = 2.
        assert_eq!(h.alpha_hist().iter().position(|&v| v > 0.0), Some(5));
        assert_eq!(h.gamma_hist().iter().position(|&v| v > 0.0), Some(5));
        assert_eq!(h.theta_hist().iter().position(|&v| v > 0.0), Some(2));
    }

    #[test]
    fn spfh_matches_naive_double_loop() {
        let cloud = random_cloud(40, 21);
        let index = build_knn_index(&cloud).unwrap();
        let m = 30;
        let h = compute_spfh(&cloud, &index, 3, m, 11).unwrap();

        // Oracle: brute-force neighbor selection plus direct binning.
        let normals = cloud.normals.as_ref().unwrap();
        let mut dists: Vec<(f64, usize)> = cloud
            .points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != 3)
            .map(|(j, p)| ((p - cloud.points[3]).norm_squared(), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut expected = vec![0.0; 33];
        for &(_, j) in dists.iter().take(m) {
            let t = compute_angle_tuple(&cloud.points[3], &normals[3], &cloud.points[j], &normals[j])
                .unwrap();
            expected[bin_index(t.alpha, -1.0, 1.0, 11)] += 1.0 / m as f64;
            expected[11 + bin_index(t.gamma, -1.0, 1.0, 11)] += 1.0 / m as f64;
            expected[22 + bin_index(t.theta, -PI, PI, 11)] += 1.0 / m as f64;
        }
        for (a, b) in h.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spfh_sub_histograms_sum_to_one() {
        let cloud = random_cloud(50, 33);
        let index = build_knn_index(&cloud).unwrap();
        for i in 0..cloud.len() {
            let h = compute_spfh(&cloud, &index, i, 10, 11).unwrap();
            for sub in [h.alpha_hist(), h.gamma_hist(), h.theta_hist()] {
                assert!((sub.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spfh_is_invariant_to_neighbor_order() {
        let cloud = random_cloud(30, 5);
        let nbrs: Vec<usize> = (1..21).collect();
        let a = spfh_from_neighbors(&cloud, 0, &nbrs, 11).unwrap();
        let mut rev = nbrs.clone();
        rev.reverse();
        let b = spfh_from_neighbors(&cloud, 0, &rev, 11).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn two_point_fpfh_follows_the_weighting() {
        let cloud = PointCloud {
            points: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0)],
            normals: Some(vec![
                unit(Vector3::new(0.1, 0.0, 1.0)),
                unit(Vector3::new(0.0, 0.2, 1.0)),
            ]),
            grid_index: None,
        };
        let f = compute_fpfh(&cloud, 1, 11).unwrap();
        let index = build_knn_index(&cloud).unwrap();
        let s0 = compute_spfh(&cloud, &index, 0, 1, 11).unwrap();
        let s1 = compute_spfh(&cloud, &index, 1, 1, 11).unwrap();
        for k in 0..33 {
            let expected = s0.values()[k] + s1.values()[k] / 2.0;
            assert!((f[[0, k]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_plane_fpfh_is_a_scaled_spfh_pattern() {
        let mut points = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                points.push(Vector3::new(i as f64, j as f64, 0.0));
            }
        }
        let n = points.len();
        let cloud = PointCloud {
            points,
            normals: Some(vec![Vector3::new(0.0, 0.0, 1.0); n]),
            grid_index: None,
        };
        let m = 8;
        let f = compute_fpfh(&cloud, m, 11).unwrap();
        let index = build_knn_index(&cloud).unwrap();
        let s = compute_spfh(&cloud, &index, 0, m, 11).unwrap();
        for i in 0..n {
            let nbrs = index.knn_query(i, m, true).unwrap();
            let factor =
                1.0 + nbrs.distances.iter().map(|d| 1.0 / d).sum::<f64>() / m as f64;
            for k in 0..33 {
                assert!((f[[i, k]] - factor * s.values()[k]).abs() < 1e-9);
                if s.values()[k] == 0.0 {
                    assert_eq!(f[[i, k]], 0.0);
                }
            }
        }
    }

    #[test]
    fn fpfh_matches_brute_force_oracle() {
        let cloud = random_cloud(120, 77);
        let m = 12;
        let bins = 11;
        let f = compute_fpfh(&cloud, m, bins).unwrap();

        // Oracle: naive re-implementation straight from the weighting
        // formula, with brute-force neighborhoods.
        let brute_neighbors = |i: usize| -> Vec<(usize, f64)> {
            let mut d: Vec<(f64, usize)> = cloud
                .points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, p)| ((p - cloud.points[i]).norm(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(m).map(|(dist, j)| (j, dist)).collect()
        };
        let spfh_of = |i: usize| -> Vec<f64> {
            let nbrs: Vec<usize> = brute_neighbors(i).iter().map(|&(j, _)| j).collect();
            spfh_from_neighbors(&cloud, i, &nbrs, bins)
                .unwrap()
                .values()
                .to_vec()
        };
        for i in 0..cloud.len() {
            let mut expected = spfh_of(i);
            for (j, dist) in brute_neighbors(i) {
                let w = 1.0 / (m as f64 * dist);
                for (e, v) in expected.iter_mut().zip(spfh_of(j)) {
                    *e += w * v;
                }
            }
            for k in 0..3 * bins {
                assert!(
                    (f[[i, k]] - expected[k]).abs() < 1e-9,
                    "mismatch at point {i} bin {k}"
                );
            }
        }
    }

    #[test]
    fn fpfh_is_rigid_invariant() {
        let cloud = random_cloud(80, 9);
        let m = 10;
        let base = compute_fpfh(&cloud, m, 11).unwrap();
        let rot = Rotation3::from_euler_angles(0.7, -0.3, 1.9);
        let moved = cloud.rigid_transformed(&rot, &Vector3::new(4.0, -2.0, 9.0));
        let transformed = compute_fpfh(&moved, m, 11).unwrap();
        for (a, b) in base.iter().zip(transformed.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_term_scales_inversely_with_cloud_scale() {
        let cloud = random_cloud(60, 13);
        let m = 8;
        let bins = 11;
        let base = compute_fpfh(&cloud, m, bins).unwrap();
        // A power-of-two scale keeps every float operation in the weighted
        // term exactly divided by the scale.
        let scale = 4.0;
        let scaled_cloud = PointCloud {
            points: cloud.points.iter().map(|p| p * scale).collect(),
            normals: cloud.normals.clone(),
            grid_index: None,
        };
        let scaled = compute_fpfh(&scaled_cloud, m, bins).unwrap();

        let index = build_knn_index(&cloud).unwrap();
        let spfhs: Vec<SpfhHistogram> = (0..cloud.len())
            .map(|i| compute_spfh(&cloud, &index, i, m, bins).unwrap())
            .collect();
        for i in 0..cloud.len() {
            let nbrs = index.knn_query(i, m, true).unwrap();
            let weighted = weighted_neighbor_term(&spfhs, &nbrs, m, 3 * bins);
            for k in 0..3 * bins {
                // The descriptor is SPFH plus the weighted term, and the
                // weighted term scales by exactly 1/scale.
                assert_eq!(base[[i, k]], spfhs[i].values()[k] + weighted[k]);
                assert_eq!(
                    scaled[[i, k]],
                    spfhs[i].values()[k] + weighted[k] / scale
                );
            }
        }
    }

    #[test]
    fn descriptors_are_non_negative_and_finite() {
        let f = compute_fpfh(&random_cloud(64, 2), 9, 11).unwrap();
        assert!(f.iter().all(|&v| v.is_finite() && v >= 0.0));
    }
}
