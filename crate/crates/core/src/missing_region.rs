//! Branch-2 scoring: 2D projection, distance-to-input scores over the
//! reconstruction, density-based denoising, and mask dilation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::preprocess::GridFrame;

/// Points projected onto a plane, keeping back-references to the source
/// cloud indices.
#[derive(Debug, Clone)]
pub struct ProjectedCloud {
    pub points: Vec<[f64; 2]>,
    pub source: Vec<usize>,
}

/// Axis dropped by the projection; the sensor axis is `z` by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionAxis {
    X,
    Y,
    #[default]
    Z,
}

/// Boolean raster aligned with the score-grid geometry.
pub type RegionMask = Array2<bool>;

/// Drops the z coordinate, preserving order.
pub fn project_xy(cloud: &PointCloud) -> ProjectedCloud {
    project_axis(cloud, ProjectionAxis::Z)
}

pub fn project_axis(cloud: &PointCloud, axis: ProjectionAxis) -> ProjectedCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| match axis {
            ProjectionAxis::X => [p.y, p.z],
            ProjectionAxis::Y => [p.x, p.z],
            ProjectionAxis::Z => [p.x, p.y],
        })
        .collect();
    ProjectedCloud {
        points,
        source: (0..cloud.len()).collect(),
    }
}

/// Squared 2D distance from each reconstructed point to its nearest input
/// point.
pub fn score_missing(rec: &ProjectedCloud, input: &ProjectedCloud) -> Result<Vec<f64>> {
    if rec.points.is_empty() || input.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tree = KdTree::<2>::build(input.points.clone());
    Ok(rec
        .points
        .iter()
        .map(|p| tree.nearest(p).expect("non-empty input").1)
        .collect())
}

/// Density-clustering parameters for denoising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

/// Classic density clustering over 2D points. Returns per-point labels:
/// cluster ids from 0, or -1 for noise. Neighborhoods are closed balls and
/// include the point itself.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<i32> {
    const UNVISITED: i32 = -2;
    let n = points.len();
    let eps2 = eps * eps;
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                dx * dx + dy * dy <= eps2
            })
            .collect()
    };
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let seed = region(i);
        if seed.len() < min_pts {
            labels[i] = -1;
            continue;
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = seed.into();
        while let Some(j) = queue.pop_front() {
            if labels[j] == -1 {
                labels[j] = cluster; // border point claimed by the cluster
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let nbrs = region(j);
            if nbrs.len() >= min_pts {
                queue.extend(nbrs);
            }
        }
        cluster += 1;
    }
    labels
}

/// Flags points scoring above `score_threshold`, clusters them with DBSCAN,
/// drops noise points, and rasterizes the survivors onto the grid.
pub fn denoise_scores(
    points: &ProjectedCloud,
    scores: &[f64],
    score_threshold: f64,
    params: DbscanParams,
    frame: &GridFrame,
) -> Result<RegionMask> {
    if scores.len() != points.points.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} scores for {} points",
            scores.len(),
            points.points.len()
        )));
    }
    if !(params.eps > 0.0 && params.eps.is_finite()) {
        return Err(Error::InvalidParameter("DBSCAN eps must be positive".into()));
    }
    if params.min_pts == 0 {
        return Err(Error::InvalidParameter(
            "DBSCAN min_pts must be at least 1".into(),
        ));
    }
    let flagged: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] > score_threshold)
        .collect();
    let mut mask = Array2::from_elem((frame.rows, frame.cols), false);
    if flagged.is_empty() {
        return Ok(mask);
    }
    let flagged_points: Vec<[f64; 2]> = flagged.iter().map(|&i| points.points[i]).collect();
    let labels = dbscan(&flagged_points, params.eps, params.min_pts);
    for (k, &i) in flagged.iter().enumerate() {
        if labels[k] >= 0 {
            let p = points.points[i];
            let (r, c) = frame.cell_of(p[0], p[1]);
            mask[[r, c]] = true;
        }
    }
    Ok(mask)
}

/// Morphological dilation with a square structuring element of half-width
/// `radius`, clipped at the raster borders.
pub fn dilate_region(mask: &RegionMask, radius: usize) -> RegionMask {
    if radius == 0 {
        return mask.clone();
    }
    let (rows, cols) = mask.dim();
    let mut out = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            if !mask[[r, c]] {
                continue;
            }
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius).min(rows - 1);
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(cols - 1);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    out[[rr, cc]] = true;
                }
            }
        }
    }
    out
}
