//! Background-plane removal and grid downsampling.

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// A plane `a x + b y + c z + d = 0` with unit normal `(a, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_count: usize,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Plane through three points, or `None` when they are (near-)collinear.
pub fn plane_from_triplet(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<(Vector3<f64>, f64)> {
    let ab = b - a;
    let ac = c - a;
    let cross = ab.cross(&ac);
    let scale = ab.norm() * ac.norm();
    if scale <= 0.0 || cross.norm() <= 1e-12 * scale {
        return None;
    }
    let normal = cross.normalize();
    Some((normal, -normal.dot(a)))
}

/// Estimates the dominant plane by sampling `iterations` random 3-point
/// hypotheses and keeping the one with the most inliers (absolute signed
/// distance within `distance_threshold`). Deterministic given `seed`; the
/// first hypothesis reaching the best count wins.
pub fn ransac_plane(
    cloud: &PointCloud,
    iterations: usize,
    distance_threshold: f64,
    seed: u64,
) -> Result<PlaneModel> {
    cloud.validate()?;
    if cloud.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "plane estimation needs at least 3 points".into(),
        ));
    }
    if iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be positive".into()));
    }
    if !(distance_threshold.is_finite() && distance_threshold >= 0.0) {
        return Err(Error::InvalidParameter(
            "distance threshold must be a non-negative finite value".into(),
        ));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut best: Option<PlaneModel> = None;
    for _ in 0..iterations {
        let (i, j, k) = sample_triplet(&mut rng, cloud.len());
        let Some((normal, offset)) =
            plane_from_triplet(&cloud.points[i], &cloud.points[j], &cloud.points[k])
        else {
            continue;
        };
        let inliers = cloud
            .points
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= distance_threshold)
            .count();
        if best.as_ref().map_or(true, |b| inliers > b.inlier_count) {
            best = Some(PlaneModel {
                normal,
                offset,
                inlier_count: inliers,
            });
        }
    }
    best.ok_or_else(|| {
        Error::DegenerateGeometry("no non-collinear 3-point sample found".into())
    })
}

/// Draws three distinct indices, resampling duplicates. Shared with the test
/// oracle so both sides see the same hypothesis stream.
pub fn sample_triplet(rng: &mut StdRng, n: usize) -> (usize, usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n);
    while j == i {
        j = rng.random_range(0..n);
    }
    let mut k = rng.random_range(0..n);
    while k == i || k == j {
        k = rng.random_range(0..n);
    }
    (i, j, k)
}

/// Keeps points strictly more than `margin` above the plane, measured along
/// the plane normal oriented toward the cloud centroid.
pub fn remove_background(
    cloud: &PointCloud,
    plane: &PlaneModel,
    margin: f64,
) -> Result<PointCloud> {
    cloud.validate()?;
    let centroid_side = plane.signed_distance(&cloud.centroid());
    let sign = if centroid_side < 0.0 { -1.0 } else { 1.0 };
    let mut points = Vec::new();
    let mut normals = cloud.normals.as_ref().map(|_| Vec::new());
    for (i, p) in cloud.points.iter().enumerate() {
        if sign * plane.signed_distance(p) > margin {
            points.push(*p);
            if let (Some(out), Some(ns)) = (&mut normals, &cloud.normals) {
                out.push(ns[i]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok(PointCloud {
        points,
        normals,
        grid_index: None,
    })
}

/// Geometry of the 2D raster shared by downsampling, score grids, and
/// ground-truth masks: the xy bounding box split into `rows x cols` cells.
/// Rows bin the y axis, columns the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub rows: usize,
    pub cols: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub cell_w: f64,
    pub cell_h: f64,
}

impl GridFrame {
    pub fn from_bounds(
        min: (f64, f64),
        max: (f64, f64),
        rows: usize,
        cols: usize,
    ) -> Self {
        let span_x = (max.0 - min.0).max(0.0);
        let span_y = (max.1 - min.1).max(0.0);
        Self {
            rows,
            cols,
            x_min: min.0,
            y_min: min.1,
            cell_w: if span_x > 0.0 { span_x / cols as f64 } else { 1.0 },
            cell_h: if span_y > 0.0 { span_y / rows as f64 } else { 1.0 },
        }
    }

    pub fn from_cloud(cloud: &PointCloud, rows: usize, cols: usize) -> Self {
        let (lo, hi) = cloud.bounds();
        Self::from_bounds((lo.x, lo.y), (hi.x, hi.y), rows, cols)
    }

    /// Cell containing `(x, y)`, clamped to the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.x_min) / self.cell_w).floor();
        let row = ((y - self.y_min) / self.cell_h).floor();
        (
            (row.max(0.0) as usize).min(self.rows - 1),
            (col.max(0.0) as usize).min(self.cols - 1),
        )
    }

    /// Center of cell `(row, col)` in the xy plane.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_w,
            self.y_min + (row as f64 + 0.5) * self.cell_h,
        )
    }
}

/// Downsamples to at most one point per occupied raster cell: the point
/// nearest the cell center in xy, ties by lower point index. Representatives
/// carry their `(row, col)` in `grid_index`; output order is row-major.
pub fn grid_downsample(
    cloud: &PointCloud,
    rows: usize,
    cols: usize,
) -> Result<(PointCloud, GridFrame)> {
    cloud.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(
            "grid must have at least one row and one column".into(),
        ));
    }
    let frame = GridFrame::from_cloud(cloud, rows, cols);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; rows * cols];
    for (i, p) in cloud.points.iter().enumerate() {
        let (r, c) = frame.cell_of(p.x, p.y);
        let (cx, cy) = frame.cell_center(r, c);
        let d2 = (p.x - cx).powi(2) + (p.y - cy).powi(2);
        let slot = &mut best[r * cols + c];
        match slot {
            Some((bd, _)) if *bd <= d2 => {}
            _ => *slot = Some((d2, i)),
        }
    }
    let mut points = Vec::new();
    let mut normals = cloud.normals.as_ref().map(|_| Vec::new());
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if let Some((_, i)) = best[r * cols + c] {
                points.push(cloud.points[i]);
                if let (Some(out), Some(ns)) = (&mut normals, &cloud.normals) {
                    out.push(ns[i]);
                }
                cells.push((r, c));
            }
        }
    }
    Ok((
        PointCloud {
            points,
            normals,
            grid_index: Some(cells),
        },
        frame,
    ))
}
