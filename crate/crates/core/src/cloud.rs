//! Point-cloud container and basic geometric helpers.

use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of stored normals.
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// An ordered set of 3D points with optional per-point normals and optional
/// provenance cells assigned by grid downsampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub grid_index: Option<Vec<(usize, usize)>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            normals: None,
            grid_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the structural invariants: non-empty, finite coordinates, and
    /// unit-length normals aligned with the points when present.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFiniteCoordinate(i));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.points.len() {
                return Err(Error::InvalidNormals(format!(
                    "{} normals for {} points",
                    normals.len(),
                    self.points.len()
                )));
            }
            for (i, n) in normals.iter().enumerate() {
                let norm = n.norm();
                if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORMAL_TOL {
                    return Err(Error::InvalidNormals(format!(
                        "normal {i} has norm {norm}"
                    )));
                }
            }
        }
        if let Some(cells) = &self.grid_index {
            if cells.len() != self.points.len() {
                return Err(Error::GeometryMismatch(format!(
                    "{} grid cells for {} points",
                    cells.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    pub fn require_normals(&self) -> Result<&[Vector3<f64>]> {
        self.normals.as_deref().ok_or(Error::NormalsRequired)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        for p in &self.points {
            sum += p;
        }
        sum / self.points.len().max(1) as f64
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Points as an N x 3 matrix, row per point.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.points.len(), 3));
        for (i, p) in self.points.iter().enumerate() {
            m[[i, 0]] = p.x;
            m[[i, 1]] = p.y;
            m[[i, 2]] = p.z;
        }
        m
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::GeometryMismatch(format!(
                "expected 3 columns, got {}",
                m.ncols()
            )));
        }
        let points = m
            .rows()
            .into_iter()
            .map(|r| Vector3::new(r[0], r[1], r[2]))
            .collect();
        Ok(Self::from_points(points))
    }

    /// Applies `p -> R p + t` to every point and `R n` to every normal.
    pub fn rigid_transformed(
        &self,
        rotation: &Rotation3<f64>,
        translation: &Vector3<f64>,
    ) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| rotation * p + translation)
                .collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| rotation * n).collect()),
            grid_index: self.grid_index.clone(),
        }
    }
}
