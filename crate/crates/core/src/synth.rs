//! Procedural single-view test shapes with implanted defects and exact
//! ground-truth masks.
//!
//! Shapes are sampled on the sensor-visible (upper) side so that the
//! pipeline's z-projection and sensor-oriented normals behave as they do on
//! real single-view scans.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::io::{write_mask_pgm, write_ply};
use crate::preprocess::GridFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
    Torus,
    BumpyBlob,
}

impl ShapeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Torus => "torus",
            ShapeKind::BumpyBlob => "bumpy_blob",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Dent,
    Bump,
    Crack,
    MissingRegion,
    None,
}

impl DefectKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefectKind::Dent => "dent",
            DefectKind::Bump => "bump",
            DefectKind::Crack => "crack",
            DefectKind::MissingRegion => "missing_region",
            DefectKind::None => "none",
        }
    }
}

/// A defect parameterized on the surface: anchor direction `(u, v)` in
/// azimuth/polar coordinates, a 3D radius around the anchor point, and a
/// magnitude (displacement depth, or strip width for cracks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub center_uv: (f64, f64),
    pub radius: f64,
    pub depth: f64,
    pub seed: u64,
}

fn direction(u: f64, v: f64) -> Vector3<f64> {
    Vector3::new(v.sin() * u.cos(), v.sin() * u.sin(), v.cos())
}

/// Samples `n_points` on the visible-from-above side of the shape,
/// deterministically for a given seed. Analytic surface normals are
/// attached (radial for the bumpy blob).
pub fn make_shape(kind: ShapeKind, n_points: usize, seed: u64) -> PointCloud {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    match kind {
        ShapeKind::Sphere => {
            for _ in 0..n_points {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let z: f64 = rng.random_range(0.0..=1.0);
                let v = z.acos();
                let d = direction(u, v);
                points.push(d);
                normals.push(d);
            }
        }
        ShapeKind::Ellipsoid => {
            let (a, b, c) = (1.0, 0.8, 0.6);
            for _ in 0..n_points {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let z: f64 = rng.random_range(0.0..=1.0);
                let d = direction(u, z.acos());
                points.push(Vector3::new(a * d.x, b * d.y, c * d.z));
                normals.push(Vector3::new(d.x / a, d.y / b, d.z / c).normalize());
            }
        }
        ShapeKind::Torus => {
            let (big_r, small_r) = (1.0, 0.35);
            for _ in 0..n_points {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::PI);
                let tube = Vector3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
                points.push(Vector3::new(
                    (big_r + small_r * v.cos()) * u.cos(),
                    (big_r + small_r * v.cos()) * u.sin(),
                    small_r * v.sin(),
                ));
                normals.push(tube);
            }
        }
        ShapeKind::BumpyBlob => {
            // Low-frequency radial modulation: three harmonics, total
            // amplitude at most 10% of the radius.
            let amps: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.0333)).collect();
            let phases: Vec<f64> = (0..3)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            for _ in 0..n_points {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let z: f64 = rng.random_range(0.0..=1.0);
                let v = z.acos();
                let d = direction(u, v);
                let mut rho = 1.0;
                for h in 0..3 {
                    rho += amps[h]
                        * v.sin().powi(h as i32 + 1)
                        * ((h + 1) as f64 * u + phases[h]).cos();
                }
                points.push(rho * d);
                normals.push(d);
            }
        }
    }
    PointCloud {
        points,
        normals: Some(normals),
        grid_index: None,
    }
}

/// Defect implantation output: the edited cloud, the ground-truth mask over
/// the grid, and the grid frame the mask lives on (the xy bounding box of
/// the edited cloud).
#[derive(Debug, Clone)]
pub struct ImplantResult {
    pub cloud: PointCloud,
    pub mask: Array2<bool>,
    pub frame: GridFrame,
}

fn occupancy(cloud: &PointCloud, frame: &GridFrame) -> Array2<bool> {
    let mut occ = Array2::from_elem((frame.rows, frame.cols), false);
    for p in &cloud.points {
        let (r, c) = frame.cell_of(p.x, p.y);
        occ[[r, c]] = true;
    }
    occ
}

/// Implants the defect and derives the exact ground-truth mask on a
/// `rows x cols` grid over the edited cloud's footprint.
///
/// Dents and bumps displace points within the radius along their normals
/// with a smooth `(1 - t^2)^2` falloff; cracks remove a thin strip through
/// the anchor and pull the strip edges inward; missing regions delete every
/// point within the radius. Masks mark cells containing affected points,
/// except for missing regions where they mark cells formerly occupied and
/// now empty.
pub fn implant_defect(
    cloud: &PointCloud,
    spec: &DefectSpec,
    rows: usize,
    cols: usize,
) -> Result<ImplantResult> {
    cloud.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("mask grid must be non-empty".into()));
    }
    if spec.kind == DefectKind::None {
        let frame = GridFrame::from_cloud(cloud, rows, cols);
        return Ok(ImplantResult {
            cloud: cloud.clone(),
            mask: Array2::from_elem((rows, cols), false),
            frame,
        });
    }
    if !(spec.radius > 0.0 && spec.radius.is_finite()) {
        return Err(Error::InvalidParameter(
            "defect radius must be positive".into(),
        ));
    }
    if !(spec.depth >= 0.0 && spec.depth.is_finite()) {
        return Err(Error::InvalidParameter(
            "defect depth must be non-negative".into(),
        ));
    }
    let normals = cloud.require_normals()?;

    // Anchor: the cloud point best aligned with the requested direction.
    let d = direction(spec.center_uv.0, spec.center_uv.1);
    let anchor = cloud
        .points
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let ca = a.normalize().dot(&d);
            let cb = b.normalize().dot(&d);
            ca.total_cmp(&cb)
        })
        .map(|(i, _)| i)
        .expect("validated non-empty");
    let center = cloud.points[anchor];

    let affected: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| (*p - center).norm() < spec.radius)
        .map(|(i, _)| i)
        .collect();
    if affected.len() * 2 > cloud.len() {
        return Err(Error::DefectTooLarge {
            percent: 100.0 * affected.len() as f64 / cloud.len() as f64,
        });
    }
    let is_affected = {
        let mut flags = vec![false; cloud.len()];
        for &i in &affected {
            flags[i] = true;
        }
        flags
    };

    let falloff = |dist: f64| -> f64 {
        let t = dist / spec.radius;
        let s = 1.0 - t * t;
        s * s
    };

    let mut out_points = Vec::with_capacity(cloud.len());
    let mut out_normals = Vec::with_capacity(cloud.len());
    // Post-positions of displaced points and pre-positions of removed
    // points, for the mask.
    let mut touched = Vec::new();
    match spec.kind {
        DefectKind::Dent | DefectKind::Bump => {
            let sign = if spec.kind == DefectKind::Dent {
                -1.0
            } else {
                1.0
            };
            for (i, p) in cloud.points.iter().enumerate() {
                if is_affected[i] {
                    let dist = (p - center).norm();
                    let moved = p + sign * spec.depth * falloff(dist) * normals[i];
                    touched.push(moved);
                    out_points.push(moved);
                } else {
                    out_points.push(*p);
                }
                out_normals.push(normals[i]);
            }
        }
        DefectKind::MissingRegion => {
            for (i, p) in cloud.points.iter().enumerate() {
                if !is_affected[i] {
                    out_points.push(*p);
                    out_normals.push(normals[i]);
                }
            }
        }
        DefectKind::Crack => {
            // A narrow strip is removed; the flanks sink inward so the rims
            // stay visible to local geometry.
            let width = (0.3 * spec.depth).max(spec.radius * 0.02);
            let n_c = normals[anchor];
            let mut rng = StdRng::seed_from_u64(spec.seed);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            // Orthonormal tangent basis at the anchor.
            let helper = if n_c.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let e1 = (helper - n_c * helper.dot(&n_c)).normalize();
            let e2 = n_c.cross(&e1);
            let tangent = angle.cos() * e1 + angle.sin() * e2;
            let flank = 3.0 * width;
            for (i, p) in cloud.points.iter().enumerate() {
                if is_affected[i] {
                    let q = p - center;
                    let lateral =
                        (q - tangent * q.dot(&tangent) - n_c * q.dot(&n_c)).norm();
                    if lateral < width / 2.0 {
                        touched.push(*p); // removed: pre-position marks the cell
                        continue;
                    }
                    if lateral < flank {
                        let pull =
                            spec.depth * (1.0 - lateral / flank) * falloff(q.norm());
                        let moved = p - pull * normals[i];
                        touched.push(moved);
                        out_points.push(moved);
                        out_normals.push(normals[i]);
                        continue;
                    }
                }
                out_points.push(*p);
                out_normals.push(normals[i]);
            }
        }
        DefectKind::None => unreachable!("handled above"),
    }
    if out_points.is_empty() {
        return Err(Error::EmptyForeground);
    }

    let post = PointCloud {
        points: out_points,
        normals: Some(out_normals),
        grid_index: None,
    };
    let frame = GridFrame::from_cloud(&post, rows, cols);
    let mask = match spec.kind {
        DefectKind::MissingRegion => {
            let pre_occ = occupancy(cloud, &frame);
            let post_occ = occupancy(&post, &frame);
            let mut mask = Array2::from_elem((rows, cols), false);
            for r in 0..rows {
                for c in 0..cols {
                    mask[[r, c]] = pre_occ[[r, c]] && !post_occ[[r, c]];
                }
            }
            mask
        }
        _ => {
            let mut mask = Array2::from_elem((rows, cols), false);
            for p in &touched {
                let (r, c) = frame.cell_of(p.x, p.y);
                mask[[r, c]] = true;
            }
            mask
        }
    };
    Ok(ImplantResult {
        cloud: post,
        mask,
        frame,
    })
}

/// How many samples of one defect kind a split contains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectCount {
    pub kind: DefectKind,
    pub count: usize,
}

/// Dataset layout and defect parameters for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub shape: ShapeKind,
    pub points_per_cloud: usize,
    pub seed: u64,
    pub train: usize,
    pub validation_normal: usize,
    pub validation_defective: Vec<DefectCount>,
    pub test_normal: usize,
    pub test_defective: Vec<DefectCount>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub defect_radius: f64,
    pub defect_depth: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let kinds = [
            DefectKind::Dent,
            DefectKind::Bump,
            DefectKind::Crack,
            DefectKind::MissingRegion,
        ];
        Self {
            shape: ShapeKind::BumpyBlob,
            points_per_cloud: 1024,
            seed: 7,
            train: 50,
            validation_normal: 2,
            validation_defective: kinds
                .iter()
                .map(|&kind| DefectCount { kind, count: 2 })
                .collect(),
            test_normal: 4,
            test_defective: kinds
                .iter()
                .map(|&kind| DefectCount { kind, count: 4 })
                .collect(),
            grid_rows: 64,
            grid_cols: 64,
            defect_radius: 0.3,
            defect_depth: 0.18,
            noise_sigma: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 64 {
            return Err(Error::Config(
                "synth.points_per_cloud must be at least 64".into(),
            ));
        }
        if self.train < 1 {
            return Err(Error::Config("synth.train must be at least 1".into()));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("synth grid must be non-empty".into()));
        }
        if !(self.defect_radius > 0.0 && self.defect_depth >= 0.0) {
            return Err(Error::Config(
                "synth defect radius/depth must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("synth.noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub path: String,
    pub split: String,
    pub shape: String,
    pub defect_kind: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 step keeps per-sample streams independent.
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn jitter(cloud: &mut PointCloud, sigma: f64, rng: &mut StdRng) {
    if sigma <= 0.0 {
        return;
    }
    for p in &mut cloud.points {
        for a in 0..3 {
            p[a] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Generates a dataset on disk: `train/`, `validation/`, and `test/`
/// directories of PLY clouds with PGM ground-truth masks, plus
/// `manifest.json`. The train split is defect-free.
pub fn make_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut counter = 0u64;

    let splits: Vec<(&str, Vec<DefectKind>)> = vec![
        ("train", vec![DefectKind::None; cfg.train]),
        ("validation", {
            let mut kinds = vec![DefectKind::None; cfg.validation_normal];
            for dc in &cfg.validation_defective {
                kinds.extend(std::iter::repeat(dc.kind).take(dc.count));
            }
            kinds
        }),
        ("test", {
            let mut kinds = vec![DefectKind::None; cfg.test_normal];
            for dc in &cfg.test_defective {
                kinds.extend(std::iter::repeat(dc.kind).take(dc.count));
            }
            kinds
        }),
    ];

    for (split, kinds) in &splits {
        std::fs::create_dir_all(out_dir.join(split))?;
        for (idx, &kind) in kinds.iter().enumerate() {
            let sample_seed = mix_seed(cfg.seed, counter);
            counter += 1;
            let mut cloud = make_shape(cfg.shape, cfg.points_per_cloud, sample_seed);
            let mut rng = StdRng::seed_from_u64(mix_seed(sample_seed, 1));
            jitter(&mut cloud, cfg.noise_sigma, &mut rng);
            let spec = DefectSpec {
                kind,
                center_uv: (
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.25..1.1),
                ),
                radius: cfg.defect_radius * rng.random_range(0.8..1.2),
                depth: cfg.defect_depth * rng.random_range(0.8..1.2),
                seed: mix_seed(sample_seed, 2),
            };
            let implanted = implant_defect(&cloud, &spec, cfg.grid_rows, cfg.grid_cols)?;

            let stem = format!("{idx:04}_{}", kind.as_str());
            let rel_ply = format!("{split}/{stem}.ply");
            let rel_mask = format!("{split}/{stem}.mask.pgm");
            // Scanner output carries coordinates only.
            let mut written = implanted.cloud.clone();
            written.normals = None;
            write_ply(&out_dir.join(&rel_ply), &written)?;
            write_mask_pgm(&out_dir.join(&rel_mask), &implanted.mask)?;
            samples.push(ManifestSample {
                path: rel_ply,
                split: split.to_string(),
                shape: cfg.shape.as_str().to_string(),
                defect_kind: kind.as_str().to_string(),
                mask_path: rel_mask,
            });
        }
    }

    let manifest = Manifest {
        version: 1,
        seed: cfg.seed,
        samples,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )?;
    Ok(manifest)
}
