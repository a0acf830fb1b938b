//! Fusing the two branches: rasterization onto a common grid, quantile-ratio
//! scale calibration with a grid search, one-class-SVM decision fusion, and
//! the mean/variance-matching baseline fusion.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::evaluation::{au_pro, pro_curve, GroundTruth};
use crate::missing_region::{denoise_scores, dilate_region, DbscanParams, ProjectedCloud};
use crate::ocsvm::{fit_ocsvm_with, median_heuristic_gamma, OcsvmModel};
use crate::preprocess::GridFrame;

/// Per-cell rasters for both branches plus the fused map. Unoccupied cells
/// hold score zero; cells occupied by neither branch are outside the
/// evaluation domain. `s2` is the branch-2 raster after denoise-and-dilate
/// masking; `s2_raw` keeps the unmasked values for scale calibration.
#[derive(Debug, Clone)]
pub struct ScoreGrid {
    pub frame: GridFrame,
    pub s1: Array2<f64>,
    pub s2: Array2<f64>,
    pub s2_raw: Array2<f64>,
    pub fused: Array2<f64>,
    pub occ1: Array2<bool>,
    pub occ2: Array2<bool>,
}

impl ScoreGrid {
    pub fn rows(&self) -> usize {
        self.s1.nrows()
    }

    pub fn cols(&self) -> usize {
        self.s1.ncols()
    }

    /// Evaluation domain: cells covered by at least one branch.
    pub fn domain(&self) -> Array2<bool> {
        let mut d = self.occ1.clone();
        d.zip_mut_with(&self.occ2, |a, &b| *a |= b);
        d
    }
}

/// Parameters for the branch-2 masking step of rasterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterizeParams {
    /// Points with branch-2 score above this are defect candidates.
    pub s2_threshold: f64,
    /// DBSCAN radius in units of grid cell width.
    pub eps_cells: f64,
    pub min_pts: usize,
    pub dilate_radius: usize,
}

/// Rasterizes per-point scores onto the grid: cell scores are the max over
/// the points falling in the cell. Branch-2 scores are kept only inside the
/// denoised-and-dilated defect mask; other cells are zeroed.
pub fn rasterize_scores(
    test_cloud: &PointCloud,
    s1: &[f64],
    rec: &ProjectedCloud,
    s2: &[f64],
    frame: &GridFrame,
    params: &RasterizeParams,
) -> Result<ScoreGrid> {
    let cells = test_cloud
        .grid_index
        .as_ref()
        .ok_or_else(|| Error::GeometryMismatch("test cloud lacks grid_index".into()))?;
    if s1.len() != test_cloud.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} branch-1 scores for {} test points",
            s1.len(),
            test_cloud.len()
        )));
    }
    if s2.len() != rec.points.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} branch-2 scores for {} reconstructed points",
            s2.len(),
            rec.points.len()
        )));
    }
    let (rows, cols) = (frame.rows, frame.cols);
    let mut s1_grid = Array2::zeros((rows, cols));
    let mut occ1 = Array2::from_elem((rows, cols), false);
    for (&(r, c), &score) in cells.iter().zip(s1) {
        if r >= rows || c >= cols {
            return Err(Error::GeometryMismatch(format!(
                "grid_index ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        if !occ1[[r, c]] || score > s1_grid[[r, c]] {
            s1_grid[[r, c]] = score;
        }
        occ1[[r, c]] = true;
    }

    let mut s2_raw = Array2::zeros((rows, cols));
    let mut occ2 = Array2::from_elem((rows, cols), false);
    for (p, &score) in rec.points.iter().zip(s2) {
        let (r, c) = frame.cell_of(p[0], p[1]);
        if !occ2[[r, c]] || score > s2_raw[[r, c]] {
            s2_raw[[r, c]] = score;
        }
        occ2[[r, c]] = true;
    }

    let eps = params.eps_cells * frame.cell_w.max(frame.cell_h);
    let mask = denoise_scores(
        rec,
        s2,
        params.s2_threshold,
        DbscanParams {
            eps,
            min_pts: params.min_pts,
        },
        frame,
    )?;
    let mask = dilate_region(&mask, params.dilate_radius);
    let mut s2_grid = s2_raw.clone();
    for (&keep, v) in mask.iter().zip(s2_grid.iter_mut()) {
        if !keep {
            *v = 0.0;
        }
    }

    Ok(ScoreGrid {
        frame: frame.clone(),
        s1: s1_grid,
        s2: s2_grid,
        s2_raw,
        fused: Array2::zeros((rows, cols)),
        occ1,
        occ2,
    })
}

/// Linear-interpolation quantile over unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// The 21-point quantile grid 0.00, 0.05, ..., 1.00.
pub fn default_quantile_grid() -> Vec<f64> {
    (0..21).map(|i| i as f64 * 0.05).collect()
}

/// Solver settings for the fusion OCSVM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcsvmSettings {
    pub nu: f64,
    /// Fixed bandwidth, or `None` for the median heuristic.
    pub gamma: Option<f64>,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for OcsvmSettings {
    fn default() -> Self {
        Self {
            nu: 0.1,
            gamma: None,
            max_pairs: 20_000,
            seed: 0,
        }
    }
}

/// Mean and standard deviation of each branch over normal validation cells,
/// for the baseline fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

/// Computes per-branch score statistics over the domain cells of the given
/// grids (population standard deviation). Branch 2 is read pre-masking:
/// masked rasters of defect-free samples are identically zero.
pub fn validation_stats(grids: &[&ScoreGrid]) -> Result<ValidationStats> {
    let mut v1 = Vec::new();
    let mut v2 = Vec::new();
    for g in grids {
        let domain = g.domain();
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                if domain[[r, c]] {
                    v1.push(g.s1[[r, c]]);
                    v2.push(g.s2_raw[[r, c]]);
                }
            }
        }
    }
    if v1.is_empty() {
        return Err(Error::EmptyInput);
    }
    let stat = |v: &[f64]| -> (f64, f64) {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
        (mu, var.sqrt())
    };
    let (mu1, sigma1) = stat(&v1);
    let (mu2, sigma2) = stat(&v2);
    Ok(ValidationStats {
        mu1,
        sigma1,
        mu2,
        sigma2,
    })
}

/// Result of the quantile-ratio grid search.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub k_star: f64,
    pub q_star: f64,
    pub model: OcsvmModel,
    pub au_pro: f64,
}

/// Grid-searches the scale coefficient `k = Q_q(s2) / Q_q(s1)` over the
/// quantile grid: for each candidate, an OCSVM is fit on normal-sample cell
/// pairs `(k s1, s2)` and the candidate maximizing validation AU-PRO wins,
/// ties to the smaller quantile. Quantiles with a non-positive value in
/// either branch are skipped.
pub fn calibrate_k(
    samples: &[(ScoreGrid, GroundTruth)],
    quantiles: &[f64],
    settings: &OcsvmSettings,
    aupro_limit: f64,
) -> Result<CalibrationOutcome> {
    if samples.is_empty() {
        return Err(Error::CalibrationDegenerate("no validation grids".into()));
    }
    let normal: Vec<&ScoreGrid> = samples
        .iter()
        .filter(|(_, t)| !t.has_defects())
        .map(|(g, _)| g)
        .collect();
    if normal.is_empty() {
        return Err(Error::CalibrationDegenerate(
            "no normal validation samples to fit the boundary on".into(),
        ));
    }
    if !samples.iter().any(|(_, t)| t.has_defects()) {
        return Err(Error::CalibrationDegenerate(
            "no defective validation samples to score the grid search on".into(),
        ));
    }

    // Pools for the quantile ratio: branch-1 cell scores and the unmasked
    // branch-2 cell scores (masking zeroes most cells on defect-free data,
    // which would empty every quantile).
    let mut s1_pool = Vec::new();
    let mut s2_pool = Vec::new();
    for (g, _) in samples {
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                if g.occ1[[r, c]] {
                    s1_pool.push(g.s1[[r, c]]);
                }
                if g.occ2[[r, c]] {
                    s2_pool.push(g.s2_raw[[r, c]]);
                }
            }
        }
    }
    if s1_pool.is_empty() || s2_pool.is_empty() {
        return Err(Error::CalibrationDegenerate(
            "a branch produced no occupied cells".into(),
        ));
    }
    s1_pool.sort_by(f64::total_cmp);
    s2_pool.sort_by(f64::total_cmp);

    let mut best: Option<CalibrationOutcome> = None;
    for &q in quantiles {
        let q1 = quantile_sorted(&s1_pool, q);
        let q2 = quantile_sorted(&s2_pool, q);
        if !(q1 > 0.0 && q2 > 0.0) {
            continue;
        }
        let k = q2 / q1;
        let outcome = evaluate_candidate(samples, &normal, k, q, settings, aupro_limit)?;
        if best.as_ref().map_or(true, |b| outcome.au_pro > b.au_pro) {
            best = Some(outcome);
        }
    }
    best.ok_or_else(|| {
        Error::CalibrationDegenerate(
            "every quantile candidate had a zero-valued branch quantile".into(),
        )
    })
}

fn evaluate_candidate(
    samples: &[(ScoreGrid, GroundTruth)],
    normal: &[&ScoreGrid],
    k: f64,
    q: f64,
    settings: &OcsvmSettings,
    aupro_limit: f64,
) -> Result<CalibrationOutcome> {
    let mut pairs = Vec::new();
    for g in normal {
        let domain = g.domain();
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                if domain[[r, c]] {
                    pairs.push([k * g.s1[[r, c]], g.s2[[r, c]]]);
                }
            }
        }
    }
    if pairs.len() < 8 {
        return Err(Error::CalibrationDegenerate(format!(
            "only {} normal cells available",
            pairs.len()
        )));
    }
    let gamma = settings
        .gamma
        .unwrap_or_else(|| median_heuristic_gamma(&pairs, settings.seed));
    let model = fit_ocsvm_with(&pairs, settings.nu, gamma, settings.seed, settings.max_pairs)?;

    let fused: Vec<(Array2<f64>, &GroundTruth)> = samples
        .iter()
        .map(|(g, t)| (fuse_scores(&model, k, g).fused, t))
        .collect();
    let curve_input: Vec<(&Array2<f64>, &GroundTruth)> =
        fused.iter().map(|(f, t)| (f, *t)).collect();
    let curve = pro_curve(&curve_input)?;
    let score = au_pro(&curve, aupro_limit)?;
    Ok(CalibrationOutcome {
        k_star: k,
        q_star: q,
        model,
        au_pro: score,
    })
}

/// Fused map: `-g((k s1, s2))` on domain cells, the domain minimum
/// elsewhere. Higher values are more anomalous.
pub fn fuse_scores(model: &OcsvmModel, k_star: f64, grid: &ScoreGrid) -> ScoreGrid {
    let mut out = grid.clone();
    let domain = grid.domain();
    let mut min_fused = f64::INFINITY;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if domain[[r, c]] {
                let v = -model.decision([k_star * grid.s1[[r, c]], grid.s2[[r, c]]]);
                out.fused[[r, c]] = v;
                min_fused = min_fused.min(v);
            }
        }
    }
    if !min_fused.is_finite() {
        min_fused = 0.0;
    }
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if !domain[[r, c]] {
                out.fused[[r, c]] = min_fused;
            }
        }
    }
    out
}

/// Mean/variance-matching baseline: rescales branch 2 to branch 1's
/// distribution and sums the two maps.
pub fn baseline_fuse(
    s1: &Array2<f64>,
    s2: &Array2<f64>,
    stats: &ValidationStats,
) -> Result<Array2<f64>> {
    if s1.dim() != s2.dim() {
        return Err(Error::GeometryMismatch(format!(
            "baseline fusion shapes {:?} vs {:?}",
            s1.dim(),
            s2.dim()
        )));
    }
    if stats.sigma2 <= 0.0 {
        return Err(Error::DegenerateStats);
    }
    let w = stats.sigma1 / stats.sigma2;
    let b = stats.mu1 - w * stats.mu2;
    let mut out = s1.clone();
    out.zip_mut_with(s2, |a, &v| *a += w * v + b);
    Ok(out)
}

/// Everything needed to fuse at inference time, persisted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionCalibration {
    pub k_star: f64,
    pub q_star: f64,
    pub s2_threshold: f64,
    pub validation_au_pro: f64,
    pub model: OcsvmModel,
    pub stats: ValidationStats,
    pub sample_ids: Vec<String>,
    pub seed: u64,
}

impl FusionCalibration {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("serializable calibration"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("calibration file: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn frame(rows: usize, cols: usize) -> GridFrame {
        GridFrame::from_bounds((0.0, 0.0), (1.0, 1.0), rows, cols)
    }

    fn cloud_with_cells(cells: &[(usize, usize)], f: &GridFrame) -> PointCloud {
        let mut cloud = PointCloud::from_points(
            cells
                .iter()
                .map(|&(r, c)| {
                    let (x, y) = f.cell_center(r, c);
                    Vector3::new(x, y, 0.5)
                })
                .collect(),
        );
        cloud.grid_index = Some(cells.to_vec());
        cloud
    }

    fn no_mask_params() -> RasterizeParams {
        RasterizeParams {
            s2_threshold: f64::INFINITY,
            eps_cells: 2.0,
            min_pts: 1,
            dilate_radius: 0,
        }
    }

    #[test]
    fn s1_rasterizes_one_point_per_cell() {
        let f = frame(2, 2);
        let cloud = cloud_with_cells(&[(0, 0), (0, 1), (1, 0), (1, 1)], &f);
        let rec = ProjectedCloud {
            points: vec![],
            source: vec![],
        };
        let grid = rasterize_scores(
            &cloud,
            &[1.0, 2.0, 3.0, 4.0],
            &rec,
            &[],
            &f,
            &no_mask_params(),
        )
        .unwrap();
        assert_eq!(grid.s1[[0, 0]], 1.0);
        assert_eq!(grid.s1[[1, 1]], 4.0);
        assert!(grid.s2.iter().all(|&v| v == 0.0));
        assert!(grid.occ1.iter().all(|&b| b));
        assert!(grid.occ2.iter().all(|&b| !b));
    }

    #[test]
    fn cell_scores_take_the_max() {
        let f = frame(1, 1);
        let cloud = cloud_with_cells(&[(0, 0), (0, 0)], &f);
        let rec = ProjectedCloud {
            points: vec![],
            source: vec![],
        };
        let grid =
            rasterize_scores(&cloud, &[1.0, 3.0], &rec, &[], &f, &no_mask_params()).unwrap();
        assert_eq!(grid.s1[[0, 0]], 3.0);
    }

    #[test]
    fn rasterization_matches_per_cell_max_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let f = frame(6, 5);
        let cells: Vec<(usize, usize)> = (0..40)
            .map(|_| (rng.random_range(0..6), rng.random_range(0..5)))
            .collect();
        let cloud = cloud_with_cells(&cells, &f);
        let s1: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..5.0)).collect();
        let rec_pts: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let rec = ProjectedCloud {
            source: (0..rec_pts.len()).collect(),
            points: rec_pts.clone(),
        };
        let s2: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..2.0)).collect();
        // Keep every branch-2 point: zero threshold plus solo-friendly
        // clustering so masking does not interfere with the max oracle.
        let params = RasterizeParams {
            s2_threshold: -1.0,
            eps_cells: 100.0,
            min_pts: 1,
            dilate_radius: 0,
        };
        let grid = rasterize_scores(&cloud, &s1, &rec, &s2, &f, &params).unwrap();

        let mut expect1 = Array2::zeros((6, 5));
        for (&(r, c), &v) in cells.iter().zip(&s1) {
            if v > expect1[[r, c]] {
                expect1[[r, c]] = v;
            }
        }
        assert_eq!(grid.s1, expect1);
        let mut expect2 = Array2::zeros((6, 5));
        for (p, &v) in rec_pts.iter().zip(&s2) {
            let (r, c) = f.cell_of(p[0], p[1]);
            if v > expect2[[r, c]] {
                expect2[[r, c]] = v;
            }
        }
        assert_eq!(grid.s2, expect2);
    }

    #[test]
    fn masking_zeroes_cells_outside_the_dilated_mask() {
        let f = frame(8, 8);
        let cloud = cloud_with_cells(&[(0, 0)], &f);
        // A tight cluster of high-score rec points in one corner plus an
        // isolated high-score point in the opposite corner.
        let mut rec_pts = Vec::new();
        for i in 0..5 {
            rec_pts.push([0.10 + 0.005 * i as f64, 0.10]);
        }
        rec_pts.push([0.9, 0.9]);
        let rec = ProjectedCloud {
            source: (0..rec_pts.len()).collect(),
            points: rec_pts,
        };
        let s2 = vec![5.0; 6];
        let params = RasterizeParams {
            s2_threshold: 1.0,
            eps_cells: 1.0,
            min_pts: 3,
            dilate_radius: 0,
        };
        let grid = rasterize_scores(&cloud, &[0.0], &rec, &s2, &f, &params).unwrap();
        let (rc, cc) = f.cell_of(0.11, 0.10);
        assert_eq!(grid.s2[[rc, cc]], 5.0);
        let (ri, ci) = f.cell_of(0.9, 0.9);
        assert_eq!(grid.s2[[ri, ci]], 0.0, "isolated point must be denoised");
        assert!(grid.occ2[[ri, ci]], "occupancy is independent of masking");
    }

    fn make_grid(
        s1: Array2<f64>,
        s2: Array2<f64>,
        occ: Array2<bool>,
        f: &GridFrame,
    ) -> ScoreGrid {
        ScoreGrid {
            frame: f.clone(),
            fused: Array2::zeros(s1.dim()),
            occ1: occ.clone(),
            occ2: occ,
            s2_raw: s2.clone(),
            s1,
            s2,
        }
    }

    fn random_validation_set(seed: u64, scale1: f64) -> Vec<(ScoreGrid, GroundTruth)> {
        let mut rng = StdRng::seed_from_u64(seed);
        let f = frame(8, 8);
        let mut out = Vec::new();
        for sample in 0..4 {
            let defective = sample >= 2;
            let mut s1 = Array2::zeros((8, 8));
            let mut s2 = Array2::zeros((8, 8));
            let mut mask = Array2::from_elem((8, 8), false);
            for r in 0..8 {
                for c in 0..8 {
                    s1[[r, c]] = scale1 * rng.random_range(0.0..1.0);
                    s2[[r, c]] = rng.random_range(0.0..0.1);
                }
            }
            if defective {
                for r in 2..4 {
                    for c in 2..4 {
                        mask[[r, c]] = true;
                        s1[[r, c]] = scale1 * rng.random_range(4.0..5.0);
                        s2[[r, c]] = rng.random_range(1.0..2.0);
                    }
                }
            }
            let occ = Array2::from_elem((8, 8), true);
            let grid = make_grid(s1, s2, occ.clone(), &f);
            let truth = GroundTruth::new(mask, occ).unwrap();
            out.push((grid, truth));
        }
        out
    }

    #[test]
    fn identical_branches_give_unit_ratio() {
        let f = frame(4, 4);
        let mut rng = StdRng::seed_from_u64(1);
        let s: Array2<f64> = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.1..2.0));
        let occ = Array2::from_elem((4, 4), true);
        let grid = make_grid(s.clone(), s.clone(), occ.clone(), &f);
        let mut mask = Array2::from_elem((4, 4), false);
        mask[[0, 0]] = true;
        let defective = make_grid(s.clone(), s, occ.clone(), &f);
        let samples = vec![
            (grid, GroundTruth::new(Array2::from_elem((4, 4), false), occ.clone()).unwrap()),
            (defective, GroundTruth::new(mask, occ).unwrap()),
        ];
        for q in [0.25, 0.5, 0.75, 1.0] {
            let outcome =
                calibrate_k(&samples, &[q], &OcsvmSettings::default(), 0.3).unwrap();
            assert!((outcome.k_star - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn proportional_branches_cancel_the_scale() {
        let f = frame(4, 4);
        let mut rng = StdRng::seed_from_u64(2);
        let s2: Array2<f64> = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.1..2.0));
        let c = 37.5;
        let s1 = s2.mapv(|v| c * v);
        let occ = Array2::from_elem((4, 4), true);
        let mut mask = Array2::from_elem((4, 4), false);
        mask[[3, 3]] = true;
        let samples = vec![
            (
                make_grid(s1.clone(), s2.clone(), occ.clone(), &f),
                GroundTruth::new(Array2::from_elem((4, 4), false), occ.clone()).unwrap(),
            ),
            (
                make_grid(s1, s2, occ.clone(), &f),
                GroundTruth::new(mask, occ).unwrap(),
            ),
        ];
        let outcome = calibrate_k(&samples, &[0.5], &OcsvmSettings::default(), 0.3).unwrap();
        assert!((outcome.k_star - 1.0 / c).abs() < 1e-9 / c);
        // Mapped pairs have equal coordinates.
        let g = &samples[0].0;
        for r in 0..4 {
            for cc in 0..4 {
                let mapped = outcome.k_star * g.s1[[r, cc]];
                assert!((mapped - g.s2[[r, cc]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_search_picks_the_argmax_and_is_deterministic() {
        let samples = random_validation_set(5, 1.0);
        let quantiles = default_quantile_grid();
        let settings = OcsvmSettings::default();
        let outcome = calibrate_k(&samples, &quantiles, &settings, 0.3).unwrap();
        // Oracle: evaluate every candidate independently and take the
        // argmax with ties to the smaller quantile.
        let mut best: Option<(f64, f64, f64)> = None;
        let normal: Vec<&ScoreGrid> = samples
            .iter()
            .filter(|(_, t)| !t.has_defects())
            .map(|(g, _)| g)
            .collect();
        let mut s1_pool = Vec::new();
        let mut s2_pool = Vec::new();
        for (g, _) in &samples {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    if g.occ1[[r, c]] {
                        s1_pool.push(g.s1[[r, c]]);
                    }
                    if g.occ2[[r, c]] {
                        s2_pool.push(g.s2[[r, c]]);
                    }
                }
            }
        }
        s1_pool.sort_by(f64::total_cmp);
        s2_pool.sort_by(f64::total_cmp);
        for &q in &quantiles {
            let q1 = quantile_sorted(&s1_pool, q);
            let q2 = quantile_sorted(&s2_pool, q);
            if !(q1 > 0.0 && q2 > 0.0) {
                continue;
            }
            let k = q2 / q1;
            let o = evaluate_candidate(&samples, &normal, k, q, &settings, 0.3).unwrap();
            if best.as_ref().map_or(true, |b| o.au_pro > b.0) {
                best = Some((o.au_pro, k, q));
            }
        }
        let (expect_aupro, expect_k, expect_q) = best.unwrap();
        assert_eq!(outcome.au_pro, expect_aupro);
        assert_eq!(outcome.k_star, expect_k);
        assert_eq!(outcome.q_star, expect_q);

        let again = calibrate_k(&samples, &quantiles, &settings, 0.3).unwrap();
        assert_eq!(outcome.k_star, again.k_star);
        assert_eq!(outcome.q_star, again.q_star);
    }

    #[test]
    fn no_defective_validation_sample_is_degenerate() {
        let samples: Vec<(ScoreGrid, GroundTruth)> = random_validation_set(6, 1.0)
            .into_iter()
            .take(2)
            .collect();
        assert!(samples.iter().all(|(_, t)| !t.has_defects()));
        assert!(matches!(
            calibrate_k(&samples, &default_quantile_grid(), &OcsvmSettings::default(), 0.3),
            Err(Error::CalibrationDegenerate(_))
        ));
    }

    #[test]
    fn fused_value_is_negative_decision_value() {
        let samples = random_validation_set(8, 1.0);
        let outcome =
            calibrate_k(&samples, &default_quantile_grid(), &OcsvmSettings::default(), 0.3)
                .unwrap();
        let grid = &samples[2].0;
        let fused = fuse_scores(&outcome.model, outcome.k_star, grid);
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                let expected = -outcome
                    .model
                    .decision([outcome.k_star * grid.s1[[r, c]], grid.s2[[r, c]]]);
                assert_eq!(fused.fused[[r, c]], expected);
            }
        }
        // A boundary point (g = 0) fuses to exactly 0: find one by
        // bisection between an interior point (the support-vector centroid)
        // and a far outlier.
        let n = outcome.model.support_vectors.len() as f64;
        let mut lo = outcome
            .model
            .support_vectors
            .iter()
            .fold([0.0, 0.0], |acc, sv| [acc[0] + sv[0] / n, acc[1] + sv[1] / n]);
        let mut hi = [lo[0] + 100.0, lo[1] + 100.0];
        assert!(outcome.model.decision(lo) > 0.0);
        assert!(outcome.model.decision(hi) < 0.0);
        for _ in 0..200 {
            let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
            if outcome.model.decision(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(outcome.model.decision(lo).abs() < 1e-9);
    }

    #[test]
    fn far_outlier_cell_attains_the_grid_max() {
        let samples = random_validation_set(9, 1.0);
        let outcome =
            calibrate_k(&samples, &default_quantile_grid(), &OcsvmSettings::default(), 0.3)
                .unwrap();
        let mut grid = samples[0].0.clone();
        // Implant a pair far beyond the training radius.
        let max_radius = samples
            .iter()
            .flat_map(|(g, _)| g.s1.iter().chain(g.s2.iter()))
            .fold(0.0f64, |a, &b| a.max(b));
        grid.s1[[7, 7]] = 10.0 * max_radius / outcome.k_star.max(1e-12);
        grid.s2[[7, 7]] = 10.0 * max_radius;
        let fused = fuse_scores(&outcome.model, outcome.k_star, &grid);
        let max_cell = fused
            .fused
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(idx, _)| idx)
            .unwrap();
        assert_eq!(max_cell, (7, 7));
    }

    #[test]
    fn fused_score_grows_with_s2_when_s1_is_zero() {
        // Radially symmetric training mass near the origin.
        let mut rng = StdRng::seed_from_u64(12);
        let pairs: Vec<[f64; 2]> = (0..200)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.0..0.3);
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let model = crate::ocsvm::fit_ocsvm(&pairs, 0.1, 1.0, 0).unwrap();
        let mut last = f64::NEG_INFINITY;
        for step in 0..10 {
            let fused = -model.decision([0.0, step as f64 * 0.5]);
            assert!(fused >= last, "fused must not decrease along s2");
            last = fused;
        }
    }

    #[test]
    fn baseline_fusion_matches_the_formula() {
        let mut rng = StdRng::seed_from_u64(10);
        let s1 = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..2.0));
        let s2 = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..0.5));
        let stats = ValidationStats {
            mu1: 1.0,
            sigma1: 0.5,
            mu2: 0.25,
            sigma2: 0.125,
        };
        let fused = baseline_fuse(&s1, &s2, &stats).unwrap();
        let w = stats.sigma1 / stats.sigma2;
        let b = stats.mu1 - w * stats.mu2;
        for r in 0..5 {
            for c in 0..5 {
                assert!((fused[[r, c]] - (s1[[r, c]] + w * s2[[r, c]] + b)).abs() < 1e-12);
            }
        }
        // Matched moments degenerate to a plain sum.
        let same = ValidationStats {
            mu1: 0.3,
            sigma1: 0.2,
            mu2: 0.3,
            sigma2: 0.2,
        };
        let fused = baseline_fuse(&s1, &s2, &same).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert!((fused[[r, c]] - (s1[[r, c]] + s2[[r, c]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_branch_two_is_degenerate() {
        let s1 = Array2::zeros((3, 3));
        let s2 = Array2::from_elem((3, 3), 0.7);
        let stats = ValidationStats {
            mu1: 0.0,
            sigma1: 1.0,
            mu2: 0.7,
            sigma2: 0.0,
        };
        assert!(matches!(
            baseline_fuse(&s1, &s2, &stats),
            Err(Error::DegenerateStats)
        ));
    }

    #[test]
    fn calibration_is_scale_invariant() {
        for c in [0.01, 1.0, 100.0] {
            let base = random_validation_set(11, 1.0);
            let scaled = random_validation_set(11, c);
            let settings = OcsvmSettings::default();
            let grid = default_quantile_grid();
            let out_base = calibrate_k(&base, &grid, &settings, 0.3).unwrap();
            let out_scaled = calibrate_k(&scaled, &grid, &settings, 0.3).unwrap();
            assert_eq!(out_base.q_star, out_scaled.q_star);
            let fused_base = fuse_scores(&out_base.model, out_base.k_star, &base[2].0);
            let fused_scaled = fuse_scores(&out_scaled.model, out_scaled.k_star, &scaled[2].0);
            for (a, b) in fused_base.fused.iter().zip(fused_scaled.fused.iter()) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "scale {c}: fused map changed by {}",
                    (a - b).abs()
                );
            }
        }
    }
}
