//! End-to-end orchestration: dataset loading, training artifacts,
//! per-sample scoring, calibration, detection, and evaluation. The CLI and
//! the acceptance suite are thin wrappers over these functions.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluation::{au_pro, pro_curve, GroundTruth, ProCurve};
use crate::fpfh::compute_fpfh;
use crate::fusion::{
    baseline_fuse, calibrate_k, fuse_scores, quantile, rasterize_scores, validation_stats,
    FusionCalibration, OcsvmSettings, RasterizeParams, ScoreGrid,
};
use crate::gan::{load_checkpoint, save_checkpoint, train_gan, EpochLoss, GanArch, GanTrainConfig};
use crate::inversion::{invert, InversionResult};
use crate::io::{read_mask_pgm, read_ply, read_xyz};
use crate::memory_bank::{coreset_sample, Coreset, CoresetTarget, MemoryBank};
use crate::missing_region::{project_axis, ProjectedCloud, ProjectionAxis};
use crate::normals::estimate_normals;
use crate::preprocess::{grid_downsample, ransac_plane, remove_background, GridFrame};
use crate::synth::Manifest;

/// One dataset entry loaded into memory.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub id: String,
    pub defect_kind: String,
    pub cloud: PointCloud,
    pub mask: Array2<bool>,
}

impl DatasetSample {
    pub fn is_normal(&self) -> bool {
        self.defect_kind == "none"
    }
}

/// Reads a cloud by extension: `.ply` or `.xyz`.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        Some("xyz") => read_xyz(path),
        other => Err(Error::Format(format!(
            "unsupported cloud extension {other:?} (expected ply or xyz)"
        ))),
    }
}

/// Loads every sample of a split listed in the dataset manifest.
pub fn load_split(dataset_dir: &Path, split: &str) -> Result<Vec<DatasetSample>> {
    let manifest = Manifest::load(&dataset_dir.join("manifest.json"))?;
    let mut out = Vec::new();
    for s in manifest.samples.iter().filter(|s| s.split == split) {
        let cloud = read_cloud(&dataset_dir.join(&s.path))?;
        let mask = read_mask_pgm(&dataset_dir.join(&s.mask_path))?;
        out.push(DatasetSample {
            id: s.path.clone(),
            defect_kind: s.defect_kind.clone(),
            cloud,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "dataset split '{split}' is empty"
        )));
    }
    Ok(out)
}

fn view_direction(axis: ProjectionAxis) -> Vector3<f64> {
    match axis {
        ProjectionAxis::X => Vector3::new(1.0, 0.0, 0.0),
        ProjectionAxis::Y => Vector3::new(0.0, 1.0, 0.0),
        ProjectionAxis::Z => Vector3::new(0.0, 0.0, 1.0),
    }
}

/// Preprocessed sample: background removed (when enabled), grid-downsampled
/// with provenance cells, and normals estimated toward the sensor.
#[derive(Debug, Clone)]
pub struct PreprocessedSample {
    pub cloud: PointCloud,
    pub frame: GridFrame,
}

pub fn preprocess_sample(cfg: &PipelineConfig, raw: &PointCloud) -> Result<PreprocessedSample> {
    raw.validate()?;
    let mut working = raw.clone();
    if cfg.preprocess.background_removal {
        let (lo, hi) = working.bounds();
        let diagonal = (hi - lo).norm();
        let threshold = cfg.preprocess.ransac_threshold_fraction * diagonal;
        let plane = ransac_plane(
            &working,
            cfg.preprocess.ransac_iterations,
            threshold,
            cfg.preprocess.seed,
        )?;
        working = remove_background(
            &working,
            &plane,
            cfg.preprocess.margin_fraction * diagonal,
        )?;
    }
    let (rows, cols) = cfg.grid.resolution;
    let (down, frame) = grid_downsample(&working, rows, cols)?;
    let est = estimate_normals(
        &down,
        cfg.fpfh.neighbors,
        &view_direction(cfg.missing.projection_axis),
    )?;
    Ok(PreprocessedSample {
        cloud: est.cloud,
        frame,
    })
}

/// Trained detection state: the coreset memory bank and the GAN pair.
#[derive(Debug)]
pub struct Artifacts {
    pub coreset: Coreset,
    pub generator: crate::gan::GeneratorModel,
    pub discriminator: crate::gan::DiscriminatorModel,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub bank_rows: usize,
    pub coreset_rows: usize,
    pub losses: Vec<EpochLoss>,
}

/// Builds the memory bank, subsamples the coreset, and trains the GAN on
/// the preprocessed training clouds.
pub fn train_artifacts(
    cfg: &PipelineConfig,
    samples: &[DatasetSample],
) -> Result<(Artifacts, TrainSummary)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let preprocessed: Vec<(String, PreprocessedSample)> = samples
        .par_iter()
        .map(|s| Ok((s.id.clone(), preprocess_sample(cfg, &s.cloud)?)))
        .collect::<Result<_>>()?;

    let features: Vec<(String, crate::fpfh::FeatureMatrix)> = preprocessed
        .par_iter()
        .map(|(id, pre)| {
            Ok((
                id.clone(),
                compute_fpfh(&pre.cloud, cfg.fpfh.neighbors, cfg.fpfh.bins)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut bank = MemoryBank::new(3 * cfg.fpfh.bins);
    for (id, f) in &features {
        bank.push_sample(id, f)?;
    }
    let coreset = coreset_sample(
        &bank,
        CoresetTarget::Fraction(cfg.coreset.fraction),
        cfg.coreset.seed,
    )?;

    let clouds: Vec<PointCloud> = preprocessed.iter().map(|(_, p)| p.cloud.clone()).collect();
    let arch = GanArch {
        latent_dim: cfg.gan.latent_dim,
        prior_points: cfg.gan.prior_points,
        gen_hidden: cfg.gan.gen_hidden.clone(),
        disc_hidden: cfg.gan.disc_hidden.clone(),
        feature_dim: cfg.gan.feature_dim,
    };
    let train_cfg = GanTrainConfig {
        epochs: cfg.gan.epochs,
        batch_size: cfg.gan.batch_size,
        lr_d: cfg.gan.lr_d,
        lr_g: cfg.gan.lr_g,
        optimizer: cfg.gan.optim_kind()?,
        seed: cfg.gan.seed,
    };
    let gan = train_gan(&clouds, &arch, &train_cfg)?;

    let summary = TrainSummary {
        bank_rows: bank.len(),
        coreset_rows: coreset.features.nrows(),
        losses: gan.losses,
    };
    Ok((
        Artifacts {
            coreset,
            generator: gan.generator,
            discriminator: gan.discriminator,
        },
        summary,
    ))
}

pub fn save_artifacts(dir: &Path, artifacts: &Artifacts, summary: &TrainSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    artifacts
        .coreset
        .save(&dir.join("coreset.bin"), &dir.join("coreset.json"))?;
    save_checkpoint(
        &dir.join("gan.ckpt"),
        &artifacts.generator,
        &artifacts.discriminator,
    )?;
    std::fs::write(
        dir.join("train_summary.json"),
        serde_json::to_string_pretty(summary).expect("serializable summary"),
    )?;
    Ok(())
}

pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let coreset = Coreset::load(&dir.join("coreset.bin"), &dir.join("coreset.json"))?;
    let (generator, discriminator) = load_checkpoint(&dir.join("gan.ckpt"))?;
    Ok(Artifacts {
        coreset,
        generator,
        discriminator,
    })
}

/// Raw per-sample branch outputs, before rasterization.
#[derive(Debug)]
pub struct SampleScores {
    pub pre: PreprocessedSample,
    pub s1: Vec<f64>,
    pub input_2d: ProjectedCloud,
    pub rec_2d: ProjectedCloud,
    pub s2: Vec<f64>,
    pub inversion: InversionResult,
}

/// Runs both branches on one raw cloud. `seed_salt` keeps concurrent
/// inversion seeds distinct and reproducible (use the sample index).
pub fn score_sample(
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    raw: &PointCloud,
    seed_salt: u64,
) -> Result<SampleScores> {
    let pre = preprocess_sample(cfg, raw)?;
    let features = compute_fpfh(&pre.cloud, cfg.fpfh.neighbors, cfg.fpfh.bins)?;
    let s1 = crate::memory_bank::score_features(&artifacts.coreset, &features)?;

    let inversion = invert(
        &artifacts.generator,
        &artifacts.discriminator,
        &pre.cloud,
        &cfg.inversion.schedule(),
        cfg.inversion.candidates,
        cfg.inversion.fd_mode,
        cfg.inversion.seed.wrapping_add(seed_salt),
    )?;
    let axis = cfg.missing.projection_axis;
    let input_2d = project_axis(&pre.cloud, axis);
    let rec_2d = project_axis(&inversion.p_rec, axis);
    let s2 = crate::missing_region::score_missing(&rec_2d, &input_2d)?;
    Ok(SampleScores {
        pre,
        s1,
        input_2d,
        rec_2d,
        s2,
        inversion,
    })
}

fn rasterize_with_threshold(
    cfg: &PipelineConfig,
    scores: &SampleScores,
    s2_threshold: f64,
) -> Result<ScoreGrid> {
    let params = RasterizeParams {
        s2_threshold,
        eps_cells: cfg.missing.eps_cells,
        min_pts: cfg.missing.min_pts,
        dilate_radius: cfg.missing.dilate_radius,
    };
    rasterize_scores(
        &scores.pre.cloud,
        &scores.s1,
        &scores.rec_2d,
        &scores.s2,
        &scores.pre.frame,
        &params,
    )
}

fn truth_for(grid: &ScoreGrid, mask: &Array2<bool>) -> Result<GroundTruth> {
    if mask.dim() != (grid.rows(), grid.cols()) {
        return Err(Error::GeometryMismatch(format!(
            "ground-truth mask {:?} vs grid {:?}",
            mask.dim(),
            (grid.rows(), grid.cols())
        )));
    }
    GroundTruth::new(mask.clone(), grid.domain())
}

/// Calibrates the fusion stage on the validation split: the branch-2
/// flagging threshold from normal-sample scores, the quantile-ratio grid
/// search, the OCSVM, and the baseline-fusion statistics.
pub fn calibrate(
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    validation: &[DatasetSample],
) -> Result<FusionCalibration> {
    if validation.is_empty() {
        return Err(Error::CalibrationDegenerate("no validation samples".into()));
    }
    let scored: Vec<(usize, SampleScores)> = validation
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok((i, score_sample(cfg, artifacts, &s.cloud, i as u64)?)))
        .collect::<Result<_>>()?;

    let mut normal_s2 = Vec::new();
    for (i, s) in &scored {
        if validation[*i].is_normal() {
            normal_s2.extend_from_slice(&s.s2);
        }
    }
    if normal_s2.is_empty() {
        return Err(Error::CalibrationDegenerate(
            "validation split has no normal samples".into(),
        ));
    }
    let s2_threshold = quantile(&normal_s2, cfg.missing.threshold_quantile);

    let mut grids = Vec::new();
    for (i, s) in &scored {
        let grid = rasterize_with_threshold(cfg, s, s2_threshold)?;
        let truth = truth_for(&grid, &validation[*i].mask)?;
        grids.push((grid, truth));
    }

    let settings = OcsvmSettings {
        nu: cfg.fusion.nu,
        gamma: cfg.fusion.gamma,
        max_pairs: cfg.fusion.max_pairs,
        seed: cfg.fusion.seed,
    };
    let outcome = calibrate_k(
        &grids,
        &cfg.fusion.quantile_grid(),
        &settings,
        cfg.eval.limit,
    )?;

    let normal_grids: Vec<&ScoreGrid> = grids
        .iter()
        .zip(validation)
        .filter(|(_, s)| s.is_normal())
        .map(|((g, _), _)| g)
        .collect();
    let stats = validation_stats(&normal_grids)?;

    Ok(FusionCalibration {
        k_star: outcome.k_star,
        q_star: outcome.q_star,
        s2_threshold,
        validation_au_pro: outcome.au_pro,
        model: outcome.model,
        stats,
        sample_ids: validation.iter().map(|s| s.id.clone()).collect(),
        seed: cfg.fusion.seed,
    })
}

/// Full inference on one cloud: both branches, rasterization with the
/// calibrated threshold, and OCSVM fusion.
pub fn detect(
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    calibration: &FusionCalibration,
    raw: &PointCloud,
    seed_salt: u64,
) -> Result<ScoreGrid> {
    let scores = score_sample(cfg, artifacts, raw, seed_salt)?;
    let grid = rasterize_with_threshold(cfg, &scores, calibration.s2_threshold)?;
    Ok(fuse_scores(&calibration.model, calibration.k_star, &grid))
}

/// Detection over a whole split, in parallel, truth attached.
pub fn detect_split(
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    calibration: &FusionCalibration,
    samples: &[DatasetSample],
) -> Result<Vec<(ScoreGrid, GroundTruth)>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let grid = detect(cfg, artifacts, calibration, &s.cloud, i as u64)?;
            let truth = truth_for(&grid, &s.mask)?;
            Ok((grid, truth))
        })
        .collect()
}

/// Which per-cell map of a detection result to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Fused,
    FeatureOnly,
    ReconstructionOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub au_pro: f64,
    pub limit: f64,
    pub n_components: usize,
    pub curve: ProCurve,
}

/// PRO-curve evaluation of detection results.
pub fn evaluate(
    results: &[(ScoreGrid, GroundTruth)],
    map: MapKind,
    limit: f64,
) -> Result<EvalReport> {
    let maps: Vec<&Array2<f64>> = results
        .iter()
        .map(|(g, _)| match map {
            MapKind::Fused => &g.fused,
            MapKind::FeatureOnly => &g.s1,
            MapKind::ReconstructionOnly => &g.s2,
        })
        .collect();
    let samples: Vec<(&Array2<f64>, &GroundTruth)> = maps
        .into_iter()
        .zip(results.iter().map(|(_, t)| t))
        .collect();
    let curve = pro_curve(&samples)?;
    let n_components: usize = results.iter().map(|(_, t)| t.components().len()).sum();
    Ok(EvalReport {
        au_pro: au_pro(&curve, limit)?,
        limit,
        n_components,
        curve,
    })
}

/// Evaluation of the mean/variance-matching baseline fusion on the same
/// grids.
pub fn evaluate_baseline(
    results: &[(ScoreGrid, GroundTruth)],
    stats: &crate::fusion::ValidationStats,
    limit: f64,
) -> Result<EvalReport> {
    let fused: Vec<Array2<f64>> = results
        .iter()
        .map(|(g, _)| baseline_fuse(&g.s1, &g.s2, stats))
        .collect::<Result<_>>()?;
    let samples: Vec<(&Array2<f64>, &GroundTruth)> = fused
        .iter()
        .zip(results.iter().map(|(_, t)| t))
        .collect();
    let curve = pro_curve(&samples)?;
    let n_components: usize = results.iter().map(|(_, t)| t.components().len()).sum();
    Ok(EvalReport {
        au_pro: au_pro(&curve, limit)?,
        limit,
        n_components,
        curve,
    })
}

/// Simple SVG rendering of a PRO curve, mirroring the evaluation plot.
pub fn curve_svg(curve: &ProCurve, limit: f64) -> String {
    let w = 480.0;
    let h = 360.0;
    let pad = 40.0;
    let x = |fpr: f64| pad + fpr * (w - 2.0 * pad);
    let y = |pro: f64| h - pad - pro * (h - 2.0 * pad);
    let mut path = format!("M {:.2} {:.2}", x(curve.anchor.0), y(curve.anchor.1));
    let mut last = curve.anchor;
    for &(f, p) in &curve.points {
        path.push_str(&format!(" L {:.2} {:.2}", x(f), y(last.1)));
        path.push_str(&format!(" L {:.2} {:.2}", x(f), y(p)));
        last = (f, p);
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{y0}\" x2=\"{xmax}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{y0}\" x2=\"{pad}\" y2=\"{pad}\" stroke=\"black\"/>\n",
            "<line x1=\"{xl}\" y1=\"{pad}\" x2=\"{xl}\" y2=\"{y0}\" ",
            "stroke=\"red\" stroke-dasharray=\"4\"/>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"royalblue\" stroke-width=\"2\"/>\n",
            "<text x=\"{xmax}\" y=\"{ylab}\" text-anchor=\"end\" font-size=\"12\">FPR</text>\n",
            "<text x=\"{pad}\" y=\"{plab}\" font-size=\"12\">PRO</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        y0 = h - pad,
        xmax = w - pad,
        xl = x(limit),
        path = path,
        ylab = h - pad / 2.0,
        plab = pad / 2.0,
    )
}

/// Output files for one detected sample: fused/branch CSV rasters, an
/// occupancy raster, and a fused-heatmap PGM.
pub fn write_detection(dir: &Path, stem: &str, grid: &ScoreGrid) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, raster: &Array2<f64>| -> Result<()> {
        let path = dir.join(name);
        crate::io::write_csv_raster(&path, raster)?;
        written.push(path);
        Ok(())
    };
    emit(format!("{stem}.fused.csv"), &grid.fused)?;
    emit(format!("{stem}.s1.csv"), &grid.s1)?;
    emit(format!("{stem}.s2.csv"), &grid.s2)?;
    let occ = grid.occ1.mapv(|b| b as u8 as f64) + grid.occ2.mapv(|b| 2.0 * (b as u8 as f64));
    emit(format!("{stem}.occ.csv"), &occ)?;

    let heat = dir.join(format!("{stem}.fused.pgm"));
    let lo = grid.fused.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let bytes: Vec<u8> = grid
        .fused
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    crate::io::write_pgm(&heat, grid.rows(), grid.cols(), &bytes)?;
    written.push(heat);
    Ok(written)
}

/// Rebuilds detection grids from the CSV rasters written by
/// [`write_detection`].
pub fn read_detection(dir: &Path, stem: &str, frame: GridFrame) -> Result<ScoreGrid> {
    let fused = crate::io::read_csv_raster(&dir.join(format!("{stem}.fused.csv")))?;
    let s1 = crate::io::read_csv_raster(&dir.join(format!("{stem}.s1.csv")))?;
    let s2 = crate::io::read_csv_raster(&dir.join(format!("{stem}.s2.csv")))?;
    let occ = crate::io::read_csv_raster(&dir.join(format!("{stem}.occ.csv")))?;
    if fused.dim() != s1.dim() || s1.dim() != s2.dim() || s2.dim() != occ.dim() {
        return Err(Error::GeometryMismatch(
            "detection rasters disagree on shape".into(),
        ));
    }
    Ok(ScoreGrid {
        frame,
        occ1: occ.mapv(|v| (v as u8) & 1 != 0),
        occ2: occ.mapv(|v| (v as u8) & 2 != 0),
        s2_raw: s2.clone(),
        s1,
        s2,
        fused,
    })
}
