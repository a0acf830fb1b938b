//! Single-binary pipeline driver: dataset synthesis, preprocessing,
//! training, fusion calibration, detection, GAN inversion, and evaluation.
//!
//! Exit codes: 0 on success, 2 for configuration or input-validation
//! errors, 1 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use pcad_core::config::PipelineConfig;
use pcad_core::error::{Error, Result};
use pcad_core::io::{read_mask_pgm, write_ply};
use pcad_core::pipeline;
use pcad_core::synth::{make_dataset, Manifest};

#[derive(Parser)]
#[command(
    name = "pcad",
    version,
    about = "Unsupervised 3D point-cloud anomaly detection",
    after_help = "Run with --help for the full configuration key reference."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/validation/test PLYs plus masks).
    Synth {
        /// Pipeline configuration TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory (default: runs/<config-hash>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Background removal, grid downsampling, and normal estimation for one cloud.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Raster resolution as two values: rows cols.
        #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
        grid: Option<Vec<usize>>,
        /// RANSAC hypothesis count; enables background-plane removal.
        #[arg(long)]
        ransac_iters: Option<usize>,
        /// Absolute RANSAC inlier distance threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the memory bank, coreset, and GAN from the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the fusion calibration on the validation split.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Calibration JSON path (default: <artifacts>/calibration.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full inference on one sample: anomaly map rasters and a heatmap.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// GAN inversion of one sample: reconstructed PLY plus a loss trace.
    Invert {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PRO-curve evaluation of detection maps against dataset masks.
    Eval {
        /// Directory holding per-sample rasters written by `detect`.
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Integration limit on the false-positive rate.
        #[arg(long)]
        limit: Option<f64>,
        /// Re-fuse with the mean/variance-matching baseline instead of the
        /// calibrated boundary.
        #[arg(long)]
        baseline_fusion: bool,
        /// Calibration JSON (required with --baseline-fusion).
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Optional SVG plot of the PRO curve.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Metrics JSON path (default: <maps>/eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            require_exists(p)?;
            PipelineConfig::load(p)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::InvalidParameter(format!(
            "path does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

fn default_out(cfg: &PipelineConfig, leaf: &str) -> PathBuf {
    PathBuf::from("runs")
        .join(format!("{:016x}", cfg.content_hash()))
        .join(leaf)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&cfg, "dataset"));
            let manifest = make_dataset(&cfg.synth, &out)?;
            println!(
                "wrote {} samples to {} (manifest.json)",
                manifest.samples.len(),
                out.display()
            );
        }
        Command::Preprocess {
            input,
            output,
            grid,
            ransac_iters,
            threshold,
            seed,
            config,
        } => {
            require_exists(&input)?;
            let mut cfg = load_config(&config)?;
            if let Some(g) = grid {
                cfg.grid.resolution = (g[0], g[1]);
            }
            if let Some(iters) = ransac_iters {
                cfg.preprocess.background_removal = iters > 0;
                if iters > 0 {
                    cfg.preprocess.ransac_iterations = iters;
                }
            }
            if let Some(s) = seed {
                cfg.preprocess.seed = s;
            }
            if let Some(t) = threshold {
                if !(t > 0.0) {
                    return Err(Error::InvalidParameter(
                        "--threshold must be positive".into(),
                    ));
                }
                // The flag is an absolute distance; translate to the
                // diagonal fraction the pipeline works with.
                let raw = pcad_core::pipeline::read_cloud(&input)?;
                let (lo, hi) = raw.bounds();
                cfg.preprocess.ransac_threshold_fraction = t / (hi - lo).norm();
            }
            cfg.validate()?;
            let raw = pcad_core::pipeline::read_cloud(&input)?;
            let pre = pipeline::preprocess_sample(&cfg, &raw)?;
            write_ply(&output, &pre.cloud)?;
            println!(
                "preprocessed {} -> {} ({} points on a {}x{} grid)",
                input.display(),
                output.display(),
                pre.cloud.len(),
                pre.frame.rows,
                pre.frame.cols
            );
        }
        Command::Train {
            config,
            dataset,
            out,
        } => {
            require_exists(&dataset)?;
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&cfg, "artifacts"));
            let train = pipeline::load_split(&dataset, "train")?;
            let (artifacts, summary) = pipeline::train_artifacts(&cfg, &train)?;
            pipeline::save_artifacts(&out, &artifacts, &summary)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!(
                "trained on {} samples: bank {} rows, coreset {} rows, {} epochs -> {}",
                train.len(),
                summary.bank_rows,
                summary.coreset_rows,
                summary.losses.len(),
                out.display()
            );
        }
        Command::Calibrate {
            config,
            artifacts,
            dataset,
            out,
        } => {
            require_exists(&artifacts)?;
            require_exists(&dataset)?;
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| artifacts.join("calibration.json"));
            let loaded = pipeline::load_artifacts(&artifacts)?;
            let validation = pipeline::load_split(&dataset, "validation")?;
            let calibration = pipeline::calibrate(&cfg, &loaded, &validation)?;
            calibration.save(&out)?;
            println!(
                "calibrated: k* = {:.6}, q* = {:.2}, validation AU-PRO = {:.4} -> {}",
                calibration.k_star,
                calibration.q_star,
                calibration.validation_au_pro,
                out.display()
            );
        }
        Command::Detect {
            config,
            artifacts,
            calibration,
            sample,
            out,
        } => {
            require_exists(&artifacts)?;
            require_exists(&calibration)?;
            require_exists(&sample)?;
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&cfg, "maps"));
            let loaded = pipeline::load_artifacts(&artifacts)?;
            let cal = pcad_core::fusion::FusionCalibration::load(&calibration)?;
            let raw = pipeline::read_cloud(&sample)?;
            let grid = pipeline::detect(&cfg, &loaded, &cal, &raw, 0)?;
            let stem = stem_of(&sample);
            let files = pipeline::write_detection(&out, &stem, &grid)?;
            let max = grid.fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "detected {}: fused max {max:.4}, {} files under {}",
                sample.display(),
                files.len(),
                out.display()
            );
        }
        Command::Invert {
            config,
            artifacts,
            sample,
            out,
        } => {
            require_exists(&artifacts)?;
            require_exists(&sample)?;
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&cfg, "inversion"));
            let loaded = pipeline::load_artifacts(&artifacts)?;
            let raw = pipeline::read_cloud(&sample)?;
            let scores = pipeline::score_sample(&cfg, &loaded, &raw, 0)?;
            std::fs::create_dir_all(&out)?;
            let stem = stem_of(&sample);
            let rec_path = out.join(format!("{stem}.reconstruction.ply"));
            write_ply(&rec_path, &scores.inversion.p_rec)?;
            let trace_path = out.join(format!("{stem}.loss_trace.json"));
            std::fs::write(
                &trace_path,
                serde_json::to_string_pretty(&scores.inversion.loss_trace)
                    .expect("serializable trace"),
            )?;
            let last = scores.inversion.loss_trace.last().expect("non-empty trace");
            println!(
                "inverted {}: final cd {:.5}, fd {:.5} -> {} and {}",
                sample.display(),
                last.cd,
                last.fd,
                rec_path.display(),
                trace_path.display()
            );
        }
        Command::Eval {
            maps,
            dataset,
            split,
            limit,
            baseline_fusion,
            calibration,
            svg,
            out,
            config,
        } => {
            require_exists(&maps)?;
            require_exists(&dataset)?;
            let cfg = load_config(&config)?;
            let limit = limit.unwrap_or(cfg.eval.limit);
            if !(limit > 0.0 && limit <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "--limit must lie in (0, 1], got {limit}"
                )));
            }
            let out = out.unwrap_or_else(|| maps.join("eval.json"));
            let manifest = Manifest::load(&dataset.join("manifest.json"))?;
            let frame = pcad_core::preprocess::GridFrame::from_bounds(
                (0.0, 0.0),
                (1.0, 1.0),
                cfg.grid.resolution.0,
                cfg.grid.resolution.1,
            );
            let mut results = Vec::new();
            for s in manifest.samples.iter().filter(|s| s.split == split) {
                let stem = stem_of(Path::new(&s.path));
                let grid = pipeline::read_detection(&maps, &stem, frame.clone())?;
                let mask = read_mask_pgm(&dataset.join(&s.mask_path))?;
                if mask.dim() != (grid.rows(), grid.cols()) {
                    return Err(Error::GeometryMismatch(format!(
                        "mask {:?} vs maps {:?} for {stem}",
                        mask.dim(),
                        (grid.rows(), grid.cols())
                    )));
                }
                let truth = pcad_core::evaluation::GroundTruth::new(mask, grid.domain())?;
                results.push((grid, truth));
            }
            if results.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "no '{split}' maps found in {}",
                    maps.display()
                )));
            }
            let report = if baseline_fusion {
                let cal_path = calibration.ok_or_else(|| {
                    Error::InvalidParameter(
                        "--baseline-fusion requires --calibration".into(),
                    )
                })?;
                require_exists(&cal_path)?;
                let cal = pcad_core::fusion::FusionCalibration::load(&cal_path)?;
                pipeline::evaluate_baseline(&results, &cal.stats, limit)?
            } else {
                pipeline::evaluate(&results, pipeline::MapKind::Fused, limit)?
            };
            let mut curve = vec![[report.curve.anchor.0, report.curve.anchor.1]];
            curve.extend(report.curve.points.iter().map(|&(f, p)| [f, p]));
            let json = serde_json::json!({
                "au_pro": report.au_pro,
                "limit": report.limit,
                "n_components": report.n_components,
                "curve": curve,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&json).expect("json"))?;
            if let Some(svg_path) = svg {
                std::fs::write(&svg_path, pipeline::curve_svg(&report.curve, limit))?;
            }
            println!(
                "evaluated {} samples: AU-PRO {:.4} at limit {:.2} -> {}",
                results.len(),
                report.au_pro,
                limit,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap's own usage errors exit with code 2, matching validation errors.
    let reference: &'static str = Box::leak(render_config_reference().into_boxed_str());
    let matches = Cli::command().after_long_help(reference).get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn render_config_reference() -> String {
    format!(
        "Configuration keys and defaults (TOML):\n\n{}",
        PipelineConfig::default().to_toml()
    )
}

// Keeps the derive in sync with clap's expectations.
#[test]
fn cli_definition_is_valid() {
    Cli::command().debug_assert();
}
