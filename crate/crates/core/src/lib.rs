//! Unsupervised anomaly detection for 3D point clouds.
//!
//! The detector fuses two branches over a common score raster:
//!
//! * a **feature branch** that scores each scanned point by the squared
//!   distance of its FPFH descriptor to a greedily subsampled memory bank of
//!   normal descriptors, and
//! * a **reconstruction branch** that inverts a small point-cloud GAN against
//!   the test scan and scores reconstructed points by their 2D distance to the
//!   input, exposing regions where scan points are missing entirely.
//!
//! A one-class SVM trained on normal score pairs turns the two per-cell scores
//! into a single fused anomaly map; anomaly maps are evaluated with the
//! per-region-overlap (PRO) curve and its area up to a false-positive-rate
//! limit.

pub mod cloud;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fpfh;
pub mod fusion;
pub mod gan;
pub mod inversion;
pub mod io;
pub mod knn;
pub mod memory_bank;
pub mod missing_region;
pub mod nn;
pub mod normals;
pub mod ocsvm;
pub mod pipeline;
pub mod preprocess;
pub mod synth;

pub use cloud::PointCloud;
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use evaluation::{GroundTruth, ProCurve};
pub use fpfh::{FeatureMatrix, SpfhHistogram};
pub use fusion::{FusionCalibration, ScoreGrid};
pub use gan::{DiscriminatorModel, GeneratorModel, LatentCode};
pub use inversion::{InversionResult, InversionSchedule};
pub use knn::{KnnIndex, KnnQueryResult};
pub use memory_bank::{Coreset, MemoryBank};
pub use missing_region::{ProjectedCloud, RegionMask};
pub use ocsvm::OcsvmModel;
pub use preprocess::{GridFrame, PlaneModel};
