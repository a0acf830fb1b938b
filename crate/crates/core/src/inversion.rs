//! GAN inversion: joint optimization of the latent code and generator
//! parameters so the generated cloud matches a test scan, under a Chamfer
//! plus discriminator-feature loss.

use ndarray::{Array1, Array2};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::gan::{resample_points, sample_latent, DiscriminatorModel, GeneratorModel, LatentCode};
use crate::knn::KdTree;

/// Which discriminator output the feature-distance loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    /// Squared distance between penultimate pooled features.
    Feature,
    /// Squared difference of the scalar logits.
    Logit,
}

impl Default for FdMode {
    fn default() -> Self {
        FdMode::Feature
    }
}

/// One optimization stage: learning rates for the latent code and the
/// generator parameters, and an iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionStage {
    pub lr_z: f64,
    pub lr_theta: f64,
    pub iterations: usize,
}

/// Two-stage schedule; the default matches the reference settings of
/// (2e-5, 1e-4) then (1e-5, 1e-5) with 40 iterations per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSchedule {
    pub stages: Vec<InversionStage>,
}

impl Default for InversionSchedule {
    fn default() -> Self {
        Self {
            stages: vec![
                InversionStage {
                    lr_z: 2e-5,
                    lr_theta: 1e-4,
                    iterations: 40,
                },
                InversionStage {
                    lr_z: 1e-5,
                    lr_theta: 1e-5,
                    iterations: 40,
                },
            ],
        }
    }
}

impl InversionSchedule {
    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            if !(s.lr_z > 0.0 && s.lr_z.is_finite() && s.lr_theta > 0.0 && s.lr_theta.is_finite())
            {
                return Err(Error::InvalidParameter(
                    "inversion learning rates must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// Per-iterate loss values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub cd: f64,
    pub fd: f64,
    pub total: f64,
}

/// Inversion output: the best-loss iterate, its fine-tuned generator, the
/// reconstruction, and the loss trace.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub z_star: LatentCode,
    pub theta_star: GeneratorModel,
    pub p_rec: PointCloud,
    pub loss_trace: Vec<LossRecord>,
}

/// Mean nearest-neighbor distance in both directions, with plain Euclidean
/// norms.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(chamfer_points(&a.to_matrix(), &b.to_matrix()))
}

fn rows_as_arrays(m: &Array2<f64>) -> Vec<[f64; 3]> {
    m.rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect()
}

pub fn chamfer_points(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pa = rows_as_arrays(a);
    let pb = rows_as_arrays(b);
    let tree_a = KdTree::<3>::build(pa.clone());
    let tree_b = KdTree::<3>::build(pb.clone());
    let mut sum_a = 0.0;
    for p in &pa {
        sum_a += tree_b.nearest(p).expect("non-empty").1.sqrt();
    }
    let mut sum_b = 0.0;
    for p in &pb {
        sum_b += tree_a.nearest(p).expect("non-empty").1.sqrt();
    }
    sum_a / pa.len() as f64 + sum_b / pb.len() as f64
}

/// Chamfer value plus its gradient with respect to the first argument.
/// Zero-distance matches contribute a zero subgradient.
pub fn chamfer_points_grad(rec: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let pr = rows_as_arrays(rec);
    let pt = rows_as_arrays(target);
    let tree_r = KdTree::<3>::build(pr.clone());
    let tree_t = KdTree::<3>::build(pt.clone());
    let n_r = pr.len() as f64;
    let n_t = pt.len() as f64;
    let mut grad = Array2::zeros(rec.raw_dim());
    let mut sum_r = 0.0;
    for (i, p) in pr.iter().enumerate() {
        let (j, d2) = tree_t.nearest(p).expect("non-empty");
        let d = d2.sqrt();
        sum_r += d;
        if d > 0.0 {
            for c in 0..3 {
                grad[[i, c]] += (p[c] - pt[j][c]) / (d * n_r);
            }
        }
    }
    let mut sum_t = 0.0;
    for q in &pt {
        let (i, d2) = tree_r.nearest(q).expect("non-empty");
        let d = d2.sqrt();
        sum_t += d;
        if d > 0.0 {
            for c in 0..3 {
                grad[[i, c]] += (pr[i][c] - q[c]) / (d * n_t);
            }
        }
    }
    (sum_r / n_r + sum_t / n_t, grad)
}

/// Squared distance between the discriminator's penultimate features of the
/// two clouds.
pub fn feature_distance(
    d: &DiscriminatorModel,
    p_rec: &PointCloud,
    p_in: &PointCloud,
) -> Result<f64> {
    feature_distance_mode(d, p_rec, p_in, FdMode::Feature)
}

pub fn feature_distance_mode(
    d: &DiscriminatorModel,
    p_rec: &PointCloud,
    p_in: &PointCloud,
    mode: FdMode,
) -> Result<f64> {
    let out_rec = d.discriminate(p_rec)?;
    let out_in = d.discriminate(p_in)?;
    Ok(match mode {
        FdMode::Feature => (&out_rec.feature - &out_in.feature)
            .iter()
            .map(|v| v * v)
            .sum(),
        FdMode::Logit => (out_rec.logit - out_in.logit).powi(2),
    })
}

struct FdReference {
    feature: Array1<f64>,
    logit: f64,
}

/// FD loss and its gradient with respect to the reconstructed points, with
/// the input-cloud reference held fixed.
fn fd_with_grad(
    d: &DiscriminatorModel,
    rec: &Array2<f64>,
    reference: &FdReference,
    mode: FdMode,
) -> (f64, Array2<f64>) {
    let (out, cache) = d.forward_cached(rec);
    match mode {
        FdMode::Feature => {
            let diff = &out.feature - &reference.feature;
            let fd = diff.iter().map(|v| v * v).sum();
            let dfeature = 2.0 * &diff;
            let (_, d_points) = d.backward(&cache, 0.0, Some(&dfeature));
            (fd, d_points)
        }
        FdMode::Logit => {
            let delta = out.logit - reference.logit;
            let (_, d_points) = d.backward(&cache, 2.0 * delta, None);
            (delta * delta, d_points)
        }
    }
}

/// Total inversion loss (Chamfer plus feature distance) of `G(z)` against a
/// fixed target, with gradients for the generator parameters and the latent
/// code. The discriminator is fixed.
pub fn inversion_loss_with_grads(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    z: &LatentCode,
    target: &Array2<f64>,
    fd_mode: FdMode,
) -> (LossRecord, Vec<crate::nn::LinearGrad>, Array1<f64>) {
    let reference = {
        let out = d.forward(target);
        FdReference {
            feature: out.feature,
            logit: out.logit,
        }
    };
    let (rec, gen_cache) = g.forward_cached(z);
    let (cd, d_rec_cd) = chamfer_points_grad(&rec, target);
    let (fd, d_rec_fd) = fd_with_grad(d, &rec, &reference, fd_mode);
    let d_rec = &d_rec_cd + &d_rec_fd;
    let (g_grads, dz) = g.backward(&gen_cache, &d_rec);
    (
        LossRecord {
            cd,
            fd,
            total: cd + fd,
        },
        g_grads,
        dz,
    )
}

/// Inverts the generator against `p_in`: starting from the best of
/// `candidates` seeded standard-normal latent codes (lowest initial Chamfer),
/// runs plain gradient descent jointly over `(z, theta)` per the schedule
/// with the discriminator frozen, and returns the best-loss iterate.
pub fn invert(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    p_in: &PointCloud,
    schedule: &InversionSchedule,
    candidates: usize,
    fd_mode: FdMode,
    seed: u64,
) -> Result<InversionResult> {
    p_in.validate()?;
    schedule.validate()?;
    if candidates == 0 {
        return Err(Error::InvalidParameter(
            "at least one init candidate is required".into(),
        ));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let target = resample_points(p_in, g.point_count(), &mut rng);

    let mut z = sample_latent(g.latent_dim, &mut rng);
    let mut best_init = chamfer_points(&g.forward(&z), &target);
    for _ in 1..candidates {
        let cand = sample_latent(g.latent_dim, &mut rng);
        let cd = chamfer_points(&g.forward(&cand), &target);
        if cd < best_init {
            best_init = cd;
            z = cand;
        }
    }

    let reference = {
        let out = d.forward(&target);
        FdReference {
            feature: out.feature,
            logit: out.logit,
        }
    };

    let mut gen = g.clone();
    let mut trace = Vec::with_capacity(schedule.total_iterations() + 1);
    let mut best: Option<(f64, LatentCode, GeneratorModel)> = None;
    let mut iteration = 0usize;

    for stage in &schedule.stages {
        for _ in 0..stage.iterations {
            let (rec, gen_cache) = gen.forward_cached(&z);
            let (cd, d_rec_cd) = chamfer_points_grad(&rec, &target);
            let (fd, d_rec_fd) = fd_with_grad(d, &rec, &reference, fd_mode);
            let total = cd + fd;
            trace.push(LossRecord { cd, fd, total });
            if !total.is_finite() {
                return Err(Error::InversionDiverged {
                    iteration,
                    loss: total,
                });
            }
            if best.as_ref().map_or(true, |(b, _, _)| total < *b) {
                best = Some((total, z.clone(), gen.clone()));
            }

            let d_rec = &d_rec_cd + &d_rec_fd;
            let (g_grads, dz) = gen.backward(&gen_cache, &d_rec);
            gen.mlp.apply_step(&g_grads, stage.lr_theta);
            z.scaled_add(-stage.lr_z, &dz);
            iteration += 1;
        }
    }

    // Score the final iterate as well; short schedules may end uphill.
    let rec = gen.forward(&z);
    let (cd, _) = chamfer_points_grad(&rec, &target);
    let fd = {
        let out = d.forward(&rec);
        match fd_mode {
            FdMode::Feature => (&out.feature - &reference.feature)
                .iter()
                .map(|v| v * v)
                .sum(),
            FdMode::Logit => (out.logit - reference.logit).powi(2),
        }
    };
    let total = cd + fd;
    trace.push(LossRecord { cd, fd, total });
    if !total.is_finite() {
        return Err(Error::InversionDiverged {
            iteration,
            loss: total,
        });
    }
    if best.as_ref().map_or(true, |(b, _, _)| total < *b) {
        best = Some((total, z, gen));
    }

    let (_, z_star, theta_star) = best.expect("at least one iterate evaluated");
    let p_rec = theta_star.generate(&z_star)?;
    Ok(InversionResult {
        z_star,
        theta_star,
        p_rec,
        loss_trace: trace,
    })
}
