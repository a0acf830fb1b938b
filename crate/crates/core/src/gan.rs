//! A small point-cloud GAN: a per-point MLP displaces a fixed unit-sphere
//! prior conditioned on a latent code, and a permutation-invariant
//! discriminator scores clouds through a per-point MLP, max-pool, and a
//! small head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nn::{
    accumulate, scale_grads, sigmoid, softplus, tanh_backward, Linear, LinearGrad, Mlp, OptimKind,
    Optimizer,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"U3AD";
const CHECKPOINT_VERSION: u32 = 1;

/// Latent input vector of the generator.
pub type LatentCode = Array1<f64>;

/// Evenly distributed points on the unit sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Array2<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out = Array2::zeros((n, 3));
    for k in 0..n {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * k as f64;
        out[[k, 0]] = r * phi.cos();
        out[[k, 1]] = r * phi.sin();
        out[[k, 2]] = z;
    }
    out
}

/// Generator: each prior point is displaced by an MLP over (point, latent).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub prior: Array2<f64>,
    pub latent_dim: usize,
    pub mlp: Mlp,
}

impl GeneratorModel {
    pub fn seeded(latent_dim: usize, prior_points: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut dims = vec![3 + latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(3);
        Self {
            prior: fibonacci_sphere(prior_points),
            latent_dim,
            mlp: Mlp::seeded(&dims, false, &mut rng),
        }
    }

    pub fn point_count(&self) -> usize {
        self.prior.nrows()
    }

    fn input_block(&self, z: &LatentCode) -> Array2<f64> {
        let n = self.prior.nrows();
        let mut x = Array2::zeros((n, 3 + self.latent_dim));
        for i in 0..n {
            for c in 0..3 {
                x[[i, c]] = self.prior[[i, c]];
            }
            for (c, &v) in z.iter().enumerate() {
                x[[i, 3 + c]] = v;
            }
        }
        x
    }

    pub fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::DimMismatch {
                expected: self.latent_dim,
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// Output points as an N x 3 matrix.
    pub fn forward(&self, z: &LatentCode) -> Array2<f64> {
        &self.prior + &self.mlp.forward(&self.input_block(z))
    }

    pub fn forward_cached(&self, z: &LatentCode) -> (Array2<f64>, crate::nn::MlpCache) {
        let (disp, cache) = self.mlp.forward_cached(&self.input_block(z));
        (&self.prior + &disp, cache)
    }

    /// Gradients of a scalar loss with respect to MLP parameters and the
    /// latent code, given the loss gradient at the output points.
    pub fn backward(
        &self,
        cache: &crate::nn::MlpCache,
        d_out: &Array2<f64>,
    ) -> (Vec<LinearGrad>, Array1<f64>) {
        let (grads, dx) = self.mlp.backward(cache, d_out);
        let dz = dx.slice(ndarray::s![.., 3..]).sum_axis(Axis(0));
        (grads, dz)
    }

    pub fn generate(&self, z: &LatentCode) -> Result<PointCloud> {
        self.check_latent(z)?;
        PointCloud::from_matrix(&self.forward(z))
    }
}

/// Discriminator output: the raw logit and the penultimate pooled feature.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub logit: f64,
    pub feature: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    point_cache: crate::nn::MlpCache,
    head_cache: crate::nn::MlpCache,
    argmax: Vec<usize>,
    n_points: usize,
}

#[derive(Debug, Clone)]
pub struct DiscGrads {
    pub point: Vec<LinearGrad>,
    pub head: Vec<LinearGrad>,
}

impl DiscGrads {
    fn zeros(d: &DiscriminatorModel) -> Self {
        Self {
            point: d.point_mlp.grad_zeros(),
            head: d.head.grad_zeros(),
        }
    }

    fn accumulate(&mut self, other: &DiscGrads) {
        accumulate(&mut self.point, &other.point);
        accumulate(&mut self.head, &other.head);
    }

    fn scale(&mut self, s: f64) {
        scale_grads(&mut self.point, s);
        scale_grads(&mut self.head, s);
    }
}

/// Permutation-invariant discriminator: per-point MLP, element-wise max-pool
/// over points, then a two-layer head whose hidden activation is the exposed
/// feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    pub point_mlp: Mlp,
    pub head: Mlp,
}

impl DiscriminatorModel {
    pub fn seeded(point_hidden: &[usize], feature_dim: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut point_dims = vec![3];
        point_dims.extend_from_slice(point_hidden);
        let pooled = *point_dims.last().expect("non-empty");
        Self {
            point_mlp: Mlp::seeded(&point_dims, true, &mut rng),
            head: Mlp::seeded(&[pooled, feature_dim, 1], false, &mut rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.layers[0].output_dim()
    }

    pub fn forward_cached(&self, points: &Array2<f64>) -> (DiscOutput, DiscCache) {
        let (per_point, point_cache) = self.point_mlp.forward_cached(points);
        let cols = per_point.ncols();
        let mut pooled = Array2::zeros((1, cols));
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            let mut best = f64::NEG_INFINITY;
            for r in 0..per_point.nrows() {
                let v = per_point[[r, c]];
                if v > best {
                    best = v;
                    argmax[c] = r;
                }
            }
            pooled[[0, c]] = best;
        }
        let (logit_row, head_cache) = self.head.forward_cached(&pooled);
        let feature = head_cache.xs[1].row(0).to_owned();
        (
            DiscOutput {
                logit: logit_row[[0, 0]],
                feature,
            },
            DiscCache {
                point_cache,
                head_cache,
                argmax,
                n_points: points.nrows(),
            },
        )
    }

    pub fn forward(&self, points: &Array2<f64>) -> DiscOutput {
        self.forward_cached(points).0
    }

    /// Scores a point cloud, returning the logit and pooled feature.
    pub fn discriminate(&self, cloud: &PointCloud) -> Result<DiscOutput> {
        cloud.validate()?;
        Ok(self.forward(&cloud.to_matrix()))
    }

    /// Backward pass from a logit gradient and an optional direct gradient
    /// on the penultimate feature. Returns parameter gradients and the
    /// gradient at the input points.
    pub fn backward(
        &self,
        cache: &DiscCache,
        dlogit: f64,
        dfeature: Option<&Array1<f64>>,
    ) -> (DiscGrads, Array2<f64>) {
        debug_assert_eq!(self.head.layers.len(), 2, "fixed two-layer head");
        let feature_row = &cache.head_cache.xs[1];
        let pooled_row = &cache.head_cache.xs[0];

        let dlogit_row = Array2::from_elem((1, 1), dlogit);
        let (g2, mut dfeat) = self.head.layers[1].backward(feature_row, &dlogit_row);
        if let Some(df) = dfeature {
            for (acc, v) in dfeat.row_mut(0).iter_mut().zip(df.iter()) {
                *acc += v;
            }
        }
        let dpre = tanh_backward(feature_row, &dfeat);
        let (g1, dpooled) = self.head.layers[0].backward(pooled_row, &dpre);

        let cols = cache.argmax.len();
        let mut d_per_point = Array2::zeros((cache.n_points, cols));
        for c in 0..cols {
            d_per_point[[cache.argmax[c], c]] = dpooled[[0, c]];
        }
        let (point_grads, d_points) = self.point_mlp.backward(&cache.point_cache, &d_per_point);
        (
            DiscGrads {
                point: point_grads,
                head: vec![g1, g2],
            },
            d_points,
        )
    }
}

/// `-log sigma(D(points))`: the real-sample term of the adversarial
/// objective, with gradients for the discriminator.
pub fn real_term_with_grads(d: &DiscriminatorModel, points: &Array2<f64>) -> (f64, DiscGrads) {
    let (out, cache) = d.forward_cached(points);
    let loss = softplus(-out.logit);
    let (grads, _) = d.backward(&cache, sigmoid(out.logit) - 1.0, None);
    (loss, grads)
}

/// `-log(1 - sigma(D(G(z))))`: the generated-sample term, with gradients for
/// the discriminator, the generator, and the latent code.
pub fn fake_term_with_grads(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    z: &LatentCode,
) -> (f64, DiscGrads, Vec<LinearGrad>, Array1<f64>) {
    let (points, gen_cache) = g.forward_cached(z);
    let (out, cache) = d.forward_cached(&points);
    let loss = softplus(out.logit);
    let (d_grads, d_points) = d.backward(&cache, sigmoid(out.logit), None);
    let (g_grads, dz) = g.backward(&gen_cache, &d_points);
    (loss, d_grads, g_grads, dz)
}

/// Non-saturating generator surrogate `-log sigma(D(G(z)))` with gradients
/// for the generator and latent code.
pub fn generator_loss_with_grads(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    z: &LatentCode,
) -> (f64, Vec<LinearGrad>, Array1<f64>) {
    let (points, gen_cache) = g.forward_cached(z);
    let (out, cache) = d.forward_cached(&points);
    let loss = softplus(-out.logit);
    let (_, d_points) = d.backward(&cache, sigmoid(out.logit) - 1.0, None);
    let (g_grads, dz) = g.backward(&gen_cache, &d_points);
    (loss, g_grads, dz)
}

/// Architecture of the generator/discriminator pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub latent_dim: usize,
    pub prior_points: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for GanArch {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            prior_points: 4096,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 128],
            feature_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub optimizer: OptimKind,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4,
            lr_d: 1e-4,
            lr_g: 1e-4,
            optimizer: OptimKind::sgd(0.9),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug)]
pub struct GanTrainOutput {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub losses: Vec<EpochLoss>,
}

/// Resamples a cloud to exactly `n` rows: a uniform subsample without
/// replacement when the cloud is large enough, padded by resampling with
/// replacement otherwise.
pub fn resample_points(cloud: &PointCloud, n: usize, rng: &mut StdRng) -> Array2<f64> {
    let len = cloud.len();
    let mut picks: Vec<usize> = if len >= n {
        let mut idx = rand::seq::index::sample(rng, len, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        while idx.len() < n {
            idx.push(rng.random_range(0..len));
        }
        idx
    };
    let mut out = Array2::zeros((n, 3));
    for (r, i) in picks.drain(..).enumerate() {
        let p = cloud.points[i];
        out[[r, 0]] = p.x;
        out[[r, 1]] = p.y;
        out[[r, 2]] = p.z;
    }
    out
}

pub fn sample_latent(dim: usize, rng: &mut StdRng) -> LatentCode {
    Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

/// Alternating adversarial training on normal clouds. The discriminator
/// maximizes `log D(real) + log(1 - D(G(z)))`; the generator minimizes the
/// non-saturating surrogate `-log D(G(z))`.
pub fn train_gan(
    clouds: &[PointCloud],
    arch: &GanArch,
    cfg: &GanTrainConfig,
) -> Result<GanTrainOutput> {
    if clouds.len() < 2 {
        return Err(Error::InvalidParameter(
            "GAN training needs at least 2 clouds".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidParameter(
            "epochs and batch size must be positive".into(),
        ));
    }
    for c in clouds {
        c.validate()?;
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let real: Vec<Array2<f64>> = clouds
        .iter()
        .map(|c| resample_points(c, arch.prior_points, &mut rng))
        .collect();

    let mut g = GeneratorModel::seeded(
        arch.latent_dim,
        arch.prior_points,
        &arch.gen_hidden,
        cfg.seed.wrapping_add(1),
    );
    let mut d = DiscriminatorModel::seeded(
        &arch.disc_hidden,
        arch.feature_dim,
        cfg.seed.wrapping_add(2),
    );

    let mut g_opt = Optimizer::new(cfg.optimizer, &g.mlp);
    let mut d_point_opt = Optimizer::new(cfg.optimizer, &d.point_mlp);
    let mut d_head_opt = Optimizer::new(cfg.optimizer, &d.head);

    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..real.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut batches = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Discriminator step on real and generated minibatches. Latent
            // codes are drawn up front so the parallel map stays on the
            // same deterministic stream.
            let d_zs: Vec<LatentCode> = batch
                .iter()
                .map(|_| sample_latent(arch.latent_dim, &mut rng))
                .collect();
            let per_sample: Vec<(f64, DiscGrads, DiscGrads)> = batch
                .par_iter()
                .zip(d_zs.par_iter())
                .map(|(&i, z)| {
                    let (loss_r, grads_r) = real_term_with_grads(&d, &real[i]);
                    let fake = g.forward(z);
                    let (out, cache) = d.forward_cached(&fake);
                    let loss_f = softplus(out.logit);
                    let (grads_f, _) = d.backward(&cache, sigmoid(out.logit), None);
                    (loss_r + loss_f, grads_r, grads_f)
                })
                .collect();
            let mut d_grads = DiscGrads::zeros(&d);
            let mut d_loss = 0.0;
            for (loss, grads_r, grads_f) in &per_sample {
                d_loss += loss;
                d_grads.accumulate(grads_r);
                d_grads.accumulate(grads_f);
            }
            let inv = 1.0 / batch.len() as f64;
            d_loss *= inv;
            d_grads.scale(inv);
            d_point_opt.step(&mut d.point_mlp, &d_grads.point, cfg.lr_d);
            d_head_opt.step(&mut d.head, &d_grads.head, cfg.lr_d);

            // Generator step.
            let g_zs: Vec<LatentCode> = batch
                .iter()
                .map(|_| sample_latent(arch.latent_dim, &mut rng))
                .collect();
            let per_sample: Vec<(f64, Vec<LinearGrad>)> = g_zs
                .par_iter()
                .map(|z| {
                    let (loss, grads, _) = generator_loss_with_grads(&g, &d, z);
                    (loss, grads)
                })
                .collect();
            let mut g_grads = g.mlp.grad_zeros();
            let mut g_loss = 0.0;
            for (loss, grads) in &per_sample {
                g_loss += loss;
                accumulate(&mut g_grads, grads);
            }
            g_loss *= inv;
            scale_grads(&mut g_grads, inv);
            g_opt.step(&mut g.mlp, &g_grads, cfg.lr_g);

            if !(d_loss.is_finite() && g_loss.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                    d_loss,
                    g_loss,
                });
            }
            d_sum += d_loss;
            g_sum += g_loss;
            batches += 1.0;
        }
        if !(g.mlp.params_finite() && d.point_mlp.params_finite() && d.head.params_finite()) {
            return Err(Error::TrainingDiverged {
                epoch,
                batch: 0,
                d_loss: d_sum / batches,
                g_loss: g_sum / batches,
            });
        }
        losses.push(EpochLoss {
            epoch,
            d_loss: d_sum / batches,
            g_loss: g_sum / batches,
        });
    }

    Ok(GanTrainOutput {
        generator: g,
        discriminator: d,
        losses,
    })
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f64s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn write_mlp(w: &mut impl Write, mlp: &Mlp) -> Result<()> {
    for layer in &mlp.layers {
        write_f64s(w, layer.w.iter())?;
        write_f64s(w, layer.b.iter())?;
    }
    Ok(())
}

fn read_mlp(r: &mut impl Read, dims: &[usize], activate_last: bool) -> Result<Mlp> {
    let mut layers = Vec::new();
    for pair in dims.windows(2) {
        let (input, output) = (pair[0], pair[1]);
        let w = Array2::from_shape_vec((output, input), read_f64s(r, input * output)?)
            .expect("shape matches count");
        let b = Array1::from_vec(read_f64s(r, output)?);
        layers.push(Linear { w, b });
    }
    Ok(Mlp {
        layers,
        activate_last,
    })
}

/// Writes both models: magic, version, architecture header as u32 values,
/// then all parameters as little-endian f64 in declaration order.
pub fn save_checkpoint(
    path: &Path,
    g: &GeneratorModel,
    d: &DiscriminatorModel,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, g.latent_dim as u32)?;
    write_u32(&mut w, g.prior.nrows() as u32)?;
    let gen_hidden: Vec<usize> = g.mlp.layers[..g.mlp.layers.len() - 1]
        .iter()
        .map(Linear::output_dim)
        .collect();
    write_u32(&mut w, gen_hidden.len() as u32)?;
    for h in &gen_hidden {
        write_u32(&mut w, *h as u32)?;
    }
    let disc_hidden: Vec<usize> = d.point_mlp.layers.iter().map(Linear::output_dim).collect();
    write_u32(&mut w, disc_hidden.len() as u32)?;
    for h in &disc_hidden {
        write_u32(&mut w, *h as u32)?;
    }
    write_u32(&mut w, d.feature_dim() as u32)?;

    write_f64s(&mut w, g.prior.iter())?;
    write_mlp(&mut w, &g.mlp)?;
    write_mlp(&mut w, &d.point_mlp)?;
    write_mlp(&mut w, &d.head)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GeneratorModel, DiscriminatorModel)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let latent = read_u32(&mut r)? as usize;
    let prior_n = read_u32(&mut r)? as usize;
    let gen_hidden_count = read_u32(&mut r)? as usize;
    let mut gen_dims = vec![3 + latent];
    for _ in 0..gen_hidden_count {
        gen_dims.push(read_u32(&mut r)? as usize);
    }
    gen_dims.push(3);
    let disc_hidden_count = read_u32(&mut r)? as usize;
    let mut point_dims = vec![3];
    for _ in 0..disc_hidden_count {
        point_dims.push(read_u32(&mut r)? as usize);
    }
    let feature_dim = read_u32(&mut r)? as usize;

    let prior = Array2::from_shape_vec((prior_n, 3), read_f64s(&mut r, prior_n * 3)?)
        .expect("shape matches count");
    let mlp = read_mlp(&mut r, &gen_dims, false)?;
    let point_mlp = read_mlp(&mut r, &point_dims, true)?;
    let pooled = *point_dims.last().expect("non-empty");
    let head = read_mlp(&mut r, &[pooled, feature_dim, 1], false)?;

    Ok((
        GeneratorModel {
            prior,
            latent_dim: latent,
            mlp,
        },
        DiscriminatorModel { point_mlp, head },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn toy_gen(seed: u64) -> GeneratorModel {
        GeneratorModel::seeded(4, 32, &[8, 8], seed)
    }

    fn toy_disc(seed: u64) -> DiscriminatorModel {
        DiscriminatorModel::seeded(&[8, 16], 8, seed)
    }

    fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = StdRng::seed_from_u64(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    let v = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    v.normalize()
                })
                .collect(),
        )
    }

    #[test]
    fn zero_weights_reproduce_the_prior() {
        let mut g = toy_gen(0);
        for layer in &mut g.mlp.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let z = Array1::from_elem(4, 0.7);
        let out = g.forward(&z);
        assert_eq!(out, g.prior);
    }

    #[test]
    fn generation_is_deterministic() {
        let g = toy_gen(5);
        let z = Array1::from_shape_fn(4, |i| i as f64 * 0.3 - 0.5);
        assert_eq!(g.forward(&z), g.forward(&z));
    }

    #[test]
    fn generator_matches_straight_line_reevaluation() {
        let g = toy_gen(9);
        let mut rng = StdRng::seed_from_u64(10);
        let z = sample_latent(4, &mut rng);
        let out = g.forward(&z);
        for k in 0..g.point_count() {
            let mut x: Vec<f64> = (0..3).map(|c| g.prior[[k, c]]).collect();
            x.extend(z.iter());
            let mut h = x;
            for (li, layer) in g.mlp.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.output_dim()];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut acc = layer.b[o];
                    for (i, v) in h.iter().enumerate() {
                        acc += layer.w[[o, i]] * v;
                    }
                    *slot = if li + 1 < g.mlp.layers.len() {
                        acc.tanh()
                    } else {
                        acc
                    };
                }
                h = next;
            }
            for c in 0..3 {
                assert!((out[[k, c]] - (g.prior[[k, c]] + h[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discriminator_is_permutation_invariant() {
        let d = toy_disc(3);
        let cloud = sphere_cloud(40, 4);
        let base = d.discriminate(&cloud).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let mut shuffled = cloud.clone();
        shuffled.points.shuffle(&mut rng);
        let perm = d.discriminate(&shuffled).unwrap();
        assert_eq!(base.logit, perm.logit);
        assert_eq!(base.feature, perm.feature);
    }

    #[test]
    fn single_point_pool_equals_that_point() {
        let d = toy_disc(7);
        let pts = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.9]).unwrap();
        let per_point = d.point_mlp.forward(&pts);
        let (out, cache) = d.forward_cached(&pts);
        assert!(cache.argmax.iter().all(|&r| r == 0));
        let pooled_row = cache.head_cache.xs[0].row(0);
        for (a, b) in pooled_row.iter().zip(per_point.row(0).iter()) {
            assert_eq!(a, b);
        }
        assert!(out.logit.is_finite());
    }

    #[test]
    fn discriminator_matches_straight_line_reevaluation() {
        let d = toy_disc(21);
        let pts = sphere_cloud(12, 5).to_matrix();
        let out = d.forward(&pts);

        let eval_point = |p: &[f64]| -> Vec<f64> {
            let mut h = p.to_vec();
            for layer in &d.point_mlp.layers {
                let mut next = vec![0.0; layer.output_dim()];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut acc = layer.b[o];
                    for (i, v) in h.iter().enumerate() {
                        acc += layer.w[[o, i]] * v;
                    }
                    *slot = acc.tanh();
                }
                h = next;
            }
            h
        };
        let mut pooled = vec![f64::NEG_INFINITY; d.point_mlp.output_dim()];
        for r in 0..pts.nrows() {
            let row: Vec<f64> = (0..3).map(|c| pts[[r, c]]).collect();
            for (slot, v) in pooled.iter_mut().zip(eval_point(&row)) {
                *slot = slot.max(v);
            }
        }
        let mut feat = vec![0.0; d.feature_dim()];
        for (o, slot) in feat.iter_mut().enumerate() {
            let mut acc = d.head.layers[0].b[o];
            for (i, v) in pooled.iter().enumerate() {
                acc += d.head.layers[0].w[[o, i]] * v;
            }
            *slot = acc.tanh();
        }
        let mut logit = d.head.layers[1].b[0];
        for (i, v) in feat.iter().enumerate() {
            logit += d.head.layers[1].w[[0, i]] * v;
        }
        assert!((out.logit - logit).abs() < 1e-12);
        for (a, b) in out.feature.iter().zip(&feat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_epoch_training_runs_and_moves_parameters() {
        let clouds: Vec<PointCloud> = (0..4).map(|i| sphere_cloud(64, i)).collect();
        let arch = GanArch {
            latent_dim: 4,
            prior_points: 32,
            gen_hidden: vec![8, 8],
            disc_hidden: vec![8, 16],
            feature_dim: 8,
        };
        let cfg = GanTrainConfig {
            epochs: 1,
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        let init = GeneratorModel::seeded(4, 32, &[8, 8], cfg.seed.wrapping_add(1));
        let out = train_gan(&clouds, &arch, &cfg).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert!(out.losses[0].d_loss.is_finite() && out.losses[0].g_loss.is_finite());
        assert!(out.generator.mlp != init.mlp, "parameters did not move");
    }

    #[test]
    fn training_on_identical_clouds_reduces_chamfer() {
        // Target far from the unit-sphere prior so there is shape to learn.
        let mut target = sphere_cloud(48, 77);
        for p in &mut target.points {
            *p *= 0.4;
        }
        let clouds: Vec<PointCloud> = (0..4).map(|_| target.clone()).collect();
        let arch = GanArch {
            latent_dim: 2,
            prior_points: 48,
            gen_hidden: vec![8],
            disc_hidden: vec![8, 8],
            feature_dim: 4,
        };
        let cfg = GanTrainConfig {
            epochs: 200,
            batch_size: 4,
            lr_d: 2e-3,
            lr_g: 2e-3,
            optimizer: OptimKind::adam(),
            seed: 5,
            ..Default::default()
        };
        let out = train_gan(&clouds, &arch, &cfg).unwrap();

        let mean_cd = |g: &GeneratorModel| -> f64 {
            let mut rng = StdRng::seed_from_u64(123);
            (0..4)
                .map(|_| {
                    let z = sample_latent(2, &mut rng);
                    let cloud = g.generate(&z).unwrap();
                    crate::inversion::chamfer(&cloud, &target).unwrap()
                })
                .sum::<f64>()
                / 4.0
        };
        let trained = mean_cd(&out.generator);
        let initial = mean_cd(&GeneratorModel::seeded(2, 48, &[8], cfg.seed.wrapping_add(1)));
        assert!(
            trained < initial,
            "chamfer did not improve: {trained} vs {initial}"
        );
        assert!(out.generator.mlp.params_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let g = toy_gen(31);
        let d = toy_disc(32);
        let dir = std::env::temp_dir().join(format!("pcad-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gan.ckpt");
        save_checkpoint(&path, &g, &d).unwrap();
        let (g2, d2) = load_checkpoint(&path).unwrap();
        assert_eq!(g, g2);
        assert_eq!(d.point_mlp, d2.point_mlp);
        assert_eq!(d.head, d2.head);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("pcad-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gan.ckpt");
        std::fs::write(&path, b"XXXX0123456789").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        let _ = std::fs::remove_dir_all(&dir);
    }
}
