//! Dense-layer building blocks with hand-written reverse-mode gradients.
//!
//! The GAN architecture is small and fixed, so each layer carries its own
//! backward pass instead of a general autodiff graph. Hidden activations are
//! hyperbolic tangent; output layers are linear unless `activate_last` is
//! set.

use ndarray::{Array1, Array2, Axis};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer with weights `w` (out x in) and bias `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradient with the same shapes as a [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn seeded(input: usize, output: usize, rng: &mut StdRng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..=bound)),
            b: Array1::from_shape_fn(output, |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Gradients for a batch: `x` is the layer input, `dy` the gradient at
    /// the output. Returns parameter gradients and the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (LinearGrad, Array2<f64>) {
        (
            LinearGrad {
                w: dy.t().dot(x),
                b: dy.sum_axis(Axis(0)),
            },
            dy.dot(&self.w),
        )
    }

    pub fn grad_zeros(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// `dy * tanh'(y)` where `y` is the post-activation output.
pub fn tanh_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    d.zip_mut_with(y, |g, &v| *g *= 1.0 - v * v);
    d
}

/// A stack of [`Linear`] layers with tanh between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

/// Per-layer inputs captured during a forward pass; `xs[i]` is the input to
/// layer `i` and `xs.last()` the final output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub xs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn seeded(dims: &[usize], activate_last: bool, rng: &mut StdRng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::seeded(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty").input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(i) {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        xs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(xs.last().expect("pushed above"));
            if self.activated(i) {
                h.mapv_inplace(f64::tanh);
            }
            xs.push(h);
        }
        (xs.last().expect("pushed").clone(), MlpCache { xs })
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (Vec<LinearGrad>, Array2<f64>) {
        let mut grads: Vec<LinearGrad> = self.layers.iter().map(Linear::grad_zeros).collect();
        let mut d = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                d = tanh_backward(&cache.xs[i + 1], &d);
            }
            let (g, dx) = self.layers[i].backward(&cache.xs[i], &d);
            grads[i] = g;
            d = dx;
        }
        (grads, d)
    }

    pub fn grad_zeros(&self) -> Vec<LinearGrad> {
        self.layers.iter().map(Linear::grad_zeros).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Flat parameter access in declaration order (per layer: weights
    /// row-major, then bias). Used for checkpoints and finite differences.
    pub fn param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return *layer.w.as_slice().expect("standard layout").get(idx).unwrap();
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if idx < layer.w.len() {
                return layer.w.as_slice_mut().expect("standard layout").get_mut(idx).unwrap();
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return &mut layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Plain gradient-descent update.
    pub fn apply_step(&mut self, grads: &[LinearGrad], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.w.scaled_add(-lr, &g.w);
            layer.b.scaled_add(-lr, &g.b);
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Flattens gradients in the same order as [`Mlp::param`].
pub fn flatten_grads(grads: &[LinearGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.w.iter().copied());
        out.extend(g.b.iter().copied());
    }
    out
}

pub fn accumulate(acc: &mut [LinearGrad], g: &[LinearGrad]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.w += &b.w;
        a.b += &b.b;
    }
}

pub fn scale_grads(grads: &mut [LinearGrad], s: f64) {
    for g in grads {
        g.w *= s;
        g.b *= s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Parameter-update rule shared by the GAN trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`Mlp`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    m: Vec<LinearGrad>,
    v: Vec<LinearGrad>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimKind, model: &Mlp) -> Self {
        Self {
            kind,
            m: model.grad_zeros(),
            v: model.grad_zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &[LinearGrad], lr: f64) {
        match self.kind {
            OptimKind::SgdMomentum { momentum } => {
                for ((layer, g), state) in model.layers.iter_mut().zip(grads).zip(&mut self.m) {
                    state.w.zip_mut_with(&g.w, |v, &gw| *v = momentum * *v + gw);
                    state.b.zip_mut_with(&g.b, |v, &gb| *v = momentum * *v + gb);
                    layer.w.scaled_add(-lr, &state.w);
                    layer.b.scaled_add(-lr, &state.b);
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                for (((layer, g), m), v) in model
                    .layers
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    m.w.zip_mut_with(&g.w, |a, &b| *a = beta1 * *a + (1.0 - beta1) * b);
                    m.b.zip_mut_with(&g.b, |a, &b| *a = beta1 * *a + (1.0 - beta1) * b);
                    v.w.zip_mut_with(&g.w, |a, &b| *a = beta2 * *a + (1.0 - beta2) * b * b);
                    v.b.zip_mut_with(&g.b, |a, &b| *a = beta2 * *a + (1.0 - beta2) * b * b);
                    for ((p, mh), vh) in layer.w.iter_mut().zip(m.w.iter()).zip(v.w.iter()) {
                        *p -= lr * (mh / bc1) / ((vh / bc2).sqrt() + eps);
                    }
                    for ((p, mh), vh) in layer.b.iter_mut().zip(m.b.iter()).zip(v.b.iter()) {
                        *p -= lr * (mh / bc1) / ((vh / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
