//! One-class SVM: the RBF-kernel nu-parameterized dual solved with pairwise
//! working-set updates.
//!
//! The dual is `min 1/2 a' Q a` subject to `0 <= a_i <= 1/(nu n)` and
//! `sum a = 1`, with `Q_ij = exp(-gamma ||x_i - x_j||^2)`. At the optimum
//! free variables share gradient value rho, and the decision function is
//! `g(x) = sum_i a_i K(x_i, x) - rho`.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KKT tolerance of the deterministic pairwise solver. The solver keeps
/// polishing well past this while it makes progress, which keeps decision
/// values stable under tiny input perturbations.
pub const KKT_TOL: f64 = 1e-6;

const POLISH_TARGET: f64 = 1e-11;
const MAX_STEPS_PER_ROW: usize = 20_000;
const MIN_STEPS: usize = 4_000_000;

/// Fitted model: support vectors with their dual coefficients, the offset,
/// and the kernel bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub support_vectors: Vec<[f64; 2]>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
}

impl OcsvmModel {
    /// Decision value `g(x)`; negative values are outside the boundary.
    pub fn decision(&self, x: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for (sv, &a) in self.support_vectors.iter().zip(&self.alpha) {
            acc += a * rbf(*sv, x, self.gamma);
        }
        acc - self.rho
    }
}

pub fn rbf(a: [f64; 2], b: [f64; 2], gamma: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (-gamma * (dx * dx + dy * dy)).exp()
}

/// Bandwidth from the median heuristic: `gamma = 1 / (2 median^2)` over
/// pairwise point distances (subsampled for large sets). Falls back to 1
/// when all points coincide.
pub fn median_heuristic_gamma(points: &[[f64; 2]], seed: u64) -> f64 {
    const CAP: usize = 1500;
    let mut rng = StdRng::seed_from_u64(seed);
    let picks: Vec<usize> = if points.len() > CAP {
        let mut idx = rand::seq::index::sample(&mut rng, points.len(), CAP).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..points.len()).collect()
    };
    let mut dists = Vec::with_capacity(picks.len() * (picks.len() - 1) / 2);
    for (i, &a) in picks.iter().enumerate() {
        for &b in &picks[i + 1..] {
            let dx = points[a][0] - points[b][0];
            let dy = points[a][1] - points[b][1];
            dists.push((dx * dx + dy * dy).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let median = dists[dists.len() / 2];
    if median > 0.0 {
        1.0 / (2.0 * median * median)
    } else {
        1.0
    }
}

/// Fits the model on 2D score pairs. Pairs are canonicalized by sorting, so
/// the fit is invariant to input order; `seed` controls the subsample drawn
/// when more than `max_pairs` pairs are given.
pub fn fit_ocsvm(pairs: &[[f64; 2]], nu: f64, gamma: f64, seed: u64) -> Result<OcsvmModel> {
    fit_ocsvm_with(pairs, nu, gamma, seed, usize::MAX)
}

pub fn fit_ocsvm_with(
    pairs: &[[f64; 2]],
    nu: f64,
    gamma: f64,
    seed: u64,
    max_pairs: usize,
) -> Result<OcsvmModel> {
    if pairs.len() < 8 {
        return Err(Error::InvalidParameter(format!(
            "OCSVM needs at least 8 pairs, got {}",
            pairs.len()
        )));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidParameter("nu must lie in (0, 1]".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter("gamma must be positive".into()));
    }
    if pairs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "pairs must be finite".into(),
        ));
    }

    let mut points: Vec<[f64; 2]> = pairs.to_vec();
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    if points.len() > max_pairs.max(8) {
        let keep = max_pairs.max(8);
        let mut rng = StdRng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, points.len(), keep).into_vec();
        idx.sort_unstable();
        points = idx.into_iter().map(|i| points[i]).collect();
    }

    let n = points.len();
    let c = 1.0 / (nu * n as f64);

    // Feasible start: fill alphas to the bound until the simplex budget is
    // spent.
    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0;
    for a in alpha.iter_mut() {
        let v = c.min(remaining);
        *a = v;
        remaining -= v;
        if remaining <= 0.0 {
            break;
        }
    }

    let kernel = KernelTable::new(&points, gamma);
    // Gradient of the objective: (Q alpha)_i.
    let mut grad = vec![0.0; n];
    for i in 0..n {
        if alpha[i] > 0.0 {
            let col = kernel.column(i);
            for (gslot, &k) in grad.iter_mut().zip(col.iter()) {
                *gslot += alpha[i] * k;
            }
        }
    }

    let bound_eps = c * 1e-12;
    let max_steps = (n * MAX_STEPS_PER_ROW).max(MIN_STEPS);
    let stall_window = (n * 50).max(100_000);
    let mut best_residual = f64::INFINITY;
    let mut last_improvement = 0usize;
    let mut residual;
    let mut step_count = 0usize;
    loop {
        // Maximal violating pair: the steepest descent direction moves mass
        // from the largest gradient (with alpha > 0) to the smallest (with
        // alpha < C).
        let mut i_min = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut j_max = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c - bound_eps && grad[t] < g_min {
                g_min = grad[t];
                i_min = t;
            }
            if alpha[t] > bound_eps && grad[t] > g_max {
                g_max = grad[t];
                j_max = t;
            }
        }
        if i_min == usize::MAX || j_max == usize::MAX {
            residual = 0.0;
            break;
        }
        residual = g_max - g_min;
        if residual <= POLISH_TARGET {
            break;
        }
        if residual < 0.99 * best_residual {
            best_residual = residual;
            last_improvement = step_count;
        }
        // Ill-conditioned duals level off; accept the plateau residual if
        // it already meets the contract.
        if step_count >= max_steps || step_count - last_improvement > stall_window {
            break;
        }
        let k_ij = kernel.value(i_min, j_max);
        let curvature = 2.0 - 2.0 * k_ij;
        let room = (c - alpha[i_min]).min(alpha[j_max]);
        let step = if curvature > 1e-18 {
            (residual / curvature).min(room)
        } else {
            room
        };
        alpha[i_min] += step;
        alpha[j_max] -= step;
        let col_i = kernel.column(i_min);
        let col_j = kernel.column(j_max);
        for ((gslot, &ki), &kj) in grad.iter_mut().zip(col_i.iter()).zip(col_j.iter()) {
            *gslot += step * (ki - kj);
        }
        step_count += 1;
    }
    if residual > KKT_TOL {
        return Err(Error::SolverFailed { residual });
    }

    // Offset from free support vectors; fall back to the midpoint of the
    // bound gradients when none are free.
    let free_eps = c * 1e-8;
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut upper = f64::NEG_INFINITY;
    let mut lower = f64::INFINITY;
    for i in 0..n {
        if alpha[i] > free_eps && alpha[i] < c - free_eps {
            free_sum += grad[i];
            free_count += 1;
        } else if alpha[i] >= c - free_eps {
            upper = upper.max(grad[i]);
        } else {
            lower = lower.min(grad[i]);
        }
    }
    let rho = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        (upper + lower) / 2.0
    };

    let mut support_vectors = Vec::new();
    let mut sv_alpha = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-14 {
            support_vectors.push(points[i]);
            sv_alpha.push(alpha[i]);
        }
    }
    Ok(OcsvmModel {
        support_vectors,
        alpha: sv_alpha,
        rho,
        gamma,
        nu,
    })
}

/// Kernel matrix, fully materialized for small problems and computed by
/// column with a small cache otherwise.
struct KernelTable {
    points: Vec<[f64; 2]>,
    gamma: f64,
    full: Option<Vec<f64>>,
    cache: std::cell::RefCell<std::collections::HashMap<usize, Vec<f64>>>,
}

const FULL_KERNEL_LIMIT: usize = 4000;
const CACHE_COLUMNS: usize = 1024;

impl KernelTable {
    fn new(points: &[[f64; 2]], gamma: f64) -> Self {
        let n = points.len();
        let full = (n <= FULL_KERNEL_LIMIT).then(|| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = rbf(points[i], points[j], gamma);
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            m
        });
        Self {
            points: points.to_vec(),
            gamma,
            full,
            cache: std::cell::RefCell::new(std::collections::HashMap::new()),
        }
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        if let Some(full) = &self.full {
            full[i * self.points.len() + j]
        } else {
            rbf(self.points[i], self.points[j], self.gamma)
        }
    }

    fn column(&self, i: usize) -> Vec<f64> {
        if let Some(full) = &self.full {
            let n = self.points.len();
            return full[i * n..(i + 1) * n].to_vec();
        }
        let mut cache = self.cache.borrow_mut();
        if let Some(col) = cache.get(&i) {
            return col.clone();
        }
        let col: Vec<f64> = self
            .points
            .iter()
            .map(|p| rbf(*p, self.points[i], self.gamma))
            .collect();
        if cache.len() >= CACHE_COLUMNS {
            cache.clear();
        }
        cache.insert(i, col.clone());
        col
    }
}

/// Maximum KKT violation of a solution, for diagnostics and tests.
pub fn kkt_residual(points: &[[f64; 2]], alpha: &[f64], nu: f64, gamma: f64) -> f64 {
    let n = points.len();
    let c = 1.0 / (nu * n as f64);
    let grad: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| alpha[j] * rbf(points[i], points[j], gamma))
                .sum()
        })
        .collect();
    let bound_eps = c * 1e-12;
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;
    for t in 0..n {
        if alpha[t] < c - bound_eps {
            g_min = g_min.min(grad[t]);
        }
        if alpha[t] > bound_eps {
            g_max = g_max.max(grad[t]);
        }
    }
    (g_max - g_min).max(0.0)
}
