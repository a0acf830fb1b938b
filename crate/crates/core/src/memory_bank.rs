//! Memory bank of normal descriptors, greedy minimax coreset subsampling,
//! and branch-1 anomaly scoring.

use std::path::Path;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpfh::FeatureMatrix;
use crate::io::{read_feature_matrix, write_feature_matrix};

/// All training descriptors, row per point, with `(sample, point)` provenance.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    data: Vec<f64>,
    dim: usize,
    provenance: Vec<(u32, u32)>,
    sample_ids: Vec<String>,
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        Self {
            data: Vec::new(),
            dim,
            provenance: Vec::new(),
            sample_ids: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[(u32, u32)] {
        &self.provenance
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Appends one sample's descriptor rows.
    pub fn push_sample(&mut self, sample_id: &str, features: &FeatureMatrix) -> Result<()> {
        if features.ncols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: features.ncols(),
            });
        }
        let sample_index = self.sample_ids.len() as u32;
        self.sample_ids.push(sample_id.to_string());
        self.data.extend(features.iter().copied());
        for point in 0..features.nrows() {
            self.provenance.push((sample_index, point as u32));
        }
        Ok(())
    }
}

/// Coreset size: a fraction of the bank or an absolute row count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoresetTarget {
    Fraction(f64),
    Count(usize),
}

impl CoresetTarget {
    fn resolve(&self, bank_len: usize) -> Result<usize> {
        let size = match *self {
            CoresetTarget::Fraction(f) => {
                if !(f.is_finite() && f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidSize(format!(
                        "fraction must be in (0, 1], got {f}"
                    )));
                }
                ((f * bank_len as f64).ceil() as usize).max(1)
            }
            CoresetTarget::Count(c) => c,
        };
        if size == 0 {
            return Err(Error::InvalidSize("target size must be positive".into()));
        }
        if size > bank_len {
            return Err(Error::InvalidSize(format!(
                "target {size} exceeds bank size {bank_len}"
            )));
        }
        Ok(size)
    }
}

/// Greedily selected subset of the memory bank.
#[derive(Debug, Clone)]
pub struct Coreset {
    pub features: Array2<f64>,
    /// Bank row index of each selected row, in selection order.
    pub bank_indices: Vec<usize>,
    pub fraction: Option<f64>,
    pub bank_size: usize,
    pub seed: u64,
}

/// Sidecar metadata persisted next to the binary feature file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoresetSidecar {
    pub seed: u64,
    pub fraction: Option<f64>,
    pub bank_size: usize,
    pub checksum: u64,
}

/// Greedy minimax (k-center) subsampling: start from a uniformly drawn row,
/// then repeatedly add the row farthest from the selected set, ties to the
/// lowest row index.
pub fn coreset_sample(bank: &MemoryBank, target: CoresetTarget, seed: u64) -> Result<Coreset> {
    if bank.is_empty() {
        return Err(Error::EmptyInput);
    }
    let size = target.resolve(bank.len())?;
    let mut rng = StdRng::seed_from_u64(seed);
    let first = rng.random_range(0..bank.len());

    let mut selected = Vec::with_capacity(size);
    selected.push(first);
    // Squared distance from each row to the nearest selected row.
    let mut min_dist2: Vec<f64> = (0..bank.len())
        .map(|i| slice_dist2(bank.row(i), bank.row(first)))
        .collect();
    while selected.len() < size {
        let mut best = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist2.iter().enumerate() {
            if d > best_dist {
                best_dist = d;
                best = i;
            }
        }
        selected.push(best);
        let pivot = bank.row(best).to_vec();
        for i in 0..bank.len() {
            let d = slice_dist2(bank.row(i), &pivot);
            if d < min_dist2[i] {
                min_dist2[i] = d;
            }
        }
    }

    let dim = bank.dim();
    let mut data = Vec::with_capacity(size * dim);
    for &i in &selected {
        data.extend_from_slice(bank.row(i));
    }
    Ok(Coreset {
        features: Array2::from_shape_vec((size, dim), data).expect("rectangular"),
        bank_indices: selected,
        fraction: match target {
            CoresetTarget::Fraction(f) => Some(f),
            CoresetTarget::Count(_) => None,
        },
        bank_size: bank.len(),
        seed,
    })
}

fn slice_dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Branch-1 scores: squared Euclidean distance from each test descriptor to
/// its nearest coreset row.
pub fn score_features(coreset: &Coreset, test: &FeatureMatrix) -> Result<Vec<f64>> {
    if test.ncols() != coreset.features.ncols() {
        return Err(Error::DimMismatch {
            expected: coreset.features.ncols(),
            actual: test.ncols(),
        });
    }
    if test.nrows() == 0 || coreset.features.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let scores: Vec<f64> = (0..test.nrows())
        .into_par_iter()
        .map(|i| {
            let row = test.row(i);
            let mut best = f64::INFINITY;
            for j in 0..coreset.features.nrows() {
                let mut acc = 0.0;
                for (x, y) in row.iter().zip(coreset.features.row(j).iter()) {
                    let d = x - y;
                    acc += d * d;
                }
                if acc < best {
                    best = acc;
                }
            }
            best
        })
        .collect();
    Ok(scores)
}

/// Coverage radius of a selection: the largest distance from any bank row to
/// its nearest selected row.
pub fn coverage_radius(bank: &MemoryBank, coreset: &Coreset) -> f64 {
    (0..bank.len())
        .map(|i| {
            coreset
                .bank_indices
                .iter()
                .map(|&j| slice_dist2(bank.row(i), bank.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

impl Coreset {
    /// Persists the rows in the binary feature container plus a JSON sidecar
    /// with seed, fraction, bank size, and a checksum of the binary payload.
    pub fn save(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        write_feature_matrix(bin_path, &self.features)?;
        let sidecar = CoresetSidecar {
            seed: self.seed,
            fraction: self.fraction,
            bank_size: self.bank_size,
            checksum: fnv1a64(&std::fs::read(bin_path)?),
        };
        std::fs::write(
            json_path,
            serde_json::to_string_pretty(&sidecar).expect("serializable sidecar"),
        )?;
        Ok(())
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let sidecar: CoresetSidecar = serde_json::from_str(&std::fs::read_to_string(json_path)?)
            .map_err(|e| Error::Format(format!("coreset sidecar: {e}")))?;
        let bytes = std::fs::read(bin_path)?;
        if fnv1a64(&bytes) != sidecar.checksum {
            return Err(Error::Format("coreset checksum mismatch".into()));
        }
        let features = read_feature_matrix(bin_path)?;
        Ok(Self {
            bank_indices: Vec::new(),
            fraction: sidecar.fraction,
            bank_size: sidecar.bank_size,
            seed: sidecar.seed,
            features,
        })
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
