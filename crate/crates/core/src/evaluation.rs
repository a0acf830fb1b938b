//! Per-region-overlap evaluation: the PRO curve over a descending threshold
//! sweep and its normalized area up to a false-positive-rate limit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Defect raster plus the evaluation domain (cells covered by data).
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mask: Array2<bool>,
    pub domain: Array2<bool>,
}

impl GroundTruth {
    pub fn new(mask: Array2<bool>, domain: Array2<bool>) -> Result<Self> {
        if mask.dim() != domain.dim() {
            return Err(Error::GeometryMismatch(format!(
                "mask {:?} vs domain {:?}",
                mask.dim(),
                domain.dim()
            )));
        }
        Ok(Self { mask, domain })
    }

    /// Full-raster domain, for masks evaluated without occupancy data.
    pub fn with_full_domain(mask: Array2<bool>) -> Self {
        let domain = Array2::from_elem(mask.dim(), true);
        Self { mask, domain }
    }

    pub fn has_defects(&self) -> bool {
        self.mask
            .iter()
            .zip(self.domain.iter())
            .any(|(&m, &d)| m && d)
    }

    /// Connected components of the in-domain defect cells, 8-connectivity.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let (rows, cols) = self.mask.dim();
        let defect = |r: usize, c: usize| self.mask[[r, c]] && self.domain[[r, c]];
        let mut seen = Array2::from_elem((rows, cols), false);
        let mut components = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if !defect(r, c) || seen[[r, c]] {
                    continue;
                }
                let mut component = Vec::new();
                let mut queue = std::collections::VecDeque::from([(r, c)]);
                seen[[r, c]] = true;
                while let Some((cr, cc)) = queue.pop_front() {
                    component.push((cr, cc));
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            if dr == 0 && dc == 0 {
                                continue;
                            }
                            let nr = cr as i64 + dr;
                            let nc = cc as i64 + dc;
                            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                                continue;
                            }
                            let (nr, nc) = (nr as usize, nc as usize);
                            if defect(nr, nc) && !seen[[nr, nc]] {
                                seen[[nr, nc]] = true;
                                queue.push_back((nr, nc));
                            }
                        }
                    }
                }
                components.push(component);
            }
        }
        components
    }
}

/// The (FPR, PRO) staircase over all distinct score thresholds, descending,
/// plus the anchor at FPR 0 holding the strictest threshold's PRO.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProCurve {
    pub anchor: (f64, f64),
    pub points: Vec<(f64, f64)>,
}

/// Sweeps every distinct score value across all samples, pooled: at each
/// threshold, PRO is the mean per-component recall over all defect
/// components and FPR is the false-positive fraction of defect-free domain
/// cells.
pub fn pro_curve(samples: &[(&Array2<f64>, &GroundTruth)]) -> Result<ProCurve> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }

    // Global component ids, their sizes, and a per-cell record.
    struct Cell {
        score: f64,
        component: Option<usize>,
    }
    let mut sizes = Vec::new();
    let mut cells = Vec::new();
    let mut normal_total = 0usize;
    for (scores, truth) in samples {
        if scores.dim() != truth.mask.dim() {
            return Err(Error::GeometryMismatch(format!(
                "scores {:?} vs truth {:?}",
                scores.dim(),
                truth.mask.dim()
            )));
        }
        let mut component_of = Array2::from_elem(truth.mask.dim(), None::<usize>);
        for component in truth.components() {
            let id = sizes.len();
            sizes.push(component.len());
            for (r, c) in component {
                component_of[[r, c]] = Some(id);
            }
        }
        for r in 0..scores.nrows() {
            for c in 0..scores.ncols() {
                if !truth.domain[[r, c]] {
                    continue;
                }
                let component = component_of[[r, c]];
                if component.is_none() {
                    normal_total += 1;
                }
                cells.push(Cell {
                    score: scores[[r, c]],
                    component,
                });
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::NoDefects);
    }

    cells.sort_by(|a, b| b.score.total_cmp(&a.score));
    let k = sizes.len() as f64;
    let mut hits = vec![0usize; sizes.len()];
    let mut recall_sum = 0.0;
    let mut false_positives = 0usize;
    let mut points = Vec::new();
    let mut i = 0;
    while i < cells.len() {
        let threshold = cells[i].score;
        // Admit every cell scoring exactly at the threshold.
        while i < cells.len() && cells[i].score == threshold {
            match cells[i].component {
                Some(id) => {
                    hits[id] += 1;
                    recall_sum += 1.0 / sizes[id] as f64;
                }
                None => false_positives += 1,
            }
            i += 1;
        }
        let fpr = if normal_total > 0 {
            false_positives as f64 / normal_total as f64
        } else {
            0.0
        };
        points.push((fpr, recall_sum / k));
    }
    Ok(ProCurve {
        anchor: (0.0, points.first().map(|p| p.1).unwrap_or(0.0)),
        points,
    })
}

/// Area under the PRO staircase from FPR 0 to `limit`, divided by `limit`.
/// The curve is read as a right-continuous step function; where several
/// thresholds share an FPR the maximum PRO attained there is used.
pub fn au_pro(curve: &ProCurve, limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "integration limit must lie in (0, 1], got {limit}"
        )));
    }
    if curve.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    // Collapse to distinct FPR values with max PRO.
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut push = |fpr: f64, pro: f64| match steps.last_mut() {
        Some((f, p)) if *f == fpr => *p = p.max(pro),
        _ => steps.push((fpr, pro)),
    };
    push(curve.anchor.0, curve.anchor.1);
    for &(fpr, pro) in &curve.points {
        push(fpr, pro);
    }

    let mut area = 0.0;
    for w in steps.windows(2) {
        let (f0, p0) = w[0];
        let f1 = w[1].0;
        if f0 >= limit {
            break;
        }
        area += p0 * (f1.min(limit) - f0);
    }
    let (f_last, p_last) = *steps.last().expect("non-empty");
    if limit > f_last {
        area += p_last * (limit - f_last);
    }
    Ok(area / limit)
}
