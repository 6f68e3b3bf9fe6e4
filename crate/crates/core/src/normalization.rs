//! Per-dimension running unit normalization.
//!
//! Statistics are recomputed from the full current buffer before every
//! ensemble retraining rather than updated incrementally; the same machinery
//! serves model inputs and — independently — next-state and reward targets.

use crate::error::{Error, Result};

pub const DEFAULT_EPS_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation, std floored away from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
    pub eps_floor: f64,
}

impl RunningStats {
    /// Identity stats (mean 0, std 1) for a given width.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            count: 1,
            eps_floor: DEFAULT_EPS_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and population standard deviations of `rows`, with std
/// floored at `eps_floor`. `rows` is a flat row-major `n × d` matrix.
pub fn fit_stats(rows: &[f64], n: usize, d: usize, eps_floor: f64) -> Result<RunningStats> {
    if n == 0 {
        return Err(Error::Empty("fit_stats needs at least one row"));
    }
    assert_eq!(rows.len(), n * d, "fit_stats matrix shape");
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += rows[r * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            let dev = rows[r * d + j] - mean[j];
            var[j] += dev * dev;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n as f64).sqrt().max(eps_floor))
        .collect();
    Ok(RunningStats {
        mean,
        std,
        count: n,
        eps_floor,
    })
}

/// `(x - mean) / std` elementwise.
pub fn normalize(x: &[f64], stats: &RunningStats) -> Result<Vec<f64>> {
    if x.len() != stats.dim() {
        return Err(Error::DimMismatch {
            what: "normalize",
            expected: stats.dim(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect())
}

/// `z · std + mean` elementwise.
pub fn denormalize(z: &[f64], stats: &RunningStats) -> Result<Vec<f64>> {
    if z.len() != stats.dim() {
        return Err(Error::DimMismatch {
            what: "denormalize",
            expected: stats.dim(),
            got: z.len(),
        });
    }
    Ok(z.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| v * s + m)
        .collect())
}

/// In-place variants used by the training hot paths.
pub fn normalize_into(x: &mut [f64], stats: &RunningStats) {
    assert_eq!(x.len(), stats.dim(), "normalize_into width");
    for (v, (m, s)) in x.iter_mut().zip(stats.mean.iter().zip(&stats.std)) {
        *v = (*v - m) / s;
    }
}

pub fn denormalize_into(z: &mut [f64], stats: &RunningStats) {
    assert_eq!(z.len(), stats.dim(), "denormalize_into width");
    for (v, (m, s)) in z.iter_mut().zip(stats.mean.iter().zip(&stats.std)) {
        *v = *v * s + m;
    }
}
