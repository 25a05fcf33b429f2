//! Gaussian kernel density estimates and mode counting.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const DEFAULT_GRID: usize = 512;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Modes lower than this fraction of the global maximum are ignored.
pub const DEFAULT_PROMINENCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// All samples equal: `grid = [v]`, `density = [1]`.
    pub degenerate: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: `0.9 * min(std, IQR/1.34) * n^(-1/5)`, falling back to
/// `std` when the IQR is zero, floored at [`BANDWIDTH_FLOOR`].
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    (0.9 * spread * n.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

/// Samples are summed in sorted order, so the curve does not depend on their
/// order bit for bit.
pub fn kde(samples: &[f64], grid_points: usize) -> Result<KdeCurve> {
    if samples.len() < 2 {
        return Err(LabError::Domain(format!("kde needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(LabError::Domain("kde samples must be finite".into()));
    }
    if grid_points < 2 {
        return Err(LabError::Domain("kde grid needs at least 2 points".into()));
    }
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        return Ok(KdeCurve {
            grid: vec![lo],
            density: vec![1.0],
            bandwidth: 0.0,
            degenerate: true,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let samples = sorted.as_slice();
    let h = silverman_bandwidth(samples);
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (grid_points - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..grid_points).map(|i| a + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
        degenerate: false,
    })
}

/// Trapezoid-rule integral of the density over its grid.
pub fn integral(curve: &KdeCurve) -> f64 {
    if curve.degenerate {
        return 1.0;
    }
    curve
        .grid
        .windows(2)
        .zip(curve.density.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Strict interior local maxima taller than `prominence * max`. A degenerate
/// curve has one mode.
pub fn count_modes_with(curve: &KdeCurve, prominence: f64) -> usize {
    if curve.degenerate {
        return 1;
    }
    let d = &curve.density;
    let max = d.iter().cloned().fold(0.0, f64::max);
    let floor = prominence * max;
    let mut modes = 0;
    let mut i = 1;
    while i + 1 < d.len() {
        // A flat top counts once, at its right edge.
        let mut j = i;
        while j + 1 < d.len() && d[j + 1] == d[i] {
            j += 1;
        }
        if j + 1 < d.len() && d[i] > d[i - 1] && d[j] > d[j + 1] && d[i] > floor {
            modes += 1;
        }
        i = j + 1;
    }
    // The padded grid keeps the global maximum interior; this guards ties at the edges.
    modes.max(1)
}

pub fn count_modes(curve: &KdeCurve) -> usize {
    count_modes_with(curve, DEFAULT_PROMINENCE)
}

/// Density analysis of one adapter parameter over one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistReport {
    pub layer: String,
    pub param: String,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub modes: usize,
}

pub fn dist_report(layer: &str, param: &str, samples: &[f64], grid_points: usize) -> Result<DistReport> {
    let curve = kde(samples, grid_points)?;
    Ok(DistReport {
        layer: layer.into(),
        param: param.into(),
        modes: count_modes(&curve),
        grid: curve.grid,
        density: curve.density,
        bandwidth: curve.bandwidth,
    })
}
