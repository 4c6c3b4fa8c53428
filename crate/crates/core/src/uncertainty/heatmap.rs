use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::UncertaintyError;

pub const DEFAULT_GRID: usize = 128;
/// Fraction of the data range added on each side of the grid extent.
pub const EXTENT_PADDING: f64 = 0.05;
pub const COLORMAP: &str = "Reds";

/// Weighted Gaussian KDE evaluated at the centers of a regular grid.
///
/// `values` is row-major: `values[iy * nx + ix]`, with `ix` along x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    /// Kernel covariance actually used.
    pub bandwidth: [[f64; 2]; 2],
    pub colormap_name: String,
    /// Set when every weight was zero and the field is blank.
    pub degenerate: bool,
}

impl HeatmapGrid {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.dx(),
            self.y_min + (iy as f64 + 0.5) * self.dy(),
        )
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Cell index containing `(x, y)`, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.x_min) / self.dx();
        let fy = (y - self.y_min) / self.dy();
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.nx, best / self.nx)
    }

    /// Midpoint-rule integral of the density over the grid extent.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx() * self.dy()
    }

    /// Header line `x_min,x_max,y_min,y_max,nx,ny,bw_xx,bw_xy,bw_yy` followed
    /// by `ny` rows of `nx` comma-separated values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_min,x_max,y_min,y_max,nx,ny,bw_xx,bw_xy,bw_yy\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.nx,
            self.ny,
            self.bandwidth[0][0],
            self.bandwidth[0][1],
            self.bandwidth[1][1]
        );
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn padded_extent(coords: &[[f64; 2]]) -> [f64; 4] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in coords {
        for d in 0..2 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let pad = |d: usize| {
        let range = hi[d] - lo[d];
        if range > 0.0 {
            EXTENT_PADDING * range
        } else {
            0.5
        }
    };
    [lo[0] - pad(0), hi[0] + pad(0), lo[1] - pad(1), hi[1] + pad(1)]
}

/// Weighted sample covariance with reliability weights (weights sum to 1).
fn weighted_cov(coords: &[[f64; 2]], w: &[f64]) -> Option<[[f64; 2]; 2]> {
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let denom = 1.0 - sum_sq;
    if denom <= 1e-12 {
        return None;
    }
    let mut mean = [0.0; 2];
    for (c, wi) in coords.iter().zip(w) {
        mean[0] += wi * c[0];
        mean[1] += wi * c[1];
    }
    let mut cov = [[0.0; 2]; 2];
    for (c, wi) in coords.iter().zip(w) {
        let (dx, dy) = (c[0] - mean[0], c[1] - mean[1]);
        cov[0][0] += wi * dx * dx;
        cov[0][1] += wi * dx * dy;
        cov[1][1] += wi * dy * dy;
    }
    cov[0][0] /= denom;
    cov[0][1] /= denom;
    cov[1][1] /= denom;
    cov[1][0] = cov[0][1];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
    (det > 1e-12 * cov[0][0] * cov[1][1] && det > 0.0).then_some(cov)
}

/// Evaluates the uncertainty-weighted Gaussian KDE over the padded extent of
/// `coords`.
///
/// Weights are normalized to sum to one. The kernel covariance is the
/// weighted data covariance scaled by Scott's factor `n_eff^(-1/6)` squared,
/// where `n_eff = (Σw)² / Σw²`. If the weighted covariance is singular (for
/// instance all mass on one point) the unweighted covariance of all points
/// shapes the kernel instead.
pub fn compute_heatmap(
    coords: &[[f64; 2]],
    weights: &[f64],
    nx: usize,
    ny: usize,
) -> Result<HeatmapGrid, UncertaintyError> {
    if coords.len() != weights.len() {
        return Err(UncertaintyError::LengthMismatch {
            points: coords.len(),
            weights: weights.len(),
        });
    }
    if coords.len() < 2 {
        return Err(UncertaintyError::TooFewPoints(coords.len()));
    }
    if nx == 0 || ny == 0 {
        return Err(UncertaintyError::EmptyGrid);
    }
    if let Some(&bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(UncertaintyError::NegativeWeight(bad));
    }
    let [x_min, x_max, y_min, y_max] = padded_extent(coords);
    let mut grid = HeatmapGrid {
        x_min,
        x_max,
        y_min,
        y_max,
        nx,
        ny,
        values: vec![0.0; nx * ny],
        bandwidth: [[0.0; 2]; 2],
        colormap_name: COLORMAP.to_owned(),
        degenerate: false,
    };

    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        grid.degenerate = true;
        return Ok(grid);
    }
    let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
    let n_eff = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let uniform = vec![1.0 / coords.len() as f64; coords.len()];
    let cov = weighted_cov(coords, &w)
        .or_else(|| weighted_cov(coords, &uniform))
        .ok_or(UncertaintyError::DegenerateCovariance)?;
    let factor_sq = n_eff.powf(-1.0 / 3.0);
    let h = [
        [cov[0][0] * factor_sq, cov[0][1] * factor_sq],
        [cov[1][0] * factor_sq, cov[1][1] * factor_sq],
    ];
    grid.bandwidth = h;

    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let inv = [[h[1][1] / det, -h[0][1] / det], [-h[1][0] / det, h[0][0] / det]];
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());

    // Each cell sums over points in input order, so the result does not
    // depend on how rows are spread over threads.
    let (dx, dy) = (grid.dx(), grid.dy());
    grid.values.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        let gy = y_min + (iy as f64 + 0.5) * dy;
        for (ix, slot) in row.iter_mut().enumerate() {
            let gx = x_min + (ix as f64 + 0.5) * dx;
            let mut acc = 0.0;
            for (c, wi) in coords.iter().zip(&w) {
                if *wi == 0.0 {
                    continue;
                }
                let (ux, uy) = (gx - c[0], gy - c[1]);
                let q = ux * (inv[0][0] * ux + inv[0][1] * uy) + uy * (inv[1][0] * ux + inv[1][1] * uy);
                acc += wi * (-0.5 * q).exp();
            }
            *slot = acc * norm;
        }
    });
    Ok(grid)
}
