//! One-dimensional densities and distances between them.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::Schedule;
use crate::training::GaussianMixtureSpec;

pub const DEFAULT_GRID_POINTS: usize = 2001;
pub const DEFAULT_GRID_LO: f64 = -4.0;
pub const DEFAULT_GRID_HI: f64 = 4.0;
/// Intermediate times at which generated and analytic marginals are compared.
pub const COMPARISON_TIMES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs two points");
    let mut g: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * (i as f64 / (n - 1) as f64)).collect();
    g[n - 1] = hi;
    g
}

pub fn default_grid() -> Vec<f64> {
    linspace(DEFAULT_GRID_LO, DEFAULT_GRID_HI, DEFAULT_GRID_POINTS)
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

impl DensityGrid {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,density\n");
        for (x, d) in self.grid.iter().zip(&self.values) {
            let _ = writeln!(out, "{x},{d}");
        }
        out
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Shape("density grid must have at least two strictly increasing points".into()));
    }
    Ok(())
}

/// Scott's-rule bandwidth `σ̂·n^(−1/5)` with the unbiased sample standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData(format!("KDE needs at least two samples, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateData(format!("samples have variance {var}")));
    }
    Ok(var.sqrt() * (n as f64).powf(-0.2))
}

/// Gaussian KDE evaluated on `grid`.
///
/// Samples are sorted once so each grid point only visits kernels within 10 bandwidths.
pub fn kde_density(samples: &[f64], grid: &[f64]) -> Result<DensityGrid> {
    check_grid(grid)?;
    let h = scott_bandwidth(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
    let reach = 10.0 * h;
    let values = grid
        .par_iter()
        .map(|&x| {
            let lo = sorted.partition_point(|&s| s < x - reach);
            let hi = sorted.partition_point(|&s| s <= x + reach);
            let sum: f64 = sorted[lo..hi]
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    Ok(DensityGrid { grid: grid.to_vec(), values })
}

/// Analytic density of `x_t` for mixture data.
pub fn mixture_marginal_density(spec: &GaussianMixtureSpec, schedule: Schedule, t: f64, grid: &[f64]) -> Result<DensityGrid> {
    spec.validate()?;
    check_grid(grid)?;
    let values = grid
        .iter()
        .map(|&x| spec.marginal_pdf(schedule, t, x))
        .collect::<Result<Vec<f64>>>()?;
    Ok(DensityGrid { grid: grid.to_vec(), values })
}

/// Trapezoidal `∫|a − b|`.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.grid != b.grid || a.values.len() != b.values.len() {
        return Err(Error::Shape("densities live on different grids".into()));
    }
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    Ok(trapezoid(&a.grid, &diff))
}

/// Kolmogorov–Smirnov statistic of `samples` against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("KS statistic needs at least one sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

/// One row of the toy comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub l1_standard_vs_gt: f64,
    pub l1_mixflow_vs_gt: f64,
}
