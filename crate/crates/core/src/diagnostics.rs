//! Geometry diagnostics: Gromov four-point δ and tangent-space energy sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{self, PoincareBall};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("goal direction is zero")]
    ZeroDirection,
    #[error("directions are parallel (residual norm {0:e})")]
    Parallel(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("empty grid")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, DiagnosticError>;

/// δ of one quadruple from its six pairwise distances
/// `[d01, d02, d03, d12, d13, d23]`.
pub fn four_point_delta(d: [f64; 6]) -> f64 {
    let [d01, d02, d03, d12, d13, d23] = d;
    let mut s = [d01 + d23, d02 + d13, d03 + d12];
    s.sort_by(|a, b| b.total_cmp(a));
    ((s[0] - s[1]) / 2.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub deltas: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub threshold: f64,
    pub fraction_below: f64,
    /// Mean of the pairwise distances inside the sampled quadruples.
    pub mean_pairwise: f64,
    /// `mean / mean_pairwise`, comparable across metrics.
    pub normalized_mean: f64,
}

/// Samples `num_quadruples` quadruples of distinct indices and evaluates the
/// four-point condition under `metric`.
pub fn gromov_delta<F>(
    points: &[Vec<f64>],
    metric: F,
    num_quadruples: usize,
    seed: u64,
    threshold: f64,
) -> Result<DeltaReport>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if points.len() < 4 {
        return Err(DiagnosticError::TooFewPoints(points.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quads: Vec<[usize; 4]> = (0..num_quadruples)
        .map(|_| {
            let mut q = [0usize; 4];
            for k in 0..4 {
                q[k] = loop {
                    let i = rng.random_range(0..points.len());
                    if !q[..k].contains(&i) {
                        break i;
                    }
                };
            }
            q
        })
        .collect();
    let evals: Vec<(f64, f64)> = quads
        .par_iter()
        .map(|q| {
            let p = |k: usize| points[q[k]].as_slice();
            let d = [
                metric(p(0), p(1)),
                metric(p(0), p(2)),
                metric(p(0), p(3)),
                metric(p(1), p(2)),
                metric(p(1), p(3)),
                metric(p(2), p(3)),
            ];
            (four_point_delta(d), d.iter().sum::<f64>() / 6.0)
        })
        .collect();
    let deltas: Vec<f64> = evals.iter().map(|e| e.0).collect();
    Ok(summarize_deltas(
        deltas,
        threshold,
        mean(&evals.iter().map(|e| e.1).collect::<Vec<_>>()),
    ))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize_deltas(deltas: Vec<f64>, threshold: f64, mean_pairwise: f64) -> DeltaReport {
    let mut sorted = deltas.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let m = mean(&deltas);
    let below = deltas.iter().filter(|d| **d < threshold).count();
    DeltaReport {
        mean: m,
        median,
        threshold,
        fraction_below: if n == 0 { 0.0 } else { below as f64 / n as f64 },
        mean_pairwise,
        normalized_mean: if mean_pairwise > 0.0 {
            m / mean_pairwise
        } else {
            0.0
        },
        deltas,
    }
}

/// `u₁ = v_goal/‖v_goal‖` and the normalised Gram–Schmidt residual of `v_alt`.
pub fn orthonormal_pair(v_goal: &[f64], v_alt: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v_goal.len() != v_alt.len() {
        return Err(DiagnosticError::Dim(v_goal.len(), v_alt.len()));
    }
    let n1 = manifold::norm(v_goal);
    if n1 == 0.0 {
        return Err(DiagnosticError::ZeroDirection);
    }
    let u1: Vec<f64> = v_goal.iter().map(|x| x / n1).collect();
    let proj = manifold::dot(v_alt, &u1);
    let r: Vec<f64> = v_alt.iter().zip(&u1).map(|(a, u)| a - proj * u).collect();
    let nr = manifold::norm(&r);
    if nr < 1e-10 {
        return Err(DiagnosticError::Parallel(nr));
    }
    Ok((u1, r.iter().map(|x| x / nr).collect()))
}

/// Uniform grid `min, min + step, …` up to `max` (inclusive, to rounding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.max < self.min {
            return Vec::new();
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.min + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// `energy[i][j]` for `dx[i]`, `dy[j]`.
    pub energy: Vec<Vec<f64>>,
    /// Cell closest to `(0, 0)`.
    pub reference: (usize, usize),
}

impl LandscapeGrid {
    /// Cell with the lowest energy (first in row-major order on ties).
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.energy.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if *e < self.energy[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// `dx,dy,energy` rows in row-major order with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dx,dy,energy\n");
        for (i, x) in self.dx.iter().enumerate() {
            for (j, y) in self.dy.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_sig9(*x),
                    fmt_sig9(*y),
                    fmt_sig9(self.energy[i][j])
                ));
            }
        }
        out
    }
}

fn closest_to_zero(v: &[f64]) -> usize {
    (0..v.len())
        .min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0)
}

/// Energy of the perturbed state `exp_0(s_t + Δx·u₁ + Δy·u₂)` against
/// `s_next` over the grid.
pub fn energy_sweep(
    s_t: &[f64],
    s_next: &[f64],
    u1: &[f64],
    u2: &[f64],
    x_axis: GridAxis,
    y_axis: GridAxis,
    ball: &PoincareBall,
) -> Result<LandscapeGrid> {
    let n = s_t.len();
    for v in [s_next, u1, u2] {
        if v.len() != n {
            return Err(DiagnosticError::Dim(n, v.len()));
        }
    }
    let dx = x_axis.values();
    let dy = y_axis.values();
    if dx.is_empty() || dy.is_empty() {
        return Err(DiagnosticError::EmptyGrid);
    }
    let energy: Vec<Vec<f64>> = dx
        .par_iter()
        .map(|x| {
            dy.iter()
                .map(|y| {
                    let v: Vec<f64> = (0..n).map(|k| s_t[k] + x * u1[k] + y * u2[k]).collect();
                    ball.distance_unchecked(s_next, &ball.exp0(&v))
                })
                .collect()
        })
        .collect();
    let reference = (closest_to_zero(&dx), closest_to_zero(&dy));
    Ok(LandscapeGrid {
        dx,
        dy,
        energy,
        reference,
    })
}

/// Per-quadruple δ values under a `delta` header, then a `#` summary line.
pub fn delta_csv(report: &DeltaReport) -> String {
    let mut out = String::from("delta\n");
    for d in &report.deltas {
        out.push_str(&fmt_sig9(*d));
        out.push('\n');
    }
    out.push_str(&format!(
        "# n={} mean={} median={} threshold={} fraction_below={} normalized_mean={}\n",
        report.deltas.len(),
        fmt_sig9(report.mean),
        fmt_sig9(report.median),
        fmt_sig9(report.threshold),
        fmt_sig9(report.fraction_below),
        fmt_sig9(report.normalized_mean),
    ));
    out
}

/// C's `%.9g`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
