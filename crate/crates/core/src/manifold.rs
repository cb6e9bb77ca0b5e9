//! Poincaré-ball geometry with a general curvature `K = -c`.
//!
//! Points live in the open ball `{z : c‖z‖² < 1}` of radius `1/√c`. Every
//! curvature-dependent formula here is the general-`c` form; the familiar
//! unit-ball expressions are recovered with `c = 1`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boundary margin used by [`PoincareBall::clamp`]: clamped points satisfy
/// `√c‖z‖ ≤ 1 − BALL_EPS`.
pub const BALL_EPS: f64 = 1e-5;
/// Lower bound applied to the `arcosh` argument in [`PoincareBall::distance`].
pub const ARCOSH_FLOOR: f64 = 1.0 + 1e-12;
pub const MIN_CURVATURE: f64 = 0.1;
pub const MAX_CURVATURE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point outside the ball: sqrt(c)*|x| = {scaled_norm} (c = {c})")]
    OutsideBall { scaled_norm: f64, c: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite coordinates")]
    NonFinite,
    #[error("invalid curvature {0}: must be positive and finite")]
    InvalidCurvature(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Positive curvature magnitude `c`, stored as `ln c` so that gradient steps
/// never leave the positive reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    log_c: f64,
}

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(GeometryError::InvalidCurvature(c));
        }
        Ok(Self { log_c: c.ln() })
    }

    pub fn from_log(log_c: f64) -> Result<Self> {
        if !log_c.is_finite() {
            return Err(GeometryError::InvalidCurvature(log_c.exp()));
        }
        Ok(Self { log_c })
    }

    pub fn unit() -> Self {
        Self { log_c: 0.0 }
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }

    pub fn log_c(&self) -> f64 {
        self.log_c
    }

    pub fn sqrt_c(&self) -> f64 {
        (0.5 * self.log_c).exp()
    }

    /// Ball radius `1/√c`.
    pub fn radius(&self) -> f64 {
        1.0 / self.sqrt_c()
    }

    /// Restricts `c` to `[MIN_CURVATURE, MAX_CURVATURE]`. Idempotent.
    pub fn clamped(self) -> Self {
        let lo = MIN_CURVATURE.ln();
        let hi = MAX_CURVATURE.ln();
        Self {
            log_c: self.log_c.clamp(lo, hi),
        }
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self::unit()
    }
}

/// A vector validated to lie strictly inside the ball of its curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

impl Deref for BallPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

/// Tangent vector. Tangent spaces of the ball are copies of `ℝⁿ`, so the base
/// point is carried by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec(pub Vec<f64>);

impl Deref for TangentVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `artanh` with its argument capped at `1 − BALL_EPS`.
fn artanh_capped(x: f64) -> f64 {
    x.min(1.0 - BALL_EPS).atanh()
}

/// The Poincaré ball for one curvature value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareBall {
    pub curvature: Curvature,
}

impl PoincareBall {
    pub fn new(curvature: Curvature) -> Self {
        Self { curvature }
    }

    pub fn with_c(c: f64) -> Result<Self> {
        Ok(Self::new(Curvature::new(c)?))
    }

    pub fn c(&self) -> f64 {
        self.curvature.c()
    }

    /// Validates `coords` as a point of this ball.
    pub fn point(&self, coords: Vec<f64>) -> Result<BallPoint> {
        self.check(&coords)?;
        Ok(BallPoint {
            coords,
            curvature: self.curvature,
        })
    }

    /// Clamps `coords` into the ball and wraps it.
    pub fn project(&self, coords: &[f64]) -> BallPoint {
        BallPoint {
            coords: self.clamp(coords, BALL_EPS),
            curvature: self.curvature,
        }
    }

    pub fn origin(&self, dim: usize) -> BallPoint {
        BallPoint {
            coords: vec![0.0; dim],
            curvature: self.curvature,
        }
    }

    /// Errors unless `x` is finite and `c‖x‖² < 1`.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let scaled = self.curvature.sqrt_c() * norm(x);
        if scaled >= 1.0 {
            return Err(GeometryError::OutsideBall {
                scaled_norm: scaled,
                c: self.c(),
            });
        }
        Ok(())
    }

    /// Rescales `z` onto the sphere of radius `(1 − eps)/√c` when it lies
    /// beyond it; otherwise returns `z` unchanged.
    pub fn clamp(&self, z: &[f64], eps: f64) -> Vec<f64> {
        let sqrt_c = self.curvature.sqrt_c();
        let n = norm(z);
        let max = (1.0 - eps) / sqrt_c;
        if n <= max {
            z.to_vec()
        } else {
            let s = max / n;
            z.iter().map(|v| v * s).collect()
        }
    }

    /// Möbius addition `x ⊕_c y`.
    pub fn mobius_add(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        self.check(x)?;
        self.check(y)?;
        Ok(self.clamp(&self.mobius_add_raw(x, y), BALL_EPS))
    }

    fn mobius_add_raw(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let c = self.c();
        let xy = dot(x, y);
        let x2 = norm_sq(x);
        let y2 = norm_sq(y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        x.iter()
            .zip(y)
            .map(|(xi, yi)| (a * xi + b * yi) / den)
            .collect()
    }

    /// Conformal factor `λ_x = 2 / (1 − c‖x‖²)`.
    pub fn conformal(&self, x: &[f64]) -> f64 {
        let x = self.clamp(x, BALL_EPS);
        2.0 / (1.0 - self.c() * norm_sq(&x))
    }

    /// `exp_0(v) = tanh(√c‖v‖) v / (√c‖v‖)`, clamped into the ball.
    pub fn exp0(&self, v: &[f64]) -> Vec<f64> {
        let sqrt_c = self.curvature.sqrt_c();
        let n = norm(v);
        if n == 0.0 {
            return vec![0.0; v.len()];
        }
        let s = (sqrt_c * n).tanh() / (sqrt_c * n);
        let y: Vec<f64> = v.iter().map(|vi| vi * s).collect();
        self.clamp(&y, BALL_EPS)
    }

    /// `log_0(y) = artanh(√c‖y‖) y / (√c‖y‖)`.
    pub fn log0(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let sqrt_c = self.curvature.sqrt_c();
        let n = norm(y);
        if n == 0.0 {
            return Ok(vec![0.0; y.len()]);
        }
        let s = artanh_capped(sqrt_c * n) / (sqrt_c * n);
        Ok(y.iter().map(|yi| yi * s).collect())
    }

    /// `exp_x(v) = x ⊕_c (tanh(√c λ_x ‖v‖ / 2) v / (√c‖v‖))`.
    pub fn exp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, v)?;
        self.check(x)?;
        if v.iter().any(|t| !t.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = norm(v);
        if n == 0.0 {
            return Ok(x.to_vec());
        }
        let sqrt_c = self.curvature.sqrt_c();
        let lambda = 2.0 / (1.0 - self.c() * norm_sq(x));
        let s = (0.5 * sqrt_c * lambda * n).tanh() / (sqrt_c * n);
        let step: Vec<f64> = v.iter().map(|vi| vi * s).collect();
        let step = self.clamp(&step, BALL_EPS);
        Ok(self.clamp(&self.mobius_add_raw(x, &step), BALL_EPS))
    }

    /// `log_x(y) = (2 / (√c λ_x)) artanh(√c‖−x ⊕_c y‖) (−x ⊕_c y) / ‖−x ⊕_c y‖`.
    pub fn log(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        self.check(x)?;
        self.check(y)?;
        let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
        let w = self.mobius_add_raw(&neg_x, y);
        let n = norm(&w);
        if n == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let sqrt_c = self.curvature.sqrt_c();
        let lambda = 2.0 / (1.0 - self.c() * norm_sq(x));
        let s = 2.0 / (sqrt_c * lambda) * artanh_capped(sqrt_c * n) / n;
        Ok(w.iter().map(|wi| wi * s).collect())
    }

    /// Geodesic distance
    /// `(1/√c) arcosh(1 + 2c‖u − v‖² / ((1 − c‖u‖²)(1 − c‖v‖²)))`.
    pub fn distance(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dims(u, v)?;
        self.check(u)?;
        self.check(v)?;
        Ok(self.distance_unchecked(u, v))
    }

    /// [`PoincareBall::distance`] without validation, for hot loops whose
    /// inputs are known to be clamped.
    pub fn distance_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        let c = self.c();
        let diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if diff == 0.0 {
            return 0.0;
        }
        let den = (1.0 - c * norm_sq(u)) * (1.0 - c * norm_sq(v));
        let arg = (1.0 + 2.0 * c * diff / den).max(ARCOSH_FLOOR);
        arg.acosh() / self.curvature.sqrt_c()
    }
}

/// Distance used to compare latent states: hyperbolic on a ball, or plain
/// Euclidean for the baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentMetric {
    Hyperbolic(PoincareBall),
    Euclidean,
}

impl LatentMetric {
    pub fn distance(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            LatentMetric::Hyperbolic(ball) => ball.distance_unchecked(u, v),
            LatentMetric::Euclidean => u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball(c: f64) -> PoincareBall {
        PoincareBall::with_c(c).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_point(rng: &mut ChaCha8Rng, b: &PoincareBall, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.0..0.95) / b.curvature.sqrt_c();
        let nv = norm(&v).max(1e-12);
        v.iter().map(|x| x * r / nv).collect()
    }

    #[test]
    fn mobius_one_dimensional_closed_form() {
        let b = ball(1.0);
        let r = b.mobius_add(&[0.5, 0.0], &[0.3, 0.0]).unwrap();
        // (a + b) / (1 + c a b)
        assert!(close(r[0], 0.8 / 1.15, 1e-12));
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn mobius_identities() {
        let b = ball(1.0);
        assert_eq!(
            b.mobius_add(&[0.5, 0.0], &[0.0, 0.0]).unwrap(),
            vec![0.5, 0.0]
        );
        let r = b.mobius_add(&[-0.5, 0.0], &[0.5, 0.0]).unwrap();
        assert!(norm(&r) < 1e-12);
        let r = b.mobius_add(&[0.5, 0.0], &[-0.5, 0.0]).unwrap();
        assert!(norm(&r) < 1e-12);
    }

    #[test]
    fn mobius_rejects_outside_points() {
        let b = ball(4.0);
        assert!(matches!(
            b.mobius_add(&[0.6, 0.0], &[0.0, 0.0]),
            Err(GeometryError::OutsideBall { .. })
        ));
    }

    #[test]
    fn mobius_euclidean_limit() {
        let b = ball(1e-9);
        let r = b.mobius_add(&[0.5, 0.2], &[0.3, -0.1]).unwrap();
        assert!(close(r[0], 0.8, 1e-8) && close(r[1], 0.1, 1e-8));
    }

    #[test]
    fn exp0_examples() {
        let r = ball(1.0).exp0(&[1.0, 0.0]);
        assert!(close(r[0], 1f64.tanh(), 1e-15));
        assert!(close(r[0], 0.761594, 1e-6));
        assert_eq!(ball(3.0).exp0(&[0.0, 0.0]), vec![0.0, 0.0]);
        let b = ball(4.0);
        let r = b.exp0(&[1.0, 0.0]);
        assert!(close(r[0], 2f64.tanh() / 2.0, 1e-15));
        assert!(close(r[0], 0.482014, 1e-6));
        // d(0, exp0(v)) = 2‖v‖
        assert!(close(b.distance(&[0.0, 0.0], &r).unwrap(), 2.0, 1e-9));
    }

    #[test]
    fn log0_examples() {
        let r = ball(1.0).log0(&[0.5, 0.0]).unwrap();
        assert!(close(r[0], 0.5 * 3f64.ln(), 1e-12));
        assert_eq!(ball(1.0).log0(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let b = ball(2.0);
        let r = b.log0(&b.exp0(&[0.3, -0.7])).unwrap();
        assert!(close(r[0], 0.3, 1e-6) && close(r[1], -0.7, 1e-6));
        assert!(ball(1.0).log0(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn exp_at_reductions() {
        let b = ball(1.0);
        assert_eq!(b.exp(&[0.2, 0.0], &[0.0, 0.0]).unwrap(), vec![0.2, 0.0]);
        let r = b.exp(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(close(r[0], 0.761594, 1e-6));
    }

    #[test]
    fn exp_at_off_origin_consistency() {
        // Geodesic length travelled equals λ_x‖v‖/2.
        let b = ball(1.0);
        let x = [0.3, 0.0];
        let v = [0.4, 0.0];
        let y = b.exp(&x, &v).unwrap();
        let lambda = b.conformal(&x);
        let d = b.distance(&x, &y).unwrap();
        assert!(close(d, lambda * 0.4, 1e-9), "{d} vs {}", lambda * 0.4);
        // In 1-D, y = (x + t)/(1 + x t) with t = tanh(λ‖v‖/2).
        let t = (0.5 * lambda * 0.4f64).tanh();
        assert!(close(y[0], (0.3 + t) / (1.0 + 0.3 * t), 1e-12));
        let back = b.log(&x, &y).unwrap();
        assert!(close(back[0], 0.4, 1e-9) && back[1].abs() < 1e-12);
    }

    #[test]
    fn log_at_examples() {
        let b = ball(1.0);
        assert_eq!(b.log(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);
        let r = b.log(&[0.0, 0.0], &[0.5, 0.0]).unwrap();
        assert!(close(r[0], 0.549306, 1e-6));
    }

    #[test]
    fn distance_examples() {
        assert!(close(
            ball(1.0).distance(&[0.5, 0.0], &[0.0, 0.0]).unwrap(),
            3f64.ln(),
            1e-12
        ));
        assert!(close(
            ball(4.0).distance(&[0.25, 0.0], &[0.0, 0.0]).unwrap(),
            0.549306,
            1e-6
        ));
        assert_eq!(ball(1.0).distance(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn conformal_examples() {
        assert_eq!(ball(7.0).conformal(&[0.0, 0.0]), 2.0);
        assert!(close(ball(1.0).conformal(&[0.5, 0.0]), 8.0 / 3.0, 1e-12));
        assert!(close(ball(4.0).conformal(&[0.25, 0.0]), 8.0 / 3.0, 1e-12));
    }

    #[test]
    fn clamp_examples() {
        let b = ball(1.0);
        assert_eq!(b.clamp(&[0.1, 0.1], BALL_EPS), vec![0.1, 0.1]);
        let r = b.clamp(&[2.0, 0.0], BALL_EPS);
        assert!(close(r[0], 0.99999, 1e-15) && r[1] == 0.0);
        assert_eq!(b.clamp(&r, BALL_EPS), r);
    }

    #[test]
    fn curvature_clamp_bounds() {
        let c = Curvature::new(50.0).unwrap().clamped();
        assert!(close(c.c(), 10.0, 1e-12));
        assert_eq!(c.clamped(), c);
        assert!(close(
            Curvature::new(0.01).unwrap().clamped().c(),
            0.1,
            1e-12
        ));
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
    }

    #[test]
    fn inverse_maps_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &c in &[0.1, 1.0, 4.0, 10.0] {
            let b = ball(c);
            for _ in 0..200 {
                let x = random_point(&mut rng, &b, 5);
                let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let scale = rng.random_range(0.0..3.0) / norm(&v);
                let v: Vec<f64> = v.iter().map(|t| t * scale).collect();
                let y = b.exp(&x, &v).unwrap();
                let back = b.log(&x, &y).unwrap();
                let err: Vec<f64> = back.iter().zip(&v).map(|(a, b)| a - b).collect();
                // Points pushed to the clamp boundary lose the inverse property.
                if b.curvature.sqrt_c() * norm(&y) < 1.0 - 1e-4 {
                    assert!(norm(&err) <= 1e-5 * norm(&v).max(1e-12), "c={c}");
                }
            }
        }
    }
}
