//! Gaussian-process surrogate for the mask objective.
//!
//! Model: targets are standardized (subtract mean, divide by std when there
//! are ≥ 2 observations), then a zero-mean GP with unit-variance squared-
//! exponential kernel `exp(-‖a−b‖² / 2ℓ²)` plus `noise` on the diagonal is
//! fit in the standardized space. Posterior mean/variance are mapped back
//! through the standardization. With no observations the posterior is the
//! prior: the raw mean 0 and unit variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Gp {
    lengthscale: f64,
    noise: f64,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    /// (K + noise·I)⁻¹ · standardized y.
    weights: Option<DVector<f64>>,
}

impl Gp {
    pub fn new(lengthscale: f64, noise: f64) -> Result<Self> {
        if lengthscale <= 0.0 || !lengthscale.is_finite() {
            return Err(Error::InvalidParam(format!(
                "kernel lengthscale must be > 0, got {lengthscale}"
            )));
        }
        if noise < 0.0 || !noise.is_finite() {
            return Err(Error::InvalidParam(format!(
                "noise variance must be >= 0, got {noise}"
            )));
        }
        Ok(Self {
            lengthscale,
            noise,
            x: Vec::new(),
            y: Vec::new(),
            y_mean: 0.0,
            y_scale: 1.0,
            chol: None,
            weights: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn observations(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.x, &self.y)
    }

    /// Record an observation. Invalidates the current fit.
    pub fn observe(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::NonFinite("objective observation"));
        }
        if let Some(first) = self.x.first() {
            if first.len() != x.len() {
                return Err(Error::InvalidParam(format!(
                    "observation dim {} != {}",
                    x.len(),
                    first.len()
                )));
            }
        }
        self.x.push(x);
        self.y.push(y);
        self.chol = None;
        self.weights = None;
        Ok(())
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// Factorize the kernel matrix, escalating diagonal jitter if the
    /// configured noise alone leaves it numerically indefinite.
    pub fn fit(&mut self) -> Result<()> {
        let n = self.x.len();
        if n == 0 {
            return Err(Error::EmptyInput("gp fit needs at least one observation"));
        }
        self.y_mean = self.y.iter().sum::<f64>() / n as f64;
        self.y_scale = if n >= 2 {
            let var = self
                .y
                .iter()
                .map(|v| (v - self.y_mean).powi(2))
                .sum::<f64>()
                / n as f64;
            var.sqrt().max(1e-12)
        } else {
            1.0
        };

        let base = DMatrix::from_fn(n, n, |i, j| self.kernel(&self.x[i], &self.x[j]));
        let y_std = DVector::from_fn(n, |i, _| (self.y[i] - self.y_mean) / self.y_scale);
        let mut jitter = 0.0;
        loop {
            let k = &base + DMatrix::identity(n, n) * (self.noise + jitter);
            if let Some(chol) = Cholesky::new(k) {
                self.weights = Some(chol.solve(&y_std));
                self.chol = Some(chol);
                return Ok(());
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > 1e-4 {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.chol.is_some()
    }

    /// Posterior (mean, variance) at a point, in raw target units.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        if self.x.is_empty() {
            return Ok((0.0, 1.0));
        }
        let (chol, weights) = match (&self.chol, &self.weights) {
            (Some(c), Some(w)) => (c, w),
            _ => return Err(Error::InvalidParam("gp used before fit".into())),
        };
        let ks = DVector::from_fn(self.x.len(), |i, _| self.kernel(&self.x[i], x));
        let mean = self.y_mean + self.y_scale * ks.dot(weights);
        let v = chol.solve(&ks);
        let var_std = (1.0 - ks.dot(&v)).max(0.0);
        Ok((mean, var_std * self.y_scale * self.y_scale))
    }
}

/// Closed-form expected improvement for minimization: E[max(best − Y, 0)]
/// under Y ~ N(mean, var).
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    if sigma < 1e-14 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sigma;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    sigma * (z * n.cdf(z) + n.pdf(z))
}

/// Lower-confidence-bound score for minimization, arranged so that larger
/// is better like EI: κ·σ − μ.
pub fn ucb_score(mean: f64, var: f64, kappa: f64) -> f64 {
    kappa * var.max(0.0).sqrt() - mean
}
