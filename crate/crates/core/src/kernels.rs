//! Gaussian RBF kernels and Gram assembly.
//!
//! The kernel acts on state space or on windowed flow space (state, anchor
//! step, step ratios) depending on the lengthscale vector it carries; one
//! lengthscale per input coordinate. Vector-valued outputs use the scalar
//! kernel times the identity, so the Gram matrix is shared across output
//! coordinates and k(z, z) = 1 bounds the spectrum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianRbf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// One positive lengthscale per input coordinate.
    pub lengthscales: Vec<f64>,
    /// Output dimension served by the scalar-kernel-times-identity design.
    pub output_dim: usize,
}

impl KernelSpec {
    pub fn gaussian(lengthscales: Vec<f64>, output_dim: usize) -> Self {
        KernelSpec { family: KernelFamily::GaussianRbf, lengthscales, output_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::validation("kernel needs at least one lengthscale".to_string()));
        }
        for (i, &l) in self.lengthscales.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::validation(format!("lengthscale[{i}] = {l} must be positive")));
            }
        }
        Ok(())
    }

    /// k(a, b) = exp(-1/2 sum_c ((a_c - b_c) / lengthscale_c)^2).
    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut q = 0.0;
        for c in 0..self.lengthscales.len() {
            let d = (a[c] - b[c]) / self.lengthscales[c];
            q += d * d;
        }
        (-0.5 * q).exp()
    }

    fn check_points(&self, points: &[DVector<f64>]) -> Result<()> {
        self.validate()?;
        let d = self.input_dim();
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::validation(format!(
                    "point {i} has dim {}, kernel expects {d}",
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// Symmetric Gram matrix with unit diagonal.
    pub fn gram(&self, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(points)?;
        let n = points.len();
        let rows: Vec<Vec<f64>> = if n >= 128 {
            (0..n)
                .into_par_iter()
                .map(|i| (0..n).map(|j| self.eval(&points[i], &points[j])).collect())
                .collect()
        } else {
            (0..n)
                .map(|i| (0..n).map(|j| self.eval(&points[i], &points[j])).collect())
                .collect()
        };
        let mut g = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        // symmetrize rounding and pin the diagonal at k(z, z) = 1
        for i in 0..n {
            g[(i, i)] = 1.0;
            for j in 0..i {
                let v = 0.5 * (g[(i, j)] + g[(j, i)]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// Rectangular kernel matrix K[i][j] = k(a_i, b_j).
    pub fn cross_gram(&self, a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(a)?;
        self.check_points(b)?;
        let (na, nb) = (a.len(), b.len());
        let rows: Vec<Vec<f64>> = if na * nb >= 16_384 {
            (0..na)
                .into_par_iter()
                .map(|i| (0..nb).map(|j| self.eval(&a[i], &b[j])).collect())
                .collect()
        } else {
            (0..na)
                .map(|i| (0..nb).map(|j| self.eval(&a[i], &b[j])).collect())
                .collect()
        };
        Ok(DMatrix::from_fn(na, nb, |i, j| rows[i][j]))
    }
}

/// Per-coordinate median of nonzero pairwise absolute differences over at
/// most the first 1000 points; coordinates with no spread fall back to 1.0.
pub fn median_heuristic(points: &[DVector<f64>]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::validation("median heuristic needs at least one point".to_string()));
    }
    let d = points[0].len();
    let sample: &[DVector<f64>] = &points[..points.len().min(1000)];
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let mut diffs: Vec<f64> = Vec::with_capacity(sample.len() * (sample.len() - 1) / 2);
        for i in 0..sample.len() {
            for j in (i + 1)..sample.len() {
                let v = (sample[i][c] - sample[j][c]).abs();
                if v > 0.0 {
                    diffs.push(v);
                }
            }
        }
        if diffs.is_empty() {
            log::warn!("median heuristic: coordinate {c} has no spread, falling back to 1.0");
            out.push(1.0);
            continue;
        }
        diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = diffs.len();
        let med = if n % 2 == 1 { diffs[n / 2] } else { 0.5 * (diffs[n / 2 - 1] + diffs[n / 2]) };
        out.push(med);
    }
    Ok(out)
}
