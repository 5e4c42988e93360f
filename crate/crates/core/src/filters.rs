//! Spectral regularization filters applied through eigendecomposition.
//!
//! A filter g_lambda approximates the inverse of a PSD operator on its
//! spectrum: small eigenvalues are attenuated instead of amplified. The
//! residual 1 - sigma * g_lambda(sigma) measures the regularization bias;
//! the qualification nu is the largest order with
//! sup_sigma |1 - sigma g(sigma)| sigma^nu <= gamma_nu lambda^nu.
//! Kernels in this crate are normalized so the spectrum lives in [0, 1].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spectral bound kappa^2 of the normalized empirical operators.
pub const KAPPA_SQ: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterFamily {
    Tikhonov,
    IteratedTikhonov,
    Landweber,
    Cutoff,
}

impl FilterFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterFamily::Tikhonov => "tikhonov",
            FilterFamily::IteratedTikhonov => "itik",
            FilterFamily::Landweber => "landweber",
            FilterFamily::Cutoff => "cutoff",
        }
    }
}

/// A spectral filter with its regularization strength and qualification
/// metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralFilterSpec {
    pub family: FilterFamily,
    pub lambda: f64,
    /// Iteration order t for iterated Tikhonov.
    pub order_t: u32,
    /// Landweber step size; must satisfy tau * kappa^2 < 1.
    pub landweber_tau: f64,
    /// Lipschitz exponent metadata; report label only, never computed with.
    pub lipschitz_mu: f64,
}

impl SpectralFilterSpec {
    pub fn tikhonov(lambda: f64) -> Self {
        SpectralFilterSpec {
            family: FilterFamily::Tikhonov,
            lambda,
            order_t: 1,
            landweber_tau: 0.9,
            lipschitz_mu: 1.0,
        }
    }

    pub fn iterated_tikhonov(order_t: u32, lambda: f64) -> Self {
        SpectralFilterSpec { family: FilterFamily::IteratedTikhonov, order_t, ..Self::tikhonov(lambda) }
    }

    pub fn landweber(lambda: f64, tau: f64) -> Self {
        SpectralFilterSpec { family: FilterFamily::Landweber, landweber_tau: tau, ..Self::tikhonov(lambda) }
    }

    pub fn cutoff(lambda: f64) -> Self {
        SpectralFilterSpec { family: FilterFamily::Cutoff, ..Self::tikhonov(lambda) }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        SpectralFilterSpec { lambda, ..self.clone() }
    }

    /// Parse "tikhonov:1e-3", "itik:3:1e-3", "landweber:1e-2", "cutoff:1e-4".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let lam = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::config(format!("bad lambda `{v}` in filter `{s}`")))
        };
        let spec = match parts.as_slice() {
            ["tikhonov", l] => Self::tikhonov(lam(l)?),
            ["itik", t, l] => {
                let t: u32 = t
                    .parse()
                    .map_err(|_| Error::config(format!("bad order `{t}` in filter `{s}`")))?;
                Self::iterated_tikhonov(t, lam(l)?)
            }
            ["landweber", l] => Self::landweber(lam(l)?, 0.9),
            ["cutoff", l] => Self::cutoff(lam(l)?),
            _ => {
                return Err(Error::config(format!(
                    "unknown filter `{s}`; expected tikhonov:<l>, itik:<t>:<l>, landweber:<l>, cutoff:<l>"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::validation(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.family == FilterFamily::IteratedTikhonov && self.order_t == 0 {
            return Err(Error::validation("iterated Tikhonov order must be >= 1".to_string()));
        }
        if self.family == FilterFamily::Landweber && self.landweber_tau * KAPPA_SQ >= 1.0 {
            return Err(Error::validation(format!(
                "landweber step tau = {} with tau * kappa^2 >= 1 diverges",
                self.landweber_tau
            )));
        }
        Ok(())
    }

    /// Qualification order: 1 for Tikhonov, t for iterated Tikhonov,
    /// unbounded (infinity sentinel) for Landweber and cutoff.
    pub fn qualification_nu(&self) -> f64 {
        match self.family {
            FilterFamily::Tikhonov => 1.0,
            FilterFamily::IteratedTikhonov => self.order_t as f64,
            FilterFamily::Landweber | FilterFamily::Cutoff => f64::INFINITY,
        }
    }

    /// beta = max(1, 2 mu); report metadata derived from the Lipschitz label.
    pub fn beta_exponent(&self) -> f64 {
        (2.0 * self.lipschitz_mu).max(1.0)
    }

    /// Number of Landweber iterations tied to lambda: m = ceil(1 / lambda).
    pub fn landweber_iterations(&self) -> u64 {
        (1.0 / self.lambda).ceil() as u64
    }

    /// Scalar filter value g_lambda(sigma).
    pub fn filter_value(&self, sigma: f64) -> Result<f64> {
        self.validate()?;
        if sigma < 0.0 {
            return Err(Error::validation(format!("sigma must be >= 0, got {sigma}")));
        }
        let l = self.lambda;
        Ok(match self.family {
            FilterFamily::Tikhonov => 1.0 / (sigma + l),
            FilterFamily::IteratedTikhonov => {
                let t = self.order_t as f64;
                if sigma == 0.0 {
                    t / l
                } else {
                    // (1 - (lambda / (sigma + lambda))^t) / sigma, computed via
                    // expm1/ln_1p to survive sigma << lambda
                    -(-t * (sigma / l).ln_1p()).exp_m1() / sigma
                }
            }
            FilterFamily::Landweber => {
                let m = self.landweber_iterations() as f64;
                let tau = self.landweber_tau;
                if sigma == 0.0 {
                    m * tau
                } else {
                    -(m * (-tau * sigma).ln_1p()).exp_m1() / sigma
                }
            }
            FilterFamily::Cutoff => {
                if sigma >= l {
                    1.0 / sigma
                } else {
                    0.0
                }
            }
        })
    }

    /// Apply g_lambda(A) to `rhs` through the eigendecomposition of the
    /// symmetric PSD matrix `A` (negative numerical eigenvalues clamped to
    /// zero before filtering).
    pub fn apply_filter(&self, a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::validation("filter needs a square matrix".to_string()));
        }
        if rhs.nrows() != n {
            return Err(Error::validation(format!(
                "rhs has {} rows, matrix is {n}x{n}",
                rhs.nrows()
            )));
        }
        let scale = a.iter().fold(1.0_f64, |acc, &v| acc.max(v.abs()));
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        if asym > 1e-10 * scale {
            return Err(Error::validation(format!(
                "matrix asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let sym = (a + a.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut filtered = DMatrix::zeros(n, n);
        for (i, &sigma) in eig.eigenvalues.iter().enumerate() {
            let g = self.filter_value(sigma.max(0.0))?;
            for r in 0..n {
                filtered[(r, i)] = eig.eigenvectors[(r, i)] * g;
            }
        }
        Ok(&filtered * eig.eigenvectors.transpose() * rhs)
    }
}

/// Default regularization from a known noise level: the Gaussian-process
/// correspondence lambda = sigma_y^2 / ell.
pub fn gp_lambda(noise_variance: f64, ell: usize) -> f64 {
    noise_variance / ell.max(1) as f64
}

/// Empirical qualification constants on finite grids.
#[derive(Clone, Debug, Serialize)]
pub struct QualificationEntry {
    pub nu: f64,
    /// max over the sigma and lambda grids of |1 - sigma g(sigma)| sigma^nu / lambda^nu.
    pub gamma_hat: f64,
    /// Per-lambda sup over sigma of the same ratio, ordered as the lambda grid.
    pub per_lambda: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct QualificationReport {
    pub family: FilterFamily,
    pub entries: Vec<QualificationEntry>,
}

/// Evaluate the qualification residual ratio over sigma/lambda grids for
/// each requested order nu. Finite, stable gamma_hat for nu below the
/// family's qualification; growth along the lambda grid witnesses
/// saturation beyond it.
pub fn qualification_check(
    spec: &SpectralFilterSpec,
    nu_grid: &[f64],
    sigma_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<QualificationReport> {
    if nu_grid.is_empty() || sigma_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::validation("qualification grids must be nonempty".to_string()));
    }
    for &s in sigma_grid {
        if !(s > 0.0) || s > KAPPA_SQ {
            return Err(Error::validation(format!("sigma grid value {s} outside (0, kappa^2]")));
        }
    }
    for &l in lambda_grid {
        if !(l > 0.0) || l > 1.0 {
            return Err(Error::validation(format!("lambda grid value {l} outside (0, 1]")));
        }
    }
    let mut entries = Vec::with_capacity(nu_grid.len());
    for &nu in nu_grid {
        let mut per_lambda = Vec::with_capacity(lambda_grid.len());
        let mut gamma_hat: f64 = 0.0;
        for &lambda in lambda_grid {
            let fl = spec.with_lambda(lambda);
            let mut sup: f64 = 0.0;
            for &sigma in sigma_grid {
                let g = fl.filter_value(sigma)?;
                let residual = (1.0 - sigma * g).abs();
                let ratio = residual * sigma.powf(nu) / lambda.powf(nu);
                sup = sup.max(ratio);
            }
            gamma_hat = gamma_hat.max(sup);
            per_lambda.push((lambda, sup));
        }
        entries.push(QualificationEntry { nu, gamma_hat, per_lambda });
    }
    Ok(QualificationReport { family: spec.family, entries })
}
