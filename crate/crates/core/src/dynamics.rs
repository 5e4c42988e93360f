//! Benchmark ODE systems and a high-accuracy reference flow map.
//!
//! The reference integrator is an embedded Dormand-Prince 5(4) pair with
//! adaptive substeps. Its tolerance (default 1e-12) must dominate every
//! truncation error measured against it, so all order probes in this crate
//! treat its output as exact.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Autonomous right-hand side; writes f(x) into `out`.
pub type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Optional control-affine input channel: dynamics f(x) + g(x) u(t).
#[derive(Clone)]
pub struct InputChannel {
    pub input_dim: usize,
    /// g(x), an n x m matrix flattened row-major into `out`.
    pub g: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    /// u(t), written into `out` (length m).
    pub u: Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>,
}

/// A benchmark dynamical system: an evaluatable vector field plus the
/// compact box on which experiments run and smoothness metadata.
#[derive(Clone)]
pub struct VectorFieldSpec {
    pub name: String,
    pub dim: usize,
    f: FieldFn,
    pub input: Option<InputChannel>,
    /// Axis-aligned identification domain; trajectories are expected to
    /// stay inside it over the experiment horizon.
    pub domain_box: Vec<(f64, f64)>,
    /// Claimed C^{k} regularity of f; report metadata only.
    pub smoothness_order: u32,
    /// Set for `linear_2d`: the system matrix, enabling a closed-form flow.
    pub linear_matrix: Option<[[f64; 2]; 2]>,
}

impl std::fmt::Debug for VectorFieldSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("domain_box", &self.domain_box)
            .field("smoothness_order", &self.smoothness_order)
            .finish()
    }
}

impl VectorFieldSpec {
    /// Build a system from an arbitrary autonomous field; used by tests and
    /// extensions. Shipped benchmarks come from [`make_benchmark`].
    pub fn custom(
        name: impl Into<String>,
        dim: usize,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        domain_box: Vec<(f64, f64)>,
        smoothness_order: u32,
    ) -> Self {
        VectorFieldSpec {
            name: name.into(),
            dim,
            f: Arc::new(f),
            input: None,
            domain_box,
            smoothness_order,
            linear_matrix: None,
        }
    }

    /// Evaluate the autonomous part f(x). Pure and deterministic.
    pub fn eval_f(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        (self.f)(x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn eval_f_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out);
    }

    /// Full right-hand side at time t, including the input channel if any.
    pub fn rhs_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out);
        if let Some(ch) = &self.input {
            let n = self.dim;
            let m = ch.input_dim;
            let mut gmat = vec![0.0; n * m];
            let mut u = vec![0.0; m];
            (ch.g)(x, &mut gmat);
            (ch.u)(t, &mut u);
            for i in 0..n {
                for j in 0..m {
                    out[i] += gmat[i * m + j] * u[j];
                }
            }
        }
    }

    pub fn is_autonomous(&self) -> bool {
        self.input.is_none()
    }

    /// True if `x` lies in `scale` times the domain box (about its center).
    pub fn in_scaled_box(&self, x: &[f64], scale: f64) -> bool {
        self.domain_box.iter().zip(x).all(|(&(lo, hi), &xi)| {
            let c = 0.5 * (lo + hi);
            let r = 0.5 * (hi - lo) * scale;
            xi >= c - r && xi <= c + r
        })
    }

    /// Closed-form flow for `linear_2d` via the 2x2 matrix exponential.
    pub fn closed_form_flow(&self, x: &DVector<f64>, h: f64) -> Option<DVector<f64>> {
        let a = self.linear_matrix?;
        let e = expm2(a, h);
        Some(DVector::from_vec(vec![
            e[0][0] * x[0] + e[0][1] * x[1],
            e[1][0] * x[0] + e[1][1] * x[1],
        ]))
    }
}

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_params(params: &BTreeMap<String, f64>, allowed: &[&str]) -> Result<()> {
    for (k, v) in params {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::config(format!("unknown system parameter `{k}`")));
        }
        if !v.is_finite() {
            return Err(Error::validation(format!("non-finite system parameter `{k}` = {v}")));
        }
    }
    Ok(())
}

/// Construct one of the shipped benchmark systems by name.
///
/// Recognized names and parameters (all dim 2):
/// - `linear_2d`: a11, a12, a21, a22 (default rotation [[0,1],[-1,0]])
/// - `van_der_pol`: mu (default 1)
/// - `duffing`: alpha (default -1), beta (default 1), delta (default 0.3)
/// - `mass_spring`: k, m (default 1), c (default 0)
pub fn make_benchmark(name: &str, params: &BTreeMap<String, f64>) -> Result<VectorFieldSpec> {
    match name {
        "linear_2d" => {
            check_params(params, &["a11", "a12", "a21", "a22"])?;
            let a = [
                [param(params, "a11", 0.0), param(params, "a12", 1.0)],
                [param(params, "a21", -1.0), param(params, "a22", 0.0)],
            ];
            let mut spec = VectorFieldSpec::custom(
                "linear_2d",
                2,
                move |x, out| {
                    out[0] = a[0][0] * x[0] + a[0][1] * x[1];
                    out[1] = a[1][0] * x[0] + a[1][1] * x[1];
                },
                vec![(-2.0, 2.0), (-2.0, 2.0)],
                7,
            );
            spec.linear_matrix = Some(a);
            Ok(spec)
        }
        "van_der_pol" => {
            check_params(params, &["mu"])?;
            let mu = param(params, "mu", 1.0);
            Ok(VectorFieldSpec::custom(
                "van_der_pol",
                2,
                move |x, out| {
                    out[0] = x[1];
                    out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
                },
                vec![(-3.0, 3.0), (-3.0, 3.0)],
                7,
            ))
        }
        "duffing" => {
            check_params(params, &["alpha", "beta", "delta"])?;
            let alpha = param(params, "alpha", -1.0);
            let beta = param(params, "beta", 1.0);
            let delta = param(params, "delta", 0.3);
            Ok(VectorFieldSpec::custom(
                "duffing",
                2,
                move |x, out| {
                    out[0] = x[1];
                    out[1] = -delta * x[1] - alpha * x[0] - beta * x[0] * x[0] * x[0];
                },
                vec![(-2.0, 2.0), (-2.0, 2.0)],
                7,
            ))
        }
        "mass_spring" => {
            check_params(params, &["k", "m", "c"])?;
            let k = param(params, "k", 1.0);
            let m = param(params, "m", 1.0);
            let c = param(params, "c", 0.0);
            if m <= 0.0 {
                return Err(Error::validation(format!("mass_spring mass must be positive, got {m}")));
            }
            Ok(VectorFieldSpec::custom(
                "mass_spring",
                2,
                move |x, out| {
                    out[0] = x[1];
                    out[1] = -(k / m) * x[0] - (c / m) * x[1];
                },
                vec![(-2.0, 2.0), (-2.0, 2.0)],
                7,
            ))
        }
        other => Err(Error::config(format!(
            "unknown benchmark `{other}`; expected one of linear_2d, van_der_pol, duffing, mass_spring"
        ))),
    }
}

/// Adaptive reference flow map for a [`VectorFieldSpec`].
#[derive(Clone, Debug)]
pub struct ReferenceFlow {
    pub system: VectorFieldSpec,
    /// Local error control per substep (both absolute and relative).
    pub tolerance: f64,
    /// Upper bound on any single substep.
    pub max_substep: f64,
    /// Largest advance a single `flow` call accepts.
    pub h_max: f64,
}

impl ReferenceFlow {
    pub fn new(system: VectorFieldSpec) -> Self {
        ReferenceFlow { system, tolerance: 1e-12, max_substep: 0.25, h_max: 100.0 }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    /// Advance `x` by time `h > 0` along the system dynamics.
    pub fn flow(&self, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::validation(format!("flow step must be positive and finite, got {h}")));
        }
        if h > self.h_max {
            return Err(Error::validation(format!("flow step {h} exceeds configured h_max {}", self.h_max)));
        }
        let sys = &self.system;
        self.integrate(x, h, |t, y, out| sys.rhs_into(t, y, out))
    }

    /// Flow backward by `tau >= 0`; inverse of [`ReferenceFlow::flow`].
    /// Only autonomous systems admit this time reversal.
    pub fn flow_backward(&self, x: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
        if tau < 0.0 || !tau.is_finite() {
            return Err(Error::validation(format!("backward lag must be nonnegative, got {tau}")));
        }
        if tau == 0.0 {
            return Ok(x.clone());
        }
        if !self.system.is_autonomous() {
            return Err(Error::config(
                "backward flow requires an autonomous system (no input channel)".to_string(),
            ));
        }
        let sys = &self.system;
        self.integrate(x, tau, |_t, y, out| {
            sys.eval_f_into(y, out);
            for v in out.iter_mut() {
                *v = -*v;
            }
        })
    }

    fn integrate(
        &self,
        x0: &DVector<f64>,
        t_end: f64,
        rhs: impl Fn(f64, &[f64], &mut [f64]),
    ) -> Result<DVector<f64>> {
        let n = x0.len();
        let mut y = x0.as_slice().to_vec();
        let mut t = 0.0_f64;
        let mut dt = t_end.min(self.max_substep).min(0.01);
        let tol = self.tolerance;

        let mut k = vec![vec![0.0; n]; 7];
        let mut ytmp = vec![0.0; n];
        let mut y5 = vec![0.0; n];
        let mut steps_taken = 0usize;

        rhs(t, &y, &mut k[0]);
        while t < t_end {
            steps_taken += 1;
            if steps_taken > 50_000_000 {
                return Err(Error::numerical("reference integrator exceeded substep budget".to_string()));
            }
            let last = dt >= t_end - t;
            let h = if last { t_end - t } else { dt };
            if !last && h < 1e-15 * t_end {
                return Err(Error::StepUnderflow { t, state: y.clone() });
            }

            // Dormand-Prince 5(4) stages
            for (i, row) in DP_A.iter().enumerate() {
                for j in 0..n {
                    let mut acc = 0.0;
                    for (l, &a) in row.iter().enumerate() {
                        acc += a * k[l][j];
                    }
                    ytmp[j] = y[j] + h * acc;
                }
                rhs(t + DP_C[i + 1] * h, &ytmp, &mut k[i + 1]);
            }
            let mut err_sq = 0.0;
            for j in 0..n {
                let mut acc5 = 0.0;
                let mut acce = 0.0;
                for l in 0..7 {
                    acc5 += DP_B5[l] * k[l][j];
                    acce += (DP_B5[l] - DP_B4[l]) * k[l][j];
                }
                y5[j] = y[j] + h * acc5;
                let sc = tol + tol * y[j].abs().max(y5[j].abs());
                let e = h * acce / sc;
                err_sq += e * e;
            }
            let err = (err_sq / n as f64).sqrt();

            if err <= 1.0 {
                t += h;
                y.copy_from_slice(&y5);
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::StepUnderflow { t, state: y });
                }
                // FSAL: stage 7 is the derivative at the accepted point
                k.swap(0, 6);
            }
            let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
            dt = (h * factor.clamp(0.2, 5.0)).min(self.max_substep);
        }
        Ok(DVector::from_vec(y))
    }
}

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const DP_A: [&[f64]; 6] = [
    &[0.2],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// exp(A*t) for a 2x2 matrix, in closed form.
///
/// Splits A = mu*I + B with B traceless, then uses B^2 = disc*I:
/// exp(Bt) = cosh(s) I + t*sinc-like(s) B with s^2 = disc*t^2, handling
/// oscillatory (disc < 0) and degenerate (disc = 0) branches.
pub fn expm2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let mu = 0.5 * (a[0][0] + a[1][1]);
    let b = [[a[0][0] - mu, a[0][1]], [a[1][0], a[1][1] - mu]];
    let disc = b[0][0] * b[0][0] + b[0][1] * b[1][0];
    let s2 = disc * t * t;

    // c = cosh(sqrt(s2)), m = sinh(sqrt(s2))/sqrt(s2), valid for either sign
    let (c, m) = if s2 > 1e-12 {
        let s = s2.sqrt();
        (s.cosh(), s.sinh() / s)
    } else if s2 < -1e-12 {
        let s = (-s2).sqrt();
        (s.cos(), s.sin() / s)
    } else {
        // series around 0: cosh(s) = 1 + s2/2 + s2^2/24, sinh(s)/s = 1 + s2/6 + s2^2/120
        (1.0 + s2 / 2.0 + s2 * s2 / 24.0, 1.0 + s2 / 6.0 + s2 * s2 / 120.0)
    };
    let e = (mu * t).exp();
    let mt = m * t;
    [
        [e * (c + mt * b[0][0]), e * (mt * b[0][1])],
        [e * (mt * b[1][0]), e * (c + mt * b[1][1])],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rotation() -> VectorFieldSpec {
        make_benchmark("linear_2d", &BTreeMap::new()).unwrap()
    }

    #[test]
    fn benchmark_fields_evaluate() {
        let lin = rotation();
        let f = lin.eval_f(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(f.as_slice(), &[0.0, -1.0]);

        let vdp = make_benchmark("van_der_pol", &BTreeMap::from([("mu".to_string(), 1.0)])).unwrap();
        let f = vdp.eval_f(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(f.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_benchmark_and_bad_params_are_rejected() {
        assert!(matches!(make_benchmark("lorenz", &BTreeMap::new()), Err(Error::Config(_))));
        let bad = BTreeMap::from([("mu".to_string(), f64::NAN)]);
        assert!(matches!(make_benchmark("van_der_pol", &bad), Err(Error::Validation(_))));
        let unknown = BTreeMap::from([("sigma".to_string(), 1.0)]);
        assert!(matches!(make_benchmark("van_der_pol", &unknown), Err(Error::Config(_))));
    }

    #[test]
    fn eval_is_bit_deterministic() {
        let vdp = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let x = DVector::from_vec(vec![0.7, -1.3]);
        let a = vdp.eval_f(&x);
        let b = vdp.eval_f(&x);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn rotation_flow_matches_closed_form() {
        let sys = rotation();
        let rf = ReferenceFlow::new(sys.clone());
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let quarter = std::f64::consts::FRAC_PI_2;
        let y = rf.flow(&x, quarter).unwrap();
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], -1.0, epsilon = 1e-9);

        // closed form against the integrator over a grid of h
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = DVector::from_vec(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
            let h = rng.gen_range(0.01..1.0);
            let yi = rf.flow(&x, h).unwrap();
            let yc = sys.closed_form_flow(&x, h).unwrap();
            assert_abs_diff_eq!((yi - yc).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn expm2_handles_all_branches() {
        // real eigenvalues
        let e = expm2([[1.0, 0.0], [0.0, 2.0]], 0.5);
        assert_abs_diff_eq!(e[0][0], (0.5f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(e[1][1], (1.0f64).exp(), epsilon = 1e-14);
        // defective (disc = 0)
        let e = expm2([[0.0, 1.0], [0.0, 0.0]], 2.0);
        assert_abs_diff_eq!(e[0][1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e[0][0], 1.0, epsilon = 1e-14);
        // oscillatory
        let e = expm2([[0.0, 1.0], [-1.0, 0.0]], std::f64::consts::PI);
        assert_abs_diff_eq!(e[0][0], -1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(e[0][1], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn tiny_step_is_identity() {
        let rf = ReferenceFlow::new(rotation());
        let x = DVector::from_vec(vec![0.3, 0.4]);
        let y = rf.flow(&x, 1e-300).unwrap();
        assert_abs_diff_eq!((&y - &x).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn semigroup_property() {
        let vdp = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let rf = ReferenceFlow::new(vdp);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let s = rng.gen_range(0.05..0.5);
            let t = rng.gen_range(0.05..0.5);
            let a = rf.flow(&rf.flow(&x, s).unwrap(), t).unwrap();
            let b = rf.flow(&x, s + t).unwrap();
            assert!((a - b).norm() <= 10.0 * rf.tolerance, "semigroup violated");
        }
    }

    #[test]
    fn small_step_stays_near_identity() {
        let vdp = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let rf = ReferenceFlow::new(vdp.clone());
        // max |f| over the box, crude grid bound
        let mut fmax: f64 = 0.0;
        for i in 0..20 {
            for j in 0..20 {
                let x = DVector::from_vec(vec![-3.0 + 6.0 * i as f64 / 19.0, -3.0 + 6.0 * j as f64 / 19.0]);
                fmax = fmax.max(vdp.eval_f(&x).norm());
            }
        }
        let x = DVector::from_vec(vec![0.5, 0.5]);
        for &h in &[1e-2, 1e-4, 1e-6] {
            let y = rf.flow(&x, h).unwrap();
            assert!((y - &x).norm() <= h * fmax * 1.01 + 1e-15);
        }
    }

    #[test]
    fn backward_flow_round_trip() {
        let vdp = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let rf = ReferenceFlow::new(vdp);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let tau = rng.gen_range(0.1..1.0);
            let fwd = rf.flow(&x, tau).unwrap();
            let back = rf.flow_backward(&fwd, tau).unwrap();
            assert!((back - &x).norm() < 1e-8, "round trip residual too large");
        }
        // tau = 0 is the identity
        let x = DVector::from_vec(vec![0.2, -0.1]);
        assert_eq!(rf.flow_backward(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn inverse_rotation() {
        let rf = ReferenceFlow::new(rotation());
        let y = rf
            .flow_backward(&DVector::from_vec(vec![0.0, -1.0]), std::f64::consts::FRAC_PI_2)
            .unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn undamped_oscillator_conserves_energy() {
        let params = BTreeMap::from([
            ("k".to_string(), 1.0),
            ("m".to_string(), 1.0),
            ("c".to_string(), 0.0),
        ]);
        let sys = make_benchmark("mass_spring", &params).unwrap();
        let rf = ReferenceFlow::new(sys);
        let energy = |x: &DVector<f64>| 0.5 * x[1] * x[1] + 0.5 * x[0] * x[0];
        let mut x = DVector::from_vec(vec![1.0, 0.0]);
        let e0 = energy(&x);
        for _ in 0..100 {
            x = rf.flow(&x, 0.1).unwrap();
            assert!((energy(&x) - e0).abs() < 1e-8, "energy drift too large");
        }
    }
}
