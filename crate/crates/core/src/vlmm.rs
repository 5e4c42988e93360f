//! Variable-step linear multistep (vLMM) machinery.
//!
//! A window holds M+1 states x_0..x_M (oldest to newest) separated by M
//! steps whose consecutive ratios form the vector zeta; the newest step is
//! the anchor step h. Coefficients alpha (over the M past states) and beta
//! (over all M+1 nodes) are solved from the polynomial order conditions on
//! the node set implied by zeta alone, so they are independent of h.
//!
//! Conventions:
//! - `alpha[j]` multiplies x_j for j = 0..M-1; the anchor x_M has implicit
//!   coefficient 1, so exactness on constants reads 1 + sum(alpha) = 0.
//! - `beta[j]` multiplies f(x_j) for j = 0..M.
//! - `lags[j]` is the backshift from the anchor to node j in units of the
//!   anchor step h (lags[M] = 0, nonincreasing toward the anchor).

use std::collections::HashMap;
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dynamics::ReferenceFlow;
use crate::error::{Error, Result};
use crate::harness::fit_loglog_slope;

/// Multistep family. AB is explicit (zero beta at the anchor node), AM and
/// BDF are implicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Family {
    Ab,
    Am,
    Bdf,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Ab => "ab",
            Family::Am => "am",
            Family::Bdf => "bdf",
        }
    }
}

/// A multistep scheme: family plus window size M. The consistency order p
/// and implicitness follow from the family (AB: p = M, AM: p = M+1,
/// BDF: p = M with M <= 6).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct VlmmScheme {
    pub family: Family,
    pub m: usize,
}

impl VlmmScheme {
    pub fn new(family: Family, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::validation("window size M must be >= 1".to_string()));
        }
        if family == Family::Bdf && m > 6 {
            return Err(Error::validation(format!(
                "BDF window size must be <= 6 (zero-stability), got {m}"
            )));
        }
        Ok(VlmmScheme { family, m })
    }

    /// Consistency order.
    pub fn p(&self) -> usize {
        match self.family {
            Family::Ab | Family::Bdf => self.m,
            Family::Am => self.m + 1,
        }
    }

    pub fn implicit(&self) -> bool {
        matches!(self.family, Family::Am | Family::Bdf)
    }

    /// Parse "ab2", "am3", "bdf4".
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (family, digits) = if let Some(d) = s.strip_prefix("bdf") {
            (Family::Bdf, d)
        } else if let Some(d) = s.strip_prefix("ab") {
            (Family::Ab, d)
        } else if let Some(d) = s.strip_prefix("am") {
            (Family::Am, d)
        } else {
            return Err(Error::config(format!("unknown scheme `{s}`; expected e.g. ab2, am3, bdf4")));
        };
        let m: usize = digits
            .parse()
            .map_err(|_| Error::config(format!("bad window size in scheme `{s}`")))?;
        VlmmScheme::new(family, m)
    }
}

impl std::fmt::Display for VlmmScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.family.as_str(), self.m)
    }
}

/// Solved window coefficients for one step-ratio geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowCoefficients {
    /// Coefficients of the M past states, oldest to newest.
    pub alpha: Vec<f64>,
    /// Coefficients of f at all M+1 nodes, oldest to newest.
    pub beta: Vec<f64>,
    /// Backshift of each node from the anchor, in units of h.
    pub lags: Vec<f64>,
}

impl WindowCoefficients {
    pub fn m(&self) -> usize {
        self.alpha.len()
    }
}

/// Node time offsets from the anchor in units of h: offsets[M] = 0 and
/// offsets[j] < offsets[j+1]. Derived purely from the step ratios.
fn node_offsets(m: usize, zeta: &[f64]) -> Result<Vec<f64>> {
    if zeta.len() != m - 1 {
        return Err(Error::validation(format!(
            "expected {} step ratios for M = {m}, got {}",
            m - 1,
            zeta.len()
        )));
    }
    for (i, &z) in zeta.iter().enumerate() {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::validation(format!("step ratio zeta[{i}] = {z} must be positive")));
        }
    }
    // steps[i] joins node i to node i+1; anchor step is 1 in these units
    let mut steps = vec![0.0; m];
    steps[m - 1] = 1.0;
    for i in (0..m - 1).rev() {
        steps[i] = steps[i + 1] / zeta[i];
    }
    let mut offsets = vec![0.0; m + 1];
    for j in (0..m).rev() {
        offsets[j] = offsets[j + 1] - steps[j];
    }
    Ok(offsets)
}

const COND_LIMIT: f64 = 1e12;
const EXACTNESS_TOL: f64 = 1e-10;

/// Solve the order conditions for `scheme` on the window geometry `zeta`.
///
/// The returned coefficients satisfy the polynomial exactness identity up to
/// degree p with relative residual <= 1e-10; geometries whose
/// order-condition system has condition number above 1e12 are rejected
/// instead of silently degraded.
pub fn coefficients(scheme: VlmmScheme, zeta: &[f64]) -> Result<WindowCoefficients> {
    if let Some(hit) = cache_get(scheme, zeta) {
        return Ok(hit);
    }
    let solved = solve_order_conditions(scheme, zeta)?;
    verify_exactness(scheme, zeta, &solved)?;
    cache_put(scheme, zeta, &solved);
    Ok(solved)
}

fn solve_order_conditions(scheme: VlmmScheme, zeta: &[f64]) -> Result<WindowCoefficients> {
    let m = scheme.m;
    let p = scheme.p();
    let c = node_offsets(m, zeta)?;
    let lags: Vec<f64> = c.iter().map(|&v| -v).collect();

    // Adams LHS: x_M - x_{M-1}; nonzero alpha only at the newest past node.
    let adams_alpha = |m: usize| {
        let mut a = vec![0.0; m];
        a[m - 1] = -1.0;
        a
    };

    // Matrix entries are powers of the node offsets. Wide windows push
    // |c|^p to 1e4 and beyond, where ordinary f64 powers perturb the system
    // enough to corrupt the last ~4 digits of the coefficients, so entries
    // and refinement residuals are formed in double-double precision.
    let (nrows, ncols, row_offset): (usize, usize, usize) = match scheme.family {
        Family::Ab => (p, m, 1),
        Family::Am => (p, m + 1, 1),
        Family::Bdf => (p + 1, m + 1, 0),
    };
    let entry = |row: usize, j: usize| -> Dd {
        let d = row + row_offset;
        match scheme.family {
            Family::Ab | Family::Am => Dd::pow(c[j], d - 1).scale(d as f64),
            Family::Bdf => {
                if j < m {
                    Dd::pow(c[j], d)
                } else if d == 1 {
                    Dd::from(-1.0)
                } else {
                    Dd::from(0.0)
                }
            }
        }
    };
    // right-hand sides are exact: the newest past node sits at c = -1
    let rhs_entry = |row: usize| -> f64 {
        let d = row + row_offset;
        match scheme.family {
            Family::Ab | Family::Am => -powi(c[m - 1], d),
            Family::Bdf => {
                if d == 0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    };

    let mat = DMatrix::from_fn(nrows, ncols, |r, j| entry(r, j).to_f64());
    let rhs = DVector::from_fn(nrows, |r, _| rhs_entry(r));

    let svd = mat.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > COND_LIMIT {
        return Err(Error::numerical(format!(
            "order-condition system for {scheme} is ill-conditioned (cond > {COND_LIMIT:.0e}) at zeta = {zeta:?}"
        )));
    }
    let lu = mat.clone().lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::numerical(format!("order-condition solve failed for {scheme}")))?;
    for _ in 0..2 {
        let mut r = DVector::zeros(nrows);
        for i in 0..nrows {
            let mut acc = Dd::from(rhs[i]);
            for j in 0..ncols {
                acc = acc.sub(entry(i, j).mul_f64(sol[j]));
            }
            r[i] = acc.to_f64();
        }
        if let Some(dx) = lu.solve(&r) {
            sol += dx;
        }
    }

    let (alpha, beta) = match scheme.family {
        Family::Ab => {
            let mut beta = sol.as_slice().to_vec();
            beta.push(0.0);
            (adams_alpha(m), beta)
        }
        Family::Am => (adams_alpha(m), sol.as_slice().to_vec()),
        Family::Bdf => {
            let alpha = sol.as_slice()[..m].to_vec();
            let mut beta = vec![0.0; m + 1];
            beta[m] = sol[m];
            (alpha, beta)
        }
    };
    Ok(WindowCoefficients { alpha, beta, lags })
}

/// Exactness residual of the identity on monomials t^d (t in anchor-step
/// units), relative to the magnitude of the participating terms.
pub fn exactness_residual(coeffs: &WindowCoefficients, zeta: &[f64], degree: usize) -> Result<f64> {
    let m = coeffs.m();
    let c = node_offsets(m, zeta)?;
    let mut worst: f64 = 0.0;
    for d in 0..=degree {
        let mut res = powi(c[m], d);
        let mut scale = res.abs();
        for j in 0..m {
            let term = coeffs.alpha[j] * powi(c[j], d);
            res += term;
            scale += term.abs();
        }
        for j in 0..=m {
            let term = d as f64 * coeffs.beta[j] * powi(c[j], d.saturating_sub(1));
            res -= term;
            scale += term.abs();
        }
        worst = worst.max(res.abs() / scale.max(1.0));
    }
    Ok(worst)
}

fn verify_exactness(scheme: VlmmScheme, zeta: &[f64], coeffs: &WindowCoefficients) -> Result<()> {
    let zero_order = 1.0 + coeffs.alpha.iter().sum::<f64>();
    if zero_order.abs() > 1e-12 {
        return Err(Error::numerical(format!(
            "consistency row sum 1 + sum(alpha) = {zero_order:e} for {scheme}"
        )));
    }
    let res = exactness_residual(coeffs, zeta, scheme.p())?;
    if res > EXACTNESS_TOL {
        return Err(Error::numerical(format!(
            "order-condition residual {res:e} exceeds {EXACTNESS_TOL:e} for {scheme} at zeta = {zeta:?}"
        )));
    }
    Ok(())
}

fn powi(base: f64, exp: usize) -> f64 {
    // 0^0 = 1 by the order-condition convention
    if exp == 0 {
        1.0
    } else {
        base.powi(exp as i32)
    }
}

/// Unevaluated double-double value hi + lo, |lo| <= ulp(hi)/2.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Exact product of two f64, split via FMA.
    fn two_prod(a: f64, b: f64) -> Self {
        let hi = a * b;
        let lo = a.mul_add(b, -hi);
        Dd { hi, lo }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        let e = lo - (s - hi);
        Dd { hi: s, lo: e }
    }

    fn add(self, other: Dd) -> Self {
        let s = self.hi + other.hi;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (other.hi - bb);
        Dd::renorm(s, err + self.lo + other.lo)
    }

    fn sub(self, other: Dd) -> Self {
        self.add(Dd { hi: -other.hi, lo: -other.lo })
    }

    fn mul_f64(self, b: f64) -> Self {
        let p = Dd::two_prod(self.hi, b);
        Dd::renorm(p.hi, p.lo + self.lo * b)
    }

    /// Small integer scaling.
    fn scale(self, k: f64) -> Self {
        self.mul_f64(k)
    }

    /// base^e with double-double accumulation; 0^0 = 1.
    fn pow(base: f64, e: usize) -> Self {
        let mut acc = Dd::from(1.0);
        for _ in 0..e {
            acc = acc.mul_f64(base);
        }
        acc
    }
}

// Coefficients for repeated geometries (uniform schedules hit zeta = 1 for
// every window) are memoized behind a read-shared map keyed by exact bits.
#[derive(PartialEq, Eq, Hash)]
struct CacheKey {
    family: Family,
    m: usize,
    zeta_bits: Vec<u64>,
}

static COEFF_CACHE: Lazy<RwLock<HashMap<CacheKey, WindowCoefficients>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

fn cache_key(scheme: VlmmScheme, zeta: &[f64]) -> CacheKey {
    CacheKey {
        family: scheme.family,
        m: scheme.m,
        zeta_bits: zeta.iter().map(|z| z.to_bits()).collect(),
    }
}

fn cache_get(scheme: VlmmScheme, zeta: &[f64]) -> Option<WindowCoefficients> {
    COEFF_CACHE.read().ok()?.get(&cache_key(scheme, zeta)).cloned()
}

fn cache_put(scheme: VlmmScheme, zeta: &[f64], coeffs: &WindowCoefficients) {
    if let Ok(mut map) = COEFF_CACHE.write() {
        if map.len() >= 65536 {
            map.clear();
        }
        map.insert(cache_key(scheme, zeta), coeffs.clone());
    }
}

/// Aggregate the window states into the multistep left-hand side:
/// L = x_M + sum_j alpha_j x_j. Linear in the states.
pub fn apply_label_map(coeffs: &WindowCoefficients, window_states: &[DVector<f64>]) -> Result<DVector<f64>> {
    let m = coeffs.m();
    if window_states.len() != m + 1 {
        return Err(Error::validation(format!(
            "label map needs {} window states, got {}",
            m + 1,
            window_states.len()
        )));
    }
    let mut label = window_states[m].clone();
    for j in 0..m {
        label.axpy(coeffs.alpha[j], &window_states[j], 1.0);
    }
    Ok(label)
}

/// Fill the label of every window in `dataset` using `scheme`.
pub fn label_dataset(dataset: &mut crate::sampling::Dataset, scheme: VlmmScheme) -> Result<()> {
    if dataset.m != scheme.m {
        return Err(Error::validation(format!(
            "dataset windows have M = {}, scheme {scheme} needs M = {}",
            dataset.m, scheme.m
        )));
    }
    for w in &mut dataset.windows {
        let coeffs = coefficients(scheme, &w.zeta)?;
        w.label = Some(apply_label_map(&coeffs, &w.window_states)?);
    }
    Ok(())
}

/// Multistep residual of the true field at one window: the label minus
/// h * sum_j beta_j f(x_j) with the window states reconstructed exactly by
/// backward reference flows from the anchor. For the system's own field
/// this is the local truncation error of the window.
pub fn residual_ms(
    scheme: VlmmScheme,
    coeffs: &WindowCoefficients,
    reference: &ReferenceFlow,
    anchor_x: &DVector<f64>,
    h: f64,
    zeta: &[f64],
) -> Result<DVector<f64>> {
    if coeffs.m() != scheme.m {
        return Err(Error::validation(format!(
            "coefficients are for M = {}, scheme {scheme} has M = {}",
            coeffs.m(),
            scheme.m
        )));
    }
    if !(h > 0.0) {
        return Err(Error::validation(format!("anchor step must be positive, got {h}")));
    }
    let _ = node_offsets(scheme.m, zeta)?;
    let m = scheme.m;
    let mut states = Vec::with_capacity(m + 1);
    for j in 0..=m {
        states.push(reference.flow_backward(anchor_x, h * coeffs.lags[j])?);
    }
    let mut residual = apply_label_map(coeffs, &states)?;
    for (j, state) in states.iter().enumerate() {
        let f = reference.system.eval_f(state);
        residual.axpy(-h * coeffs.beta[j], &f, 1.0);
    }
    Ok(residual)
}

/// Result of a local-truncation-error probe over a (h, zeta) grid.
#[derive(Clone, Debug)]
pub struct LteProbe {
    /// exp(intercept) of the log-log fit of max residual vs h.
    pub c_lte: f64,
    /// Fitted slope; the order prediction is p + 1.
    pub slope: f64,
    pub slope_stderr: f64,
    /// Set when residuals sit at the floor (< 1e-10) and no slope was fit.
    pub exact: bool,
    /// (h, max residual over probes, rms residual over probes), ordered by h.
    pub per_h: Vec<(f64, f64, f64)>,
}

/// Probe the window residual of the system's own field over a grid of
/// (h, zeta) geometries at `n_probes` anchor states sampled inside the
/// domain box. Returns the fitted log-log constant and slope.
pub fn lte_constant_probe(
    scheme: VlmmScheme,
    reference: &ReferenceFlow,
    grid: &[(f64, Vec<f64>)],
    n_probes: usize,
    seed: u64,
) -> Result<LteProbe> {
    let mut distinct_h: Vec<f64> = grid.iter().map(|(h, _)| *h).collect();
    distinct_h.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct_h.dedup();
    if distinct_h.len() < 2 {
        return Err(Error::validation(
            "degenerate LTE grid: need at least two distinct h values".to_string(),
        ));
    }
    if n_probes == 0 {
        return Err(Error::validation("n_probes must be >= 1".to_string()));
    }

    // Anchors drawn once and reused across every grid cell so the h-profile
    // of the residual is not polluted by probe resampling.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let boxes = &reference.system.domain_box;
    let anchors: Vec<DVector<f64>> = (0..n_probes)
        .map(|_| {
            DVector::from_iterator(
                boxes.len(),
                boxes.iter().map(|&(lo, hi)| {
                    let c = 0.5 * (lo + hi);
                    let r = 0.4 * (hi - lo);
                    rng.gen_range(c - r..c + r)
                }),
            )
        })
        .collect();

    let mut per_h: Vec<(f64, f64, f64)> = Vec::new();
    for &h in &distinct_h {
        let mut max_res: f64 = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for (gh, zeta) in grid.iter().filter(|(gh, _)| *gh == h) {
            let coeffs = coefficients(scheme, zeta)?;
            for anchor in &anchors {
                let r = residual_ms(scheme, &coeffs, reference, anchor, *gh, zeta)?.norm();
                max_res = max_res.max(r);
                sum_sq += r * r;
                count += 1;
            }
        }
        per_h.push((h, max_res, (sum_sq / count as f64).sqrt()));
    }

    let floor = per_h.iter().all(|&(_, mx, _)| mx < 1e-10);
    if floor {
        let c = per_h.iter().map(|&(_, mx, _)| mx).fold(0.0, f64::max);
        return Ok(LteProbe { c_lte: c, slope: 0.0, slope_stderr: 0.0, exact: true, per_h });
    }

    let xs: Vec<f64> = per_h.iter().map(|&(h, _, _)| h).collect();
    let ys: Vec<f64> = per_h.iter().map(|&(_, mx, _)| mx).collect();
    let (slope, stderr, intercept) = fit_loglog_slope(&xs, &ys)?;
    Ok(LteProbe { c_lte: intercept.exp(), slope, slope_stderr: stderr, exact: false, per_h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    use crate::dynamics::make_benchmark;

    fn uniform(m: usize) -> Vec<f64> {
        vec![1.0; m.saturating_sub(1)]
    }

    #[test]
    fn scheme_parsing_and_order_relations() {
        let s = VlmmScheme::parse("ab2").unwrap();
        assert_eq!((s.family, s.m, s.p(), s.implicit()), (Family::Ab, 2, 2, false));
        let s = VlmmScheme::parse("am3").unwrap();
        assert_eq!((s.family, s.m, s.p(), s.implicit()), (Family::Am, 3, 4, true));
        let s = VlmmScheme::parse("bdf6").unwrap();
        assert_eq!((s.family, s.m, s.p(), s.implicit()), (Family::Bdf, 6, 6, true));
        assert!(VlmmScheme::parse("bdf7").is_err());
        assert!(VlmmScheme::parse("rk4").is_err());
        assert_eq!(VlmmScheme::parse("ab2").unwrap().to_string(), "ab2");
    }

    #[test]
    fn classical_uniform_coefficients() {
        // trapezoid
        let c = coefficients(VlmmScheme::parse("am1").unwrap(), &uniform(1)).unwrap();
        assert_abs_diff_eq!(c.beta[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(c.beta[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(c.alpha[0], -1.0, epsilon = 1e-14);

        // two-step explicit Adams
        let c = coefficients(VlmmScheme::parse("ab2").unwrap(), &uniform(2)).unwrap();
        assert_abs_diff_eq!(c.beta[0], -0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(c.beta[1], 1.5, epsilon = 1e-13);
        assert_eq!(c.beta[2], 0.0);
        assert_eq!(c.alpha, vec![0.0, -1.0]);

        // backward Euler
        let c = coefficients(VlmmScheme::parse("bdf1").unwrap(), &uniform(1)).unwrap();
        assert_abs_diff_eq!(c.alpha[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.beta[1], 1.0, epsilon = 1e-14);
        assert_eq!(c.beta[0], 0.0);

        // two-step BDF
        let c = coefficients(VlmmScheme::parse("bdf2").unwrap(), &uniform(2)).unwrap();
        assert_abs_diff_eq!(c.alpha[0], 1.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.alpha[1], -4.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.beta[2], 2.0 / 3.0, epsilon = 1e-13);

        // three-step implicit Adams
        let c = coefficients(VlmmScheme::parse("am2").unwrap(), &uniform(2)).unwrap();
        assert_abs_diff_eq!(c.beta[0], -1.0 / 12.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.beta[1], 8.0 / 12.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.beta[2], 5.0 / 12.0, epsilon = 1e-13);
    }

    #[test]
    fn lags_are_nonincreasing_and_end_at_zero() {
        let c = coefficients(VlmmScheme::parse("bdf3").unwrap(), &[0.8, 1.6]).unwrap();
        assert_eq!(*c.lags.last().unwrap(), 0.0);
        for w in c.lags.windows(2) {
            assert!(w[0] > w[1]);
        }
        // anchor-adjacent lag is exactly one anchor step
        assert_abs_diff_eq!(c.lags[c.m() - 1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn consistency_row_sum_holds_for_random_geometries() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for name in ["ab3", "am2", "bdf4"] {
            let scheme = VlmmScheme::parse(name).unwrap();
            for _ in 0..100 {
                let zeta: Vec<f64> =
                    (0..scheme.m - 1).map(|_| rng.gen_range(0.5..2.0)).collect();
                let c = coefficients(scheme, &zeta).unwrap();
                let s = 1.0 + c.alpha.iter().sum::<f64>();
                assert!(s.abs() <= 1e-12, "{name}: row sum {s:e}");
            }
        }
    }

    #[test]
    fn extreme_ratios_are_rejected_not_degraded() {
        let scheme = VlmmScheme::parse("bdf6").unwrap();
        // ratios far outside any admissible bound blow up the node spread
        let zeta = vec![1e-5; 5];
        match coefficients(scheme, &zeta) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected ill-conditioning rejection, got {other:?}"),
        }
    }

    #[test]
    fn zeta_validation() {
        let scheme = VlmmScheme::parse("ab3").unwrap();
        assert!(coefficients(scheme, &[1.0]).is_err());
        assert!(coefficients(scheme, &[1.0, -0.5]).is_err());
        assert!(coefficients(scheme, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn label_map_basics() {
        let coeffs = coefficients(VlmmScheme::parse("bdf1").unwrap(), &[]).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let x1 = DVector::from_vec(vec![1.5, 1.0]);
        let label = apply_label_map(&coeffs, &[x0.clone(), x1.clone()]).unwrap();
        assert_eq!(label, &x1 - &x0);

        // constant window maps to zero by the consistency row sum
        let coeffs = coefficients(VlmmScheme::parse("bdf3").unwrap(), &[1.2, 0.9]).unwrap();
        let c = DVector::from_vec(vec![0.7, -0.3]);
        let states = vec![c.clone(); 4];
        let label = apply_label_map(&coeffs, &states).unwrap();
        assert!(label.norm() < 1e-13);

        // linearity
        let states_a: Vec<DVector<f64>> =
            (0..4).map(|i| DVector::from_vec(vec![i as f64, 1.0 - i as f64])).collect();
        let states_b: Vec<DVector<f64>> =
            (0..4).map(|i| DVector::from_vec(vec![(i * i) as f64, 0.5 * i as f64])).collect();
        let mixed: Vec<DVector<f64>> =
            states_a.iter().zip(&states_b).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let la = apply_label_map(&coeffs, &states_a).unwrap();
        let lb = apply_label_map(&coeffs, &states_b).unwrap();
        let lm = apply_label_map(&coeffs, &mixed).unwrap();
        assert!((lm - (2.0 * la + 3.0 * lb)).norm() < 1e-12);

        // length mismatch
        assert!(apply_label_map(&coeffs, &states_a[..3]).is_err());
    }

    #[test]
    fn residual_vanishes_on_constant_field() {
        // xdot = c has linear solutions, exact for any order >= 1 scheme
        let sys = crate::dynamics::VectorFieldSpec::custom(
            "constant_field",
            2,
            |_x, out| {
                out[0] = 0.3;
                out[1] = -0.7;
            },
            vec![(-5.0, 5.0), (-5.0, 5.0)],
            7,
        );
        let rf = ReferenceFlow::new(sys);
        for name in ["ab1", "ab2", "am1", "bdf2", "bdf3"] {
            let scheme = VlmmScheme::parse(name).unwrap();
            let zeta: Vec<f64> = (0..scheme.m - 1).map(|i| 1.0 + 0.2 * i as f64).collect();
            let coeffs = coefficients(scheme, &zeta).unwrap();
            let anchor = DVector::from_vec(vec![0.4, 0.1]);
            let r = residual_ms(scheme, &coeffs, &rf, &anchor, 0.1, &zeta).unwrap();
            assert!(r.norm() < 1e-12, "{name}: residual {:e}", r.norm());
        }
    }

    #[test]
    fn residual_vanishes_on_polynomial_trajectories() {
        // nilpotent shift system: component trajectories are polynomials of
        // degree <= dim-1, inside the exactness regime for p >= dim-1
        let dim = 4;
        let sys = crate::dynamics::VectorFieldSpec::custom(
            "poly3",
            dim,
            |x, out| {
                out[0] = x[1];
                out[1] = x[2];
                out[2] = x[3];
                out[3] = 0.0;
            },
            vec![(-10.0, 10.0); 4],
            7,
        );
        let rf = ReferenceFlow::new(sys);
        let scheme = VlmmScheme::parse("bdf3").unwrap(); // p = 3 covers degree 3
        let zeta = vec![0.9, 1.3];
        let coeffs = coefficients(scheme, &zeta).unwrap();
        let anchor = DVector::from_vec(vec![0.5, 1.0, -2.0, 3.0]);
        let r = residual_ms(scheme, &coeffs, &rf, &anchor, 0.2, &zeta).unwrap();
        assert!(r.norm() <= 1e-10, "residual {:e}", r.norm());
    }

    #[test]
    fn richardson_ratio_matches_order() {
        // halving h scales the residual by about 2^(p+1)
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let rf = ReferenceFlow::new(sys);
        let scheme = VlmmScheme::parse("ab2").unwrap();
        let coeffs = coefficients(scheme, &[1.0]).unwrap();
        let anchor = DVector::from_vec(vec![1.0, 0.5]);
        let norms: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&h| residual_ms(scheme, &coeffs, &rf, &anchor, h, &[1.0]).unwrap().norm())
            .collect();
        for w in norms.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 8.0).abs() / 8.0 < 0.15, "ratio {ratio}");
        }
    }

    #[test]
    fn lte_probe_slopes() {
        let rf = ReferenceFlow::new(make_benchmark("van_der_pol", &BTreeMap::new()).unwrap());
        let scheme = VlmmScheme::parse("ab1").unwrap();
        let grid: Vec<(f64, Vec<f64>)> =
            [0.04, 0.02, 0.01, 0.005].iter().map(|&h| (h, vec![])).collect();
        let probe = lte_constant_probe(scheme, &rf, &grid, 50, 123).unwrap();
        assert!(!probe.exact);
        assert!(probe.slope > 1.85 && probe.slope < 2.15, "slope {}", probe.slope);

        let rf = ReferenceFlow::new(make_benchmark("mass_spring", &BTreeMap::new()).unwrap());
        let scheme = VlmmScheme::parse("bdf2").unwrap();
        let grid: Vec<(f64, Vec<f64>)> =
            [0.08, 0.04, 0.02, 0.01].iter().map(|&h| (h, vec![1.0])).collect();
        let probe = lte_constant_probe(scheme, &rf, &grid, 50, 321).unwrap();
        assert!(probe.slope > 2.8 && probe.slope < 3.2, "slope {}", probe.slope);
    }

    #[test]
    fn lte_probe_flags_exact_regime() {
        let sys = crate::dynamics::VectorFieldSpec::custom(
            "poly1",
            2,
            |x, out| {
                out[0] = x[1];
                out[1] = 0.0;
            },
            vec![(-10.0, 10.0), (-10.0, 10.0)],
            7,
        );
        let rf = ReferenceFlow::new(sys);
        let scheme = VlmmScheme::parse("ab2").unwrap();
        let grid: Vec<(f64, Vec<f64>)> =
            [0.1, 0.05, 0.025, 0.0125].iter().map(|&h| (h, vec![1.0])).collect();
        let probe = lte_constant_probe(scheme, &rf, &grid, 20, 5).unwrap();
        assert!(probe.exact);
        assert!(probe.c_lte <= 1e-9);
    }

    #[test]
    fn lte_probe_rejects_degenerate_grid() {
        let rf = ReferenceFlow::new(make_benchmark("van_der_pol", &BTreeMap::new()).unwrap());
        let scheme = VlmmScheme::parse("ab1").unwrap();
        let grid = vec![(0.01, vec![]), (0.01, vec![])];
        assert!(matches!(
            lte_constant_probe(scheme, &rf, &grid, 10, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cache_returns_identical_coefficients() {
        let scheme = VlmmScheme::parse("am3").unwrap();
        let zeta = [0.77, 1.31];
        let a = coefficients(scheme, &zeta).unwrap();
        let b = coefficients(scheme, &zeta).unwrap();
        assert_eq!(a, b);
    }
}
