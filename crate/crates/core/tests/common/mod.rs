//! Test-side oracles, independent of the library's solve path.

use sfl_core::vlmm::{Family, VlmmScheme};

/// Gaussian elimination with partial pivoting plus compensated iterative
/// refinement; deliberately hand-rolled so the oracle shares no code with
/// the library solver.
pub fn gauss_solve(a: &mut Vec<Vec<f64>>, b: &mut [f64]) -> Vec<f64> {
    let a0 = a.clone();
    let b0 = b.to_vec();
    let mut x = gauss_once(a, b);
    for _ in 0..2 {
        let r = exact_ish_residual(&a0, &x, &b0);
        let mut ar = a0.clone();
        let mut br = r;
        let dx = gauss_once(&mut ar, &mut br);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
    }
    x
}

fn gauss_once(a: &mut Vec<Vec<f64>>, b: &mut [f64]) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        assert!(a[col][col] != 0.0, "singular oracle system");
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    x
}

/// Residual b - A x with Neumaier-compensated accumulation and FMA product
/// error terms.
fn exact_ish_residual(a: &[Vec<f64>], x: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let mut sum = bi;
            let mut comp = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                let prod = -a[i][j] * xj;
                comp += (-a[i][j]).mul_add(xj, -prod);
                let t = sum + prod;
                if sum.abs() >= prod.abs() {
                    comp += (sum - t) + prod;
                } else {
                    comp += (prod - t) + sum;
                }
                sum = t;
            }
            sum + comp
        })
        .collect()
}

/// Brute-force order-condition solve with the polynomial basis centered on
/// the window midpoint and scaled by the half-span, so the nodes land in
/// [-1, 1]. The library solves in anchor-centered units of the anchor step,
/// so agreement is a genuine cross-check of both the basis handling and the
/// linear solve.
///
/// Returns (alpha over the M past nodes oldest-first, beta over all M+1
/// nodes oldest-first).
pub fn brute_force_coefficients(
    scheme: VlmmScheme,
    zeta: &[f64],
    h_scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = scheme.m;
    let p = scheme.p();
    assert_eq!(zeta.len(), m - 1);

    // reconstruct absolute node times: the anchor (last) step is h_scale
    let mut steps = vec![0.0; m];
    steps[m - 1] = h_scale;
    for i in (0..m - 1).rev() {
        steps[i] = steps[i + 1] / zeta[i];
    }
    let mut t = vec![0.0; m + 1];
    for j in 0..m {
        t[j + 1] = t[j] + steps[j];
    }
    let h = h_scale;
    let mid = 0.5 * (t[0] + t[m]);
    let span = if m >= 1 && t[m] > t[0] { 0.5 * (t[m] - t[0]) } else { 1.0 };
    let u: Vec<f64> = t.iter().map(|&tj| (tj - mid) / span).collect();

    // exactness of  q(t_M) + sum_j alpha_j q(t_j) = h sum_j beta_j q'(t_j)
    // on q = ((t - mid)/span)^d, i.e. q' = d u^{d-1} / span
    let powd = |base: f64, e: usize| -> f64 {
        if e == 0 {
            1.0
        } else {
            base.powi(e as i32)
        }
    };
    match scheme.family {
        Family::Ab => {
            // unknown beta_0..beta_{M-1}
            let mut a = vec![vec![0.0; m]; p];
            let mut b = vec![0.0; p];
            for d in 1..=p {
                for j in 0..m {
                    a[d - 1][j] = (h / span) * d as f64 * powd(u[j], d - 1);
                }
                b[d - 1] = powd(u[m], d) - powd(u[m - 1], d);
            }
            let beta = gauss_solve(&mut a, &mut b);
            let mut alpha = vec![0.0; m];
            alpha[m - 1] = -1.0;
            let mut full_beta = beta;
            full_beta.push(0.0);
            (alpha, full_beta)
        }
        Family::Am => {
            let mut a = vec![vec![0.0; m + 1]; p];
            let mut b = vec![0.0; p];
            for d in 1..=p {
                for j in 0..=m {
                    a[d - 1][j] = (h / span) * d as f64 * powd(u[j], d - 1);
                }
                b[d - 1] = powd(u[m], d) - powd(u[m - 1], d);
            }
            let beta = gauss_solve(&mut a, &mut b);
            let mut alpha = vec![0.0; m];
            alpha[m - 1] = -1.0;
            (alpha, beta)
        }
        Family::Bdf => {
            // unknowns alpha_0..alpha_{M-1}, beta_M
            let mut a = vec![vec![0.0; m + 1]; p + 1];
            let mut b = vec![0.0; p + 1];
            for d in 0..=p {
                for j in 0..m {
                    a[d][j] = powd(u[j], d);
                }
                a[d][m] = if d == 0 {
                    0.0
                } else {
                    -(h / span) * d as f64 * powd(u[m], d - 1)
                };
                b[d] = -powd(u[m], d);
            }
            let sol = gauss_solve(&mut a, &mut b);
            let alpha = sol[..m].to_vec();
            let mut beta = vec![0.0; m + 1];
            beta[m] = sol[m];
            (alpha, beta)
        }
    }
}

/// Every scheme the coefficient tables cover.
pub fn table_schemes() -> Vec<VlmmScheme> {
    let mut v = Vec::new();
    for m in 1..=4 {
        v.push(VlmmScheme::new(Family::Ab, m).unwrap());
    }
    for m in 1..=3 {
        v.push(VlmmScheme::new(Family::Am, m).unwrap());
    }
    for m in 1..=6 {
        v.push(VlmmScheme::new(Family::Bdf, m).unwrap());
    }
    v
}
