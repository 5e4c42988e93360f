//! Kernel estimators for the flow and the vector field.
//!
//! The flow estimator regresses the anchor state on the windowed input
//! (previous state, anchor step, step ratios) with a spectral filter applied
//! to the normalized Gram matrix. The vector-field estimator solves the
//! window label relation through the Koopman-lag forcing matrix B, whose
//! rows aggregate kernel evaluations at the lagged window states; its
//! smallest singular value is the empirical observability constant.
//!
//! Empirical operators are normalized by the sample count everywhere so
//! regularization strengths are comparable across sample sizes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::SpectralFilterSpec;
use crate::kernels::KernelSpec;
use crate::sampling::{Dataset, WindowSample};
use crate::vlmm::{apply_label_map, coefficients, VlmmScheme};

/// What a fitted model expects as input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Windowed flow input (state, anchor step, optionally step ratios).
    Flow { include_zeta: bool },
    /// Plain state input.
    State,
}

/// A fitted kernel expansion: predictions are cross-kernel evaluations
/// against the stored centers times the coefficient matrix.
#[derive(Clone, Debug)]
pub struct KernelExpansionModel {
    pub kernel: KernelSpec,
    pub centers: Vec<DVector<f64>>,
    /// One row per center, one column per output coordinate.
    pub coefficients: DMatrix<f64>,
    pub input_kind: InputKind,
    /// Hash of the dataset manifest the model was fitted on, if known.
    pub provenance: Option<String>,
}

impl KernelExpansionModel {
    /// Evaluate at `inputs`; returns one row per input point.
    pub fn predict(&self, inputs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let k = self.kernel.cross_gram(inputs, &self.centers)?;
        Ok(k * &self.coefficients)
    }

    pub fn output_dim(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }
}

/// Serialized form of [`KernelExpansionModel`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    kernel: KernelSpec,
    input_kind: InputKind,
    centers: Vec<Vec<f64>>,
    coefficients: Vec<Vec<f64>>,
    provenance: Option<String>,
}

impl KernelExpansionModel {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let file = ModelFile {
            schema_version: 1,
            kernel: self.kernel.clone(),
            input_kind: self.input_kind,
            centers: self.centers.iter().map(|c| c.as_slice().to_vec()).collect(),
            coefficients: self
                .coefficients
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            provenance: self.provenance.clone(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &file).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        use std::io::Write;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let file: ModelFile = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::config(format!("bad model file {}: {e}", path.display())))?;
        if file.schema_version != 1 {
            return Err(Error::config(format!(
                "unsupported model schema_version {}",
                file.schema_version
            )));
        }
        let n_centers = file.centers.len();
        let n_out = file.coefficients.first().map_or(0, |r| r.len());
        if file.coefficients.len() != n_centers {
            return Err(Error::config("model coefficients/centers row mismatch".to_string()));
        }
        let coefficients =
            DMatrix::from_fn(n_centers, n_out, |i, j| file.coefficients[i][j]);
        Ok(KernelExpansionModel {
            kernel: file.kernel,
            centers: file.centers.into_iter().map(DVector::from_vec).collect(),
            coefficients,
            input_kind: file.input_kind,
            provenance: file.provenance,
        })
    }
}

/// Build the windowed flow input of one window: (previous state, h[, zeta]).
pub fn flow_input(window: &WindowSample, include_zeta: bool) -> DVector<f64> {
    let m = window.window_states.len() - 1;
    let prev = &window.window_states[m - 1];
    let mut v = Vec::with_capacity(prev.len() + 1 + window.zeta.len());
    v.extend_from_slice(prev.as_slice());
    v.push(window.h);
    if include_zeta {
        v.extend_from_slice(&window.zeta);
    }
    DVector::from_vec(v)
}

/// Flow inputs for the whole dataset.
pub fn flow_inputs(dataset: &Dataset, include_zeta: bool) -> Vec<DVector<f64>> {
    dataset.windows.iter().map(|w| flow_input(w, include_zeta)).collect()
}

/// Flow regression input dimension for a dataset.
pub fn flow_input_dim(dataset: &Dataset, include_zeta: bool) -> usize {
    dataset.dim + 1 + if include_zeta { dataset.m - 1 } else { 0 }
}

/// Fit the flow estimator: spectral-filtered kernel regression of the
/// anchor state on the windowed input. With a Tikhonov filter this equals
/// kernel ridge regression with ridge ell * lambda.
pub fn fit_flow(
    dataset: &Dataset,
    kernel: &KernelSpec,
    filter: &SpectralFilterSpec,
) -> Result<KernelExpansionModel> {
    if dataset.windows.is_empty() {
        return Err(Error::validation("cannot fit on an empty dataset".to_string()));
    }
    let include_zeta = match kernel.input_dim() {
        d if d == dataset.dim + 1 => false,
        d if d == dataset.dim + dataset.m => true,
        d => {
            return Err(Error::validation(format!(
                "kernel input dim {d} matches neither (state, h) = {} nor (state, h, zeta) = {}",
                dataset.dim + 1,
                dataset.dim + dataset.m
            )))
        }
    };
    let inputs = flow_inputs(dataset, include_zeta);
    let ell = inputs.len() as f64;
    let gram = kernel.gram(&inputs)?;
    let mut targets = DMatrix::zeros(inputs.len(), dataset.dim);
    for (i, w) in dataset.windows.iter().enumerate() {
        targets.row_mut(i).copy_from(&w.anchor_x.transpose());
    }
    let coefficients = filter.apply_filter(&(gram / ell), &(targets / ell))?;
    Ok(KernelExpansionModel {
        kernel: kernel.clone(),
        centers: inputs,
        coefficients,
        input_kind: InputKind::Flow { include_zeta },
        provenance: None,
    })
}

/// Empirical Koopman-lag forcing matrix: entry (window k, center i) is
/// h_k * sum_j beta_j(zeta_k) k(x_{k,j}, c_i), using the observed window
/// states as the lagged evaluation points. The label matrix stacks the
/// window labels row-wise.
#[derive(Clone, Debug)]
pub struct ForcingMatrix {
    pub matrix: DMatrix<f64>,
    /// Window labels aligned with the rows.
    pub labels: DMatrix<f64>,
    pub h_values: Vec<f64>,
    pub scheme: VlmmScheme,
    pub kernel: KernelSpec,
    pub centers: Vec<DVector<f64>>,
}

impl ForcingMatrix {
    pub fn n_windows(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Deterministic default centers: an evenly strided subsample of distinct
/// window anchor states, at most `max_centers` of them.
pub fn default_centers(dataset: &Dataset, max_centers: usize) -> Vec<DVector<f64>> {
    let mut pool: Vec<DVector<f64>> = Vec::with_capacity(dataset.windows.len());
    for w in &dataset.windows {
        if pool.last() != Some(&w.anchor_x) {
            pool.push(w.anchor_x.clone());
        }
    }
    let n = pool.len();
    if n <= max_centers || max_centers == 0 {
        return pool;
    }
    (0..max_centers).map(|i| pool[i * n / max_centers].clone()).collect()
}

pub fn build_forcing_matrix(
    dataset: &Dataset,
    scheme: VlmmScheme,
    kernel: &KernelSpec,
    centers: &[DVector<f64>],
) -> Result<ForcingMatrix> {
    if dataset.windows.is_empty() {
        return Err(Error::validation("cannot build a forcing matrix from no windows".to_string()));
    }
    if dataset.m != scheme.m {
        return Err(Error::validation(format!(
            "dataset windows have M = {}, scheme {scheme} needs M = {}",
            dataset.m, scheme.m
        )));
    }
    if kernel.input_dim() != dataset.dim {
        return Err(Error::validation(format!(
            "field kernel input dim {} must equal the state dim {}",
            kernel.input_dim(),
            dataset.dim
        )));
    }
    kernel.validate()?;
    if centers.is_empty() {
        return Err(Error::validation("need at least one center".to_string()));
    }
    for (i, c) in centers.iter().enumerate() {
        if c.len() != dataset.dim {
            return Err(Error::validation(format!(
                "center {i} has dim {}, state dim is {}",
                c.len(),
                dataset.dim
            )));
        }
    }

    let n_w = dataset.windows.len();
    let n_c = centers.len();
    let mut matrix = DMatrix::zeros(n_w, n_c);
    let mut labels = DMatrix::zeros(n_w, dataset.dim);
    let mut h_values = Vec::with_capacity(n_w);
    for (k, w) in dataset.windows.iter().enumerate() {
        let coeffs = coefficients(scheme, &w.zeta)?;
        let label = match &w.label {
            Some(l) => l.clone(),
            None => apply_label_map(&coeffs, &w.window_states)?,
        };
        labels.row_mut(k).copy_from(&label.transpose());
        h_values.push(w.h);
        for (i, c) in centers.iter().enumerate() {
            let mut acc = 0.0;
            for (j, state) in w.window_states.iter().enumerate() {
                if coeffs.beta[j] != 0.0 {
                    acc += coeffs.beta[j] * kernel.eval(state, c);
                }
            }
            matrix[(k, i)] = w.h * acc;
        }
    }
    Ok(ForcingMatrix {
        matrix,
        labels,
        h_values,
        scheme,
        kernel: kernel.clone(),
        centers: centers.to_vec(),
    })
}

/// Fit the vector-field estimator from the forcing-matrix normal equations
/// with a spectral filter: coefficients = g(B'B / ell) B'L / ell.
pub fn fit_field(
    dataset: &Dataset,
    scheme: VlmmScheme,
    kernel: &KernelSpec,
    filter: &SpectralFilterSpec,
    centers: &[DVector<f64>],
) -> Result<KernelExpansionModel> {
    let forcing = build_forcing_matrix(dataset, scheme, kernel, centers)?;
    fit_field_from_forcing(&forcing, filter)
}

/// Fit from a prebuilt forcing matrix (used when the matrix is also needed
/// for observability diagnostics).
pub fn fit_field_from_forcing(
    forcing: &ForcingMatrix,
    filter: &SpectralFilterSpec,
) -> Result<KernelExpansionModel> {
    let ell = forcing.n_windows() as f64;
    let bt = forcing.matrix.transpose();
    let btb = (&bt * &forcing.matrix) / ell;
    let btl = (&bt * &forcing.labels) / ell;
    let coefficients = filter.apply_filter(&btb, &btl)?;
    Ok(KernelExpansionModel {
        kernel: forcing.kernel.clone(),
        centers: forcing.centers.clone(),
        coefficients,
        input_kind: InputKind::State,
        provenance: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Divide the forcing matrix by sqrt(sample count).
    PerSample,
}

/// Observability diagnostics of a forcing matrix.
#[derive(Clone, Debug)]
pub struct ObservabilityReport {
    /// Smallest singular value of B / sqrt(ell): the empirical proxy for
    /// the observability constant restricted to the kernel span.
    pub c_obs_hat: f64,
    /// Largest singular values of B / sqrt(ell), descending.
    pub spectrum_head: Vec<f64>,
    /// Smallest singular values of B / sqrt(ell), ascending.
    pub spectrum_tail: Vec<f64>,
    /// Log-log slope of c_obs_hat against h; filled by sweep callers.
    pub h_scaling_slope: Option<f64>,
}

pub fn observability_report(
    forcing: &ForcingMatrix,
    normalization: Normalization,
) -> Result<ObservabilityReport> {
    let Normalization::PerSample = normalization;
    if forcing.n_windows() == 0 {
        return Err(Error::validation("empty forcing matrix".to_string()));
    }
    let ell = forcing.n_windows() as f64;
    let scaled = &forcing.matrix / ell.sqrt();
    let svd = scaled.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let head: Vec<f64> = sv.iter().take(3).copied().collect();
    let tail: Vec<f64> = sv.iter().rev().take(3).copied().collect();
    Ok(ObservabilityReport {
        c_obs_hat: *sv.last().unwrap(),
        spectrum_head: head,
        spectrum_tail: tail,
        h_scaling_slope: None,
    })
}

/// Per-window residual of an arbitrary candidate field against the window
/// labels: r_k = L_k - h_k sum_j beta_j f(x_{k,j}), evaluated on the
/// observed window states.
pub fn empirical_window_residuals(
    dataset: &Dataset,
    scheme: VlmmScheme,
    field: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    if dataset.m != scheme.m {
        return Err(Error::validation(format!(
            "dataset windows have M = {}, scheme {scheme} needs M = {}",
            dataset.m, scheme.m
        )));
    }
    let mut out = Vec::with_capacity(dataset.windows.len());
    for w in &dataset.windows {
        let coeffs = coefficients(scheme, &w.zeta)?;
        let mut r = match &w.label {
            Some(l) => l.clone(),
            None => apply_label_map(&coeffs, &w.window_states)?,
        };
        for (j, state) in w.window_states.iter().enumerate() {
            if coeffs.beta[j] != 0.0 {
                r.axpy(-w.h * coeffs.beta[j], &field(state), 1.0);
            }
        }
        out.push(r);
    }
    Ok(out)
}
