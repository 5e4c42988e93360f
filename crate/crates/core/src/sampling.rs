//! Step laws, design laws, trajectory generation and windowed datasets.
//!
//! A dataset is a set of window samples cut with stride 1 from simulated
//! trajectories: each window carries its M+1 observed states, the anchor
//! step h (the newest step), and the step-ratio vector zeta. Observation
//! noise is additive iid Gaussian on states only; the noiseless shadow
//! states are kept on the trajectory records for error measurement.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ReferenceFlow, VectorFieldSpec};
use crate::error::{Error, Result};
use crate::util::{child_seed, fmt_g17};

/// How time advances are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Constant schedule; requires h_min == h_max.
    UniformDeterministic,
    /// Steps iid with log h uniform on [log h_min, log h_max]; draws that
    /// would break the ratio bounds are rejected and redrawn.
    LogUniform,
    /// h_k = h_min * r^k with constant ratio r (`ramp_ratio`, default the
    /// upper ratio bound).
    GeometricRamp,
}

/// Law of the time advances within a trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLawSpec {
    pub kind: StepKind,
    pub h_min: f64,
    pub h_max: f64,
    /// Admissible range for every consecutive-step ratio h_k / h_{k-1}.
    pub ratio_bounds: (f64, f64),
    /// Constant ratio for `GeometricRamp`; defaults to ratio_bounds.1.
    #[serde(default)]
    pub ramp_ratio: Option<f64>,
}

impl StepLawSpec {
    pub fn uniform(h: f64) -> Self {
        StepLawSpec {
            kind: StepKind::UniformDeterministic,
            h_min: h,
            h_max: h,
            ratio_bounds: (0.5, 2.0),
            ramp_ratio: None,
        }
    }

    pub fn log_uniform(h_min: f64, h_max: f64, ratio_bounds: (f64, f64)) -> Self {
        StepLawSpec { kind: StepKind::LogUniform, h_min, h_max, ratio_bounds, ramp_ratio: None }
    }

    pub fn validate(&self) -> Result<()> {
        let (zl, zu) = self.ratio_bounds;
        if !(self.h_min > 0.0) || !self.h_min.is_finite() {
            return Err(Error::config(format!("h_min must be positive, got {}", self.h_min)));
        }
        if self.h_min > self.h_max {
            return Err(Error::config(format!(
                "h_min = {} exceeds h_max = {}",
                self.h_min, self.h_max
            )));
        }
        if !(zl > 0.0) || zl > zu {
            return Err(Error::config(format!("bad ratio bounds ({zl}, {zu})")));
        }
        match self.kind {
            StepKind::UniformDeterministic => {
                if self.h_min != self.h_max {
                    return Err(Error::config(
                        "uniform_deterministic requires h_min == h_max".to_string(),
                    ));
                }
                if zl > 1.0 || zu < 1.0 {
                    return Err(Error::config(
                        "uniform_deterministic has all ratios 1, outside ratio_bounds".to_string(),
                    ));
                }
            }
            StepKind::LogUniform => {
                // some pair of admissible steps must satisfy the bounds
                if zl > self.h_max / self.h_min || zu < self.h_min / self.h_max {
                    return Err(Error::config(
                        "ratio bounds exclude every log-uniform schedule on [h_min, h_max]"
                            .to_string(),
                    ));
                }
            }
            StepKind::GeometricRamp => {
                let r = self.ramp_ratio.unwrap_or(zu);
                if !(r > 0.0) || r < zl || r > zu {
                    return Err(Error::config(format!(
                        "ramp ratio {r} outside ratio bounds ({zl}, {zu})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draw `count` steps; deterministic given `seed`.
    pub fn generate_steps(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::validation("step count must be >= 1".to_string()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.generate_steps_with_rng(count, &mut rng)
    }

    pub(crate) fn generate_steps_with_rng(
        &self,
        count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>> {
        self.validate()?;
        let (zl, zu) = self.ratio_bounds;
        let mut steps = Vec::with_capacity(count);
        match self.kind {
            StepKind::UniformDeterministic => steps.resize(count, self.h_min),
            StepKind::LogUniform => {
                let (lo, hi) = (self.h_min.ln(), self.h_max.ln());
                let mut prev: Option<f64> = None;
                for _ in 0..count {
                    let mut tries = 0;
                    let h = loop {
                        let cand = if lo == hi { self.h_min } else { rng.gen_range(lo..hi).exp() };
                        match prev {
                            None => break cand,
                            Some(p) => {
                                let ratio = cand / p;
                                if ratio >= zl && ratio <= zu {
                                    break cand;
                                }
                            }
                        }
                        tries += 1;
                        if tries > 10_000 {
                            return Err(Error::config(
                                "ratio bounds too tight for log-uniform rejection sampling"
                                    .to_string(),
                            ));
                        }
                    };
                    steps.push(h);
                    prev = Some(h);
                }
            }
            StepKind::GeometricRamp => {
                let r = self.ramp_ratio.unwrap_or(zu);
                let mut h = self.h_min;
                for _ in 0..count {
                    if h > self.h_max * (1.0 + 1e-12) {
                        return Err(Error::config(format!(
                            "geometric ramp exceeds h_max after {} steps",
                            steps.len()
                        )));
                    }
                    steps.push(h);
                    h *= r;
                }
            }
        }
        Ok(steps)
    }
}

/// Empirical moment E[H^q] of a step sample.
pub fn step_moment(steps: &[f64], q: f64) -> f64 {
    if steps.is_empty() {
        return f64::NAN;
    }
    steps.iter().map(|h| h.powf(q)).sum::<f64>() / steps.len() as f64
}

/// How anchor states are visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Many short trajectories with iid uniform initial conditions in the box.
    IidUniformBox,
    /// One long trajectory; its time average plays the role of the
    /// visitation law.
    TrajectoryTimeAverage,
}

/// Law of the visited states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignLawSpec {
    pub kind: DesignKind,
    /// Axis-aligned box for initial conditions (and error measurement).
    pub bounds: Vec<(f64, f64)>,
    pub n_trajectories: usize,
    /// Maximum duration of any single trajectory.
    pub horizon: f64,
}

impl DesignLawSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.bounds.len() != dim {
            return Err(Error::config(format!(
                "design box has {} axes, system has dim {dim}",
                self.bounds.len()
            )));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("bad design box axis ({lo}, {hi})")));
            }
        }
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories must be >= 1".to_string()));
        }
        if self.kind == DesignKind::TrajectoryTimeAverage && self.n_trajectories != 1 {
            return Err(Error::config(
                "trajectory_time_average uses exactly one trajectory".to_string(),
            ));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    fn sample_point(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.bounds.len(),
            self.bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)),
        )
    }
}

/// One simulated trajectory with noisy observations and their noiseless
/// shadows.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// The exact drawn steps; times are their prefix sums. Windows use these
    /// so stored step ratios carry no accumulated rounding.
    pub steps: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub shadow_states: Vec<DVector<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// One training atom: M+1 consecutive observed states plus the window
/// geometry. The label is filled later by the multistep label map.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub traj_id: usize,
    pub start_idx: usize,
    /// Newest window state.
    pub anchor_x: DVector<f64>,
    /// Anchor step: the newest step in the window.
    pub h: f64,
    /// Consecutive step ratios, oldest first (length M-1).
    pub zeta: Vec<f64>,
    /// M+1 states, oldest to newest.
    pub window_states: Vec<DVector<f64>>,
    pub label: Option<DVector<f64>>,
    pub weight: f64,
}

/// Provenance recorded alongside a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub system_name: String,
    pub system_params: BTreeMap<String, f64>,
    pub design: DesignLawSpec,
    pub steps: StepLawSpec,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub windows: Vec<WindowSample>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub m: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub generation: Option<GenerationInfo>,
}

impl Dataset {
    /// Empirical moment E[H^q] of the anchor steps.
    pub fn anchor_step_moment(&self, q: f64) -> f64 {
        let steps: Vec<f64> = self.windows.iter().map(|w| w.h).collect();
        step_moment(&steps, q)
    }
}

/// Simulate trajectories under the design and step laws and cut them into
/// `n_windows` windows of M+1 states. Deterministic given `seed`; windows
/// never straddle trajectory boundaries.
pub fn generate_dataset(
    system: &VectorFieldSpec,
    design: &DesignLawSpec,
    steps: &StepLawSpec,
    m: usize,
    n_windows: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::validation("window size M must be >= 1".to_string()));
    }
    if n_windows == 0 {
        return Err(Error::validation("n_windows must be >= 1".to_string()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::validation(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    design.validate(system.dim)?;
    steps.validate()?;

    let (n_traj, windows_per_traj) = match design.kind {
        DesignKind::IidUniformBox => {
            let per = n_windows.div_ceil(design.n_trajectories);
            (n_windows.div_ceil(per).min(design.n_trajectories), per)
        }
        DesignKind::TrajectoryTimeAverage => (1, n_windows),
    };

    let reference = ReferenceFlow::new(system.clone());
    let records: Vec<Result<TrajectoryRecord>> = (0..n_traj)
        .into_par_iter()
        .map(|t| {
            simulate_trajectory(
                &reference,
                design,
                steps,
                windows_per_traj + m - 1,
                noise_sigma,
                child_seed(seed, t as u64),
                t,
            )
        })
        .collect();

    let mut trajectories = Vec::with_capacity(n_traj);
    for r in records {
        trajectories.push(r?);
    }

    let mut windows = Vec::with_capacity(n_windows);
    'outer: for (traj_id, rec) in trajectories.iter().enumerate() {
        let n_states = rec.states.len();
        for start in 0..n_states.saturating_sub(m) {
            let states: Vec<DVector<f64>> = rec.states[start..=start + m].to_vec();
            let local_steps = &rec.steps[start..start + m];
            let zeta: Vec<f64> =
                (0..m.saturating_sub(1)).map(|i| local_steps[i + 1] / local_steps[i]).collect();
            windows.push(WindowSample {
                traj_id,
                start_idx: start,
                anchor_x: states[m].clone(),
                h: local_steps[m - 1],
                zeta,
                window_states: states,
                label: None,
                weight: 1.0,
            });
            if windows.len() == n_windows {
                break 'outer;
            }
        }
    }
    if windows.len() < n_windows {
        return Err(Error::generation(format!(
            "only {} of {n_windows} requested windows fit within the horizon",
            windows.len()
        )));
    }

    Ok(Dataset {
        windows,
        trajectories,
        m,
        dim: system.dim,
        noise_sigma,
        seed,
        generation: Some(GenerationInfo {
            system_name: system.name.clone(),
            system_params: BTreeMap::new(),
            design: design.clone(),
            steps: steps.clone(),
        }),
    })
}

fn simulate_trajectory(
    reference: &ReferenceFlow,
    design: &DesignLawSpec,
    steps: &StepLawSpec,
    n_steps: usize,
    noise_sigma: f64,
    seed: u64,
    traj_id: usize,
) -> Result<TrajectoryRecord> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x0 = design.sample_point(&mut rng);
    let step_list = steps.generate_steps_with_rng(n_steps, &mut rng)?;

    // honor the horizon: a trajectory may not run longer than it
    let total: f64 = step_list.iter().sum();
    if total > design.horizon {
        let mut acc = 0.0;
        let mut fit = 0usize;
        for &h in &step_list {
            if acc + h > design.horizon {
                break;
            }
            acc += h;
            fit += 1;
        }
        return Err(Error::generation(format!(
            "insufficient window length: trajectory {traj_id} fits only {} states within horizon {}, needs {}",
            fit + 1,
            design.horizon,
            n_steps + 1
        )));
    }

    let mut shadow = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    shadow.push(x0.clone());
    times.push(0.0);
    let mut x = x0;
    let mut t = 0.0;
    for &h in &step_list {
        x = reference.flow(&x, h)?;
        t += h;
        if !reference.system.in_scaled_box(x.as_slice(), 2.0) {
            return Err(Error::generation(format!(
                "trajectory {traj_id} escaped the safety box at t = {t}"
            )));
        }
        shadow.push(x.clone());
        times.push(t);
    }

    let states = if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::validation(format!("bad noise sigma: {e}")))?;
        shadow
            .iter()
            .map(|s| s.map(|v| v + normal.sample(&mut rng)))
            .collect()
    } else {
        shadow.clone()
    };

    Ok(TrajectoryRecord { times, steps: step_list, states, shadow_states: shadow, noise_sigma, seed })
}

/// JSON manifest accompanying a dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub system_name: String,
    pub system_params: BTreeMap<String, f64>,
    pub design: DesignLawSpec,
    pub steps: StepLawSpec,
    pub m: usize,
    pub dim: usize,
    pub n_windows: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Empirical anchor-step moments, keyed "h^q".
    pub moments: BTreeMap<String, f64>,
}

impl DatasetManifest {
    pub fn from_dataset(dataset: &Dataset, system_params: &BTreeMap<String, f64>, p: usize) -> Result<Self> {
        let gen = dataset
            .generation
            .as_ref()
            .ok_or_else(|| Error::validation("dataset carries no generation info".to_string()))?;
        let mut moments = BTreeMap::new();
        moments.insert("h^1".to_string(), dataset.anchor_step_moment(1.0));
        let q = (2 * p + 2) as f64;
        moments.insert(format!("h^{}", 2 * p + 2), dataset.anchor_step_moment(q));
        Ok(DatasetManifest {
            schema_version: 1,
            system_name: gen.system_name.clone(),
            system_params: system_params.clone(),
            design: gen.design.clone(),
            steps: gen.steps.clone(),
            m: dataset.m,
            dim: dataset.dim,
            n_windows: dataset.windows.len(),
            noise_sigma: dataset.noise_sigma,
            seed: dataset.seed,
            moments,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let manifest: DatasetManifest = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::config(format!("bad manifest {}: {e}", path.display())))?;
        if manifest.schema_version != 1 {
            return Err(Error::config(format!(
                "unsupported manifest schema_version {}",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }
}

impl Dataset {
    /// Columnar CSV, one row per window: trajectory id, start index, weight,
    /// anchor step, step ratios, then the M+1 states flattened oldest-first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header: Vec<String> =
            vec!["traj_id".into(), "start_idx".into(), "weight".into(), "h".into()];
        for i in 0..self.m.saturating_sub(1) {
            header.push(format!("zeta_{i}"));
        }
        for j in 0..=self.m {
            for c in 0..self.dim {
                header.push(format!("x{j}_{c}"));
            }
        }
        writeln!(f, "{}", header.join(","))?;
        for w in &self.windows {
            let mut row: Vec<String> = vec![
                w.traj_id.to_string(),
                w.start_idx.to_string(),
                fmt_g17(w.weight),
                fmt_g17(w.h),
            ];
            row.extend(w.zeta.iter().map(|&z| fmt_g17(z)));
            for s in &w.window_states {
                row.extend(s.iter().map(|&v| fmt_g17(v)));
            }
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read a dataset written by [`Dataset::write_csv`]; the manifest
    /// supplies the window size and state dimension. Trajectory records are
    /// not part of the file format.
    pub fn read_csv(path: &Path, manifest: &DatasetManifest) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::config(format!("empty dataset file {}", path.display())))??;
        let expected_cols = 4 + (manifest.m - 1) + (manifest.m + 1) * manifest.dim;
        if header.split(',').count() != expected_cols {
            return Err(Error::config(format!(
                "dataset header has {} columns, manifest implies {expected_cols}",
                header.split(',').count()
            )));
        }
        let mut windows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols {
                return Err(Error::config(format!(
                    "dataset row {} has {} columns, expected {expected_cols}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::config(format!("bad float `{s}` in dataset row {}", lineno + 2)))
            };
            let traj_id: usize = fields[0]
                .parse()
                .map_err(|_| Error::config(format!("bad traj_id in row {}", lineno + 2)))?;
            let start_idx: usize = fields[1]
                .parse()
                .map_err(|_| Error::config(format!("bad start_idx in row {}", lineno + 2)))?;
            let weight = parse(fields[2])?;
            let h = parse(fields[3])?;
            let mut k = 4;
            let mut zeta = Vec::with_capacity(manifest.m - 1);
            for _ in 0..manifest.m - 1 {
                zeta.push(parse(fields[k])?);
                k += 1;
            }
            let mut window_states = Vec::with_capacity(manifest.m + 1);
            for _ in 0..=manifest.m {
                let mut v = Vec::with_capacity(manifest.dim);
                for _ in 0..manifest.dim {
                    v.push(parse(fields[k])?);
                    k += 1;
                }
                window_states.push(DVector::from_vec(v));
            }
            windows.push(WindowSample {
                traj_id,
                start_idx,
                anchor_x: window_states[manifest.m].clone(),
                h,
                zeta,
                window_states,
                label: None,
                weight,
            });
        }
        Ok(Dataset {
            windows,
            trajectories: Vec::new(),
            m: manifest.m,
            dim: manifest.dim,
            noise_sigma: manifest.noise_sigma,
            seed: manifest.seed,
            generation: Some(GenerationInfo {
                system_name: manifest.system_name.clone(),
                system_params: manifest.system_params.clone(),
                design: manifest.design.clone(),
                steps: manifest.steps.clone(),
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    use crate::dynamics::make_benchmark;

    fn design_box(n_traj: usize) -> DesignLawSpec {
        DesignLawSpec {
            kind: DesignKind::IidUniformBox,
            bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
            n_trajectories: n_traj,
            horizon: 50.0,
        }
    }

    #[test]
    fn uniform_schedule_is_constant() {
        let law = StepLawSpec::uniform(0.1);
        let steps = law.generate_steps(5, 1).unwrap();
        assert_eq!(steps, vec![0.1; 5]);
        for w in steps.windows(2) {
            assert_eq!(w[1] / w[0], 1.0);
        }
    }

    #[test]
    fn geometric_ramp_has_exact_ratio() {
        let law = StepLawSpec {
            kind: StepKind::GeometricRamp,
            h_min: 0.01,
            h_max: 10.0,
            ratio_bounds: (0.5, 2.0),
            ramp_ratio: Some(1.05),
        };
        let steps = law.generate_steps(20, 7).unwrap();
        for w in steps.windows(2) {
            assert_eq!(w[1] / w[0], 1.05);
        }
    }

    #[test]
    fn log_uniform_respects_bounds_and_mean() {
        let law = StepLawSpec::log_uniform(0.05, 0.1, (0.5, 2.0));
        let steps = law.generate_steps(10_000, 42).unwrap();
        let mut min_ratio = f64::INFINITY;
        let mut max_ratio: f64 = 0.0;
        for w in steps.windows(2) {
            let r = w[1] / w[0];
            min_ratio = min_ratio.min(r);
            max_ratio = max_ratio.max(r);
        }
        assert!(min_ratio >= 0.5 && max_ratio <= 2.0);
        assert!(steps.iter().all(|&h| h > 0.0 && h <= 0.1));

        // analytic mean of log-uniform on [a, b] is (b - a) / ln(b / a)
        let (a, b) = (0.05_f64, 0.1_f64);
        let mean = (b - a) / (b / a).ln();
        let emp = step_moment(&steps, 1.0);
        let var = step_moment(&steps, 2.0) - emp * emp;
        let se = (var / steps.len() as f64).sqrt();
        assert!((emp - mean).abs() <= 3.0 * se, "emp {emp}, mean {mean}, se {se}");
    }

    #[test]
    fn infeasible_step_specs_are_config_errors() {
        let mut law = StepLawSpec::uniform(0.1);
        law.h_min = 0.2;
        assert!(matches!(law.validate(), Err(Error::Config(_))));

        let law = StepLawSpec::log_uniform(0.01, 1.0, (150.0, 200.0));
        assert!(matches!(law.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_windows_match_reference_iterates() {
        let sys = make_benchmark("linear_2d", &BTreeMap::new()).unwrap();
        let ds = generate_dataset(&sys, &design_box(1), &StepLawSpec::uniform(0.1), 2, 3, 0.0, 9)
            .unwrap();
        assert_eq!(ds.windows.len(), 3);
        let rf = ReferenceFlow::new(sys);
        for w in &ds.windows {
            assert_eq!(w.zeta, vec![1.0]);
            for pair in w.window_states.windows(2) {
                let next = rf.flow(&pair[0], 0.1).unwrap();
                assert!((next - &pair[1]).norm() < 1e-9);
            }
        }
        // stride-1 extraction from one trajectory
        assert_eq!(
            ds.windows.iter().map(|w| w.start_idx).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn zero_noise_keeps_shadows_exact() {
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let ds = generate_dataset(&sys, &design_box(2), &StepLawSpec::uniform(0.05), 1, 10, 0.0, 3)
            .unwrap();
        for rec in &ds.trajectories {
            for (a, b) in rec.states.iter().zip(&rec.shadow_states) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let law = StepLawSpec::log_uniform(0.02, 0.08, (0.5, 2.0));
        let a = generate_dataset(&sys, &design_box(4), &law, 2, 40, 0.01, 77).unwrap();
        let b = generate_dataset(&sys, &design_box(4), &law, 2, 40, 0.01, 77).unwrap();
        for (wa, wb) in a.windows.iter().zip(&b.windows) {
            assert_eq!(wa.h.to_bits(), wb.h.to_bits());
            for (sa, sb) in wa.window_states.iter().zip(&wb.window_states) {
                for (va, vb) in sa.iter().zip(sb.iter()) {
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }
    }

    #[test]
    fn window_provenance_reconstructs_states() {
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let law = StepLawSpec::log_uniform(0.02, 0.08, (0.5, 2.0));
        let ds = generate_dataset(&sys, &design_box(3), &law, 3, 20, 0.005, 13).unwrap();
        for w in &ds.windows {
            let rec = &ds.trajectories[w.traj_id];
            for (j, s) in w.window_states.iter().enumerate() {
                assert_eq!(s, &rec.states[w.start_idx + j]);
            }
            // ratios reproducible from the stored steps
            for (i, &z) in w.zeta.iter().enumerate() {
                let s0 = rec.steps[w.start_idx + i];
                let s1 = rec.steps[w.start_idx + i + 1];
                assert_eq!(z.to_bits(), (s1 / s0).to_bits());
            }
            // and consistent with the cumulative times up to rounding
            for (i, &z) in w.zeta.iter().enumerate() {
                let s0 = rec.times[w.start_idx + i + 1] - rec.times[w.start_idx + i];
                let s1 = rec.times[w.start_idx + i + 2] - rec.times[w.start_idx + i + 1];
                assert_abs_diff_eq!(z, s1 / s0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let sys = make_benchmark("mass_spring", &BTreeMap::new()).unwrap();
        let sigma = 0.05;
        let ds = generate_dataset(
            &sys,
            &design_box(20),
            &StepLawSpec::uniform(0.05),
            1,
            12_000,
            sigma,
            2024,
        )
        .unwrap();
        let mut devs: Vec<f64> = Vec::new();
        for rec in &ds.trajectories {
            for (s, sh) in rec.states.iter().zip(&rec.shadow_states) {
                for c in 0..s.len() {
                    devs.push(s[c] - sh[c]);
                }
            }
        }
        assert!(devs.len() >= 10_000);
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / devs.len() as f64;
        let sd = var.sqrt();
        assert!((sd - sigma).abs() / sigma < 0.05, "sd {sd}");
    }

    #[test]
    fn horizon_too_short_is_a_generation_error() {
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let mut design = design_box(1);
        design.horizon = 0.12; // fits 3 states at h = 0.05
        let err = generate_dataset(&sys, &design, &StepLawSpec::uniform(0.05), 3, 1, 0.0, 1)
            .unwrap_err();
        match err {
            Error::Generation(msg) => assert!(msg.contains("insufficient window length"), "{msg}"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn escape_from_safety_box_names_trajectory() {
        // unstable system started near the box edge escapes quickly
        let sys = crate::dynamics::VectorFieldSpec::custom(
            "unstable",
            2,
            |x, out| {
                out[0] = 5.0 * x[0];
                out[1] = 5.0 * x[1];
            },
            vec![(-1.0, 1.0), (-1.0, 1.0)],
            7,
        );
        let design = DesignLawSpec {
            kind: DesignKind::IidUniformBox,
            bounds: vec![(0.9, 1.0), (0.9, 1.0)],
            n_trajectories: 1,
            horizon: 100.0,
        };
        let err = generate_dataset(&sys, &design, &StepLawSpec::uniform(0.2), 1, 10, 0.0, 5)
            .unwrap_err();
        match err {
            Error::Generation(msg) => assert!(msg.contains("trajectory 0"), "{msg}"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let sys = make_benchmark("van_der_pol", &BTreeMap::new()).unwrap();
        let law = StepLawSpec::log_uniform(0.02, 0.08, (0.5, 2.0));
        let ds = generate_dataset(&sys, &design_box(3), &law, 2, 25, 0.01, 55).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.dataset.csv");
        let man = dir.path().join("d.manifest.json");
        ds.write_csv(&csv).unwrap();
        DatasetManifest::from_dataset(&ds, &BTreeMap::new(), 2)
            .unwrap()
            .write_json(&man)
            .unwrap();

        let manifest = DatasetManifest::read_json(&man).unwrap();
        let back = Dataset::read_csv(&csv, &manifest).unwrap();
        assert_eq!(back.windows.len(), ds.windows.len());
        for (a, b) in ds.windows.iter().zip(&back.windows) {
            assert_eq!(a.h.to_bits(), b.h.to_bits());
            assert_eq!(a.traj_id, b.traj_id);
            for (sa, sb) in a.window_states.iter().zip(&b.window_states) {
                for (va, vb) in sa.iter().zip(sb.iter()) {
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }
    }
}
