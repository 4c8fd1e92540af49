//! Config files, run manifests, CSV artifacts and the oracle self-check used
//! by the `menkf` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{BalanceRow, ExperimentConfig, RunResult, SweepRow, Truth};
use crate::filters::{self, FilterScheme};
use crate::obsmodel::{ObservationKind, ObservationOperator, ObservationStream};
use crate::rng;
use crate::stats::{Ensemble, Taper};

/// Parses a TOML config; unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub r0: Option<f64>,
    pub lambda: Option<f64>,
    pub scheme: Option<FilterScheme>,
    pub cycles: Option<usize>,
    pub spinup_cycles: Option<usize>,
    pub observation: Option<ObservationKind>,
    pub seed_truth: Option<u64>,
    pub seed_obs: Option<u64>,
    pub seed_ens: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(delta, gamma, r0, lambda, scheme, cycles, spinup_cycles, observation, seed_truth, seed_obs, seed_ens);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub cycle: usize,
    pub time: f64,
    pub max_abs: f64,
}

/// Everything needed to repeat a run on the same build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub config: ExperimentConfig,
    pub seed_truth: u64,
    pub seed_obs: u64,
    pub seed_ens: u64,
    pub wall_time_s: f64,
    pub divergence: Option<DivergenceInfo>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            rng: rng::GAUSSIAN_ALGORITHM.to_string(),
            config: config.clone(),
            seed_truth: config.seed_truth,
            seed_obs: config.seed_obs,
            seed_ens: config.seed_ens,
            wall_time_s: 0.0,
            divergence: None,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), fmt_f64)
}

pub const SERIES_HEADER: &str = "cycle,t,rmse_x,rmse_h,imbalance,diverged";

/// One row per completed cycle, plus a final `diverged = 1` row when the guard tripped.
pub fn series_csv(result: &RunResult) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for (j, t) in result.times.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},0",
            j + 1,
            fmt_f64(*t),
            fmt_f64(result.rmse_x[j]),
            fmt_f64(result.rmse_h[j]),
            fmt_f64(result.imbalance[j])
        );
    }
    if let Some(d) = &result.divergence {
        let _ = writeln!(out, "{},{},NaN,NaN,NaN,1", d.cycle, fmt_f64(d.time));
    }
    out
}

pub fn emit_series_csv(result: &RunResult, path: &Path) -> Result<()> {
    fs::write(path, series_csv(result))?;
    Ok(())
}

/// Ensemble imbalance norm at every model step.
pub fn step_imbalance_csv(result: &RunResult, dt: f64) -> String {
    let mut out = String::from("step,t,imbalance\n");
    for (k, v) in result.step_imbalance.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{}", fmt_f64(k as f64 * dt), fmt_f64(*v));
    }
    out
}

pub const SWEEP_HEADER: &str = "scheme,r0,best_lambda_x,best_rmse_x,best_lambda_h,best_rmse_h,diverged";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.label(),
            fmt_f64(r.r0),
            fmt_opt(r.best_lambda_x),
            fmt_opt(r.best_rmse_x),
            fmt_opt(r.best_lambda_h),
            fmt_opt(r.best_rmse_h),
            u8::from(r.diverged)
        );
    }
    out
}

pub fn emit_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    fs::write(path, sweep_csv(rows))?;
    Ok(())
}

/// `j,t,x_1..x_n,h_1..h_n,u_1..u_n` for `t_0, t_1, ...`.
pub fn truth_csv(truth: &Truth) -> String {
    let n = truth.states.first().map_or(0, |z| z.n_grid());
    let mut out = String::from("j,t");
    for field in ["x", "h", "u"] {
        for l in 1..=n {
            let _ = write!(out, ",{field}_{l}");
        }
    }
    out.push('\n');
    for (j, z) in truth.states.iter().enumerate() {
        let _ = write!(out, "{j},{}", fmt_f64(j as f64 * truth.dt_obs));
        for v in z.as_slice() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// `j,t,y_1..y_p`.
pub fn observations_csv(obs: &ObservationStream) -> String {
    let p = obs.values.first().map_or(0, Vec::len);
    let mut out = String::from("j,t");
    for q in 1..=p {
        let _ = write!(out, ",y_{q}");
    }
    out.push('\n');
    for (j, (t, y)) in obs.times.iter().zip(&obs.values).enumerate() {
        let _ = write!(out, "{},{}", j + 1, fmt_f64(*t));
        for v in y {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// `eps,max_imbalance` summary rows.
pub fn balance_csv(rows: &[BalanceRow]) -> String {
    let mut out = String::from("eps,max_imbalance\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", fmt_f64(r.eps), fmt_f64(r.max_imbalance));
    }
    out
}

/// Imbalance norm over time, one column per `eps`.
pub fn balance_series_csv(rows: &[BalanceRow], dt: f64) -> String {
    let mut out = String::from("t");
    for r in rows {
        let _ = write!(out, ",eps_{}", r.eps);
    }
    out.push('\n');
    let len = rows.iter().map(|r| r.series.len()).min().unwrap_or(0);
    for k in 0..len {
        out.push_str(&fmt_f64(k as f64 * dt));
        for r in rows {
            let _ = write!(out, ",{}", fmt_f64(r.series[k]));
        }
        out.push('\n');
    }
    out
}

/// Writes `contents` to `dir/name` and records the file name.
pub fn write_artifact(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    outputs.push(name.to_string());
    Ok(path)
}

/// Outcome of one closed-form identity.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn repeated_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let rk = r * k as f64;
    let (mut m, mut p) = (mean.clone(), cov.clone());
    for _ in 0..k {
        (m, p) = filters::kalman_oracle(&m, &p, h, &rk, y)?;
    }
    Ok((m, p))
}

fn split_error(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    k: usize,
) -> Result<f64> {
    let (m1, p1) = filters::kalman_oracle(mean, cov, h, r, y)?;
    let (mk, pk) = repeated_update(mean, cov, h, r, y, k)?;
    Ok((mk - m1).amax().max((pk - p1).amax()))
}

/// The closed-form identities of the analysis step: incremental Bayes
/// factorization, `K`-fold updates with `R -> K R`, and agreement of the
/// pseudo-time flow with the Kalman update.
pub fn oracle_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (mean, cov, h, r, y) =
        (DVector::from_element(1, 0.3), scalar(1.7), scalar(1.0), scalar(0.6), DVector::from_element(1, 2.0));
    out.push(CheckResult {
        name: "scalar two-step Bayes (R -> 2R twice)",
        error: split_error(&mean, &cov, &h, &r, &y, 2)?,
        tolerance: 1e-12,
    });
    out.push(CheckResult {
        name: "scalar ten-fold update (R -> 10R)",
        error: split_error(&mean, &cov, &h, &r, &y, 10)?,
        tolerance: 1e-12,
    });

    let mut rng = rng::seeded_rng(2024);
    let mut draw = |rows: usize, cols: usize| {
        DMatrix::from_column_slice(rows, cols, &rng::standard_normals(&mut rng, rows * cols))
    };
    let a = draw(5, 5);
    let b = draw(5, 5);
    let h5 = draw(5, 5);
    let mean5 = DVector::from_column_slice(draw(5, 1).as_slice());
    let y5 = DVector::from_column_slice(draw(5, 1).as_slice());
    let cov5 = &a * a.transpose() + DMatrix::identity(5, 5);
    let r5 = &b * b.transpose() + DMatrix::identity(5, 5);
    out.push(CheckResult {
        name: "5x5 ten-fold update (R -> 10R)",
        error: split_error(&mean5, &cov5, &h5, &r5, &y5, 10)?,
        tolerance: 1e-12,
    });

    let members: Vec<Vec<f64>> = (0..12).map(|_| draw(4, 1).as_slice().iter().map(|v| v + 1.0).collect()).collect();
    let ens = Ensemble::new(members)?;
    let h4 = draw(2, 4);
    let c = draw(2, 2);
    let r4 = &c * c.transpose() + DMatrix::identity(2, 2);
    let y4 = DVector::from_column_slice(draw(2, 1).as_slice());
    let (mean_a, cov_a) =
        filters::kalman_oracle(&DVector::from_vec(ens.mean()), &ens.covariance()?, &h4, &r4, &y4)?;
    let flowed = filters::analysis_flow(
        &ens,
        &ObservationOperator::from_dense(&h4)?,
        &crate::obsmodel::ObsErrorCov::new(r4)?,
        y4.as_slice(),
        &Taper::none(4),
        1000,
    )?;
    let mean_f = DVector::from_vec(flowed.mean());
    out.push(CheckResult {
        name: "analysis flow mean vs Kalman (relative)",
        error: (&mean_f - &mean_a).norm() / mean_a.norm(),
        tolerance: 1e-5,
    });
    out.push(CheckResult {
        name: "analysis flow covariance vs Kalman (relative)",
        error: (flowed.covariance()? - &cov_a).norm() / cov_a.norm(),
        tolerance: 1e-4,
    });
    Ok(out)
}
