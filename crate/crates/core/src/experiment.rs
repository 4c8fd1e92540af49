//! Twin experiments: truth generation, synthetic observations, filter runs,
//! error metrics, inflation/localization sweeps and free-model studies.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, Divergence, FilterConfig, FilterScheme};
use crate::integrate::{Scheme, Stepper, StepperConfig};
use crate::model::{self, ModelParams, StateVector};
use crate::obsmodel::{self, ObsErrorCov, ObservationKind, ObservationOperator, ObservationStream, Parity};
use crate::rng;
use crate::stats::{Ensemble, InflationMask, InflationSpec, LocalizationSpec};

/// How the wave velocity `u` of a balanced initial state is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityInit {
    /// `u` from the time derivative of the balance relation.
    #[default]
    Differentiated,
    Zero,
}

impl VelocityInit {
    fn differentiate(self) -> bool {
        self == VelocityInit::Differentiated
    }
}

/// Every resolved parameter of a twin experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_grid: usize,
    pub eps: f64,
    pub alpha: f64,
    pub delta: f64,
    /// Wave damping of the filter's forecast model; the truth is never damped.
    pub gamma: f64,
    pub forcing: f64,
    pub ensemble_size: usize,
    pub dt: f64,
    pub dt_obs: f64,
    /// Total assimilation cycles, spin-up included.
    pub cycles: usize,
    pub spinup_cycles: usize,
    pub observation: ObservationKind,
    pub obs_parity: Parity,
    pub obs_variance: f64,
    pub scheme: FilterScheme,
    pub r0: f64,
    pub lambda: f64,
    pub inflation_mask: InflationMask,
    pub inflation_grid: Vec<f64>,
    pub localization_grid: Vec<f64>,
    /// Defaults to `dt_obs / 2`.
    pub mollifier_eps: Option<f64>,
    pub analysis_substeps: usize,
    pub stepper: Scheme,
    pub truth_spinup_time: f64,
    pub ensemble_spread: f64,
    pub velocity_init: VelocityInit,
    pub divergence_bound: f64,
    pub seed_truth: u64,
    pub seed_obs: u64,
    pub seed_ens: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_grid: 40,
            eps: 0.0025,
            alpha: 0.5,
            delta: 0.1,
            gamma: 0.0,
            forcing: 8.0,
            ensemble_size: 10,
            dt: 0.0025,
            dt_obs: 0.05,
            cycles: 4000,
            spinup_cycles: 200,
            observation: ObservationKind::XEverySecond,
            obs_parity: Parity::Even,
            obs_variance: 1.0,
            scheme: FilterScheme::Menkf,
            r0: 2.0,
            lambda: 1.0,
            inflation_mask: InflationMask::SlowOnly,
            inflation_grid: vec![1.0, 1.0005, 1.001, 1.0025, 1.004, 1.006],
            localization_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            mollifier_eps: None,
            analysis_substeps: 200,
            stepper: Scheme::StrangSplit,
            truth_spinup_time: 10.0,
            ensemble_spread: 0.1,
            velocity_init: VelocityInit::Differentiated,
            divergence_bound: 1e6,
            seed_truth: 1,
            seed_obs: 2,
            seed_ens: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_params(self.gamma).validate()?;
        if self.ensemble_size < 2 {
            return Err(Error::invalid("ensemble_size", format!("must be >= 2, got {}", self.ensemble_size)));
        }
        if self.cycles > 0 && self.cycles <= self.spinup_cycles {
            return Err(Error::invalid(
                "cycles",
                format!("{} cycles do not exceed the {} spin-up cycles", self.cycles, self.spinup_cycles),
            ));
        }
        if self.inflation_grid.is_empty() {
            return Err(Error::invalid("inflation_grid", "must not be empty"));
        }
        if self.localization_grid.is_empty() {
            return Err(Error::invalid("localization_grid", "must not be empty"));
        }
        for &l in self.inflation_grid.iter().chain([&self.lambda]) {
            InflationSpec::new(l, self.inflation_mask)?;
        }
        for &r in self.localization_grid.iter().chain([&self.r0]) {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::invalid("r0", format!("localization radius must be >= 0, got {r}")));
            }
        }
        if !(self.obs_variance > 0.0 && self.obs_variance.is_finite()) {
            return Err(Error::invalid("obs_variance", format!("must be positive, got {}", self.obs_variance)));
        }
        if self.observation == ObservationKind::CustomRows {
            return Err(Error::invalid("observation", "custom rows are not available in twin experiments"));
        }
        if !(self.truth_spinup_time >= 0.0) {
            return Err(Error::invalid("truth_spinup_time", "must be >= 0"));
        }
        if !(self.ensemble_spread >= 0.0) {
            return Err(Error::invalid("ensemble_spread", "must be >= 0"));
        }
        self.stepper_config().validate()?;
        self.filter_config(self.scheme, self.r0, self.lambda).validate()
    }

    pub fn model_params(&self, gamma: f64) -> ModelParams {
        ModelParams {
            n_grid: self.n_grid,
            eps: self.eps,
            alpha: self.alpha,
            delta: self.delta,
            gamma,
            forcing: self.forcing,
            conservative: false,
        }
    }

    pub fn stepper_config(&self) -> StepperConfig {
        StepperConfig { dt: self.dt, scheme: self.stepper, ..StepperConfig::default() }
    }

    pub fn observation_operator(&self) -> ObservationOperator {
        match self.observation {
            ObservationKind::MixedEverySecond => ObservationOperator::mixed_every_second(self.n_grid, self.obs_parity),
            _ => ObservationOperator::x_every_second(self.n_grid, self.obs_parity),
        }
    }

    pub fn mollifier_eps(&self) -> f64 {
        self.mollifier_eps.unwrap_or(0.5 * self.dt_obs)
    }

    /// Filter settings for one `(scheme, r0, lambda)` cell, using the configured `gamma`.
    pub fn filter_config(&self, scheme: FilterScheme, r0: f64, lambda: f64) -> FilterConfig {
        FilterConfig {
            scheme,
            mollifier_eps: self.mollifier_eps(),
            dt: self.dt,
            dt_obs: self.dt_obs,
            localization: LocalizationSpec::with_radius(r0),
            inflation: InflationSpec { factor: lambda, mask: self.inflation_mask },
            analysis_substeps: self.analysis_substeps,
            model_gamma: self.gamma,
            divergence_bound: self.divergence_bound,
        }
    }
}

/// Truth trajectory on the observation grid: `states[j]` is the truth at `t_j = j dt_obs`.
#[derive(Clone, Debug)]
pub struct Truth {
    pub dt_obs: f64,
    pub states: Vec<StateVector>,
}

impl Truth {
    pub fn initial(&self) -> &StateVector {
        &self.states[0]
    }
}

/// Balanced random start, attractor spin-up and the assimilation-horizon
/// trajectory, all with the undamped model.
pub fn make_truth(cfg: &ExperimentConfig, seed: u64) -> Result<Truth> {
    let params = cfg.model_params(0.0);
    let stepper = Stepper::new(params.clone(), cfg.stepper_config())?;
    let mut rng = rng::seeded_rng(seed);
    let x: Vec<f64> = rng::standard_normals(&mut rng, cfg.n_grid).iter().map(|v| cfg.forcing + v).collect();
    let mut z = model::balanced_state(&x, &params, cfg.velocity_init.differentiate()).into_vec();
    let spinup_steps = (cfg.truth_spinup_time / cfg.dt).round() as usize;
    for _ in 0..spinup_steps {
        stepper.step_flat(&mut z, None)?;
    }
    let per_obs = cfg.filter_config(cfg.scheme, cfg.r0, cfg.lambda).steps_per_obs();
    let mut states = Vec::with_capacity(cfg.cycles + 1);
    states.push(StateVector::from_flat(cfg.n_grid, z.clone())?);
    for _ in 0..cfg.cycles {
        for _ in 0..per_obs {
            stepper.step_flat(&mut z, None)?;
        }
        states.push(StateVector::from_flat(cfg.n_grid, z.clone())?);
    }
    Ok(Truth { dt_obs: cfg.dt_obs, states })
}

/// Members with `x_i = x_ref + spread * xi_i` and `h`, `u` from the balance relation.
pub fn make_initial_ensemble(
    x_ref: &[f64],
    params: &ModelParams,
    m: usize,
    spread: f64,
    velocity: VelocityInit,
    seed: u64,
) -> Result<Ensemble> {
    if m < 2 {
        return Err(Error::EnsembleTooSmall { required: 2, got: m });
    }
    if x_ref.len() != params.n_grid {
        return Err(Error::DimensionMismatch(format!("reference of length {} for n_grid {}", x_ref.len(), params.n_grid)));
    }
    let mut rng = rng::seeded_rng(seed);
    let members = (0..m)
        .map(|_| {
            let xi = rng::standard_normals(&mut rng, x_ref.len());
            let x: Vec<f64> = x_ref.iter().zip(&xi).map(|(a, b)| a + spread * b).collect();
            model::balanced_state(&x, params, velocity.differentiate()).into_vec()
        })
        .collect();
    Ensemble::new(members)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    X,
    H,
    U,
}

impl Field {
    fn range(self, n: usize) -> std::ops::Range<usize> {
        match self {
            Field::X => 0..n,
            Field::H => n..2 * n,
            Field::U => 2 * n..3 * n,
        }
    }
}

/// Root-mean-square error over the grid points of one field.
pub fn field_rmse(estimate: &[f64], truth: &[f64], n_grid: usize, field: Field) -> Result<f64> {
    if estimate.len() != 3 * n_grid || truth.len() != 3 * n_grid {
        return Err(Error::DimensionMismatch(format!(
            "states of length {} and {} for n_grid {n_grid}",
            estimate.len(),
            truth.len()
        )));
    }
    let r = field.range(n_grid);
    let sq: f64 = estimate[r.clone()].iter().zip(&truth[r]).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n_grid as f64).sqrt())
}

/// Per-cycle RMSE series and its mean over the cycles after `skip`.
pub fn rmse<S: AsRef<[f64]>>(
    analysis_means: &[Vec<f64>],
    truth: &[S],
    n_grid: usize,
    field: Field,
    skip: usize,
) -> Result<(Vec<f64>, Option<f64>)> {
    if analysis_means.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} analyses against {} truth states",
            analysis_means.len(),
            truth.len()
        )));
    }
    let series = analysis_means
        .iter()
        .zip(truth)
        .map(|(a, t)| field_rmse(a, t.as_ref(), n_grid, field))
        .collect::<Result<Vec<_>>>()?;
    let kept = series.get(skip..).unwrap_or(&[]);
    let summary = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    Ok((series, summary))
}

/// One filter run scored against the truth.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub scheme: FilterScheme,
    pub gamma: f64,
    pub r0: f64,
    pub lambda: f64,
    pub cycles: usize,
    pub spinup_cycles: usize,
    /// Observation times of the completed cycles.
    pub times: Vec<f64>,
    pub rmse_x: Vec<f64>,
    pub rmse_h: Vec<f64>,
    /// Ensemble imbalance norm at each observation time.
    pub imbalance: Vec<f64>,
    /// Ensemble imbalance norm at every model step, starting at `t = 0`.
    pub step_imbalance: Vec<f64>,
    pub divergence: Option<Divergence>,
    /// Mean RMSE over the post-spin-up cycles; `None` without such cycles or after divergence.
    pub summary_x: Option<f64>,
    pub summary_h: Option<f64>,
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Truth, observations and initial ensemble shared by every cell of a sweep.
#[derive(Clone, Debug)]
pub struct TwinSetup {
    pub truth: Truth,
    pub obs: ObservationStream,
    pub hop: ObservationOperator,
    pub initial: Ensemble,
}

pub fn prepare_twin(cfg: &ExperimentConfig) -> Result<TwinSetup> {
    cfg.validate()?;
    let truth = make_truth(cfg, cfg.seed_truth)?;
    let hop = cfg.observation_operator();
    let r = ObsErrorCov::scaled_identity(hop.n_obs(), cfg.obs_variance)?;
    let at_obs: Vec<&[f64]> = truth.states[1..].iter().map(StateVector::as_slice).collect();
    let obs = obsmodel::generate_observations(&at_obs, &hop, &r, cfg.dt_obs, cfg.cycles, cfg.seed_obs)?;
    let initial = make_initial_ensemble(
        truth.initial().x(),
        &cfg.model_params(cfg.gamma),
        cfg.ensemble_size,
        cfg.ensemble_spread,
        cfg.velocity_init,
        cfg.seed_ens,
    )?;
    Ok(TwinSetup { truth, obs, hop, initial })
}

/// Runs one filter configuration on a prepared twin setup; `gamma` damps the forecast model.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    setup: &TwinSetup,
    scheme: FilterScheme,
    gamma: f64,
    r0: f64,
    lambda: f64,
) -> Result<RunResult> {
    let start = Instant::now();
    let cell = ExperimentConfig { gamma, scheme, r0, lambda, ..cfg.clone() };
    cell.validate()?;
    let stepper = Stepper::new(cell.model_params(gamma), cell.stepper_config())?;
    let fcfg = cell.filter_config(scheme, r0, lambda);
    let out = filters::run_filter(&stepper, &setup.obs, &setup.hop, setup.initial.clone(), &fcfg)?;
    let done = out.completed_cycles();
    let truth: Vec<&[f64]> = setup.truth.states[1..=done].iter().map(StateVector::as_slice).collect();
    let (rmse_x, sx) = rmse(&out.analysis_means, &truth, cfg.n_grid, Field::X, cfg.spinup_cycles)?;
    let (rmse_h, sh) = rmse(&out.analysis_means, &truth, cfg.n_grid, Field::H, cfg.spinup_cycles)?;
    let diverged = out.divergence.is_some();
    Ok(RunResult {
        scheme,
        gamma,
        r0,
        lambda,
        cycles: cfg.cycles,
        spinup_cycles: cfg.spinup_cycles,
        times: out.obs_times[..done].to_vec(),
        rmse_x,
        rmse_h,
        imbalance: out.cycle_imbalance,
        step_imbalance: out.step_imbalance,
        divergence: out.divergence,
        summary_x: if diverged { None } else { sx },
        summary_h: if diverged { None } else { sh },
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Generates truth, observations and the initial ensemble from the configured
/// seeds and runs `scheme` with the configured `gamma`.
pub fn run_twin(cfg: &ExperimentConfig, scheme: FilterScheme, r0: f64, lambda: f64) -> Result<RunResult> {
    let setup = prepare_twin(cfg)?;
    run_prepared(cfg, &setup, scheme, cfg.gamma, r0, lambda)
}

/// A filter together with the wave damping of its forecast model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub scheme: FilterScheme,
    pub gamma: f64,
}

impl Variant {
    pub fn new(scheme: FilterScheme, gamma: f64) -> Self {
        Self { scheme, gamma }
    }

    /// `menkf`, or `enkf_standard_gamma0.1` for a damped forecast model.
    pub fn label(&self) -> String {
        if self.gamma == 0.0 {
            self.scheme.to_string()
        } else {
            format!("{}_gamma{}", self.scheme, self.gamma)
        }
    }
}

/// Best-over-inflation result of one `(variant, r0)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub r0: f64,
    pub best_lambda_x: Option<f64>,
    pub best_rmse_x: Option<f64>,
    pub best_lambda_h: Option<f64>,
    pub best_rmse_h: Option<f64>,
    /// Every inflation factor diverged.
    pub diverged: bool,
}

fn best_of(runs: &[RunResult], pick: impl Fn(&RunResult) -> Option<f64>) -> (Option<f64>, Option<f64>) {
    let mut best: Option<(f64, f64)> = None;
    for r in runs {
        if let Some(v) = pick(r) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((r.lambda, v));
            }
        }
    }
    (best.map(|b| b.0), best.map(|b| b.1))
}

/// Summary table over `variants x r0_grid`, each cell minimized over `lambda_grid`.
/// Cells run in parallel; rows come out in grid order.
pub fn sweep(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    r0_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if variants.is_empty() || r0_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::invalid("localization_grid", "sweep grids must not be empty"));
    }
    let setup = prepare_twin(cfg)?;
    let cells: Vec<(usize, usize, f64)> = (0..variants.len())
        .flat_map(|v| (0..r0_grid.len()).flat_map(move |r| lambda_grid.iter().map(move |&l| (v, r, l))))
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(v, r, l)| run_prepared(cfg, &setup, variants[v].scheme, variants[v].gamma, r0_grid[r], l))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len() * r0_grid.len());
    for (group, chunk) in runs.chunks(lambda_grid.len()).enumerate() {
        let (v, r) = (group / r0_grid.len(), group % r0_grid.len());
        let (best_lambda_x, best_rmse_x) = best_of(chunk, |run| run.summary_x);
        let (best_lambda_h, best_rmse_h) = best_of(chunk, |run| run.summary_h);
        rows.push(SweepRow {
            variant: variants[v],
            r0: r0_grid[r],
            best_lambda_x,
            best_rmse_x,
            best_lambda_h,
            best_rmse_h,
            diverged: chunk.iter().all(RunResult::diverged),
        });
    }
    Ok(rows)
}

/// Grid-value mean and standard deviation of `x` over the samples after `discard`.
pub fn climate_stats(samples: &[StateVector], discard: usize) -> Result<(f64, f64)> {
    let kept = samples.get(discard..).unwrap_or(&[]);
    if kept.is_empty() {
        return Err(Error::ShortTrajectory { available: samples.len(), required: discard + 1 });
    }
    let count = kept.len() * kept[0].n_grid();
    let mean = kept.iter().flat_map(|z| z.x()).sum::<f64>() / count as f64;
    let var = kept.iter().flat_map(|z| z.x()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Ok((mean, var.sqrt()))
}

/// Free run of the undamped model from a balanced random start: discards
/// `discard_time`, then samples `x` every `sample_dt` over `duration`.
pub fn climate_run(
    params: &ModelParams,
    cfg: StepperConfig,
    discard_time: f64,
    duration: f64,
    sample_dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let stepper = Stepper::new(params.clone(), cfg)?;
    let mut rng = rng::seeded_rng(seed);
    let x: Vec<f64> = rng::standard_normals(&mut rng, params.n_grid).iter().map(|v| params.forcing + v).collect();
    let z0 = model::balanced_state(&x, params, true);
    let every = (sample_dt / cfg.dt).round().max(1.0) as usize;
    let discard_steps = (discard_time / cfg.dt).round() as usize;
    let total = discard_steps + (duration / cfg.dt).round() as usize;
    let mut z = z0.into_vec();
    let mut samples = Vec::new();
    for k in 1..=total {
        stepper.step_flat(&mut z, None)?;
        if k > discard_steps && k % every == 0 {
            samples.push(StateVector::from_flat(params.n_grid, z.clone())?);
        }
    }
    climate_stats(&samples, 0)
}

/// Maximum imbalance norm over `[0, T]` of one free run per time-scale `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceRow {
    pub eps: f64,
    pub max_imbalance: f64,
    /// Imbalance norm at every step.
    pub series: Vec<f64>,
}

/// Free-model balance study: the same slow field `x0` is balanced for every
/// `eps` (with `velocity` choosing `u`) and integrated over `duration`.
pub fn balance_scaling_study(
    base: &ModelParams,
    cfg: StepperConfig,
    x0: &[f64],
    eps_list: &[f64],
    duration: f64,
    velocity: VelocityInit,
) -> Result<Vec<BalanceRow>> {
    let steps = (duration / cfg.dt).round() as usize;
    eps_list
        .iter()
        .map(|&eps| {
            if !(eps > 0.0) {
                return Err(Error::invalid("eps", format!("must be positive, got {eps}")));
            }
            let params = ModelParams { eps, ..base.clone() };
            let stepper = Stepper::new(params.clone(), cfg)?;
            let mut z = model::balanced_state(x0, &params, velocity.differentiate()).into_vec();
            let mut series = Vec::with_capacity(steps + 1);
            series.push(model::imbalance_sq(&z, &params).sqrt());
            for _ in 0..steps {
                stepper.step_flat(&mut z, None)?;
                series.push(model::imbalance_sq(&z, &params).sqrt());
            }
            let max_imbalance = series.iter().copied().fold(0.0, f64::max);
            Ok(BalanceRow { eps, max_imbalance, series })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            cycles: 30,
            spinup_cycles: 10,
            analysis_substeps: 20,
            truth_spinup_time: 1.0,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rmse_examples() {
        let truth = vec![1.0, 2.0, 0.0, 0.0, 5.0, 5.0];
        assert_eq!(field_rmse(&truth, &truth, 2, Field::X).unwrap(), 0.0);
        let offset: Vec<f64> = truth.iter().map(|v| v + 0.7).collect();
        assert!((field_rmse(&offset, &truth, 2, Field::H).unwrap() - 0.7).abs() < 1e-15);
        let est = vec![4.0, 6.0, 0.0, 0.0, 5.0, 5.0];
        assert!((field_rmse(&est, &truth, 2, Field::X).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[est.clone()], &[truth.clone(), truth.clone()], 2, Field::X, 0).is_err());
        let (series, summary) = rmse(&[est, offset], &[truth.clone(), truth], 2, Field::X, 1).unwrap();
        assert_eq!(series.len(), 2);
        assert!((summary.unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn truth_is_reproducible() {
        let cfg = small_cfg();
        let a = make_truth(&cfg, 5).unwrap();
        let b = make_truth(&cfg, 5).unwrap();
        let c = make_truth(&cfg, 6).unwrap();
        assert_eq!(a.states, b.states);
        assert_ne!(a.states, c.states);
        assert_eq!(a.states.len(), 31);
    }

    #[test]
    fn initial_ensemble_is_balanced() {
        let params = ModelParams::default();
        let x: Vec<f64> = (0..40).map(|l| 3.0 * (l as f64 * 0.4).cos()).collect();
        let ens = make_initial_ensemble(&x, &params, 10, 0.1, VelocityInit::Differentiated, 9).unwrap();
        for z in ens.members() {
            assert!(model::imbalance_sq(z, &params).sqrt() < 1e-10);
        }
        let again = make_initial_ensemble(&x, &params, 10, 0.1, VelocityInit::Differentiated, 9).unwrap();
        assert_eq!(ens, again);
        let flat = make_initial_ensemble(&x, &params, 4, 0.0, VelocityInit::Zero, 9).unwrap();
        assert!(flat.covariance().unwrap().amax() == 0.0);
        assert!(make_initial_ensemble(&x, &params, 1, 0.1, VelocityInit::Zero, 9).is_err());
    }

    #[test]
    fn seeds_are_isolated() {
        let cfg = small_cfg();
        let a = prepare_twin(&cfg).unwrap();
        let b = prepare_twin(&ExperimentConfig { seed_ens: 77, ..cfg.clone() }).unwrap();
        assert_eq!(a.truth.states, b.truth.states);
        assert_eq!(a.obs.values, b.obs.values);
        assert_ne!(a.initial, b.initial);
        let c = prepare_twin(&ExperimentConfig { seed_obs: 78, ..cfg }).unwrap();
        assert_eq!(a.truth.states, c.truth.states);
        assert_eq!(a.initial, c.initial);
        assert_ne!(a.obs.values, c.obs.values);
    }

    #[test]
    fn zero_cycles_give_an_empty_result() {
        let cfg = ExperimentConfig { cycles: 0, ..small_cfg() };
        for scheme in FilterScheme::ALL {
            let r = run_twin(&cfg, scheme, 2.0, 1.0).unwrap();
            assert!(r.rmse_x.is_empty() && r.imbalance.is_empty());
            assert_eq!(r.summary_h, None);
            assert!(!r.diverged());
        }
    }

    #[test]
    fn twin_run_series_are_aligned() {
        let cfg = small_cfg();
        let r = run_twin(&cfg, FilterScheme::Menkf, 2.0, 1.0).unwrap();
        assert_eq!(r.rmse_x.len(), 30);
        assert_eq!(r.rmse_h.len(), 30);
        assert_eq!(r.imbalance.len(), 30);
        assert_eq!(r.step_imbalance.len(), 30 * 20 + 10 + 1);
        let expected = r.rmse_h[10..].iter().sum::<f64>() / 20.0;
        assert!((r.summary_h.unwrap() - expected).abs() < 1e-15);
        assert!(r.rmse_x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn sweep_rows_follow_the_grid() {
        let cfg = small_cfg();
        let variants = [Variant::new(FilterScheme::Menkf, 0.0), Variant::new(FilterScheme::EnkfStandard, 0.1)];
        let rows = sweep(&cfg, &variants, &[2.0, 4.0], &[1.0]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].r0, 4.0);
        assert_eq!(rows[3].variant.label(), "enkf_standard_gamma0.1");
        let single = run_twin(&cfg, FilterScheme::Menkf, 2.0, 1.0).unwrap();
        assert_eq!(rows[0].best_rmse_x, single.summary_x);
        assert_eq!(rows[0].best_lambda_h, Some(1.0));

        let wider = sweep(&cfg, &variants[..1], &[2.0], &[1.0, 1.001]).unwrap();
        assert!(wider[0].best_rmse_x.unwrap() <= rows[0].best_rmse_x.unwrap());
        assert!(wider[0].best_rmse_h.unwrap() <= rows[0].best_rmse_h.unwrap());
    }

    #[test]
    fn diverged_cells_are_reported() {
        let cfg = ExperimentConfig { divergence_bound: 1.0, ..small_cfg() };
        let rows = sweep(&cfg, &[Variant::new(FilterScheme::Menkf, 0.0)], &[2.0], &[1.0]).unwrap();
        assert!(rows[0].diverged);
        assert_eq!(rows[0].best_rmse_h, None);
    }

    #[test]
    fn config_validation_names_the_field() {
        let err = ExperimentConfig { delta: 1.5, ..ExperimentConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
        let err = ExperimentConfig { cycles: 100, ..ExperimentConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("cycles"));
        let err = ExperimentConfig { inflation_grid: vec![], ..ExperimentConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("inflation_grid"));
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn climate_stats_of_constant_trajectory() {
        let z = StateVector::from_parts(&[2.5; 4], &[0.0; 4], &[0.0; 4]).unwrap();
        let (mean, sigma) = climate_stats(&vec![z; 5], 2).unwrap();
        assert_eq!((mean, sigma), (2.5, 0.0));
        assert!(climate_stats(&[], 0).is_err());
    }

    #[test]
    fn steady_state_stays_balanced() {
        let params = ModelParams::default();
        let rows = balance_scaling_study(
            &params,
            StepperConfig::default(),
            &[params.forcing; 40],
            &[0.01, 0.0025],
            1.0,
            VelocityInit::Differentiated,
        )
        .unwrap();
        for row in rows {
            assert!(row.max_imbalance < 1e-10, "{}", row.max_imbalance);
        }
    }
}
