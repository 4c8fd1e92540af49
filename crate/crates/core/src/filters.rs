//! Analysis kernels and the assimilation drivers: standard EnKF, mollified
//! EnKF (MEnKF) and incremental analysis update (IAU) EnKF.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DMatrixViewMut, DVector};

use crate::error::{Error, Result};
use crate::integrate::{LinearlyImplicitMidpoint, Stepper};
use crate::model;
use crate::obsmodel::{ObsErrorCov, ObservationOperator, ObservationStream};
use crate::stats::{inflate, Ensemble, InflationSpec, LocalizationSpec, Taper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScheme {
    EnkfStandard,
    Menkf,
    IauEnkf,
}

impl FilterScheme {
    pub const ALL: [FilterScheme; 3] = [FilterScheme::EnkfStandard, FilterScheme::Menkf, FilterScheme::IauEnkf];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterScheme::EnkfStandard => "enkf_standard",
            FilterScheme::Menkf => "menkf",
            FilterScheme::IauEnkf => "iau_enkf",
        }
    }
}

impl fmt::Display for FilterScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "enkf_standard" | "enkf" => Ok(FilterScheme::EnkfStandard),
            "menkf" => Ok(FilterScheme::Menkf),
            "iau_enkf" | "iau" => Ok(FilterScheme::IauEnkf),
            other => Err(Error::invalid("scheme", format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub scheme: FilterScheme,
    /// Half-width of the mollifier support.
    pub mollifier_eps: f64,
    pub dt: f64,
    pub dt_obs: f64,
    pub localization: LocalizationSpec,
    pub inflation: InflationSpec,
    /// Pseudo-time steps of the analysis flow.
    pub analysis_substeps: usize,
    pub model_gamma: f64,
    /// A run is declared diverged once any member entry exceeds this in magnitude.
    pub divergence_bound: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            scheme: FilterScheme::Menkf,
            mollifier_eps: 0.025,
            dt: 0.0025,
            dt_obs: 0.05,
            localization: LocalizationSpec::with_radius(2.0),
            inflation: InflationSpec::none(),
            analysis_substeps: 200,
            model_gamma: 0.0,
            divergence_bound: 1e6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.dt_obs > 0.0 && self.dt_obs.is_finite()) {
            return Err(Error::invalid("dt_obs", format!("must be positive, got {}", self.dt_obs)));
        }
        steps_between(self.dt_obs, self.dt).ok_or_else(|| {
            Error::invalid("dt_obs", format!("{} is not a multiple of dt = {}", self.dt_obs, self.dt))
        })?;
        if !(self.mollifier_eps > 0.0 && self.mollifier_eps.is_finite()) {
            return Err(Error::invalid("mollifier_eps", format!("must be positive, got {}", self.mollifier_eps)));
        }
        if self.analysis_substeps == 0 {
            return Err(Error::invalid("analysis_substeps", "must be at least 1"));
        }
        if !(self.model_gamma >= 0.0) {
            return Err(Error::invalid("gamma", format!("must be >= 0, got {}", self.model_gamma)));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(Error::invalid("divergence_bound", "must be positive"));
        }
        InflationSpec::new(self.inflation.factor, self.inflation.mask)?;
        Ok(())
    }

    pub fn steps_per_obs(&self) -> usize {
        steps_between(self.dt_obs, self.dt).unwrap_or(0)
    }
}

/// `t / dt` when it is an integer up to rounding.
fn steps_between(t: f64, dt: f64) -> Option<usize> {
    let r = t / dt;
    let k = r.round();
    (k >= 0.0 && (r - k).abs() <= 1e-6).then_some(k as usize)
}

/// Standard hat function.
pub fn hat(s: f64) -> f64 {
    let a = s.abs();
    if a <= 1.0 {
        1.0 - a
    } else {
        0.0
    }
}

/// Per-step observation weights `alpha_j^k`; `j` indexes the observation time list from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MollifierWeights {
    dt: f64,
    per_step: Vec<Vec<(usize, f64)>>,
    /// Inclusive range of steps with nonzero weight, per observation.
    support: Vec<(usize, usize)>,
}

impl MollifierWeights {
    pub fn n_steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn at_step(&self, k: usize) -> &[(usize, f64)] {
        self.per_step.get(k).map_or(&[], Vec::as_slice)
    }

    pub fn support(&self, j: usize) -> (usize, usize) {
        self.support[j]
    }

    /// `dt * sum_k alpha_j^k`.
    pub fn total(&self, j: usize) -> f64 {
        let (lo, hi) = self.support[j];
        (lo..=hi)
            .flat_map(|k| self.per_step[k].iter())
            .filter(|(jj, _)| *jj == j)
            .map(|(_, a)| self.dt * a)
            .sum()
    }
}

/// Hat-mollifier weights for steps `k = 0..n_steps` at `t_k = k dt`, each
/// observation normalized on the steps that fall inside the horizon.
pub fn mollifier_weights(n_steps: usize, dt: f64, obs_times: &[f64], eps: f64) -> Result<MollifierWeights> {
    if !(dt > 0.0) || !(eps > 0.0) {
        return Err(Error::invalid("mollifier_eps", "dt and eps must be positive"));
    }
    let mut per_step = vec![Vec::new(); n_steps];
    let mut support = Vec::with_capacity(obs_times.len());
    for (j, &tj) in obs_times.iter().enumerate() {
        let centre = tj / dt;
        let reach = (eps / dt).ceil() as i64 + 1;
        let lo = ((centre.floor() as i64) - reach).max(0);
        let hi = ((centre.ceil() as i64) + reach).min(n_steps as i64 - 1);
        let mut raw = Vec::new();
        for k in lo..=hi {
            let s = (k as f64 * dt - tj) / eps;
            // Steps sitting on the edge of the support up to rounding get no weight.
            if 1.0 - s.abs() > 1e-9 {
                raw.push((k as usize, hat(s) / eps));
            }
        }
        let sum: f64 = raw.iter().map(|(_, w)| dt * w).sum();
        if raw.is_empty() || !(sum > 0.0) {
            return Err(Error::EmptySupport { index: j });
        }
        let c = 1.0 / sum;
        support.push((raw[0].0, raw[raw.len() - 1].0));
        for (k, w) in raw {
            per_step[k].push((j, c * w));
        }
    }
    Ok(MollifierWeights { dt, per_step, support })
}

/// Closed-form Kalman update in gain form, `K = P H^T (H P H^T + R)^{-1}`.
pub fn kalman_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    let p = y.len();
    if cov.shape() != (n, n) || h.shape() != (p, n) || r.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "mean {n}, cov {:?}, H {:?}, R {:?}, y {p}",
            cov.shape(),
            h.shape(),
            r.shape()
        )));
    }
    let pht = cov * h.transpose();
    let s = h * &pht + r;
    let s_inv = s.cholesky().ok_or_else(|| Error::Singular("innovation covariance H P H^T + R".into()))?;
    let gain = s_inv.solve(&pht.transpose()).transpose();
    let mean_a = mean + &gain * (y - h * mean);
    let cov_a = (DMatrix::identity(n, n) - &gain * h) * cov;
    let cov_a = (&cov_a + cov_a.transpose()) * 0.5;
    Ok((mean_a, cov_a))
}

/// Evaluates `-(C o P) H^T w_i` for all members of a flat ensemble, where
/// `w_i` combines the potential weights of one or more observations.
struct GainKernel<'a> {
    hop: &'a ObservationOperator,
    r: &'a ObsErrorCov,
    m: usize,
    dim: usize,
    /// Distinct state components referenced by `H`.
    cols: Vec<usize>,
    mean: Vec<f64>,
    /// Row `q` of `H` as `(index into cols, value)`.
    rows: Vec<Vec<(usize, f64)>>,
    /// Taper columns `C[:, cols[k]]`.
    taper_cols: DMatrix<f64>,
    anomalies: DMatrix<f64>,
    /// `anomalies[cols[k], i]` stored as `(i, k)`.
    observed: DMatrix<f64>,
    cross: DMatrix<f64>,
    gain: DMatrix<f64>,
    hz: DMatrix<f64>,
    innov: DMatrix<f64>,
    weights: DMatrix<f64>,
}

impl<'a> GainKernel<'a> {
    fn new(m: usize, dim: usize, hop: &'a ObservationOperator, r: &'a ObsErrorCov, taper: &'a Taper) -> Result<Self> {
        if m < 2 {
            return Err(Error::EnsembleTooSmall { required: 2, got: m });
        }
        if taper.dim() != dim || hop.state_dim() != dim || r.dim() != hop.n_obs() {
            return Err(Error::DimensionMismatch(format!(
                "ensemble dimension {dim}, taper {}, operator {}x{}, R {}",
                taper.dim(),
                hop.n_obs(),
                hop.state_dim(),
                r.dim()
            )));
        }
        let p = hop.n_obs();
        let mut cols: Vec<usize> = hop.rows().iter().flatten().map(|&(b, _)| b).collect();
        cols.sort_unstable();
        cols.dedup();
        let rows = hop
            .rows()
            .iter()
            .map(|row| row.iter().map(|&(b, h)| (cols.binary_search(&b).unwrap_or(0), h)).collect())
            .collect();
        let taper_cols = DMatrix::from_fn(dim, cols.len(), |a, k| taper.weight(a, cols[k]));
        Ok(Self {
            hop,
            r,
            m,
            dim,
            rows,
            taper_cols,
            mean: vec![0.0; dim],
            anomalies: DMatrix::zeros(dim, m),
            observed: DMatrix::zeros(m, cols.len()),
            cross: DMatrix::zeros(dim, cols.len()),
            gain: DMatrix::zeros(dim, p),
            hz: DMatrix::zeros(p, m),
            innov: DMatrix::zeros(p, m),
            weights: DMatrix::zeros(p, m),
            cols,
        })
    }

    /// `out_i = -sum_j alpha_j (C o P) H^T R^{-1} (1/2 (H z_i + H zbar) - y_j)` for the flat ensemble `z`.
    fn rates(&mut self, z: &[f64], obs: &[(&[f64], f64)], out: &mut [f64]) -> Result<()> {
        let (m, dim, p) = (self.m, self.dim, self.hop.n_obs());
        for &(y, _) in obs {
            if y.len() != p {
                return Err(Error::DimensionMismatch(format!("observation of length {} for {p} rows", y.len())));
            }
        }
        self.mean.fill(0.0);
        for zi in z.chunks_exact(dim) {
            self.mean.iter_mut().zip(zi).for_each(|(a, b)| *a += b);
        }
        let inv_m = 1.0 / m as f64;
        self.mean.iter_mut().for_each(|v| *v *= inv_m);
        let anomalies = self.anomalies.as_mut_slice();
        for (ai, zi) in anomalies.chunks_exact_mut(dim).zip(z.chunks_exact(dim)) {
            for ((d, v), mu) in ai.iter_mut().zip(zi).zip(&self.mean) {
                *d = v - mu;
            }
        }
        let observed = self.observed.as_mut_slice();
        for (k, &b) in self.cols.iter().enumerate() {
            for i in 0..m {
                observed[k * m + i] = anomalies[i * dim + b];
            }
        }
        // Columns of P at the observed components, tapered.
        self.cross.gemm(1.0 / (m - 1) as f64, &self.anomalies, &self.observed, 0.0);
        self.cross.component_mul_assign(&self.taper_cols);
        let cross = self.cross.as_slice();
        let gain = self.gain.as_mut_slice();
        gain.fill(0.0);
        for (gq, row) in gain.chunks_exact_mut(dim).zip(&self.rows) {
            for &(k, h) in row {
                for (g, c) in gq.iter_mut().zip(&cross[k * dim..(k + 1) * dim]) {
                    *g += h * c;
                }
            }
        }

        let hz = self.hz.as_mut_slice();
        for (q, row) in self.hop.rows().iter().enumerate() {
            let hmean: f64 = row.iter().map(|&(b, h)| h * self.mean[b]).sum();
            for i in 0..m {
                let zi = &z[i * dim..(i + 1) * dim];
                let hzi: f64 = row.iter().map(|&(b, h)| h * zi[b]).sum();
                hz[i * p + q] = 0.5 * (hzi + hmean);
            }
        }
        let weights = self.weights.as_mut_slice();
        weights.fill(0.0);
        for &(y, alpha) in obs {
            let innov = self.innov.as_mut_slice();
            for (col, hzc) in innov.chunks_exact_mut(p).zip(hz.chunks_exact(p)) {
                for ((d, h), yq) in col.iter_mut().zip(hzc).zip(y) {
                    *d = h - yq;
                }
            }
            self.r.solve_columns(&mut self.innov);
            for (w, v) in weights.iter_mut().zip(self.innov.as_slice()) {
                *w += alpha * v;
            }
        }

        let mut out = DMatrixViewMut::from_slice(out, dim, m);
        out.gemm(-1.0, &self.gain, &self.weights, 0.0);
        Ok(())
    }
}

fn flatten(ens: &Ensemble) -> Vec<f64> {
    ens.members().iter().flatten().copied().collect()
}

fn unflatten(z: &[f64], dim: usize) -> Result<Ensemble> {
    Ensemble::new(z.chunks_exact(dim).map(<[f64]>::to_vec).collect())
}

/// Ensemble analysis as the pseudo-time flow `dz_i/ds = -P~(s) grad_{z_i} V`
/// over `s` in `[0, 1]`, integrated with the midpoint rule.
pub fn analysis_flow(
    ens: &Ensemble,
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    y: &[f64],
    taper: &Taper,
    substeps: usize,
) -> Result<Ensemble> {
    flow(ens, hop, r, y, taper, substeps, None)
}

/// [`analysis_flow`] calling `observer(s, ensemble)` at `s = 0` and after every substep.
pub fn analysis_flow_observed<O>(
    ens: &Ensemble,
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    y: &[f64],
    taper: &Taper,
    substeps: usize,
    mut observer: O,
) -> Result<Ensemble>
where
    O: FnMut(f64, &Ensemble),
{
    flow(ens, hop, r, y, taper, substeps, Some(&mut observer))
}

fn flow(
    ens: &Ensemble,
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    y: &[f64],
    taper: &Taper,
    substeps: usize,
    mut observer: Option<&mut dyn FnMut(f64, &Ensemble)>,
) -> Result<Ensemble> {
    if substeps == 0 {
        return Err(Error::invalid("analysis_substeps", "must be at least 1"));
    }
    let ds = 1.0 / substeps as f64;
    let dim = ens.dim();
    let mut kernel = GainKernel::new(ens.size(), dim, hop, r, taper)?;
    let mut z = flatten(ens);
    let mut half = vec![0.0; z.len()];
    let mut rate = vec![0.0; z.len()];
    if let Some(obs) = observer.as_mut() {
        obs(0.0, ens);
    }
    for k in 0..substeps {
        kernel.rates(&z, &[(y, 1.0)], &mut rate)?;
        for ((h, a), f) in half.iter_mut().zip(&z).zip(&rate) {
            *h = a + 0.5 * ds * f;
        }
        kernel.rates(&half, &[(y, 1.0)], &mut rate)?;
        for (a, f) in z.iter_mut().zip(&rate) {
            *a += ds * f;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analysis flow at substep {}", k + 1)));
        }
        if let Some(obs) = observer.as_mut() {
            obs((k + 1) as f64 * ds, &unflatten(&z, dim)?);
        }
    }
    unflatten(&z, dim)
}

/// Time stepping used by the drivers.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn dt(&self) -> f64;
    /// Grid points per field and number of fields of the flat state layout.
    fn layout(&self) -> (usize, usize);
    /// Advances one state by one step with an optional constant forcing rate.
    fn step(&self, z: &mut [f64], forcing: Option<&[f64]>) -> Result<()>;
    /// Squared imbalance of one state; zero for models without a balance relation.
    fn imbalance_sq(&self, _z: &[f64]) -> f64 {
        0.0
    }
}

impl Dynamics for Stepper {
    fn dim(&self) -> usize {
        self.params().state_dim()
    }

    fn dt(&self) -> f64 {
        Stepper::dt(self)
    }

    fn layout(&self) -> (usize, usize) {
        (self.params().n_grid, 3)
    }

    fn step(&self, z: &mut [f64], forcing: Option<&[f64]>) -> Result<()> {
        self.step_flat(z, forcing)
    }

    fn imbalance_sq(&self, z: &[f64]) -> f64 {
        model::imbalance_sq(z, self.params())
    }
}

/// `dz/dt = A z` advanced by the implicit midpoint rule.
#[derive(Clone, Debug)]
pub struct LinearModel {
    dim: usize,
    dt: f64,
    kernel: LinearlyImplicitMidpoint,
}

impl LinearModel {
    pub fn new(a: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch("linear model matrix must be square".into()));
        }
        Ok(Self { dim: a.nrows(), dt, kernel: LinearlyImplicitMidpoint::new(a, dt, 1e-14, 2)? })
    }

    /// `f = 0`.
    pub fn zero(dim: usize, dt: f64) -> Result<Self> {
        Self::new(&DMatrix::zeros(dim, dim), dt)
    }
}

impl Dynamics for LinearModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn layout(&self) -> (usize, usize) {
        (self.dim, 1)
    }

    fn step(&self, z: &mut [f64], forcing: Option<&[f64]>) -> Result<()> {
        let zero;
        let constant = match forcing {
            Some(f) => f,
            None => {
                zero = vec![0.0; self.dim];
                &zero
            }
        };
        self.kernel.step(z, constant, |_, _| false)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    /// 1-based assimilation cycle during which the guard tripped.
    pub cycle: usize,
    pub time: f64,
    pub max_abs: f64,
}

/// Everything a driver records. Cycle series hold one entry per completed
/// cycle, evaluated at the observation time `t_j`.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub scheme: FilterScheme,
    pub dt: f64,
    pub obs_times: Vec<f64>,
    pub analysis_means: Vec<Vec<f64>>,
    /// Forecast means at `t_j` before any increment; empty for MEnKF.
    pub forecast_means: Vec<Vec<f64>>,
    /// Ensemble imbalance norm at `t_j` after the analysis state is formed.
    pub cycle_imbalance: Vec<f64>,
    /// Ensemble imbalance norm of the state at `t_k`, `k = 0, 1, ...`.
    pub step_imbalance: Vec<f64>,
    pub divergence: Option<Divergence>,
    pub final_ensemble: Ensemble,
}

impl FilterOutput {
    pub fn completed_cycles(&self) -> usize {
        self.analysis_means.len()
    }
}

/// Euclidean norm of the imbalance over all members.
pub fn ensemble_imbalance<D: Dynamics + ?Sized>(dynamics: &D, ens: &Ensemble) -> f64 {
    ens.members().iter().map(|z| dynamics.imbalance_sq(z)).sum::<f64>().sqrt()
}

/// Mutable run state shared by the drivers.
struct Run<'a, D: Dynamics> {
    dynamics: &'a D,
    cfg: &'a FilterConfig,
    n_grid: usize,
    ens: Ensemble,
    k: usize,
    out: FilterOutput,
}

enum StepOutcome {
    Ok,
    Diverged,
}

impl<'a, D: Dynamics> Run<'a, D> {
    fn new(
        dynamics: &'a D,
        cfg: &'a FilterConfig,
        scheme: FilterScheme,
        obs: &ObservationStream,
        hop: &ObservationOperator,
        e0: Ensemble,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.scheme != scheme {
            return Err(Error::invalid("scheme", format!("driver for {scheme} called with {}", cfg.scheme)));
        }
        if (cfg.dt - dynamics.dt()).abs() > 1e-12 * cfg.dt {
            return Err(Error::invalid("dt", format!("filter dt {} differs from stepper dt {}", cfg.dt, dynamics.dt())));
        }
        if e0.size() < 2 {
            return Err(Error::EnsembleTooSmall { required: 2, got: e0.size() });
        }
        if e0.dim() != dynamics.dim() || hop.state_dim() != dynamics.dim() {
            return Err(Error::DimensionMismatch(format!(
                "ensemble dimension {}, operator {}, model {}",
                e0.dim(),
                hop.state_dim(),
                dynamics.dim()
            )));
        }
        if obs.r.dim() != hop.n_obs() || obs.values.iter().any(|y| y.len() != hop.n_obs()) {
            return Err(Error::DimensionMismatch("observation vectors do not match the operator".into()));
        }
        for &t in &obs.times {
            steps_between(t, cfg.dt).ok_or_else(|| {
                Error::invalid("dt_obs", format!("observation time {t} is not on the model time grid"))
            })?;
        }
        let out = FilterOutput {
            scheme,
            dt: cfg.dt,
            obs_times: obs.times.clone(),
            analysis_means: Vec::new(),
            forecast_means: Vec::new(),
            cycle_imbalance: Vec::new(),
            step_imbalance: vec![ensemble_imbalance(dynamics, &e0)],
            divergence: None,
            final_ensemble: e0.clone(),
        };
        Ok(Self { dynamics, cfg, n_grid: dynamics.layout().0, ens: e0, k: 0, out })
    }

    fn taper(&self) -> Result<Taper> {
        let (n, fields) = self.dynamics.layout();
        if self.cfg.localization.enabled {
            Taper::new(n, fields, &self.cfg.localization)
        } else {
            Ok(Taper::none(self.dynamics.dim()))
        }
    }

    fn diverge(&mut self, k_done: usize, max_abs: f64) -> StepOutcome {
        self.out.divergence = Some(Divergence {
            cycle: self.out.analysis_means.len() + 1,
            time: k_done as f64 * self.cfg.dt,
            max_abs,
        });
        StepOutcome::Diverged
    }

    fn guard(&mut self, ens: &Ensemble, k_done: usize) -> StepOutcome {
        let max_abs = ens.max_abs();
        if max_abs > self.cfg.divergence_bound {
            return self.diverge(k_done, max_abs);
        }
        StepOutcome::Ok
    }

    /// Steps `ens` once from `t_k` with inflation afterwards.
    fn step_once(&mut self, ens: &mut Ensemble, k: usize, rates: Option<&[Vec<f64>]>) -> Result<StepOutcome> {
        for (i, z) in ens.members_mut().iter_mut().enumerate() {
            match self.dynamics.step(z, rates.map(|r| r[i].as_slice())) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) | Err(Error::NonConvergence { .. }) => {
                    return Ok(self.diverge(k + 1, f64::INFINITY));
                }
                Err(e) => return Err(e),
            }
        }
        inflate(ens, &self.cfg.inflation, self.n_grid);
        Ok(self.guard(ens, k + 1))
    }

    /// Advances the run ensemble from `self.k` to `k_end` without forcing.
    fn free_run(&mut self, k_end: usize) -> Result<StepOutcome> {
        while self.k < k_end {
            let mut ens = self.ens.clone();
            if let StepOutcome::Diverged = self.step_once(&mut ens, self.k, None)? {
                return Ok(StepOutcome::Diverged);
            }
            self.ens = ens;
            self.k += 1;
            self.out.step_imbalance.push(ensemble_imbalance(self.dynamics, &self.ens));
        }
        Ok(StepOutcome::Ok)
    }

    fn analysis(&mut self, ens: &Ensemble, hop: &ObservationOperator, r: &ObsErrorCov, y: &[f64], taper: &Taper) -> Result<Option<Ensemble>> {
        match analysis_flow(ens, hop, r, y, taper, self.cfg.analysis_substeps) {
            Ok(a) => {
                if let StepOutcome::Diverged = self.guard(&a, self.k) {
                    return Ok(None);
                }
                Ok(Some(a))
            }
            Err(Error::NonFinite(_)) => {
                self.diverge(self.k, f64::INFINITY);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn record_cycle(&mut self) {
        self.out.analysis_means.push(self.ens.mean());
        self.out.cycle_imbalance.push(ensemble_imbalance(self.dynamics, &self.ens));
    }

    fn finish(mut self) -> FilterOutput {
        self.out.final_ensemble = self.ens;
        self.out
    }
}

fn obs_steps(obs: &ObservationStream, dt: f64) -> Vec<usize> {
    obs.times.iter().map(|&t| steps_between(t, dt).unwrap_or(0)).collect()
}

/// Standard EnKF: free forecasts between observations and an instantaneous
/// analysis flow at each `t_j`.
pub fn run_enkf_standard<D: Dynamics>(
    dynamics: &D,
    obs: &ObservationStream,
    hop: &ObservationOperator,
    e0: Ensemble,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    let mut run = Run::new(dynamics, cfg, FilterScheme::EnkfStandard, obs, hop, e0)?;
    let taper = run.taper()?;
    for (j, &kj) in obs_steps(obs, cfg.dt).iter().enumerate() {
        if kj < run.k {
            return Err(Error::invalid("dt_obs", "observation times must be increasing"));
        }
        if let StepOutcome::Diverged = run.free_run(kj)? {
            break;
        }
        run.out.forecast_means.push(run.ens.mean());
        let forecast = run.ens.clone();
        let Some(analysed) = run.analysis(&forecast, hop, &obs.r, &obs.values[j], &taper)? else {
            break;
        };
        run.ens = analysed;
        if let Some(last) = run.out.step_imbalance.last_mut() {
            *last = ensemble_imbalance(dynamics, &run.ens);
        }
        run.record_cycle();
    }
    Ok(run.finish())
}

/// Mollified EnKF: one time loop with the analysis spread over the steps
/// within `mollifier_eps` of each observation, forcing evaluated from the
/// start-of-step ensemble.
pub fn run_menkf<D: Dynamics>(
    dynamics: &D,
    obs: &ObservationStream,
    hop: &ObservationOperator,
    e0: Ensemble,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    let mut run = Run::new(dynamics, cfg, FilterScheme::Menkf, obs, hop, e0)?;
    let taper = run.taper()?;
    let ks = obs_steps(obs, cfg.dt);
    let Some(&k_last) = ks.last() else {
        return Ok(run.finish());
    };
    let n_steps = k_last + (cfg.mollifier_eps / cfg.dt - 1e-9).ceil() as usize;
    let weights = mollifier_weights(n_steps, cfg.dt, &obs.times, cfg.mollifier_eps)?;
    let dim = dynamics.dim();
    let mut kernel = GainKernel::new(run.ens.size(), dim, hop, &obs.r, &taper)?;
    let mut next_obs = 0;
    for k in 0..n_steps {
        let active = weights.at_step(k);
        let rates = if active.is_empty() {
            None
        } else {
            let pairs: Vec<(&[f64], f64)> = active.iter().map(|&(j, alpha)| (obs.values[j].as_slice(), alpha)).collect();
            let mut flat = vec![0.0; run.ens.size() * dim];
            kernel.rates(&flatten(&run.ens), &pairs, &mut flat)?;
            Some(flat.chunks_exact(dim).map(<[f64]>::to_vec).collect::<Vec<_>>())
        };
        let mut ens = run.ens.clone();
        if let StepOutcome::Diverged = run.step_once(&mut ens, k, rates.as_deref())? {
            break;
        }
        run.ens = ens;
        run.k = k + 1;
        run.out.step_imbalance.push(ensemble_imbalance(dynamics, &run.ens));
        while next_obs < ks.len() && ks[next_obs] == run.k {
            run.record_cycle();
            next_obs += 1;
        }
    }
    Ok(run.finish())
}

/// IAU EnKF: forecast to `t_j`, compute the analysis increment there, rewind
/// to the start of the mollifier window and re-integrate with the increment
/// spread over the window by the hat weights.
pub fn run_iau_enkf<D: Dynamics>(
    dynamics: &D,
    obs: &ObservationStream,
    hop: &ObservationOperator,
    e0: Ensemble,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    let mut run = Run::new(dynamics, cfg, FilterScheme::IauEnkf, obs, hop, e0)?;
    let taper = run.taper()?;
    let ks = obs_steps(obs, cfg.dt);
    let Some(&k_last) = ks.last() else {
        return Ok(run.finish());
    };
    let n_steps = k_last + (cfg.mollifier_eps / cfg.dt - 1e-9).ceil() as usize;
    let weights = mollifier_weights(n_steps, cfg.dt, &obs.times, cfg.mollifier_eps)?;
    'cycles: for (j, &kj) in ks.iter().enumerate() {
        let (lo, hi) = weights.support(j);
        if lo < run.k {
            return Err(Error::invalid(
                "mollifier_eps",
                "IAU windows of neighbouring observations overlap; use eps <= dt_obs / 2",
            ));
        }
        if let StepOutcome::Diverged = run.free_run(lo)? {
            break;
        }

        let saved = run.ens.clone();
        let mut forecast = saved.clone();
        for k in lo..kj {
            if let StepOutcome::Diverged = run.step_once(&mut forecast, k, None)? {
                break 'cycles;
            }
        }
        run.out.forecast_means.push(forecast.mean());
        let Some(analysed) = run.analysis(&forecast, hop, &obs.r, &obs.values[j], &taper)? else {
            break;
        };
        let increments: Vec<Vec<f64>> = analysed
            .members()
            .iter()
            .zip(forecast.members())
            .map(|(a, f)| a.iter().zip(f).map(|(x, y)| x - y).collect())
            .collect();

        run.ens = saved;
        if kj == lo {
            run.record_cycle();
        }
        for k in lo..=hi {
            let alpha = weights.at_step(k).iter().find(|(jj, _)| *jj == j).map_or(0.0, |(_, a)| *a);
            let rates: Vec<Vec<f64>> =
                increments.iter().map(|d| d.iter().map(|v| alpha * v).collect()).collect();
            let mut ens = run.ens.clone();
            if let StepOutcome::Diverged = run.step_once(&mut ens, k, Some(&rates))? {
                break 'cycles;
            }
            run.ens = ens;
            run.k = k + 1;
            run.out.step_imbalance.push(ensemble_imbalance(dynamics, &run.ens));
            if run.k == kj {
                run.record_cycle();
            }
        }
    }
    Ok(run.finish())
}

/// Dispatches on `cfg.scheme`.
pub fn run_filter<D: Dynamics>(
    dynamics: &D,
    obs: &ObservationStream,
    hop: &ObservationOperator,
    e0: Ensemble,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    match cfg.scheme {
        FilterScheme::EnkfStandard => run_enkf_standard(dynamics, obs, hop, e0, cfg),
        FilterScheme::Menkf => run_menkf(dynamics, obs, hop, e0, cfg),
        FilterScheme::IauEnkf => run_iau_enkf(dynamics, obs, hop, e0, cfg),
    }
}
