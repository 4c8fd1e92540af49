//! Second-order, time-symmetric steppers for the slow-fast model with an
//! additive, externally supplied forcing rate.
//!
//! Both schemes treat the forcing explicitly: it is a constant rate over the
//! step, evaluated by the caller from the start-of-step ensemble.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{self, balance_operator, ModelParams, StateVector};
use crate::stats::Ensemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// fast half-step / slow full step / fast half-step
    #[default]
    StrangSplit,
    ImplicitMidpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepperConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self { dt: 0.0025, scheme: Scheme::StrangSplit, fp_tol: 1e-12, fp_max_iter: 50 }
    }
}

impl StepperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::invalid("fp_tol", "must be positive"));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::invalid("fp_max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// `out += m * z` for a column-major matrix.
fn gemv_acc(m: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let rows = m.nrows();
    for (col, zj) in m.as_slice().chunks_exact(rows).zip(z) {
        if *zj == 0.0 {
            continue;
        }
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * zj;
        }
    }
}

/// Implicit midpoint rule for `dz/dt = L z + g(z) + c` with the linear part
/// solved exactly and the fixed-point iteration running on `g` only.
///
/// The fixed point is the ordinary implicit midpoint update
/// `z' = z + dt (L (z+z')/2 + g((z+z')/2) + c)`.
#[derive(Clone, Debug)]
pub struct LinearlyImplicitMidpoint {
    dt: f64,
    /// `(I - dt/2 L)^{-1} (I + dt/2 L)`
    propagator: DMatrix<f64>,
    /// `dt (I - dt/2 L)^{-1}`
    resolvent: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
}

impl LinearlyImplicitMidpoint {
    pub fn new(linear: &DMatrix<f64>, dt: f64, tol: f64, max_iter: usize) -> Result<Self> {
        let n = linear.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        let minus = &id - linear * (0.5 * dt);
        let plus = &id + linear * (0.5 * dt);
        let inv = minus
            .try_inverse()
            .ok_or_else(|| Error::Singular("I - dt/2 L in implicit midpoint".into()))?;
        Ok(Self { dt, propagator: &inv * plus, resolvent: inv * dt, tol, max_iter })
    }

    pub fn dim(&self) -> usize {
        self.propagator.nrows()
    }

    /// Advances `z` in place; returns the number of fixed-point iterations.
    pub fn step<G>(&self, z: &mut [f64], constant: &[f64], nonlinear: G) -> Result<usize>
    where
        G: Fn(&[f64], &mut [f64]) -> bool,
    {
        let n = z.len();
        let mut base = vec![0.0; n];
        gemv_acc(&self.propagator, z, &mut base);

        let mut next = z.to_vec();
        let mut mid = vec![0.0; n];
        let mut rate = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let scale = max_abs(z).max(1.0);
        let mut residual = f64::INFINITY;
        for it in 1..=self.max_iter {
            for ((m, a), b) in mid.iter_mut().zip(z.iter()).zip(&next) {
                *m = 0.5 * (a + b);
            }
            let active = nonlinear(&mid, &mut rate);
            for (r, c) in rate.iter_mut().zip(constant) {
                if !active {
                    *r = 0.0;
                }
                *r += c;
            }
            trial.copy_from_slice(&base);
            gemv_acc(&self.resolvent, &rate, &mut trial);
            residual = trial.iter().zip(&next).fold(0.0f64, |a, (t, s)| a.max((t - s).abs()));
            std::mem::swap(&mut next, &mut trial);
            if !residual.is_finite() {
                break;
            }
            if residual <= self.tol * scale || !active {
                z.copy_from_slice(&next);
                return Ok(it);
            }
        }
        Err(Error::NonConvergence { iterations: self.max_iter, residual })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// Precomputed stepper for a fixed `(ModelParams, StepperConfig)`.
#[derive(Clone, Debug)]
pub struct Stepper {
    params: ModelParams,
    cfg: StepperConfig,
    dt: f64,
    kernel: Kernel,
}

#[derive(Clone, Debug)]
enum Kernel {
    Strang {
        /// Half-step map `(h, u)' = fast * (x, h, u)`, a `2n x 3n` matrix.
        fast: DMatrix<f64>,
    },
    Midpoint(LinearlyImplicitMidpoint),
}

/// Linear generator of the wave subsystem in `(h, u)` with `x` as input.
fn fast_generator(p: &ModelParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = p.n_grid;
    let inv_eps2 = 1.0 / (p.eps * p.eps);
    let b = balance_operator(n, p.alpha);
    let mut l = DMatrix::zeros(2 * n, 2 * n);
    let mut e = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        l[(i, n + i)] = 1.0;
        l[(n + i, n + i)] = -p.gamma;
        e[(n + i, i)] = inv_eps2;
        for j in 0..n {
            l[(n + i, j)] = -b[(i, j)] * inv_eps2;
        }
    }
    (l, e)
}

/// Full linear part of the model on `(x, h, u)`.
fn full_linear_part(p: &ModelParams) -> DMatrix<f64> {
    let n = p.n_grid;
    let (fast, e) = fast_generator(p);
    let mut l = DMatrix::zeros(3 * n, 3 * n);
    if !p.conservative {
        for i in 0..n {
            l[(i, i)] = -1.0;
        }
    }
    l.view_mut((n, n), (2 * n, 2 * n)).copy_from(&fast);
    l.view_mut((n, 0), (2 * n, n)).copy_from(&e);
    l
}

impl Stepper {
    pub fn new(params: ModelParams, cfg: StepperConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        Self::build(params, cfg, cfg.dt)
    }

    fn build(params: ModelParams, cfg: StepperConfig, dt: f64) -> Result<Self> {
        let kernel = match cfg.scheme {
            Scheme::StrangSplit => {
                let n = params.n_grid;
                let tau = 0.5 * dt;
                let (l, e) = fast_generator(&params);
                let id = DMatrix::<f64>::identity(2 * n, 2 * n);
                let inv = (&id - &l * (0.5 * tau))
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("fast half-step operator".into()))?;
                let m = &inv * (&id + &l * (0.5 * tau));
                let coupling = &inv * &e * tau;
                let mut fast = DMatrix::zeros(2 * n, 3 * n);
                fast.view_mut((0, 0), (2 * n, n)).copy_from(&coupling);
                fast.view_mut((0, n), (2 * n, 2 * n)).copy_from(&m);
                Kernel::Strang { fast }
            }
            Scheme::ImplicitMidpoint => Kernel::Midpoint(LinearlyImplicitMidpoint::new(
                &full_linear_part(&params),
                dt,
                cfg.fp_tol,
                cfg.fp_max_iter,
            )?),
        };
        Ok(Self { params, cfg, dt, kernel })
    }

    /// Same stepper with the sign of the step reversed.
    pub fn reversed(&self) -> Result<Self> {
        Self::build(self.params.clone(), self.cfg, -self.dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &StepperConfig {
        &self.cfg
    }

    /// Advances a flat state by one step with an optional constant forcing rate.
    pub fn step_flat(&self, z: &mut [f64], forcing: Option<&[f64]>) -> Result<()> {
        let n = self.params.n_grid;
        if z.len() != 3 * n || forcing.is_some_and(|f| f.len() != 3 * n) {
            return Err(Error::DimensionMismatch(format!("state length {} for n_grid {n}", z.len())));
        }
        match &self.kernel {
            Kernel::Strang { fast } => {
                self.fast_half(fast, z);
                self.slow_full(z, forcing)?;
                self.fast_half(fast, z);
            }
            Kernel::Midpoint(mp) => {
                let mut constant = vec![0.0; 3 * n];
                if !self.params.conservative {
                    constant[..n].iter_mut().for_each(|c| *c = self.params.forcing);
                }
                if let Some(f) = forcing {
                    constant.iter_mut().zip(f).for_each(|(c, v)| *c += v);
                }
                let conservative = ModelParams { conservative: true, ..self.params.clone() };
                mp.step(z, &constant, |mid, out| {
                    let (x, rest) = mid.split_at(n);
                    model::slow_tendency_into(x, &rest[..n], &conservative, &mut out[..n]);
                    out[n..].iter_mut().for_each(|v| *v = 0.0);
                    true
                })?;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state after model step".into()));
        }
        Ok(())
    }

    fn fast_half(&self, fast: &DMatrix<f64>, z: &mut [f64]) {
        let n = self.params.n_grid;
        let mut out = vec![0.0; 2 * n];
        gemv_acc(fast, z, &mut out);
        z[n..].copy_from_slice(&out);
    }

    /// Slow subsystem `dx/dt = s(x, h) + f_x`, `dh/dt = f_h`, `du/dt = f_u` by implicit midpoint.
    fn slow_full(&self, z: &mut [f64], forcing: Option<&[f64]>) -> Result<()> {
        let n = self.params.n_grid;
        let dt = self.dt;
        let h0 = z[n..2 * n].to_vec();
        if let Some(f) = forcing {
            for (zi, fi) in z[n..].iter_mut().zip(&f[n..]) {
                *zi += dt * fi;
            }
        }
        let h_mid: Vec<f64> = h0.iter().zip(&z[n..2 * n]).map(|(a, b)| 0.5 * (a + b)).collect();
        let x0 = z[..n].to_vec();
        let fx = forcing.map(|f| &f[..n]);
        let scale = max_abs(&x0).max(1.0);
        let mut x_next = x0.clone();
        let mut mid = vec![0.0; n];
        let mut rate = vec![0.0; n];
        let mut residual = f64::INFINITY;
        for _ in 0..self.cfg.fp_max_iter {
            for ((m, a), b) in mid.iter_mut().zip(&x0).zip(&x_next) {
                *m = 0.5 * (a + b);
            }
            model::slow_tendency_into(&mid, &h_mid, &self.params, &mut rate);
            residual = 0.0;
            for l in 0..n {
                let r = rate[l] + fx.map_or(0.0, |f| f[l]);
                let v = x0[l] + dt * r;
                residual = residual.max((v - x_next[l]).abs());
                x_next[l] = v;
            }
            if !residual.is_finite() {
                break;
            }
            if residual <= self.cfg.fp_tol * scale {
                z[..n].copy_from_slice(&x_next);
                return Ok(());
            }
        }
        Err(Error::NonConvergence { iterations: self.cfg.fp_max_iter, residual })
    }

    pub fn step(&self, z: &StateVector, forcing: Option<&[f64]>) -> Result<StateVector> {
        let mut data = z.as_slice().to_vec();
        self.step_flat(&mut data, forcing)?;
        StateVector::from_flat(z.n_grid(), data)
    }

    /// Steps every member; `forcing[i]` is member `i`'s increment rate.
    pub fn step_ensemble(&self, ens: &mut Ensemble, forcing: Option<&[Vec<f64>]>) -> Result<()> {
        if let Some(f) = forcing {
            if f.len() != ens.size() {
                return Err(Error::DimensionMismatch(format!(
                    "{} forcing rates for {} members",
                    f.len(),
                    ens.size()
                )));
            }
        }
        for (i, member) in ens.members_mut().iter_mut().enumerate() {
            self.step_flat(member, forcing.map(|f| f[i].as_slice()))?;
        }
        Ok(())
    }
}

/// Per-member analysis forcing evaluated once per step from the start-of-step ensemble.
pub trait ForcingTerm {
    /// Increment rates for all members at step `k`, or `None` when inactive.
    fn rates(&mut self, k: usize, snapshot: &Ensemble) -> Result<Option<Vec<Vec<f64>>>>;
}

/// Forcing that is never active.
pub struct NoForcing;

impl ForcingTerm for NoForcing {
    fn rates(&mut self, _k: usize, _snapshot: &Ensemble) -> Result<Option<Vec<Vec<f64>>>> {
        Ok(None)
    }
}

/// Advances the ensemble over steps `k0..k1`, evaluating the forcing at each
/// step's start snapshot before any member moves.
pub fn advance<F: ForcingTerm>(
    stepper: &Stepper,
    ens: &mut Ensemble,
    k0: usize,
    k1: usize,
    forcing: &mut F,
) -> Result<()> {
    for k in k0..k1 {
        let rates = forcing.rates(k, ens)?;
        stepper.step_ensemble(ens, rates.as_deref())?;
    }
    Ok(())
}

/// One implicit midpoint step of the full model.
pub fn step_implicit_midpoint(
    z: &StateVector,
    p: &ModelParams,
    cfg: &StepperConfig,
    forcing_rate: Option<&[f64]>,
) -> Result<StateVector> {
    let cfg = StepperConfig { scheme: Scheme::ImplicitMidpoint, ..*cfg };
    Stepper::new(p.clone(), cfg)?.step(z, forcing_rate)
}

/// One Strang-split step of the full model.
pub fn step_strang(
    z: &StateVector,
    p: &ModelParams,
    cfg: &StepperConfig,
    forcing_rate: Option<&[f64]>,
) -> Result<StateVector> {
    let cfg = StepperConfig { scheme: Scheme::StrangSplit, ..*cfg };
    Stepper::new(p.clone(), cfg)?.step(z, forcing_rate)
}

/// Integrates one state for `steps` steps, keeping every `sample_every`-th
/// state including the initial one.
pub fn integrate_samples(
    stepper: &Stepper,
    z0: &StateVector,
    steps: usize,
    sample_every: usize,
) -> Result<Vec<StateVector>> {
    let sample_every = sample_every.max(1);
    let mut z = z0.as_slice().to_vec();
    let mut out = vec![z0.clone()];
    for k in 1..=steps {
        stepper.step_flat(&mut z, None)?;
        if k % sample_every == 0 {
            out.push(StateVector::from_flat(z0.n_grid(), z.clone())?);
        }
    }
    Ok(out)
}
