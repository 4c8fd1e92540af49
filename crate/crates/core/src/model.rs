//! Slow-fast Lorenz-96 model.
//!
//! The slow field `x` follows a Lorenz-96 advection whose strength is shared
//! with a coupling to the wave height `h`; `h` obeys a discrete, dispersive
//! wave equation forced by `x`. The second-order wave equation is carried as
//! the first-order pair `(h, u)` with `u = dh/dt`, so a full state is the flat
//! concatenation `(x_0..x_{n-1}, h_0..h_{n-1}, u_0..u_{n-1})`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[inline]
fn wrap(l: isize, n: usize) -> usize {
    l.rem_euclid(n as isize) as usize
}

/// Physical parameters of the slow-fast model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub n_grid: usize,
    /// Fast time-scale (Rossby-number like).
    pub eps: f64,
    /// Wave dispersion; `alpha^2` plays the role of a Burger number.
    pub alpha: f64,
    /// Coupling strength in `[0, 1]`.
    pub delta: f64,
    /// Linear damping of the wave velocity.
    pub gamma: f64,
    pub forcing: f64,
    /// Drop the `-x + F` terms, leaving the energy-conserving wave-advection system.
    #[serde(default)]
    pub conservative: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            n_grid: 40,
            eps: 0.0025,
            alpha: 0.5,
            delta: 0.1,
            gamma: 0.0,
            forcing: 8.0,
            conservative: false,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid < 4 {
            return Err(Error::invalid("n_grid", format!("must be >= 4, got {}", self.n_grid)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid("delta", format!("must lie in [0, 1], got {}", self.delta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", format!("must be nonnegative, got {}", self.gamma)));
        }
        if !self.forcing.is_finite() {
            return Err(Error::invalid("forcing", "must be finite"));
        }
        Ok(())
    }

    /// Length of the flat state vector.
    pub fn state_dim(&self) -> usize {
        3 * self.n_grid
    }
}

/// Full model state `(x, h, u)` on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_grid: usize,
    data: Vec<f64>,
}

impl StateVector {
    pub fn zeros(n_grid: usize) -> Self {
        Self { n_grid, data: vec![0.0; 3 * n_grid] }
    }

    pub fn from_parts(x: &[f64], h: &[f64], u: &[f64]) -> Result<Self> {
        let n = x.len();
        if h.len() != n || u.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "field lengths x={}, h={}, u={}",
                n,
                h.len(),
                u.len()
            )));
        }
        let mut data = Vec::with_capacity(3 * n);
        data.extend_from_slice(x);
        data.extend_from_slice(h);
        data.extend_from_slice(u);
        Self::from_flat(n, data)
    }

    pub fn from_flat(n_grid: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * n_grid {
            return Err(Error::DimensionMismatch(format!(
                "flat state of length {} for n_grid {}",
                data.len(),
                n_grid
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state entry {i}")));
        }
        Ok(Self { n_grid, data })
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn x(&self) -> &[f64] {
        &self.data[..self.n_grid]
    }

    pub fn h(&self) -> &[f64] {
        &self.data[self.n_grid..2 * self.n_grid]
    }

    pub fn u(&self) -> &[f64] {
        &self.data[2 * self.n_grid..]
    }

    pub fn x_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.n_grid]
    }

    pub fn h_mut(&mut self) -> &mut [f64] {
        let n = self.n_grid;
        &mut self.data[n..2 * n]
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        let n = self.n_grid;
        &mut self.data[2 * n..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Cyclic shift of every field by `k` grid points: `out_l = in_{l-k}`.
    pub fn shifted(&self, k: usize) -> Self {
        let n = self.n_grid;
        let mut data = vec![0.0; 3 * n];
        for f in 0..3 {
            for l in 0..n {
                data[f * n + (l + k) % n] = self.data[f * n + l];
            }
        }
        Self { n_grid: n, data }
    }
}

/// Advective part `(x_{l+1} - x_{l-2}) x_{l-1}` of Lorenz-96.
pub fn lorenz96_advection(x: &[f64], out: &mut [f64]) {
    let n = x.len() as isize;
    for l in 0..n {
        let xp1 = x[wrap(l + 1, n as usize)];
        let xm1 = x[wrap(l - 1, n as usize)];
        let xm2 = x[wrap(l - 2, n as usize)];
        out[l as usize] = (xp1 - xm2) * xm1;
    }
}

/// Standard Lorenz-96 tendency with constant forcing.
pub fn lorenz96_tendency(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if x.len() < 4 {
        return Err(Error::invalid("n_grid", format!("Lorenz-96 needs n >= 4, got {}", x.len())));
    }
    let mut out = vec![0.0; x.len()];
    lorenz96_advection(x, &mut out);
    for (o, xl) in out.iter_mut().zip(x) {
        *o += forcing - xl;
    }
    Ok(out)
}

/// Periodic second difference `h_{l+1} - 2h_l + h_{l-1}`.
#[inline]
fn laplacian_at(h: &[f64], l: usize) -> f64 {
    let n = h.len();
    h[(l + 1) % n] - 2.0 * h[l] + h[(l + n - 1) % n]
}

/// Slow tendency `dx/dt` given the current `x` and `h`.
pub fn slow_tendency_into(x: &[f64], h: &[f64], p: &ModelParams, out: &mut [f64]) {
    let n = x.len();
    let adv = 1.0 - p.delta;
    for l in 0..n {
        let xp1 = x[(l + 1) % n];
        let xm1 = x[(l + n - 1) % n];
        let xm2 = x[(l + n - 2) % n];
        let hp1 = h[(l + 1) % n];
        let hm1 = h[(l + n - 1) % n];
        let mut d = adv * (xp1 - xm2) * xm1 + p.delta * (xm1 * hp1 - xm2 * hm1);
        if !p.conservative {
            d += p.forcing - x[l];
        }
        out[l] = d;
    }
}

/// Full tendency `(dx/dt, dh/dt, du/dt)` written into a flat buffer.
pub fn slowfast_tendency_into(z: &[f64], p: &ModelParams, out: &mut [f64]) {
    let n = p.n_grid;
    let (x, rest) = z.split_at(n);
    let (h, u) = rest.split_at(n);
    let (dx, rest) = out.split_at_mut(n);
    let (dh, du) = rest.split_at_mut(n);
    slow_tendency_into(x, h, p, dx);
    let a2 = p.alpha * p.alpha;
    let inv_eps2 = 1.0 / (p.eps * p.eps);
    for l in 0..n {
        dh[l] = u[l];
        du[l] = (-h[l] + a2 * laplacian_at(h, l) + x[l]) * inv_eps2 - p.gamma * u[l];
    }
}

pub fn slowfast_tendency(z: &StateVector, p: &ModelParams) -> StateVector {
    let mut out = StateVector::zeros(z.n_grid);
    slowfast_tendency_into(&z.data, p, &mut out.data);
    out
}

pub fn energy_lorenz(x: &[f64]) -> f64 {
    0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

pub fn energy_wave(h: &[f64], u: &[f64], p: &ModelParams) -> f64 {
    let n = h.len();
    let a2 = p.alpha * p.alpha;
    let kinetic = 0.5 * p.eps * p.eps * u.iter().map(|v| v * v).sum::<f64>();
    let potential: f64 = (0..n)
        .map(|l| {
            let d = h[(l + 1) % n] - h[l];
            h[l] * h[l] + a2 * d * d
        })
        .sum();
    kinetic + 0.5 * potential
}

pub fn energy_coupling(x: &[f64], h: &[f64], p: &ModelParams) -> f64 {
    -p.delta * x.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
}

/// Total energy `H = (delta - 1) E_lorenz + delta E_wave + E_coupling`,
/// conserved by the wave-advection system.
pub fn energy_total(z: &StateVector, p: &ModelParams) -> f64 {
    (p.delta - 1.0) * energy_lorenz(z.x())
        + p.delta * energy_wave(z.h(), z.u(), p)
        + energy_coupling(z.x(), z.h(), p)
}

/// `x_l = h_l - alpha^2 (h_{l+1} - 2h_l + h_{l-1})`.
pub fn balance_x_from_h(h: &[f64], p: &ModelParams) -> Vec<f64> {
    let a2 = p.alpha * p.alpha;
    (0..h.len()).map(|l| h[l] - a2 * laplacian_at(h, l)).collect()
}

/// Dense periodic matrix of `I - alpha^2 Laplacian`.
pub fn balance_operator(n: usize, alpha: f64) -> DMatrix<f64> {
    let a2 = alpha * alpha;
    let mut m = DMatrix::zeros(n, n);
    for l in 0..n {
        m[(l, l)] += 1.0 + 2.0 * a2;
        m[(l, (l + 1) % n)] -= a2;
        m[(l, (l + n - 1) % n)] -= a2;
    }
    m
}

/// Inverse of [`balance_x_from_h`]: solves `(I - alpha^2 Laplacian) h = x` directly.
pub fn balance_h_from_x(x: &[f64], p: &ModelParams) -> Vec<f64> {
    let n = x.len();
    let chol = balance_operator(n, p.alpha)
        .cholesky()
        .expect("I - alpha^2 Laplacian is symmetric positive definite");
    chol.solve(&DVector::from_column_slice(x)).as_slice().to_vec()
}

/// Euclidean norm of the balance residual `x - (I - alpha^2 Laplacian) h`.
pub fn imbalance_norm(z: &StateVector, p: &ModelParams) -> f64 {
    imbalance_sq(z.as_slice(), p).sqrt()
}

/// Squared balance residual of a flat state.
pub fn imbalance_sq(z: &[f64], p: &ModelParams) -> f64 {
    let n = p.n_grid;
    let x = &z[..n];
    let h = &z[n..2 * n];
    let a2 = p.alpha * p.alpha;
    (0..n)
        .map(|l| {
            let d = x[l] - h[l] + a2 * laplacian_at(h, l);
            d * d
        })
        .sum()
}

/// Balanced state built from a slow field: `h` from the balance relation and
/// `u` either from the time-differentiated relation or zero.
pub fn balanced_state(x: &[f64], p: &ModelParams, differentiate_u: bool) -> StateVector {
    let h = balance_h_from_x(x, p);
    let u = if differentiate_u {
        let mut dx = vec![0.0; x.len()];
        slow_tendency_into(x, &h, p, &mut dx);
        balance_h_from_x(&dx, p)
    } else {
        vec![0.0; x.len()]
    };
    StateVector::from_parts(x, &h, &u).expect("fields share n_grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(delta: f64) -> ModelParams {
        ModelParams { delta, ..ModelParams::default() }
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        // splitmix-style sequence, adequate for test inputs
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                z ^= z >> 31;
                (z as f64 / u64::MAX as f64) * 8.0 - 4.0
            })
            .collect()
    }

    fn random_state(n: usize, seed: u64) -> StateVector {
        StateVector::from_flat(n, pseudo_random(3 * n, seed)).unwrap()
    }

    #[test]
    fn lorenz_constant_field_is_fixed_point() {
        let t = lorenz96_tendency(&[8.0; 40], 8.0).unwrap();
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lorenz_zero_field_gives_forcing() {
        let t = lorenz96_tendency(&[0.0; 40], 8.0).unwrap();
        assert!(t.iter().all(|v| *v == 8.0));
    }

    #[test]
    fn lorenz_rejects_short_grid() {
        assert!(lorenz96_tendency(&[1.0; 3], 8.0).is_err());
    }

    #[test]
    fn advection_conserves_energy() {
        for seed in 0..5 {
            let x = pseudo_random(40, seed);
            let mut adv = vec![0.0; 40];
            lorenz96_advection(&x, &mut adv);
            let dot: f64 = x.iter().zip(&adv).map(|(a, b)| a * b).sum();
            let scale: f64 = x.iter().zip(&adv).map(|(a, b)| (a * b).abs()).sum();
            assert!(dot.abs() <= 1e-12 * scale, "dot {dot} scale {scale}");
        }
    }

    #[test]
    fn slowfast_zero_state() {
        let t = slowfast_tendency(&StateVector::zeros(40), &ModelParams::default());
        assert!(t.x().iter().all(|v| *v == 8.0));
        assert!(t.h().iter().chain(t.u()).all(|v| *v == 0.0));
    }

    #[test]
    fn slowfast_reduces_to_lorenz_without_coupling() {
        let x = pseudo_random(40, 3);
        let z = StateVector::from_parts(&x, &[0.0; 40], &[0.0; 40]).unwrap();
        let t = slowfast_tendency(&z, &params(0.0));
        assert_eq!(t.x(), lorenz96_tendency(&x, 8.0).unwrap().as_slice());
    }

    /// Analytic gradient of the total energy.
    fn energy_gradient(z: &StateVector, p: &ModelParams) -> Vec<f64> {
        let n = z.n_grid();
        let (x, h, u) = (z.x(), z.h(), z.u());
        let a2 = p.alpha * p.alpha;
        let mut g = vec![0.0; 3 * n];
        for l in 0..n {
            g[l] = (p.delta - 1.0) * x[l] - p.delta * h[l];
            g[n + l] = p.delta * (h[l] - a2 * laplacian_at(h, l)) - p.delta * x[l];
            g[2 * n + l] = p.delta * p.eps * p.eps * u[l];
        }
        g
    }

    #[test]
    fn wave_advection_conserves_total_energy() {
        for &delta in &[0.0, 0.1, 0.5, 1.0] {
            let p = ModelParams { delta, conservative: true, ..ModelParams::default() };
            for seed in 0..4 {
                let z = random_state(40, 100 + seed);
                let g = energy_gradient(&z, &p);
                let f = slowfast_tendency(&z, &p);
                let terms: Vec<f64> = g.iter().zip(f.as_slice()).map(|(a, b)| a * b).collect();
                let dot: f64 = terms.iter().sum();
                let scale: f64 = terms.iter().map(|t| t.abs()).sum();
                assert!(dot.abs() <= 1e-10 * scale, "delta {delta}: {dot} vs {scale}");
            }
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let p = ModelParams { delta: 0.3, ..ModelParams::default() };
        let z = random_state(40, 9);
        let g = energy_gradient(&z, &p);
        for i in [0, 17, 45, 80, 119] {
            let hstep = 1e-5;
            let mut zp = z.clone();
            zp.as_mut_slice()[i] += hstep;
            let mut zm = z.clone();
            zm.as_mut_slice()[i] -= hstep;
            let fd = (energy_total(&zp, &p) - energy_total(&zm, &p)) / (2.0 * hstep);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "component {i}");
        }
    }

    #[test]
    fn energies_vanish_at_zero() {
        let p = ModelParams::default();
        let z = StateVector::zeros(40);
        assert_eq!(energy_lorenz(z.x()), 0.0);
        assert_eq!(energy_wave(z.h(), z.u(), &p), 0.0);
        assert_eq!(energy_coupling(z.x(), z.h(), &p), 0.0);
        assert_eq!(energy_total(&z, &p), 0.0);
    }

    #[test]
    fn single_wave_spike_energy() {
        let p = ModelParams { alpha: 0.5, delta: 1.0, ..ModelParams::default() };
        let mut z = StateVector::zeros(40);
        z.h_mut()[5] = 1.0;
        assert!((energy_wave(z.h(), z.u(), &p) - 0.75).abs() < 1e-15);
        assert!((energy_total(&z, &p) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn total_energy_closed_form_matches_parts() {
        let p = ModelParams { delta: 0.4, ..ModelParams::default() };
        let z = random_state(40, 21);
        let (x, h, u) = (z.x(), z.h(), z.u());
        let a2 = p.alpha * p.alpha;
        let closed: f64 = (0..40)
            .map(|l| {
                let d = h[(l + 1) % 40] - h[l];
                (p.delta - 1.0) / p.delta * x[l] * x[l]
                    + p.eps * p.eps * u[l] * u[l]
                    + h[l] * h[l]
                    + a2 * d * d
                    - 2.0 * x[l] * h[l]
            })
            .sum::<f64>()
            * p.delta
            / 2.0;
        let parts = energy_total(&z, &p);
        assert!((closed - parts).abs() <= 1e-12 * parts.abs().max(1.0));
    }

    #[test]
    fn balance_of_constant_and_zero() {
        let p = ModelParams::default();
        assert!(balance_x_from_h(&[2.5; 40], &p).iter().all(|v| (*v - 2.5).abs() < 1e-15));
        assert!(balance_x_from_h(&[0.0; 40], &p).iter().all(|v| *v == 0.0));
        assert!(balance_h_from_x(&[0.0; 40], &p).iter().all(|v| *v == 0.0));
        assert!(balance_h_from_x(&[2.5; 40], &p).iter().all(|v| (*v - 2.5).abs() < 1e-13));
    }

    #[test]
    fn balance_acts_on_fourier_mode_by_eigenvalue() {
        let p = ModelParams { alpha: 0.5, ..ModelParams::default() };
        let h: Vec<f64> =
            (0..40).map(|l| (2.0 * std::f64::consts::PI * l as f64 / 40.0).cos()).collect();
        let s = (std::f64::consts::PI / 40.0).sin();
        let factor = 1.0 + 4.0 * 0.25 * s * s;
        for (xl, hl) in balance_x_from_h(&h, &p).iter().zip(&h) {
            assert!((xl - factor * hl).abs() < 1e-14);
        }
    }

    #[test]
    fn imbalance_examples() {
        let p = ModelParams::default();
        let h = pseudo_random(40, 5);
        let x = balance_x_from_h(&h, &p);
        let z = StateVector::from_parts(&x, &h, &[0.0; 40]).unwrap();
        assert!(imbalance_norm(&z, &p) < 1e-12);

        let mut z = StateVector::zeros(40);
        z.x_mut()[3] = 1.0;
        assert!((imbalance_norm(&z, &p) - 1.0).abs() < 1e-15);

        let z = random_state(40, 8);
        let bx = balance_x_from_h(z.h(), &p);
        let direct: f64 =
            z.x().iter().zip(&bx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((imbalance_norm(&z, &p) - direct).abs() < 1e-12);
    }

    #[test]
    fn balanced_state_has_zero_imbalance() {
        let p = ModelParams::default();
        let z = balanced_state(&pseudo_random(40, 12), &p, true);
        assert!(imbalance_norm(&z, &p) < 1e-10);
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::default().validate().is_ok());
        let bad = ModelParams { delta: 1.5, ..ModelParams::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidParameter { field: "delta", .. })));
        let bad = ModelParams { n_grid: 3, ..ModelParams::default() };
        assert!(bad.validate().is_err());
        let bad = ModelParams { eps: 0.0, ..ModelParams::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn balance_round_trip(x in prop::collection::vec(-10.0f64..10.0, 40)) {
            let p = ModelParams::default();
            let back = balance_x_from_h(&balance_h_from_x(&x, &p), &p);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * norm);
            }
        }

        #[test]
        fn tendency_commutes_with_shift(seed in 0u64..1000, k in 0usize..40) {
            let p = ModelParams { delta: 0.3, gamma: 0.2, ..ModelParams::default() };
            let z = random_state(40, seed);
            let a = slowfast_tendency(&z.shifted(k), &p);
            let b = slowfast_tendency(&z, &p).shifted(k);
            prop_assert_eq!(a, b);
        }
    }
}
