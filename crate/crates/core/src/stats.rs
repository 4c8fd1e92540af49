//! Ensemble statistics, multiplicative inflation and covariance localization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::StateVector;

/// `m` flat state vectors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    dim: usize,
    members: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<Vec<f64>>) -> Result<Self> {
        let dim = members.first().map(Vec::len).ok_or(Error::EnsembleTooSmall { required: 1, got: 0 })?;
        if members.iter().any(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch("ensemble members differ in length".into()));
        }
        Ok(Self { dim, members })
    }

    pub fn from_states(states: Vec<StateVector>) -> Result<Self> {
        Self::new(states.into_iter().map(StateVector::into_vec).collect())
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.members
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.members[i]
    }

    pub fn state(&self, i: usize, n_grid: usize) -> Result<StateVector> {
        StateVector::from_flat(n_grid, self.members[i].clone())
    }

    /// Largest absolute entry over all members; non-finite entries map to infinity.
    pub fn max_abs(&self) -> f64 {
        self.members
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY })
    }

    /// Arithmetic mean, summed in member order.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for m in &self.members {
            for (acc, v) in mean.iter_mut().zip(m) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.members.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }

    /// Deviations from the mean as a `dim x m` matrix.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        DMatrix::from_fn(self.dim, self.members.len(), |a, i| self.members[i][a] - mean[a])
    }

    /// Unbiased sample covariance `1/(m-1) sum (z_i - zbar)(z_i - zbar)^T`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let m = self.members.len();
        if m < 2 {
            return Err(Error::EnsembleTooSmall { required: 2, got: m });
        }
        let d = self.anomalies();
        let mut p = DMatrix::zeros(self.dim, self.dim);
        for i in 0..m {
            let col = d.column(i);
            for b in 0..self.dim {
                let db = col[b];
                for a in 0..self.dim {
                    p[(a, b)] += col[a] * db;
                }
            }
        }
        Ok(p / (m - 1) as f64)
    }
}

/// Which components inflation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationMask {
    /// Only the slow `x` block of a model state.
    #[default]
    SlowOnly,
    FullState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InflationSpec {
    pub factor: f64,
    pub mask: InflationMask,
}

impl InflationSpec {
    pub fn new(factor: f64, mask: InflationMask) -> Result<Self> {
        if !(factor >= 1.0 && factor.is_finite()) {
            return Err(Error::invalid("lambda", format!("inflation factor must be >= 1, got {factor}")));
        }
        Ok(Self { factor, mask })
    }

    pub fn none() -> Self {
        Self { factor: 1.0, mask: InflationMask::SlowOnly }
    }
}

/// Multiplicative inflation `z_i <- zbar + lambda (z_i - zbar)` on the masked
/// components of model states with `n_grid` points per field.
pub fn inflate(ens: &mut Ensemble, spec: &InflationSpec, n_grid: usize) {
    if spec.factor == 1.0 {
        return;
    }
    let range = match spec.mask {
        InflationMask::SlowOnly => 0..n_grid.min(ens.dim),
        InflationMask::FullState => 0..ens.dim,
    };
    let mean = ens.mean();
    for m in ens.members.iter_mut() {
        for a in range.clone() {
            m[a] = mean[a] + spec.factor * (m[a] - mean[a]);
        }
    }
}

/// Gaspari-Cohn fifth-order compactly supported correlation with support `2c`.
pub fn gaspari_cohn(r: f64, c: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::invalid("r", format!("distance must be nonnegative, got {r}")));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("c", format!("length scale must be positive, got {c}")));
    }
    let s = r / c;
    let rho = if s <= 1.0 {
        (((-0.25 * s + 0.5) * s + 0.625) * s - 5.0 / 3.0) * s * s + 1.0
    } else if s < 2.0 {
        ((((s / 12.0 - 0.5) * s + 0.625) * s + 5.0 / 3.0) * s - 5.0) * s + 4.0 - 2.0 / (3.0 * s)
    } else {
        0.0
    };
    Ok(rho.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizationSpec {
    pub radius: f64,
    pub enabled: bool,
}

impl LocalizationSpec {
    pub fn with_radius(radius: f64) -> Self {
        Self { radius, enabled: true }
    }

    pub fn disabled() -> Self {
        Self { radius: 0.0, enabled: false }
    }
}

/// Periodic grid distance `min(|l - l'|, n - |l - l'|)`.
pub fn grid_distance(l: usize, lp: usize, n: usize) -> usize {
    let d = l.abs_diff(lp);
    d.min(n - d)
}

/// Localization weights for flat states made of `fields` blocks of `n_grid`
/// points, all fields sharing the same distance-dependent factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Taper {
    n_grid: usize,
    dim: usize,
    /// `profile[d]` is the weight at grid distance `d`; `None` means no localization.
    profile: Option<Vec<f64>>,
    /// For each flat index, the flat indices with nonzero weight and the weight.
    support: Vec<Vec<(usize, f64)>>,
}

impl Taper {
    pub fn new(n_grid: usize, fields: usize, spec: &LocalizationSpec) -> Result<Self> {
        if spec.enabled && !(spec.radius >= 0.0) {
            return Err(Error::invalid("r0", format!("localization radius must be >= 0, got {}", spec.radius)));
        }
        let dim = n_grid * fields;
        let profile = if spec.enabled {
            let prof = (0..=n_grid / 2)
                .map(|d| {
                    if spec.radius == 0.0 {
                        Ok(if d == 0 { 1.0 } else { 0.0 })
                    } else {
                        gaspari_cohn(d as f64, spec.radius)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(prof)
        } else {
            None
        };
        let support = (0..dim)
            .map(|b| {
                (0..dim)
                    .filter_map(|a| {
                        let w = match &profile {
                            Some(p) => p[grid_distance(a % n_grid, b % n_grid, n_grid)],
                            None => 1.0,
                        };
                        (w != 0.0).then_some((a, w))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { n_grid, dim, profile, support })
    }

    /// All-ones taper on an unstructured state of dimension `dim`.
    pub fn none(dim: usize) -> Self {
        Self {
            n_grid: dim,
            dim,
            profile: None,
            support: (0..dim).map(|_| (0..dim).map(|a| (a, 1.0)).collect()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_localized(&self) -> bool {
        self.profile.is_some()
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        match &self.profile {
            Some(p) => p[grid_distance(a % self.n_grid, b % self.n_grid, self.n_grid)],
            None => 1.0,
        }
    }

    /// Rows with nonzero weight in column `b`.
    pub fn column_support(&self, b: usize) -> &[(usize, f64)] {
        &self.support[b]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |a, b| self.weight(a, b))
    }
}

/// Dense `3n x 3n` taper for model states.
pub fn localization_taper(n_grid: usize, spec: &LocalizationSpec) -> Result<DMatrix<f64>> {
    Ok(Taper::new(n_grid, 3, spec)?.to_matrix())
}

/// Schur product `C o P`.
pub fn localized_covariance(p: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.shape() != c.shape() {
        return Err(Error::DimensionMismatch(format!(
            "covariance {:?} vs taper {:?}",
            p.shape(),
            c.shape()
        )));
    }
    Ok(p.component_mul(c))
}
