//! Linear observation operators, synthetic observations, the observational
//! cost and the ensemble potential.

use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::Ensemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    XEverySecond,
    MixedEverySecond,
    CustomRows,
}

/// Which grid points count as "every second" one, in 1-based grid numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    /// Points 2, 4, ..., n.
    #[default]
    Even,
    /// Points 1, 3, ..., n - 1.
    Odd,
}

impl Parity {
    fn offset(self) -> usize {
        match self {
            Parity::Even => 1,
            Parity::Odd => 0,
        }
    }
}

/// Sparse `p x dim` observation matrix stored by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationOperator {
    kind: ObservationKind,
    state_dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ObservationOperator {
    /// Observes `x` at every second grid point of a model state.
    pub fn x_every_second(n_grid: usize, parity: Parity) -> Self {
        let rows = (parity.offset()..n_grid).step_by(2).map(|l| vec![(l, 1.0)]).collect();
        Self { kind: ObservationKind::XEverySecond, state_dim: 3 * n_grid, rows }
    }

    /// Observes `(x + h) / 2` at every second grid point.
    pub fn mixed_every_second(n_grid: usize, parity: Parity) -> Self {
        let rows = (parity.offset()..n_grid)
            .step_by(2)
            .map(|l| vec![(l, 0.5), (n_grid + l, 0.5)])
            .collect();
        Self { kind: ObservationKind::MixedEverySecond, state_dim: 3 * n_grid, rows }
    }

    pub fn custom(state_dim: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() > state_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} observation rows for a state of dimension {state_dim}",
                rows.len()
            )));
        }
        for row in &rows {
            for &(col, v) in row {
                if col >= state_dim {
                    return Err(Error::DimensionMismatch(format!("column {col} >= {state_dim}")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite("observation operator entry".into()));
                }
            }
        }
        Ok(Self { kind: ObservationKind::CustomRows, state_dim, rows })
    }

    /// Builds a custom operator from a dense matrix, dropping zeros.
    pub fn from_dense(h: &DMatrix<f64>) -> Result<Self> {
        let rows = (0..h.nrows())
            .map(|r| (0..h.ncols()).filter(|&c| h[(r, c)] != 0.0).map(|c| (c, h[(r, c)])).collect())
            .collect();
        Self::custom(h.ncols(), rows)
    }

    pub fn kind(&self) -> ObservationKind {
        self.kind
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for operator with {} columns",
                z.len(),
                self.state_dim
            )));
        }
        Ok(self.apply_unchecked(z))
    }

    pub(crate) fn apply_unchecked(&self, z: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(c, v)| v * z[c]).sum()).collect()
    }

    /// `H^T w`.
    pub fn transpose_apply(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        for (row, wr) in self.rows.iter().zip(w) {
            for &(c, v) in row {
                out[c] += v * wr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), self.state_dim);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                h[(r, c)] += v;
            }
        }
        h
    }
}

/// Symmetric positive definite observation error covariance with a cached factorization.
#[derive(Clone, Debug)]
pub struct ObsErrorCov {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    identity: bool,
}

impl ObsErrorCov {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch("R must be square".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("R".into()));
        }
        if (&matrix - matrix.transpose()).amax() > 1e-12 * matrix.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::Singular("R is not symmetric".into()));
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("R is not positive definite".into()))?;
        let identity = matrix == DMatrix::identity(matrix.nrows(), matrix.ncols());
        Ok(Self { matrix, chol, identity })
    }

    pub fn identity(p: usize) -> Self {
        Self::new(DMatrix::identity(p, p)).expect("identity is SPD")
    }

    pub fn scaled_identity(p: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(p, p) * variance)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `R^{-1} v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        if self.identity {
            return v.to_vec();
        }
        self.chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// Replaces every column `v` of `m` by `R^{-1} v`.
    pub(crate) fn solve_columns(&self, m: &mut DMatrix<f64>) {
        if !self.identity {
            self.chol.solve_mut(m);
        }
    }

    /// `L xi` with `R = L L^T`.
    pub fn color(&self, xi: &[f64]) -> Vec<f64> {
        if self.identity {
            return xi.to_vec();
        }
        (self.chol.l_dirty().lower_triangle() * DVector::from_column_slice(xi)).as_slice().to_vec()
    }
}

/// Observations `y(t_j)` at `t_j = j * dt_obs`, `j = 1..=M`.
#[derive(Clone, Debug)]
pub struct ObservationStream {
    pub dt_obs: f64,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub r: ObsErrorCov,
    pub seed: u64,
}

impl ObservationStream {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observation `j` in 1-based numbering.
    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j - 1]
    }
}

/// Draws `y_j = H z_truth(t_j) + eta_j` with `eta_j ~ N(0, R)` from the seeded stream.
///
/// `truth_at_obs[j - 1]` must hold the truth at `t_j`.
pub fn generate_observations<S: AsRef<[f64]>>(
    truth_at_obs: &[S],
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    dt_obs: f64,
    count: usize,
    seed: u64,
) -> Result<ObservationStream> {
    if truth_at_obs.len() < count {
        return Err(Error::ShortTrajectory { available: truth_at_obs.len(), required: count });
    }
    if r.dim() != hop.n_obs() {
        return Err(Error::DimensionMismatch(format!("R is {0}x{0} for {1} observations", r.dim(), hop.n_obs())));
    }
    let mut rng = rng::seeded_rng(seed);
    let mut values = Vec::with_capacity(count);
    for z in &truth_at_obs[..count] {
        let mut y = hop.apply(z.as_ref())?;
        let eta = r.color(&rng::standard_normals(&mut rng, hop.n_obs()));
        y.iter_mut().zip(&eta).for_each(|(a, b)| *a += b);
        values.push(y);
    }
    Ok(ObservationStream {
        dt_obs,
        times: (1..=count).map(|j| j as f64 * dt_obs).collect(),
        values,
        r: r.clone(),
        seed,
    })
}

/// `S(z) = 1/2 (Hz - y)^T R^{-1} (Hz - y)`.
pub fn obs_cost(hop: &ObservationOperator, r: &ObsErrorCov, y: &[f64], z: &[f64]) -> Result<f64> {
    let mut innov = hop.apply(z)?;
    if innov.len() != y.len() {
        return Err(Error::DimensionMismatch("observation vector length".into()));
    }
    innov.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
    let w = r.solve(&innov);
    Ok(0.5 * innov.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
}

/// Ensemble potential `V = m/2 { S(zbar) + 1/m sum_i S(z_i) }`.
pub fn potential(ens: &Ensemble, hop: &ObservationOperator, r: &ObsErrorCov, y: &[f64]) -> Result<f64> {
    let m = ens.size() as f64;
    let mean_term = obs_cost(hop, r, y, &ens.mean())?;
    let mut member_terms = 0.0;
    for z in ens.members() {
        member_terms += obs_cost(hop, r, y, z)?;
    }
    Ok(0.5 * m * (mean_term + member_terms / m))
}

/// Observation-space weights `w_i = 1/2 R^{-1}(H z_i + H zbar - 2y)`, so that
/// the gradient of the potential with respect to member `i` is `H^T w_i`.
pub fn potential_weights(
    ens: &Ensemble,
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    y: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if ens.dim() != hop.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "ensemble dimension {} for operator with {} columns",
            ens.dim(),
            hop.state_dim()
        )));
    }
    if y.len() != hop.n_obs() || r.dim() != hop.n_obs() {
        return Err(Error::DimensionMismatch("observation vector or R size".into()));
    }
    let hmean = hop.apply_unchecked(&ens.mean());
    Ok(ens
        .members()
        .iter()
        .map(|z| {
            let hz = hop.apply_unchecked(z);
            let v: Vec<f64> =
                hz.iter().zip(&hmean).zip(y).map(|((a, b), yy)| 0.5 * (a + b - 2.0 * yy)).collect();
            r.solve(&v)
        })
        .collect())
}

/// `grad_{z_i} V = 1/2 H^T R^{-1}(H z_i + H zbar - 2y)` for every member.
pub fn potential_gradient(
    ens: &Ensemble,
    hop: &ObservationOperator,
    r: &ObsErrorCov,
    y: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if ens.size() < 2 {
        return Err(Error::EnsembleTooSmall { required: 2, got: ens.size() });
    }
    Ok(potential_weights(ens, hop, r, y)?.iter().map(|w| hop.transpose_apply(w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn x_every_second_picks_even_points() {
        let hop = ObservationOperator::x_every_second(40, Parity::Even);
        assert_eq!(hop.n_obs(), 20);
        let x: Vec<f64> = (1..=40).map(|l| l as f64).collect();
        let z = StateVector::from_parts(&x, &[0.0; 40], &[0.0; 40]).unwrap();
        let y = hop.apply(z.as_slice()).unwrap();
        assert_eq!(y, (1..=20).map(|j| 2.0 * j as f64).collect::<Vec<_>>());
        let odd = ObservationOperator::x_every_second(40, Parity::Odd).apply(z.as_slice()).unwrap();
        assert_eq!(odd[0], 1.0);
    }

    #[test]
    fn mixed_equals_x_when_fields_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 40);
        let z = StateVector::from_parts(&x, &x, &[0.0; 40]).unwrap();
        let a = ObservationOperator::mixed_every_second(40, Parity::Even).apply(z.as_slice()).unwrap();
        let b = ObservationOperator::x_every_second(40, Parity::Even).apply(z.as_slice()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
        let zero = ObservationOperator::mixed_every_second(40, Parity::Even).apply(&[0.0; 120]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(ObservationOperator::x_every_second(40, Parity::Even).apply(&[0.0; 7]).is_err());
    }

    #[test]
    fn custom_operator_validation() {
        assert!(ObservationOperator::custom(3, vec![vec![(3, 1.0)]]).is_err());
        assert!(ObservationOperator::custom(1, vec![vec![(0, 1.0)], vec![(0, 2.0)]]).is_err());
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let hop = ObservationOperator::from_dense(&h).unwrap();
        assert_eq!(hop.to_dense(), h);
        assert_eq!(hop.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![7.0, -2.0]);
    }

    #[test]
    fn r_must_be_spd() {
        assert!(ObsErrorCov::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(ObsErrorCov::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        let r = ObsErrorCov::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let v = r.solve(&[1.0, 1.0]);
        let back = r.matrix() * DVector::from_vec(v);
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] - 1.0).abs() < 1e-14);
    }

    fn truth_samples(count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (0..count).map(|_| random_vec(&mut rng, 120)).collect()
    }

    #[test]
    fn vanishing_noise_reproduces_truth() {
        let hop = ObservationOperator::x_every_second(40, Parity::Even);
        let r = ObsErrorCov::scaled_identity(20, 1e-30).unwrap();
        let truth = truth_samples(5);
        let obs = generate_observations(&truth, &hop, &r, 0.05, 5, 3).unwrap();
        for (y, z) in obs.values.iter().zip(&truth) {
            for (a, b) in y.iter().zip(hop.apply(z).unwrap()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(obs.times.len(), 5);
        assert!((obs.times[4] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn observation_streams_are_seeded() {
        let hop = ObservationOperator::x_every_second(40, Parity::Even);
        let r = ObsErrorCov::identity(20);
        let truth = truth_samples(3);
        let a = generate_observations(&truth, &hop, &r, 0.05, 3, 11).unwrap();
        let b = generate_observations(&truth, &hop, &r, 0.05, 3, 11).unwrap();
        let c = generate_observations(&truth, &hop, &r, 0.05, 3, 12).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert!(matches!(
            generate_observations(&truth, &hop, &r, 0.05, 4, 11),
            Err(Error::ShortTrajectory { available: 3, required: 4 })
        ));
    }

    #[test]
    fn observation_noise_has_unit_variance() {
        let hop = ObservationOperator::x_every_second(40, Parity::Even);
        let r = ObsErrorCov::identity(20);
        let truth = vec![vec![0.0; 120]; 4000];
        let obs = generate_observations(&truth, &hop, &r, 0.05, 4000, 5).unwrap();
        for c in 0..20 {
            let vals: Vec<f64> = obs.values.iter().map(|y| y[c]).collect();
            let mean = vals.iter().sum::<f64>() / 4000.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3999.0;
            assert!((0.9..=1.1).contains(&var), "component {c}: {var}");
        }
    }

    #[test]
    fn cost_examples() {
        let hop = ObservationOperator::custom(1, vec![vec![(0, 1.0)]]).unwrap();
        let r = ObsErrorCov::identity(1);
        assert_eq!(obs_cost(&hop, &r, &[1.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(obs_cost(&hop, &r, &[3.0], &[3.0]).unwrap(), 0.0);
        let r2 = ObsErrorCov::scaled_identity(1, 2.0).unwrap();
        assert!((obs_cost(&hop, &r2, &[1.0], &[3.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cost_is_invariant_under_orthogonal_change_of_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = &a * a.transpose() + DMatrix::identity(3, 3);
        let q = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let z = random_vec(&mut rng, 5);
        let s1 = obs_cost(
            &ObservationOperator::from_dense(&h).unwrap(),
            &ObsErrorCov::new(r.clone()).unwrap(),
            y.as_slice(),
            &z,
        )
        .unwrap();
        let r_rot = &q * &r * q.transpose();
        let r_rot = 0.5 * (&r_rot + r_rot.transpose());
        let s2 = obs_cost(
            &ObservationOperator::from_dense(&(&q * &h)).unwrap(),
            &ObsErrorCov::new(r_rot).unwrap(),
            (&q * &y).as_slice(),
            &z,
        )
        .unwrap();
        assert!((s1 - s2).abs() < 1e-12 * s1.abs().max(1.0));
    }

    #[test]
    fn gradient_examples() {
        let hop = ObservationOperator::custom(1, vec![vec![(0, 1.0)]]).unwrap();
        let r = ObsErrorCov::identity(1);
        let ens = Ensemble::new(vec![vec![0.0], vec![2.0]]).unwrap();
        let g = potential_gradient(&ens, &hop, &r, &[1.0]).unwrap();
        assert_eq!(g, vec![vec![-0.5], vec![0.5]]);

        let fit = Ensemble::new(vec![vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert!(potential_gradient(&fit, &hop, &r, &[1.0]).unwrap().iter().all(|g| g[0] == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dim = 9;
        let m = 4;
        let h = DMatrix::from_fn(4, dim, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let hop = ObservationOperator::from_dense(&h).unwrap();
        let r = ObsErrorCov::new(&a * a.transpose() + DMatrix::identity(4, 4)).unwrap();
        let y = random_vec(&mut rng, 4);
        let ens = Ensemble::new((0..m).map(|_| random_vec(&mut rng, dim)).collect()).unwrap();
        let g = potential_gradient(&ens, &hop, &r, &y).unwrap();
        let step = 1e-6;
        for i in 0..m {
            for a in 0..dim {
                let mut plus = ens.clone();
                plus.members_mut()[i][a] += step;
                let mut minus = ens.clone();
                minus.members_mut()[i][a] -= step;
                let fd = (potential(&plus, &hop, &r, &y).unwrap() - potential(&minus, &hop, &r, &y).unwrap())
                    / (2.0 * step);
                assert!((fd - g[i][a]).abs() <= 1e-6 * g[i][a].abs().max(1.0), "member {i} comp {a}");
            }
        }
    }

    #[test]
    fn gradient_sum_is_mean_innovation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hop = ObservationOperator::mixed_every_second(10, Parity::Even);
        let r = ObsErrorCov::scaled_identity(5, 0.5).unwrap();
        let y = random_vec(&mut rng, 5);
        let ens = Ensemble::new((0..6).map(|_| random_vec(&mut rng, 30)).collect()).unwrap();
        let g = potential_gradient(&ens, &hop, &r, &y).unwrap();
        let mut innov = hop.apply(&ens.mean()).unwrap();
        innov.iter_mut().zip(&y).for_each(|(a, b)| *a -= b);
        let expected: Vec<f64> = hop.transpose_apply(&r.solve(&innov)).iter().map(|v| 6.0 * v).collect();
        for a in 0..30 {
            let total: f64 = g.iter().map(|gi| gi[a]).sum();
            assert!((total - expected[a]).abs() < 1e-12);
        }
    }
}
