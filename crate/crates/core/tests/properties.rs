use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use menkf::cli;
use menkf::experiment::{field_rmse, Field};
use menkf::filters::{kalman_oracle, mollifier_weights};
use menkf::stats::{inflate, Ensemble, InflationMask, InflationSpec, LocalizationSpec, Taper};

fn ensemble(values: &[f64], m: usize) -> Ensemble {
    let dim = values.len() / m;
    Ensemble::new(values.chunks_exact(dim).map(<[f64]>::to_vec).collect()).unwrap()
}

proptest! {
    #[test]
    fn mollifier_mass_is_one_per_observation(half_width in 2usize..12, count in 1usize..6) {
        let dt = 0.0025;
        let eps = half_width as f64 * dt;
        let spacing = 2 * half_width + 2;
        let n_steps = spacing * (count + 1);
        let times: Vec<f64> = (1..=count).map(|j| (j * spacing) as f64 * dt).collect();
        let w = mollifier_weights(n_steps, dt, &times, eps).unwrap();
        for j in 0..count {
            prop_assert!((w.total(j) - 1.0).abs() < 1e-12);
            let (lo, hi) = w.support(j);
            let kj = (j + 1) * spacing;
            prop_assert!(lo + half_width >= kj && hi <= kj + half_width);
        }
    }

    #[test]
    fn taper_is_symmetric_and_bounded(radius in 0.5f64..20.0, a in 0usize..120, b in 0usize..120) {
        let taper = Taper::new(40, 3, &LocalizationSpec::with_radius(radius)).unwrap();
        let w = taper.weight(a, b);
        prop_assert_eq!(w, taper.weight(b, a));
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(taper.weight(a, a), 1.0);
    }

    #[test]
    fn slow_inflation_keeps_mean_and_fast_fields(
        values in prop::collection::vec(-5.0f64..5.0, 6 * 12),
        factor in 1.0f64..1.5,
    ) {
        let mut ens = ensemble(&values, 6);
        let before = ens.clone();
        inflate(&mut ens, &InflationSpec::new(factor, InflationMask::SlowOnly).unwrap(), 4);
        let (m0, m1) = (before.mean(), ens.mean());
        for a in 0..12 {
            prop_assert!((m0[a] - m1[a]).abs() < 1e-12);
        }
        for i in 0..6 {
            for a in 0..12 {
                let expected = if a < 4 { m0[a] + factor * (before.member(i)[a] - m0[a]) } else { before.member(i)[a] };
                prop_assert!((ens.member(i)[a] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kalman_update_never_increases_variance(
        entries in prop::collection::vec(-2.0f64..2.0, 9),
        obs_var in 0.1f64..4.0,
        y in -3.0f64..3.0,
    ) {
        let a = DMatrix::from_column_slice(3, 3, &entries);
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
        let h = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.5]);
        let r = DMatrix::from_element(1, 1, obs_var);
        let (_, pa) = kalman_oracle(&DVector::zeros(3), &cov, &h, &r, &DVector::from_element(1, y)).unwrap();
        prop_assert!((&pa - pa.transpose()).amax() < 1e-12);
        let drop = &cov - &pa;
        prop_assert!(drop.symmetric_eigenvalues().min() > -1e-10);
    }

    #[test]
    fn rmse_of_constant_offset_is_the_offset(values in prop::collection::vec(-10.0f64..10.0, 30), d in -3.0f64..3.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + d).collect();
        for field in [Field::X, Field::H, Field::U] {
            prop_assert!((field_rmse(&shifted, &values, 10, field).unwrap() - d.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(cli::fmt_f64(v).parse::<f64>().unwrap(), v);
    }
}
