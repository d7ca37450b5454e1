use proptest::prelude::*;

use superflow::expr::Expr;
use superflow::grid::{Boundary, Grid, GridFunction};
use superflow::models::wright_fisher;
use superflow::particles::{stream_rng, OffspringLaw};
use superflow::pde;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn offspring_law_has_target_moments(beta in -5.0f64..5.0, alpha in 0.05f64..5.0, n in 20.0f64..2000.0) {
        let law = OffspringLaw::new(beta, alpha, n).unwrap();
        let (m, v) = law.moments();
        prop_assert!((m - (1.0 + beta / n)).abs() < 1e-12);
        prop_assert!((v - 2.0 * alpha).abs() < 1e-9);
        for p in [law.p0, law.p1, law.pk] {
            prop_assert!((0.0..=1.0).contains(&p));
        }
        prop_assert!((law.p0 + law.p1 + law.pk - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offspring_samples_stay_in_support(seed in any::<u64>()) {
        let law = OffspringLaw::new(1.0, 2.5, 100.0).unwrap();
        let mut rng = stream_rng(seed, 0);
        for _ in 0..200 {
            let k = law.sample(&mut rng);
            prop_assert!(k == 0 || k == 1 || k == law.k);
        }
    }

    #[test]
    fn constants_fold(c in -1e3f64..1e3) {
        let e = Expr::parse(&format!("({c}) * 2 - ({c})")).unwrap();
        prop_assert_eq!(e.as_constant(), Some(c * 2.0 - c));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn expectation_semigroup_is_linear_and_positive(c1 in 0.0f64..3.0, c2 in 0.0f64..3.0, x0 in 0.2f64..0.8, t in 0.1f64..1.5) {
        let m = wright_fisher(2.0).build().unwrap();
        let grid = Grid::on(m.truncation(), 201).unwrap();
        let bump = |c: f64| (-((c - x0) / 0.1).powi(2)).exp();
        let g1 = GridFunction::from_fn(grid, Boundary::DirichletZero, bump).unwrap();
        let g2 = GridFunction::from_fn(grid, Boundary::DirichletZero, |x| x * (1.0 - x)).unwrap();
        let sum = g1.zip_with(&g2, |a, b| c1 * a + c2 * b).unwrap();
        let s1 = pde::expectation_semigroup(&m.q, &g1, t, None).unwrap();
        let s2 = pde::expectation_semigroup(&m.q, &g2, t, None).unwrap();
        let s = pde::expectation_semigroup(&m.q, &sum, t, None).unwrap();
        for i in 0..grid.nodes {
            prop_assert!(s1.values[i] >= -1e-12);
            prop_assert!((s.values[i] - c1 * s1.values[i] - c2 * s2.values[i]).abs() < 1e-9 * (1.0 + s.values[i].abs()));
        }
    }
}
