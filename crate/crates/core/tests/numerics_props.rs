mod common;

use common::*;
use nsc::numerics::{project_spectral_ball, sigma_min, singular_values, solve_least_squares, spectral_norm};
use nsc::Mat;
use proptest::prelude::*;

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn norm_ordering(m in any_matrix(6)) {
        let s = spectral_norm(&m).unwrap();
        let smin = sigma_min(&m).unwrap();
        prop_assert!(smin >= 0.0);
        prop_assert!(s >= smin);
    }

    #[test]
    fn singular_values_match_nalgebra(m in any_matrix(6)) {
        let mut ours = singular_values(&m).unwrap();
        let mut theirs: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        ours.sort_by(|a, b| b.total_cmp(a));
        theirs.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(ours.len(), theirs.len());
        let top = theirs[0].max(1e-300);
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!((a - b).abs() <= 1e-10 * top, "{a} vs {b}");
        }
    }

    #[test]
    fn projection_idempotent_and_within_radius(m in any_matrix(5), r in 0.01f64..4.0) {
        let p = project_spectral_ball(&m, r);
        prop_assert!(spectral_norm(&p).unwrap() <= r * (1.0 + 1e-12));
        let pp = project_spectral_ball(&p, r);
        prop_assert!(max_abs_diff(&p, &pp) <= 1e-12 * (1.0 + r));
    }

    #[test]
    fn projection_is_non_expansive(
        (a, b) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c, 3.0), matrix(r, c, 3.0))),
        r in 0.01f64..4.0,
    ) {
        let d_before = (&a - &b).frobenius_norm();
        let d_after = (&project_spectral_ball(&a, r) - &project_spectral_ball(&b, r)).frobenius_norm();
        prop_assert!(d_after <= d_before * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn projection_matches_nalgebra_clipping(m in any_matrix(5), r in 0.01f64..4.0) {
        let mut svd = to_na(&m).svd(true, true);
        svd.singular_values.apply(|s| *s = s.min(r));
        let oracle = from_na(&svd.recompose().unwrap());
        prop_assert!(max_abs_diff(&project_spectral_ball(&m, r), &oracle) <= 1e-10 * (1.0 + r));
    }

    #[test]
    fn least_squares_residual_is_orthogonal(
        (a, b) in (1usize..4, 0usize..4, 1usize..4)
            .prop_flat_map(|(r, extra, br)| (matrix(r, r + extra + 1, 2.0), matrix(br, r + extra + 1, 2.0))),
    ) {
        prop_assume!(sigma_min(&a).unwrap() > 1e-3);
        let x = solve_least_squares(&a, &b).unwrap();
        let resid = &(&x * &a) - &b;
        let ortho = &resid * &a.transpose();
        prop_assert!(ortho.max_abs() <= 1e-8 * (1.0 + b.max_abs()), "{:?}", ortho);
    }
}

#[test]
fn least_squares_recovers_planted_solution() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let a = Mat::from_row_major(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        if sigma_min(&a).unwrap() < 1e-2 {
            continue;
        }
        let x0 = Mat::from_row_major(2, 3, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let b = &x0 * &a;
        let x = solve_least_squares(&a, &b).unwrap();
        assert!(max_abs_diff(&x, &x0) <= 1e-8);
    }
}
