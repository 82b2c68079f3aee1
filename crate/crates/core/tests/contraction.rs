use kkl_core::contraction::{estimate_bounds, kappa, solve_psi, solve_psi_from, PSI_TOL};
use kkl_core::ContractionMap;
use proptest::prelude::*;

fn builtins() -> Vec<ContractionMap> {
    vec![
        ContractionMap::linear(-5.0).unwrap(),
        ContractionMap::linear(-0.5).unwrap(),
        ContractionMap::tanh_blend(-5.0, -0.5).unwrap(),
    ]
}

#[test]
fn psi_residual_on_a_thousand_outputs() {
    for cm in builtins() {
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let y = -5.0 + 10.0 * i as f64 / 999.0;
            let psi = solve_psi(&cm, y, PSI_TOL).unwrap();
            worst = worst.max(cm.sigma(psi, y).abs());
        }
        assert!(worst < 1e-10, "{}: {worst}", cm.name());
    }
}

#[test]
fn tanh_blend_bound_estimates() {
    let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
    let r = estimate_bounds(&cm, (-10.0, 10.0), (0.0, 0.0), (2001, 2));
    assert!(r.pass);
    assert!((r.alpha_hat - 0.5).abs() < 1e-3, "{r:?}");
    assert!((r.beta_hat - 5.0).abs() < 1e-3, "{r:?}");
    assert!(r.alpha_hat <= r.beta_hat);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kappa_inverts_the_slope_at_psi(y in -5.0..5.0f64) {
        for cm in builtins() {
            let psi = solve_psi(&cm, y, PSI_TOL).unwrap();
            let k = kappa(&cm, y).unwrap();
            prop_assert!((k * cm.dsigma_dz(psi, y) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn z_partials_match_finite_differences(z in -4.0..4.0f64, y in -4.0..4.0f64) {
        let h = 1e-4;
        for cm in builtins() {
            for j in 1..=3 {
                let fd = (cm.z_partial(j - 1, z + h, y) - cm.z_partial(j - 1, z - h, y)) / (2.0 * h);
                let exact = cm.z_partial(j, z, y);
                prop_assert!(
                    (fd - exact).abs() <= 1e-5 * exact.abs().max(1.0),
                    "{} order {}: fd {} exact {}", cm.name(), j, fd, exact
                );
            }
        }
    }

    #[test]
    fn psi_ignores_the_starting_side(y in -5.0..5.0f64, offset in 0.5..50.0f64) {
        for cm in builtins() {
            let above = solve_psi_from(&cm, y, y + offset, PSI_TOL).unwrap();
            let below = solve_psi_from(&cm, y, y - offset, PSI_TOL).unwrap();
            prop_assert!((above - below).abs() < 1e-10, "{} vs {}", above, below);
        }
    }

    #[test]
    fn sigma_is_decreasing_in_z(z1 in -20.0..20.0f64, gap in 1e-3..10.0f64, y in -5.0..5.0f64) {
        for cm in builtins() {
            prop_assert!(cm.sigma(z1, y) > cm.sigma(z1 + gap, y));
        }
    }
}
