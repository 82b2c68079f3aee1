use kkl_core::dynsys::{
    check_forward_invariance, flow_endpoint, injectivity_margin, integrate_flow, lie_derivatives,
};
use kkl_core::{DynamicalSystem, StateBox};
use proptest::prelude::*;

fn decay() -> DynamicalSystem {
    DynamicalSystem::new("decay", 1, |x, dx| dx[0] = -x[0], |x| x[0])
}

fn endpoint_error(dt: f64) -> f64 {
    let x = flow_endpoint(&decay(), &[1.0], 1.0, dt).unwrap();
    (x[0] - (-1.0f64).exp()).abs()
}

#[test]
fn rk4_is_fourth_order() {
    for dt in [0.1, 0.05, 0.025] {
        let ratio = endpoint_error(dt) / endpoint_error(dt / 2.0);
        assert!((14.0..=18.0).contains(&ratio), "dt {dt}: ratio {ratio}");
    }
}

#[test]
fn exponential_endpoint_at_default_step() {
    assert!(endpoint_error(1e-3) < 1e-9);
}

// h = x1, L h = x2, L^2 h = -0.2 x1 - x1^3, L^3 h = -(0.2 + 3 x1^2) x2.
fn duffing_symbols(x: &[f64]) -> [f64; 4] {
    let (a, b) = (x[0], x[1]);
    [a, b, -0.2 * a - a * a * a, -(0.2 + 3.0 * a * a) * b]
}

#[test]
fn lie_derivatives_match_hand_symbols() {
    let sys = DynamicalSystem::duffing();
    let mut worst: f64 = 0.0;
    for x in StateBox::cube(2, 2.0).unwrap().grid_points(20) {
        let num = lie_derivatives(&sys, &x, 4, 1e-2).unwrap();
        for (n, e) in num.iter().zip(duffing_symbols(&x)) {
            worst = worst.max((n - e).abs() / e.abs().max(1.0));
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn energy_level_sets_bound_the_reachable_box() {
    // E = x2^2/2 + 0.1 x1^2 + x1^4/4 peaks at the corners of [-2, 2]^2 with E = 6.4.
    let e: f64 = 6.4;
    let x1_max = ((-0.4 + (0.16 + 16.0 * e).sqrt()) / 2.0).sqrt();
    let x2_max = (2.0 * e).sqrt();
    let sys = DynamicalSystem::duffing();
    let x0 = StateBox::cube(2, 2.0).unwrap();
    let domain = StateBox::cube(2, 5.0).unwrap();
    let rep = check_forward_invariance(&sys, &x0, &domain, 50.0, 21, 1e-3).unwrap();
    assert!(rep.pass);
    assert!((rep.visited.hi[0] - x1_max).abs() < 1e-3, "{:?}", rep.visited);
    assert!((rep.visited.lo[0] + x1_max).abs() < 1e-3);
    assert!((rep.visited.hi[1] - x2_max).abs() < 1e-3);
    assert!((rep.visited.lo[1] + x2_max).abs() < 1e-3);

    let tight = rep.visited.inflate(0.05);
    let again = check_forward_invariance(&sys, &x0, &tight, 50.0, 21, 1e-3).unwrap();
    assert!(again.pass);
}

#[test]
fn duffing_h2_is_the_identity() {
    let sys = DynamicalSystem::duffing();
    let pts: Vec<(Vec<f64>, Vec<f64>)> = StateBox::cube(2, 2.0)
        .unwrap()
        .grid_points(50)
        .into_iter()
        .map(|x| {
            let h = lie_derivatives(&sys, &x, 2, 1e-2).unwrap();
            (x, h)
        })
        .collect();
    let m = injectivity_margin(&pts, 0.1).unwrap();
    assert!((m - 1.0).abs() < 1e-9, "margin {m}");
}

#[test]
fn backward_trajectory_is_stored_in_time_order() {
    let traj = integrate_flow(&DynamicalSystem::duffing(), &[1.0, 0.5], 2.0, 0.0, 1e-2).unwrap();
    assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(traj.states.last().unwrap(), &vec![1.0, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_then_backward_returns(x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, t in 0.1..5.0f64) {
        let dt = 1e-2;
        let sys = DynamicalSystem::duffing();
        let fwd = flow_endpoint(&sys, &[x1, x2], t, dt).unwrap();
        let back = flow_endpoint(&sys, &fwd, -t, dt).unwrap();
        let err = ((back[0] - x1).powi(2) + (back[1] - x2).powi(2)).sqrt();
        prop_assert!(err <= 10.0 * dt.powi(4) * t, "err {} over t {}", err, t);
    }

    #[test]
    fn margin_ignores_point_order(
        pts in prop::collection::vec(((-3.0..3.0f64, -3.0..3.0f64), (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)), 3..40),
        seed in any::<u64>(),
    ) {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = pts
            .iter()
            .map(|((a, b), (c, d, e))| (vec![*a, *b], vec![*c, *d, *e]))
            .collect();
        let mut shuffled = pairs.clone();
        // Fisher-Yates driven by a simple LCG so the permutation depends only on the seed.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = injectivity_margin(&pairs, 0.05);
        let b = injectivity_margin(&shuffled, 0.05);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }
}
