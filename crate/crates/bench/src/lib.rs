//! Fixtures shared by the benchmarks.

use kkl_core::{BankSpec, ContractionSpec, FilterBank};

/// Deterministic points in `[-r, r]^dim` from a 64-bit LCG, so benchmarks need no RNG crate.
pub fn lattice_points(n: usize, dim: usize, r: f64) -> Vec<Vec<f64>> {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                    r * (2.0 * u - 1.0)
                })
                .collect()
        })
        .collect()
}

/// The fast linear, slow linear and tanh-blend banks with gains (2, 4, 6).
pub fn benchmark_banks() -> Vec<(&'static str, FilterBank)> {
    let lambdas = vec![2.0, 4.0, 6.0];
    let specs = [
        ("fast", BankSpec::Linear { a: -5.0, lambdas: lambdas.clone() }),
        ("slow", BankSpec::Linear { a: -0.5, lambdas: lambdas.clone() }),
        (
            "nonlinear",
            BankSpec::Nonlinear {
                sigma: ContractionSpec::TanhBlend { a_fast: -5.0, a_slow: -0.5 },
                lambdas,
                k: 1.0,
            },
        ),
    ];
    specs
        .into_iter()
        .map(|(n, s)| (n, s.build().expect("valid bank")))
        .collect()
}
