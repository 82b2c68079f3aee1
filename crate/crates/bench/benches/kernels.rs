use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kkl_bench::{benchmark_banks, lattice_points};
use kkl_core::contraction::{solve_psi, PSI_TOL};
use kkl_core::filterbank::cosimulate;
use kkl_core::kdtree::KdTree;
use kkl_core::{ContractionMap, DynamicalSystem, PhiFamily};

fn cosim(c: &mut Criterion) {
    let sys = DynamicalSystem::duffing();
    let mut g = c.benchmark_group("cosimulate_1s");
    for (name, bank) in benchmark_banks() {
        g.bench_function(name, |b| {
            b.iter(|| {
                cosimulate(&sys, &bank, &[1.0, -0.5], &[0.0; 3], 0.0, 1.0, 1e-3, None, |_, _, _| {}).unwrap()
            })
        });
    }
    g.finish();
}

fn kdtree(c: &mut Criterion) {
    let mut g = c.benchmark_group("kdtree_nearest");
    for n in [10_000usize, 40_000, 160_000] {
        let pts = lattice_points(n, 3, 5.0);
        let tree = KdTree::build(&pts, 3);
        let queries = lattice_points(256, 3, 5.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                for q in &queries {
                    black_box(tree.nearest(q));
                }
            })
        });
    }
    g.finish();
}

fn phi(c: &mut Criterion) {
    let mut g = c.benchmark_group("eval_phis");
    for m in [1usize, 2, 3] {
        let fam = PhiFamily::new(DynamicalSystem::duffing(), ContractionMap::tanh_blend(-5.0, -0.5).unwrap(), m).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| fam.eval_phis(black_box(&[0.7, -0.4])).unwrap())
        });
    }
    g.finish();
}

fn psi(c: &mut Criterion) {
    let cubic = ContractionMap::custom(
        "cubic",
        |z, y| -z - 0.1 * z * z * z + y,
        |z, _| -1.0 - 0.3 * z * z,
        |_, _| 1.0,
        |j, z, y| match j {
            0 => -z - 0.1 * z * z * z + y,
            1 => -1.0 - 0.3 * z * z,
            2 => -0.6 * z,
            3 => -0.6,
            _ => 0.0,
        },
        kkl_core::DeclaredBounds { alpha: 1.0, beta: f64::INFINITY, gamma: 1.0 },
    )
    .unwrap();
    c.bench_function("solve_psi_cubic", |b| b.iter(|| solve_psi(&cubic, black_box(3.7), PSI_TOL).unwrap()));
}

criterion_group!(benches, cosim, kdtree, phi, psi);
criterion_main!(benches);
