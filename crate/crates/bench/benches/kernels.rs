use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fpk_core::coefficients::{maximal_function, random_test_field, CoefficientField};
use fpk_core::fpe::{self, FpeProblem};
use fpk_core::simulate::{evolve_coupled, InitialPairs, SdeScheme};
use fpk_core::transport::{solve_entropic, solve_exact, CostSpec};
use fpk_core::{BoxGrid, GridDensity, ParticleCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, rng: &mut ChaCha8Rng) -> ParticleCloud {
    let points = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    ParticleCloud::uniform(2, points, 0.0).unwrap()
}

fn transport(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = CostSpec::log_squared(0.2).unwrap();
    let mut group = c.benchmark_group("transport");
    group.sample_size(10);
    for n in [50, 200] {
        let (mu, nu) = (cloud(n, &mut rng), cloud(n, &mut rng));
        group.bench_with_input(BenchmarkId::new("simplex", n), &n, |b, _| {
            b.iter(|| solve_exact(black_box(&mu), &nu, &spec).unwrap().cost)
        });
        group.bench_with_input(BenchmarkId::new("sinkhorn", n), &n, |b, _| {
            b.iter(|| solve_entropic(black_box(&mu), &nu, &spec, 0.1, 100_000).unwrap().cost)
        });
    }
    group.finish();
}

fn maximal(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("maximal_function");
    for (label, grid) in [
        ("1d-1024", BoxGrid::line(-1.0, 1.0, 1024).unwrap()),
        ("2d-64", BoxGrid::square(-1.0, 1.0, 64).unwrap()),
    ] {
        let f = random_test_field(&grid, &mut rng);
        group.bench_function(label, |b| b.iter(|| maximal_function(black_box(&f))));
    }
    group.finish();
}

fn linear_field(d: usize) -> CoefficientField {
    CoefficientField::with_constant_sigma("linear", d, 1.0, 1.0, |_, x, out| {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -v;
        }
    })
}

fn fpe_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("fpe");
    group.sample_size(10);
    for (label, grid) in [
        ("1d-800", BoxGrid::line(-4.0, 4.0, 800).unwrap()),
        ("2d-80", BoxGrid::square(-4.0, 4.0, 80).unwrap()),
    ] {
        let d = grid.dim();
        let init = GridDensity::gaussian(grid, &vec![0.0; d], 0.5).unwrap();
        let problem = FpeProblem::new(linear_field(d), init, 1.0, 0.1);
        group.bench_function(label, |b| {
            b.iter(|| fpe::solve_auto(black_box(&problem), &[0.1]).unwrap())
        });
    }
    group.finish();
}

fn sde(c: &mut Criterion) {
    let field = linear_field(1);
    let pairs = InitialPairs::gaussian_diagonal(1, &[0.0], 0.5, 10_000, 3);
    let scheme = SdeScheme::new(1.0, 1000, 1000, 4).unwrap();
    let mut group = c.benchmark_group("sde");
    group.sample_size(10);
    group.bench_function("coupled-1e4x1e3", |b| {
        b.iter(|| {
            evolve_coupled(&field, &field, black_box(&pairs), &scheme)
                .unwrap()
                .trajectories
        })
    });
    group.finish();
}

criterion_group!(benches, transport, maximal, fpe_step, sde);
criterion_main!(benches);
