use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use laughlin_bench::{disk_density, quadratic_bathtub};
use laughlin_core::fields::{Grid2D, LogConvolver, PointChargeSet};
use laughlin_core::meanfield::{minimize_electrostatic, ChargeEnvironment, SolverOptions};
use laughlin_core::plasma::{hamiltonian, run_chains, PlasmaState, SamplerConfig};
use laughlin_core::potentials::Potential;
use laughlin_core::quasiholes::{discretize_lattice, Complement};

fn log_convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_convolution");
    for n in [64usize, 128, 256] {
        let g = Grid2D::centered(3.0, n).unwrap();
        let conv = LogConvolver::new(&g);
        let rho = disk_density(g);
        group.bench_with_input(BenchmarkId::from_parameter(n), &rho, |b, rho| {
            b.iter(|| conv.potential_values(black_box(rho.values())))
        });
    }
    group.finish();
}

fn bathtub(c: &mut Criterion) {
    let mut group = c.benchmark_group("bathtub");
    for n in [128usize, 512] {
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| quadratic_bathtub(3.0, black_box(n)))
        });
    }
    group.finish();
}

fn lattice_layout(c: &mut Criterion) {
    let bt = quadratic_bathtub(2.2, 256);
    let region = Complement::from_bathtub(&bt, 2f64.sqrt() + 0.5).unwrap();
    let mut group = c.benchmark_group("lattice_layout");
    for n in [1_000usize, 100_000] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| discretize_lattice(&region, n).unwrap())
        });
    }
    group.finish();
}

fn electrostatic(c: &mut Criterion) {
    let g = Grid2D::centered(2.5, 64).unwrap();
    let env = ChargeEnvironment::empty(2, 100);
    let mut group = c.benchmark_group("electrostatic");
    group.sample_size(10);
    group.bench_function("circular_64", |b| {
        b.iter(|| minimize_electrostatic(&env, &g, &SolverOptions::default()).unwrap())
    });
    group.finish();
}

fn plasma(c: &mut Criterion) {
    let charges = PointChargeSet::empty();
    let positions: Vec<[f64; 2]> = (0..64)
        .map(|k| {
            let t = k as f64 * 2.399_963;
            let r = (k as f64 + 0.5).sqrt() / 8.0 * 1.4;
            [r * t.cos(), r * t.sin()]
        })
        .collect();
    let state = PlasmaState::new(positions, &charges).unwrap();
    c.bench_function("hamiltonian_64", |b| {
        b.iter(|| hamiltonian(black_box(&state), &charges, 2))
    });

    let g = Grid2D::centered(2.5, 80).unwrap();
    let u = Potential::radial_power(2.0);
    let cfg = SamplerConfig {
        steps: 2_000,
        burn_in: 200,
        seed: 1,
        n_chains: 2,
        ..SamplerConfig::default()
    };
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    group.bench_function("n64_2000_sweeps", |b| {
        b.iter(|| run_chains(&charges, 2, 64, &cfg, &g, &u, &[]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, log_convolution, bathtub, lattice_layout, electrostatic, plasma);
criterion_main!(benches);
