//! Sequential vs. rayon-backed sweeps over small experiment batches.
//! Without the `parallel` feature both arms run sequentially.

use std::hint::black_box;

use bilevel_dual::experiments::invopt::run_invopt_instance;
use bilevel_dual::experiments::routing::run_stackelberg_cell;
use bilevel_dual::homotopy::{DriverOptions, Schedule};
use bilevel_dual::sweep::{run_indexed, run_sequential};
use criterion::{criterion_group, criterion_main, Criterion};

const JOBS: usize = 4;

fn invopt(c: &mut Criterion) {
    let (s, o) = (Schedule::default(), DriverOptions::default());
    let job = |i: usize| run_invopt_instance(i, 100 + i as u64, 30, false, &s, &o).theta_hat;
    let mut g = c.benchmark_group("invopt_8x30");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| black_box(run_sequential(8, job))));
    g.bench_function("parallel", |b| b.iter(|| black_box(run_indexed(8, JOBS, job))));
    g.finish();
}

fn stackelberg(c: &mut Criterion) {
    let (s, o) = (Schedule::default(), DriverOptions::default());
    let cells: Vec<(f64, f64)> = [0.2, 0.5, 0.8]
        .iter()
        .flat_map(|&a| [0.3, 0.7].map(move |p| (a, p)))
        .collect();
    let job = |i: usize| run_stackelberg_cell(cells[i].0, cells[i].1, &s, &o).poa_dual;
    let mut g = c.benchmark_group("stackelberg_6_cells");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| black_box(run_sequential(cells.len(), job))));
    g.bench_function("parallel", |b| b.iter(|| black_box(run_indexed(cells.len(), JOBS, job))));
    g.finish();
}

criterion_group!(benches, invopt, stackelberg);
criterion_main!(benches);
