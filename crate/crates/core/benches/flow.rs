//! Sequential vs rayon backends on the per-particle hot loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use pushflow::divergence::{kl_terms, ReferenceDensity};
use pushflow::ensemble::{sample_gaussian, sample_uniform, ParticleEnsemble};
use pushflow::exec;
use pushflow::flow::{wgf_step, FlowConfig};
use pushflow::forward::{push_forward, EllipticGrid2D, LinearMap};

const BACKENDS: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn reference(n: usize) -> ReferenceDensity {
    let cov = DMatrix::from_diagonal_element(2, 2, 1.0);
    ReferenceDensity::from_samples(sample_gaussian(&[0.0, 0.0], &cov, n, 1).unwrap())
}

fn ensemble(n: usize) -> ParticleEnsemble {
    sample_uniform(&[-2.0, -2.0], &[2.0, 2.0], n, 2).unwrap()
}

fn bench_kl_terms(c: &mut Criterion) {
    let mut g = c.benchmark_group("kl_terms");
    for n in [500, 2000] {
        let (ys, reference) = (ensemble(n), reference(n));
        for (name, seq) in BACKENDS {
            exec::set_sequential(seq);
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| kl_terms(black_box(&ys), &reference, 0.1).unwrap())
            });
        }
    }
    exec::set_sequential(false);
    g.finish();
}

fn bench_wgf_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("wgf_step_linear");
    let map = LinearMap::diag(&[2.0, 0.75]).unwrap();
    let cfg = FlowConfig::kl(0.05, 1);
    let (us, reference) = (ensemble(1000), reference(1000));
    for (name, seq) in BACKENDS {
        exec::set_sequential(seq);
        g.bench_function(name, |b| b.iter(|| wgf_step(black_box(&us), &map, &reference, &cfg).unwrap()));
    }
    exec::set_sequential(false);
    g.finish();
}

fn bench_elliptic2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("elliptic2d_push_forward");
    g.sample_size(10);
    let grid = EllipticGrid2D::new(32, vec![[0.5, 0.25], [0.5, 0.75]]).unwrap();
    let us = ensemble(64);
    for (name, seq) in BACKENDS {
        exec::set_sequential(seq);
        g.bench_function(name, |b| b.iter(|| push_forward(&grid, black_box(&us)).unwrap()));
    }
    exec::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_kl_terms, bench_wgf_step, bench_elliptic2d);
criterion_main!(benches);
