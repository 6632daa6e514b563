//! Benchmark fixtures and groups. `benches/pipeline.rs` only wires them up.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion};
use simkrig::emulator::train_per_step;
use simkrig::simreg::ContrastObjective;
use simkrig::synth::co2_box;
use simkrig::{
    estimate_params, fit_gp, generate_analytical, generate_functional_sim, make_weights, maximin_lhd, scale_to_box,
    to_fourier, train, CurveSet, DesignMatrix, EstimationConfig, FitConfig, SimSpec, SurrogateConfig,
};

/// 30-run maximin design on the CO2 box and its simulated curves.
pub fn co2_training(j: usize) -> (DesignMatrix, CurveSet) {
    let design = scale_to_box(&maximin_lhd(30, 3, 1, 20).unwrap(), &co2_box()).unwrap();
    let curves = generate_functional_sim(&SimSpec::co2_default(j, 0.01, 1), &design).unwrap();
    (design, curves)
}

pub fn registration(c: &mut Criterion) {
    let mut g = c.benchmark_group("registration");
    let (curves, _) = generate_analytical(101, 101, 0.0, 0).unwrap();
    g.bench_function("dft 101x101", |b| b.iter(|| to_fourier(black_box(&curves)).unwrap()));

    let table = to_fourier(&curves).unwrap();
    let weights = make_weights(101, 1.5).unwrap();
    let obj = ContrastObjective::new(&table, &weights, None).unwrap();
    let x: Vec<f64> = (0..obj.dims()).map(|i| if i % 2 == 0 { 0.7 } else { 0.3 }).collect();
    let mut grad = vec![0.0; x.len()];
    g.bench_function("contrast + gradient", |b| b.iter(|| obj.evaluate(black_box(&x), Some(&mut grad))));

    g.sample_size(10);
    g.bench_function("estimate n=101 J=101", |b| {
        b.iter(|| estimate_params(black_box(&curves), &EstimationConfig::default()).unwrap())
    });
    g.finish();
}

pub fn kriging(c: &mut Criterion) {
    let mut g = c.benchmark_group("kriging");
    g.sample_size(10);
    let (design, curves) = co2_training(55);
    let y: Vec<f64> = curves.values.column(20).iter().copied().collect();
    g.bench_function("fit n=30 d=3", |b| b.iter(|| fit_gp(black_box(&design), &y, &FitConfig::default()).unwrap()));
    g.finish();
}

/// Surrogate versus per-step kriging training as the time grid grows.
pub fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("train vs J");
    g.sample_size(10);
    for j in [55, 110, 220] {
        let (design, curves) = co2_training(j);
        g.bench_with_input(BenchmarkId::new("sim", j), &j, |b, _| {
            b.iter(|| train(&design, &curves, &SurrogateConfig::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("per_step", j), &j, |b, _| {
            b.iter(|| train_per_step(&design, &curves, &FitConfig::default()).unwrap())
        });
    }
    g.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    registration(c);
    kriging(c);
    scaling(c);
}
