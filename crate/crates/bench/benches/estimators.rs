use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microcorr::correlation::SplitPlan;
use microcorr::inference::by_fdr;
use microcorr::kernel::{KernelFunction, KernelSmoother};
use microcorr::simulation::{
    generate_scenario, replication_rng, ConfounderFamily, PhiScenario, ScenarioConfig,
};
use microcorr::{estimate_r_calibrated, estimate_r_plugin, DMatrix, PlmDesign};

fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn smoothing(c: &mut Criterion) {
    let mut group = c.benchmark_group("nw_smoothing");
    for &n in &[100usize, 500, 2000] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = uniform_matrix(n, 2, &mut rng);
        let targets = uniform_matrix(n, 7, &mut rng);
        let a = (n as f64).powf(-1.0 / 6.0) * 0.5;
        for order in [2usize, 4] {
            let kernel = KernelFunction::new(order).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("order{order}"), n), &n, |b, _| {
                let s = KernelSmoother::new(&z, a, kernel.clone()).unwrap();
                b.iter(|| black_box(s.fit(&targets).unwrap()))
            });
        }
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    for &n in &[100usize, 500] {
        let config = ScenarioConfig::new(
            n,
            ConfounderFamily::Linear,
            PhiScenario::Identity,
            0.3,
            1,
            11,
        );
        let data = generate_scenario(&config, &mut replication_rng(11, 0)).unwrap();
        let smoother = config.smoother_config();
        group.bench_with_input(BenchmarkId::new("design", n), &n, |b, _| {
            b.iter(|| {
                black_box(PlmDesign::new(data.paired.x(), data.paired.z(), &smoother).unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("plugin", n), &n, |b, _| {
            b.iter(|| black_box(estimate_r_plugin(&data.paired, &smoother).unwrap()))
        });
        let split = SplitPlan::random(n, 3);
        group.bench_with_input(BenchmarkId::new("calibrated", n), &n, |b, _| {
            b.iter(|| {
                black_box(
                    estimate_r_calibrated(&data.paired, &data.external, &smoother, &split).unwrap(),
                )
            })
        });
    }
    group.finish();
}

fn fdr(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f64> = (0..12_720).map(|_| rng.random::<f64>()).collect();
    c.bench_function("by_fdr_12720", |b| {
        b.iter(|| black_box(by_fdr(&p, 0.05).unwrap()))
    });
}

criterion_group!(benches, smoothing, estimators, fdr);
criterion_main!(benches);
