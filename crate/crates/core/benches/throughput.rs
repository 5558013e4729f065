use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use expfbm::density::sample_x_batch;
use expfbm::functional::{Centering, ModelParams};
use expfbm::kernel::build_kernel_table;
use expfbm::malliavin::{run_nested, MalliavinSetup, NestedOptions};
use expfbm::Exec;

fn policies() -> Vec<Exec> {
    #[cfg(feature = "parallel")]
    return vec![Exec::Sequential, Exec::Parallel];
    #[cfg(not(feature = "parallel"))]
    vec![Exec::Sequential]
}

fn outer_batch(c: &mut Criterion) {
    let table = build_kernel_table(0.7, 1.0, 256).unwrap();
    let params = ModelParams::new(0.0, 1.0, 0.7, 1.0).unwrap();
    let centering = Centering { mean_ln_f: 0.0, std_error: 0.0, n_paths: 0, seed: 0 };
    let n = 2_000;
    let mut g = c.benchmark_group("outer_batch_n256");
    g.throughput(Throughput::Elements(n as u64));
    g.sample_size(10);
    for exec in policies() {
        g.bench_with_input(BenchmarkId::from_parameter(exec.name()), &exec, |b, &exec| {
            b.iter(|| sample_x_batch(&table, &params, centering, black_box(n), 1, exec).unwrap())
        });
    }
    g.finish();
}

fn nested_batch(c: &mut Criterion) {
    let table = build_kernel_table(0.7, 1.0, 64).unwrap();
    let params = ModelParams::new(0.0, 1.0, 0.7, 1.0).unwrap();
    let setup = MalliavinSetup::new(&table, params, 4).unwrap();
    let n = 64;
    let mut g = c.benchmark_group("nested_n64_inner200");
    g.throughput(Throughput::Elements(n as u64));
    g.sample_size(10);
    for exec in policies() {
        let opts = NestedOptions { exec, ..Default::default() };
        g.bench_with_input(BenchmarkId::from_parameter(exec.name()), &opts, |b, opts| {
            b.iter(|| run_nested(&setup, 1, black_box(n), opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, outer_batch, nested_batch);
criterion_main!(benches);
