use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use prism_bench::{bench_graphs, bench_model, bench_structure};
use prism_core::graph::{build_atomistic_graph, build_cell_graph};
use prism_core::lattice::min_image_displacement;
use prism_core::train::grad_check;

fn bench_min_image(c: &mut Criterion) {
    let s = bench_structure(1, 8);
    let positions = s.positions();
    c.bench_function("min_image_displacement", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..positions.len() {
                for j in 0..positions.len() {
                    let (d, _) =
                        min_image_displacement(&s.lattice, &positions[i], &positions[j]);
                    acc += d.norm();
                }
            }
            black_box(acc)
        })
    });
}

fn bench_graph_builders(c: &mut Criterion) {
    let s = bench_structure(2, 8);
    c.bench_function("build_atomistic_graph_n8", |b| {
        b.iter(|| black_box(build_atomistic_graph(&s, 5.0).unwrap()))
    });
    c.bench_function("build_cell_graph_rc14", |b| {
        b.iter(|| black_box(build_cell_graph(&s, 14.0).unwrap()))
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = bench_model(32, 3);
    let s = bench_structure(3, 6);
    let graphs = bench_graphs(&s, &model);
    c.bench_function("forward_dim32_l3_n6", |b| {
        b.iter(|| black_box(model.forward(&s, &graphs).unwrap().prediction))
    });
}

fn bench_gradient(c: &mut Criterion) {
    let model = bench_model(8, 1);
    let s = bench_structure(4, 4);
    let mut group = c.benchmark_group("gradient");
    group.sample_size(10);
    group.bench_function("grad_check_dim8_l1", |b| {
        b.iter(|| black_box(grad_check(&model, &s, 1e-5).unwrap()))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_min_image,
    bench_graph_builders,
    bench_forward,
    bench_gradient
);
criterion_main!(benches);
