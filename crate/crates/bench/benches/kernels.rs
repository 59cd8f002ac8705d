use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dfkflow::adjoint::{objective_and_gradient, ObjectiveContext};
use dfkflow::advection::rollout;
use dfkflow::rbf_kernel::{dfk_matrix, wendland_c4};
use dfkflow::render2d::splat;
use dfkflow::scenes::gradient_check_scene;
use dfkflow::{AdvectionConfig, KernelNode, LossWeights, OrthoCamera, TimeVaryingField, Vec3, ViewAxis};
use dfkflow_bench::{plume_cloud, query_points, random_field};

fn kernel(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
    c.bench_function("wendland_c4 x1000", |b| b.iter(|| xs.iter().map(|&r| wendland_c4(black_box(r)).unwrap().value).sum::<f64>()));
    let node = KernelNode::new(Vec3::new(0.5, 0.5, 0.5), 0.4).unwrap();
    let x = Vec3::new(0.6, 0.3, 0.55);
    c.bench_function("dfk_matrix", |b| b.iter(|| dfk_matrix(black_box(&x), &node)));
}

fn field(c: &mut Criterion) {
    let f = random_field(0, 5);
    let pts = query_points(0, 1000);
    c.bench_function("dfk evaluate 5^3 x1000", |b| b.iter(|| pts.iter().map(|p| f.evaluate(p)).fold(Vec3::zeros(), |a, v| a + v)));
    c.bench_function("dfk jacobian 5^3 x1000", |b| {
        b.iter(|| pts.iter().map(|p| dfkflow::VelocityField::jacobian(&f, p).trace()).sum::<f64>())
    });
}

fn render(c: &mut Criterion) {
    let cloud = plume_cloud(0, 64);
    let cam = OrthoCamera::new(ViewAxis::PosZ, 64, 64, [0.0, 0.0, 1.0, 1.0]).unwrap();
    c.bench_function("splat 64 gaussians 64x64", |b| b.iter(|| splat(black_box(&cloud), &cam)));
}

fn advect(c: &mut Criterion) {
    let cloud = plume_cloud(0, 64);
    let field = TimeVaryingField::new((0..7).map(|k| random_field(k, 5).scaled(0.2)).collect(), 1.0).unwrap();
    c.bench_function("rk4 rollout 64 gaussians 7 frames", |b| {
        b.iter(|| rollout(black_box(&cloud), &field, 0, 7, &AdvectionConfig::default(), None).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let s = gradient_check_scene(0).unwrap();
    let weights = LossWeights::default();
    let ctx = ObjectiveContext {
        observations: &s.observations,
        weights: &weights,
        advection: AdvectionConfig::default(),
        frame_dt: s.frame_dt,
        inflow: None,
        collocation: &s.collocation,
        fd_step: s.fd_step,
    };
    c.bench_function("objective_and_gradient check scene", |b| {
        b.iter(|| objective_and_gradient(black_box(&s.params), &s.spec, &ctx).unwrap())
    });
}

criterion_group!(benches, kernel, field, render, advect, gradient);
criterion_main!(benches);
