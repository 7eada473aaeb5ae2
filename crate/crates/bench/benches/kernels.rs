use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use uasml_core::excitation::{bounds_from_steady, lhs_sample_min_correlation};
use uasml_core::narx::{lipschitz_index, IoSeries, LipschitzOptions};
use uasml_core::neural::{loss_and_grads, Activation, Mlp, MlpSpec};
use uasml_core::reactor::{find_steady_state, integrate, reactor_rhs};
use uasml_core::rng::stream;
use uasml_core::{Channel, InputSchedule, ModelVariant, OdeOptions, ReactorInputs, ReactorParameters, ReactorState};

fn steady() -> (ReactorParameters, ReactorInputs, ModelVariant, ReactorState) {
    let p = ReactorParameters::nominal();
    let u = ReactorInputs::steady_default();
    let v = ModelVariant::physical();
    let x = find_steady_state(&p, &u, &v, &ReactorState::nominal_guess()).expect("steady state");
    (p, u, v, x)
}

fn schedule(steps: usize, hold: f64) -> InputSchedule {
    let u = ReactorInputs::steady_default();
    let bounds = bounds_from_steady(&u, 0.15).expect("bounds");
    let design = lhs_sample_min_correlation(steps, &bounds, 5, &mut stream(1, "lhs", 0)).expect("design");
    InputSchedule::from_design(&design, hold).expect("schedule")
}

fn bench_reactor(c: &mut Criterion) {
    let (p, u, v, x) = steady();
    c.bench_function("reactor_rhs", |b| b.iter(|| reactor_rhs(0.0, black_box(&x), &u, &p, &v).unwrap()));

    let sched = schedule(5, 150.0);
    let grid = sched.grid(1.0).unwrap();
    c.bench_function("integrate_750h", |b| {
        b.iter(|| integrate(black_box(&x), &sched, &p, &v, &grid, OdeOptions::default()).unwrap())
    });
}

fn bench_mlp(c: &mut Criterion) {
    let spec = MlpSpec::uniform(18, vec![30, 30], Activation::Tanh, 1e-3);
    let mut rng = stream(2, "bench", 0);
    let model = Mlp::init(&spec, &mut rng).unwrap();
    let rows = 64;
    let x: Vec<f64> = (0..rows * 18).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("mlp_loss_and_grads_batch64", |b| b.iter(|| loss_and_grads(black_box(&model), &x, &y).unwrap()));
}

fn bench_lipschitz(c: &mut Criterion) {
    let (p, _, v, x) = steady();
    let sched = schedule(10, 50.0);
    let grid = sched.grid(1.0).unwrap();
    let traj = integrate(&x, &sched, &p, &v, &grid, OdeOptions::default()).unwrap();
    let data = [IoSeries::from_trajectory(&traj, Channel::T)];
    let opts = LipschitzOptions { max_pairs: 20_000, ..LipschitzOptions::default() };
    c.bench_function("lipschitz_index_2_2", |b| b.iter(|| lipschitz_index(black_box(&data), 2, 2, &opts).unwrap()));
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = bench_reactor, bench_mlp, bench_lipschitz
}
criterion_main!(kernels);
