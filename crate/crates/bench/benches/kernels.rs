use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossdiff_core::evolve::{init_heaviside, ImexAssembler, Stepper};
use crossdiff_core::minimize::admm_step;
use crossdiff_core::{
    build_disc_mesh, build_interval_mesh, random_init, AdmmConfig, AdmmState, BoxSolver, Convolver, EvolveConfig,
    KernelSpec, MassMatrix, Mesh, Model, ModelParams, State, Transport,
};
use std::hint::black_box;

fn meshes() -> Vec<(String, Mesh)> {
    vec![
        ("interval-1000".into(), build_interval_mesh(-1.0, 1.0, 1000).unwrap()),
        ("disc-h0.1".into(), build_disc_mesh(2.0, 0.1).unwrap()),
    ]
}

fn params_for(mesh: &Mesh, eps: f64) -> ModelParams {
    let third = mesh.volume() / 6.0;
    ModelParams::coulomb(mesh.dim(), eps, -1.0, -0.5, third, third)
}

fn convolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("convolution");
    for (name, mesh) in meshes() {
        let spec = KernelSpec::coulomb(mesh.dim());
        let conv = Convolver::new(&mesh, spec, params_for(&mesh, 0.0).conv_mode).unwrap();
        let f = mesh.field_from_fn(|p| 0.3 + 0.1 * p[0]);
        let mut out = vec![0.0; mesh.n_nodes()];
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                // a zero seed, so the Poisson backend solves cold
                out.fill(0.0);
                conv.apply_into(black_box(&f), &mut out).unwrap()
            })
        });
    }
    g.finish();
}

fn flow_state(model: &Model, mesh: &Mesh) -> State {
    let r = init_heaviside(mesh, 1.0 / 3.0, 0.5, 0.01).unwrap();
    State::new(model, r.clone(), r).unwrap()
}

fn imex_assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("imex_assembly");
    for (name, mesh) in meshes() {
        let model = Model::new_unchecked(&mesh, params_for(&mesh, 0.02)).unwrap();
        let state = flow_state(&model, &mesh);
        let mut asm = ImexAssembler::new(&mesh, MassMatrix::Lumped).unwrap();
        for transport in [Transport::Upwind, Transport::Balanced] {
            g.bench_function(BenchmarkId::new(format!("{transport:?}"), &name), |bench| {
                bench.iter(|| asm.assemble(&model, black_box(&state), 5e-4, transport).unwrap())
            });
        }
    }
    g.finish();
}

fn evolve_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("evolve_step");
    g.sample_size(20);
    for (name, mesh) in meshes() {
        let model = Model::new_unchecked(&mesh, params_for(&mesh, 0.02)).unwrap();
        let state = flow_state(&model, &mesh);
        let mut stepper = Stepper::new(&model, EvolveConfig::default()).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| stepper.step(black_box(&state)).unwrap())
        });
    }
    g.finish();
}

fn admm_outer(c: &mut Criterion) {
    let mut g = c.benchmark_group("admm_outer_step");
    g.sample_size(20);
    let mesh = build_interval_mesh(-1.0, 1.0, 1000).unwrap();
    let params = params_for(&mesh, 0.05);
    let model = Model::new(&mesh, params.clone()).unwrap();
    let (r0, b0) = random_init(&mesh, &params, 1, false);
    for solver in [BoxSolver::Nodewise, BoxSolver::ProjectedGradient] {
        let cfg = AdmmConfig {
            mu: 4.0,
            step: 0.1,
            box_solver: solver,
            ..AdmmConfig::default()
        };
        let start = AdmmState::new(&mesh, &params, &r0, &b0, &cfg).unwrap();
        g.bench_function(BenchmarkId::from_parameter(format!("{solver:?}")), |bench| {
            bench.iter_batched(
                || start.clone(),
                |mut s| admm_step(&model, &mut s, &cfg).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, convolution, imex_assembly, evolve_step, admm_outer);
criterion_main!(benches);
