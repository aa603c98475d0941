//! Federated round throughput on the default rayon pool versus a
//! single-thread pool (the sequential baseline).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use derfl::data::{generate_population, prepare_client, FeatureSpec, PopulationSpec, PreparedClient};
use derfl::fedcore::{run_round, FlConfig, Mode, ServerState};
use derfl::model::ModelSpec;
use derfl::optim::OptimizerConfig;

fn clients(n: usize) -> Vec<PreparedClient> {
    let fs = FeatureSpec { lag: 24, horizon: 1, calendar: true };
    let mut clients: Vec<PreparedClient> = generate_population(&PopulationSpec::new(n, 3, 60, 1))
        .expect("population")
        .iter()
        .map(|d| prepare_client(d, &fs).expect("prepared client"))
        .collect();
    clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    clients
}

fn bench_rounds(c: &mut Criterion) {
    let population = clients(32);
    let refs: Vec<&PreparedClient> = population.iter().collect();
    let d = population[0].train.input_dim();
    let mut cfg = FlConfig::new(1, 2, OptimizerConfig::sgd(0.02), 7);
    cfg.batch_size = 32;
    let pools = [
        ("parallel", rayon::ThreadPoolBuilder::new().build().expect("pool")),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool")),
    ];
    for (model, spec) in [("linear", ModelSpec::linear(d, 1)), ("mlp", ModelSpec::mlp(d, 32, 1))] {
        let mut group = c.benchmark_group(format!("round_{model}"));
        for (name, pool) in &pools {
            let state = ServerState::initial(spec, cfg.seed).expect("state");
            group.bench_with_input(BenchmarkId::from_parameter(name), &state, |b, state| {
                b.iter(|| pool.install(|| run_round(state.clone(), &refs, &cfg, &Mode::Global, None, 0).expect("round")))
            });
        }
        group.finish();
    }
}

criterion_group!(benches, bench_rounds);
criterion_main!(benches);
