use std::collections::BTreeMap;

use derfl::data::{
    generate_population, linear_regression_population, prepare_client, ClientDataset, FeatureSpec, PopulationSpec,
    PreparedClient, Rows, SupervisedSet,
};
use derfl::fedcore::{
    fedavg_aggregate, fine_tune, fine_tune_trace, ifca_assign, local_update, participant_count, select_participants,
    ClientUpdate, FlConfig,
};
use derfl::model::{loss, loss_and_grad, ModelParams, ModelSpec};
use derfl::optim::OptimizerConfig;
use proptest::prelude::*;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn mean_daily_profile(ds: &ClientDataset) -> Vec<f64> {
    let mut sum = [0.0; 24];
    let mut count = [0usize; 24];
    for (i, v) in ds.series.values.iter().enumerate() {
        let hour = ds.series.timestamp(i).rem_euclid(24) as usize;
        sum[hour] += v;
        count[hour] += 1;
    }
    sum.iter().zip(count).map(|(s, c)| s / c as f64).collect()
}

#[test]
fn archetype_profiles_correlate_within_not_across() {
    for seed in 0..5 {
        let mut spec = PopulationSpec::new(10, 2, 28, seed);
        spec.noise_level = 0.0;
        let data = generate_population(&spec).unwrap();
        let profiles: Vec<Vec<f64>> = data.iter().map(mean_daily_profile).collect();
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let r = pearson(&profiles[i], &profiles[j]);
                if data[i].archetype_id == data[j].archetype_id {
                    assert!(r > 0.9, "seed {seed}: same archetype {i},{j} r = {r}");
                } else {
                    assert!(r < 0.5, "seed {seed}: different archetypes {i},{j} r = {r}");
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic_in_seed() {
    let spec = PopulationSpec::new(5, 2, 10, 42);
    assert_eq!(generate_population(&spec).unwrap(), generate_population(&spec).unwrap());
    let other = PopulationSpec { seed: 43, ..spec.clone() };
    assert_ne!(generate_population(&spec).unwrap(), generate_population(&other).unwrap());
}

#[test]
fn scaler_ignores_values_after_training_range() {
    let data = generate_population(&PopulationSpec::new(1, 1, 20, 5)).unwrap();
    let fs = FeatureSpec { lag: 24, horizon: 1, calendar: false };
    let a = prepare_client(&data[0], &fs).unwrap();
    let mut tampered = data[0].clone();
    let n = tampered.series.len();
    for v in &mut tampered.series.values[n - 24..] {
        *v += 1e3;
    }
    let b = prepare_client(&tampered, &fs).unwrap();
    assert_eq!(a.scaler, b.scaler);
    assert_eq!(a.train, b.train);
}

#[test]
fn fine_tune_loss_never_increases() {
    let clients = linear_regression_population(&[vec![3.0, -2.0]], 1, 50, 0.2, 1).unwrap();
    let start = ModelParams::new(ModelSpec::linear(2, 1), vec![0.0; 3]).unwrap();
    // a deliberately large rate forces the backtracking path
    for lr in [0.01, 0.5, 50.0] {
        let (_, trace) = fine_tune_trace(&start, &clients[0].train, 20, lr).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]), "lr {lr}: {trace:?}");
    }
}

#[test]
fn fine_tuning_disjoint_clients_diverges_and_leaves_global() {
    let clients = linear_regression_population(&[vec![1.0, 1.0], vec![-1.0, 2.0]], 2, 40, 0.1, 3).unwrap();
    let global = ModelParams::new(ModelSpec::linear(2, 1), vec![0.1, 0.1, 0.0]).unwrap();
    let snapshot = global.clone();
    let a = fine_tune(&global, &clients[0].train, 5, 0.1).unwrap();
    let b = fine_tune(&global, &clients[1].train, 5, 0.1).unwrap();
    assert_ne!(a, b);
    assert_eq!(global, snapshot);
}

#[test]
fn ifca_choice_survives_duplicated_data() {
    // duplicating every sample scales nothing in a mean loss, so the argmin
    // must stay put
    let clients = linear_regression_population(&[vec![2.0]], 1, 30, 0.1, 8).unwrap();
    let train = &clients[0].train;
    let doubled = SupervisedSet::concat([train, train]).unwrap();
    let spec = ModelSpec::linear(1, 1);
    let models = vec![
        ModelParams::new(spec, vec![-2.0, 0.0]).unwrap(),
        ModelParams::new(spec, vec![2.0, 0.0]).unwrap(),
        ModelParams::new(spec, vec![1.0, 0.5]).unwrap(),
    ];
    assert_eq!(ifca_assign(train, &models).unwrap(), 1);
    assert_eq!(ifca_assign(&doubled, &models).unwrap(), 1);
}

/// Server entry points only see `ClientUpdate` values and counts; nothing
/// on that side of the wire can name a sample.
#[test]
fn server_api_takes_no_samples() {
    let _: fn(&[ClientUpdate]) -> derfl::Result<ModelParams> = fedavg_aggregate;
    let _: fn(usize, f64, u64) -> Vec<usize> = select_participants;
    let _: fn(usize, f64) -> usize = participant_count;
    let clients = linear_regression_population(&[vec![1.0]], 1, 20, 0.1, 0).unwrap();
    let start = ModelParams::new(ModelSpec::linear(1, 1), vec![0.0, 0.0]).unwrap();
    let u = local_update(&clients[0], &start, &FlConfig::new(1, 1, OptimizerConfig::sgd(0.1), 0), 0).unwrap();
    let json = serde_json::to_value(&u).unwrap();
    let keys: std::collections::BTreeSet<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    let expected = ["client_id", "clipped_norm", "cluster_id", "n_samples", "new_params", "train_loss"];
    assert_eq!(keys, expected.into_iter().collect());
    assert_eq!(json["new_params"].as_object().unwrap().len(), 2);
}

fn small_set(d: usize, h: usize, rows: &[(Vec<f64>, Vec<f64>)]) -> SupervisedSet {
    let inputs: Vec<f64> = rows.iter().flat_map(|r| r.0.iter().take(d).copied()).collect();
    let targets: Vec<f64> = rows.iter().flat_map(|r| r.1.iter().take(h).copied()).collect();
    SupervisedSet::from_parts(inputs, targets, d, h, (0..rows.len() as i64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_finite_differences(
        mlp in any::<bool>(),
        d in 1usize..5,
        m in 1usize..5,
        h in 1usize..3,
        rows in proptest::collection::vec(
            (proptest::collection::vec(-2.0f64..2.0, 4), proptest::collection::vec(-2.0f64..2.0, 2)),
            1..6,
        ),
        seed_values in proptest::collection::vec(-1.0f64..1.0, 64),
    ) {
        let spec = if mlp { ModelSpec::mlp(d, m, h) } else { ModelSpec::linear(d, h) };
        let values: Vec<f64> = seed_values.iter().cycle().take(spec.param_count()).copied().collect();
        let set = small_set(d, h, &rows);
        let params = ModelParams::new(spec, values.clone()).unwrap();
        let (_, g) = loss_and_grad(&params, &set, Rows::All).unwrap();
        let step = 1e-6;
        let mut diff = 0.0;
        let mut norm = 0.0f64;
        for i in 0..values.len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            up.values[i] += step;
            dn.values[i] -= step;
            let fd = (loss(&up, &set, Rows::All).unwrap() - loss(&dn, &set, Rows::All).unwrap()) / (2.0 * step);
            diff += (fd - g[i]).powi(2);
            norm = norm.max(fd.abs()).max(g[i].abs());
        }
        let rel = diff.sqrt() / norm.max(1e-8);
        prop_assert!(rel <= if mlp { 1e-5 } else { 1e-6 }, "rel {}", rel);
    }

    #[test]
    fn fedavg_of_identical_models_is_identity(
        values in proptest::collection::vec(-5.0f64..5.0, 3),
        counts in proptest::collection::vec(1usize..100, 1..8),
    ) {
        let params = ModelParams::new(ModelSpec::linear(2, 1), values).unwrap();
        let updates: Vec<ClientUpdate> = counts.iter().enumerate().map(|(i, n)| ClientUpdate {
            client_id: format!("c{i}"),
            new_params: params.clone(),
            n_samples: *n,
            cluster_id: -1,
            train_loss: 0.0,
            clipped_norm: None,
        }).collect();
        let avg = fedavg_aggregate(&updates).unwrap();
        for (a, b) in avg.values.iter().zip(&params.values) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn participants_are_distinct_and_counted(n in 1usize..200, f in 0.01f64..=1.0, seed in any::<u64>()) {
        let picked = select_participants(n, f, seed);
        prop_assert_eq!(picked.len(), participant_count(n, f));
        let unique: std::collections::BTreeSet<usize> = picked.iter().copied().collect();
        prop_assert_eq!(unique.len(), picked.len());
        prop_assert!(picked.iter().all(|i| *i < n));
    }
}

#[test]
fn local_update_is_reproducible() {
    let clients: Vec<PreparedClient> = linear_regression_population(&[vec![1.0, -1.0]], 1, 60, 0.1, 2).unwrap();
    let start = ModelParams::new(ModelSpec::linear(2, 1), vec![0.0; 3]).unwrap();
    let mut cfg = FlConfig::new(1, 3, OptimizerConfig::momentum(0.05, 0.9), 0);
    cfg.batch_size = 7;
    let a = local_update(&clients[0], &start, &cfg, 99).unwrap();
    let b = local_update(&clients[0], &start, &cfg, 99).unwrap();
    let c = local_update(&clients[0], &start, &cfg, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.new_params, c.new_params);
    let by_id: BTreeMap<String, usize> = [(a.client_id.clone(), a.n_samples)].into();
    assert_eq!(by_id[&clients[0].client_id], clients[0].train.len());
}
