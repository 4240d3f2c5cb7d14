use std::time::Instant;

use asrlens::model::AudioFeatures;
use asrlens::probe::{
    evaluate_probe, layer_sweep, monitor, probe_trace, train_probe, FinalTokenRule, Pooling,
    ProbeConfig, ProbeDataset, ProbeModel, SweepOptions,
};
use asrlens::toy::XorTask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names() -> Vec<String> {
    vec!["even".into(), "odd".into()]
}

fn xor_inputs(task: &XorTask, n: usize, seed: u64) -> Vec<(AudioFeatures, usize)> {
    task.examples(n, seed)
        .unwrap()
        .into_iter()
        .map(|((x, _), y)| (x, y))
        .collect()
}

/// Perceptron run to convergence: succeeds only on linearly separable data.
fn perceptron_separates(data: &[(Vec<f64>, usize)], epochs: usize) -> bool {
    let d = data[0].0.len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, y) in data {
            let t = if *y == 1 { 1.0 } else { -1.0 };
            let s: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if t * s <= 0.0 {
                mistakes += 1;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += t * xi;
                }
                w[d] += t;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn xor_signal_appears_only_after_the_frontend() {
    let task = XorTask::new(2);
    let w = task.train(64, 300, 0.01).unwrap();
    let inputs = xor_inputs(&task, 200, 9);
    let opts = SweepOptions {
        max_len: task.config.max_tokens,
        ..Default::default()
    };
    let enc = layer_sweep(&w, &inputs, &names(), Pooling::TimeMean, &opts).unwrap();
    assert_eq!(enc.layers.len(), task.config.n_enc_layers + 1);
    assert!(enc.layers[0].test_accuracy <= 0.8, "{}", enc.to_csv());
    assert!(
        enc.layers.iter().skip(1).any(|l| l.test_accuracy >= 0.95),
        "{}",
        enc.to_csv()
    );
    assert_ne!(enc.best_layer(), Some(0));
    let dec = layer_sweep(&w, &inputs, &names(), Pooling::FinalToken, &opts).unwrap();
    assert!(
        dec.layers.last().unwrap().test_accuracy >= 0.95,
        "{}",
        dec.to_csv()
    );

    // Independent check of the two claims with a perceptron.
    let traces: Vec<_> = inputs
        .iter()
        .map(|(x, y)| {
            (
                probe_trace(&w, x, opts.max_len, FinalTokenRule::EmitsEos).unwrap(),
                *y,
            )
        })
        .collect();
    let at = |layer: usize| -> Vec<(Vec<f64>, usize)> {
        traces
            .iter()
            .map(|(t, y)| (t.vector(layer, Pooling::TimeMean).unwrap(), *y))
            .collect()
    };
    assert!(!perceptron_separates(&at(0), 200));
    let best = enc.best_layer().unwrap();
    assert!(perceptron_separates(&at(best), 2000));
}

fn clusters(n: usize, dim: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y = i % 2;
            let centre = if y == 1 { 2.0 } else { -2.0 };
            (
                (0..dim)
                    .map(|_| centre + rng.random_range(-1.0..1.0))
                    .collect(),
                y,
            )
        })
        .collect()
}

fn dataset(examples: Vec<(Vec<f64>, usize)>) -> ProbeDataset {
    ProbeDataset {
        examples,
        label_names: names(),
        layer: 1,
        pooling: Pooling::TimeMean,
    }
}

#[test]
fn permutation_null_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|i| ((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 2))
            .collect()
    };
    let train = dataset(make(&mut rng, 400));
    let test = dataset(make(&mut rng, 1000));
    let model = train_probe(&train, &ProbeConfig::default()).unwrap();
    let acc = evaluate_probe(&model, &test).unwrap().accuracy;
    assert!((acc - 0.5).abs() <= 0.08, "{acc}");
}

#[test]
fn probes_are_bitwise_reproducible_and_persist() {
    let train = dataset(clusters(200, 6, 1));
    let a = train_probe(&train, &ProbeConfig::default()).unwrap();
    let b = train_probe(&train, &ProbeConfig::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let back = ProbeModel::from_json(&a.to_json().unwrap()).unwrap();
    let test = dataset(clusters(300, 6, 2));
    assert!(evaluate_probe(&back, &test).unwrap().accuracy >= 0.99);
    for (x, _) in &test.examples {
        assert_eq!(back.predict(x).unwrap(), a.predict(x).unwrap());
    }
}

#[test]
fn monitoring_throughput() {
    let task = XorTask::new(3);
    let w = task.train(16, 5, 0.01).unwrap();
    let inputs = xor_inputs(&task, 40, 1);
    let traces: Vec<_> = inputs
        .iter()
        .map(|(x, y)| (probe_trace(&w, x, 3, FinalTokenRule::EmitsEos).unwrap(), *y))
        .collect();
    let data = dataset(
        traces
            .iter()
            .map(|(t, y)| (t.vector(2, Pooling::TimeMean).unwrap(), *y))
            .collect(),
    );
    let mut model = train_probe(
        &data,
        &ProbeConfig {
            epochs: 50,
            ..Default::default()
        },
    )
    .unwrap();
    model.layer = 2;
    let n = 20_000;
    let start = Instant::now();
    let mut odd = 0;
    for i in 0..n {
        let (label, _) = monitor(&model, &traces[i % traces.len()].0).unwrap();
        odd += (label == "odd") as usize;
    }
    let rate = n as f64 / start.elapsed().as_secs_f64();
    assert!(rate >= 1e4, "{rate:.0} predictions/s");
    assert!(odd <= n);
}
