use asrlens::lens::{lens_run, selected_token_curve, SaturationRule};
use asrlens::model::{
    evaluate_loss, greedy_decode, load_weights, loss_and_grad, save_weights, train_with,
    ModelConfig, ModelWeights, TokenSequence, TrainOptions,
};
use asrlens::toy::{exact_match_rate, CopyTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn eight_word_copy_task_halves_the_loss() {
    let mut task = CopyTask::new(4);
    task.config.vocab_size = 12;
    let data = task.single_word_examples(1).unwrap();
    assert_eq!(data.len(), 8);
    let init = ModelWeights::init(&task.config).unwrap();
    let out = train_with(&init, &data, &TrainOptions::new(200, 0.01)).unwrap();
    assert!(
        out.final_loss() <= 0.5 * out.initial_loss(),
        "{:?}",
        (out.initial_loss(), out.final_loss())
    );
    assert_eq!(exact_match_rate(&out.weights, &data, 4).unwrap(), 1.0);
}

#[test]
fn sampled_gradients_match_central_differences() {
    let cfg = ModelConfig::micro(21);
    let w = ModelWeights::init(&cfg).unwrap();
    let task = CopyTask {
        config: cfg.clone(),
        acoustics: asrlens::toy::Acoustics::new(cfg.vocab_size, cfg.feat_dim, cfg.feat_dim, 3),
        max_words: 2,
        noise: 0.2,
    };
    let data = task.examples(4, 5).unwrap();
    let (_, grads) = loss_and_grad(&w, &data).unwrap();
    let sizes: Vec<usize> = w.blocks().iter().map(|b| b.2.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 10 {
        let b = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[b]);
        let analytic = grads[b].as_slice()[i];
        let shifted = |delta: f64| {
            let mut p = w.clone();
            p.blocks_mut()[b].2.as_mut_slice()[i] += delta;
            evaluate_loss(&p, &data).unwrap()
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(rel <= 1e-3, "block {b} index {i}: {analytic} vs {numeric}");
        checked += 1;
    }
}

#[test]
fn trained_copy_model_sharpens_through_depth() {
    let task = CopyTask::new(7);
    let w = task.train(128, 400, 0.01).unwrap();
    let test = task.examples(40, 99).unwrap();
    assert!(exact_match_rate(&w, &test, 6).unwrap() >= 0.8);
    let reports: Vec<_> = test
        .iter()
        .map(|(x, _)| lens_run(&w, x, 6, 5, SaturationRule::Stable).unwrap())
        .collect();
    let curve = selected_token_curve(&reports).unwrap();
    assert_eq!(curve.mean.len(), task.config.n_dec_layers);
    assert!(curve.mean[0] <= 0.5, "{:?}", curve.mean);
    assert!(*curve.mean.last().unwrap() >= 0.9, "{:?}", curve.mean);
    assert!(curve.mean.windows(2).all(|p| p[0] <= p[1]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.asrl");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert!(back.bit_eq(&w));
    for (x, _) in &test[..5] {
        assert_eq!(
            greedy_decode(&back, x, 6).unwrap(),
            greedy_decode(&w, x, 6).unwrap()
        );
    }
}

#[test]
fn training_is_reproducible() {
    let mut task = CopyTask::new(8);
    task.config = ModelConfig::micro(8);
    task.acoustics = asrlens::toy::Acoustics::new(10, 6, 6, 8);
    let a = task.train(6, 20, 0.01).unwrap();
    let b = task.train(6, 20, 0.01).unwrap();
    assert!(a.bit_eq(&b));
    let _ = TokenSequence::bos();
}
