use asrlens::encoder_lens::{encoder_lens, encoder_lens_with, EncoderLensOptions};
use asrlens::model::greedy_decode;
use asrlens::toy::CopyTask;
use asrlens::vocab::Vocabulary;

#[test]
fn full_depth_matches_and_the_norm_matters() {
    let task = CopyTask::new(7);
    let w = task.train(96, 300, 0.01).unwrap();
    let inputs = task.examples(100, 41).unwrap();
    let mut normed_matches = 0;
    let mut raw_matches = 0;
    for (x, _) in &inputs {
        let r = encoder_lens(&w, x, 6).unwrap();
        let top = r.layers.last().unwrap();
        assert_eq!(top.layer, w.config.n_enc_layers);
        assert_eq!(top.tokens, greedy_decode(&w, x, 6).unwrap());
        normed_matches += r.rows().filter(|l| l.flags.matches_baseline).count();
        let raw = encoder_lens_with(
            &w,
            x,
            6,
            EncoderLensOptions {
                skip_norm: true,
                include_embedding: true,
            },
        )
        .unwrap();
        assert!(!raw.normalized);
        raw_matches += raw.rows().filter(|l| l.flags.matches_baseline).count();
    }
    assert!(
        normed_matches >= raw_matches,
        "{normed_matches} vs {raw_matches}"
    );

    let r = encoder_lens(&w, &inputs[0].0, 6).unwrap();
    let text = r.render(&Vocabulary::synthetic(w.config.vocab_size));
    assert_eq!(text.len(), w.config.n_enc_layers + 1);
    assert_eq!(text[0].layer, 0);
}
