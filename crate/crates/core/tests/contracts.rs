mod common;

use common::{random_seq, rng, tiny_corpus, tiny_model};
use cueguard::cue::cue_guidance;
use cueguard::data::ClassWeights;
use cueguard::detector::{loss, CueVariant, Trainer, TrainSchedule};
use cueguard::encoder::{EncoderConfig, EncoderState};
use cueguard::Error;

#[test]
fn logits_ignore_trailing_padding() {
    let m = tiny_model(3, CueVariant::Full);
    let mut r = rng(1);
    for _ in 0..20 {
        let seq = random_seq(&mut r, m.vocab.len(), 5);
        let base = m.logits(&seq, &m.cues.attention(&seq).unwrap(), None).unwrap();
        for extra in 1..=m.max_len() - seq.len() {
            let padded = seq.padded(extra);
            let l = m.logits(&padded, &m.cues.attention(&padded).unwrap(), None).unwrap();
            assert!((l[0] - base[0]).abs() < 1e-5 && (l[1] - base[1]).abs() < 1e-5);
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let m = tiny_model(5, CueVariant::Full);
    let a = m.predict("alpha beta gamma").unwrap();
    let b = m.predict("alpha beta gamma").unwrap();
    assert_eq!(a, b);
    let seq = m.sequence("delta eta");
    let fa = m.cues.sentiment.forward(&seq.ids, &seq.mask, None).unwrap();
    let fb = m.cues.sentiment.forward(&seq.ids, &seq.mask, None).unwrap();
    assert_eq!(fa.attention, fb.attention);
}

#[test]
fn training_updates_only_trainable_parts() {
    let mut m = tiny_model(7, CueVariant::Full);
    let cue_before = [m.cues.sentiment.params().snapshot_bits(), m.cues.aggression.params().snapshot_bits()];
    let trained_before = [
        m.detector.params().snapshot_bits(),
        m.selector.params().snapshot_bits(),
        m.classifier.params().snapshot_bits(),
    ];
    let data = tiny_corpus(40, 2);
    let schedule = TrainSchedule {
        learning_rate: 1e-3,
        batch_size: 4,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(&mut m, &data, &schedule).unwrap();
    for s in 0..100 {
        let batch: Vec<usize> = (0..4).map(|j| (s * 4 + j) % data.len()).collect();
        t.step(&batch).unwrap();
    }
    assert_eq!(m.cues.sentiment.params().snapshot_bits(), cue_before[0]);
    assert_eq!(m.cues.aggression.params().snapshot_bits(), cue_before[1]);
    assert_ne!(m.detector.params().snapshot_bits(), trained_before[0]);
    assert_ne!(m.selector.params().snapshot_bits(), trained_before[1]);
    assert_ne!(m.classifier.params().snapshot_bits(), trained_before[2]);
}

#[test]
fn unfrozen_cue_module_is_a_contract_error() {
    let mut m = tiny_model(1, CueVariant::Full);
    m.cues.sentiment = EncoderState::new(EncoderConfig::tiny(), m.vocab.len(), Some(3), 9).unwrap();
    let data = tiny_corpus(8, 1);
    let err = Trainer::new(&mut m, &data, &TrainSchedule::default()).err().unwrap();
    assert!(matches!(err, Error::Contract(_)));
    let err = cue_guidance("alpha", &m.cues.sentiment, &m.cues.aggression, &m.selector, &m.vocab).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn guidance_vectors_are_distributions_and_gates_are_open_interval() {
    let m = tiny_model(2, CueVariant::Full);
    let (seq, cue, fusion) = cue_guidance("alpha beta gamma delta", &m.cues.sentiment, &m.cues.aggression, &m.selector, &m.vocab).unwrap();
    for v in [&cue.s, &cue.a] {
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(v.iter().all(|&x| x >= 0.0));
    }
    for (c, &mask) in fusion.c.iter().zip(&seq.mask) {
        if mask == 1 {
            assert!(*c > 0.0 && *c < 1.0);
        } else {
            assert_eq!(*c, 0.0);
        }
    }
}

#[test]
fn loss_is_non_negative_and_zero_only_when_perfect() {
    let w = ClassWeights { non_hate: 0.7, hate: 1.9 };
    let mut r = rng(4);
    for _ in 0..200 {
        let p: f64 = rand::Rng::gen(&mut r);
        for y in [0u8, 1] {
            assert!(loss(&[1.0 - p, p], y, &w) >= 0.0);
        }
    }
    assert_eq!(loss(&[0.0, 1.0], 1, &w), 0.0);
    assert!(loss(&[1e-3, 1.0 - 1e-3], 1, &w) > 0.0);
}

#[test]
fn prediction_probabilities_sum_to_one_and_label_is_argmax() {
    for seed in 0..5 {
        let m = tiny_model(seed, CueVariant::Full);
        let p = m.predict("gamma alpha kappa").unwrap();
        assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-6);
        assert_eq!(p.label, u8::from(p.probs[1] > p.probs[0]));
    }
    assert!(matches!(tiny_model(0, CueVariant::Full).predict("   "), Err(Error::Validation(_))));
}
