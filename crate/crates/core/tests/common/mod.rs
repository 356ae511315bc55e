#![allow(dead_code)]

use cueguard::cue::{freeze, CueExtractor, SelectorMode, SelectorParams};
use cueguard::detector::{CueVariant, HateModel};
use cueguard::encoder::{EncoderConfig, EncoderState, TokenSequence, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(["alpha beta gamma delta epsilon zeta eta theta iota kappa"], 14).unwrap()
}

/// Random cue encoders (frozen) plus a fresh detector on the tiny config.
pub fn tiny_model(seed: u64, variant: CueVariant) -> HateModel {
    let vocab = tiny_vocab();
    let cfg = EncoderConfig::tiny();
    let s = freeze(EncoderState::new(cfg, vocab.len(), Some(3), seed + 100).unwrap());
    let a = freeze(EncoderState::new(cfg, vocab.len(), Some(2), seed + 200).unwrap());
    let sel = SelectorParams::new(SelectorMode::PerPosition, 4, seed + 300).unwrap();
    HateModel::new(vocab, cfg, CueExtractor::new(s, a), sel, variant, seed).unwrap()
}

pub fn random_seq(rng: &mut ChaCha8Rng, vocab_size: usize, max_len: usize) -> TokenSequence {
    let k = rng.gen_range(2..=max_len);
    let mut ids = vec![cueguard::encoder::CLS_ID];
    ids.extend((1..k).map(|_| rng.gen_range(4..vocab_size)));
    TokenSequence {
        mask: vec![1; ids.len()],
        ids,
        cls_index: 0,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Texts over the tiny vocabulary; hateful iff the text contains "alpha".
pub fn tiny_corpus(n: usize, seed: u64) -> cueguard::data::Corpus {
    let words = ["beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa"];
    let mut r = rng(seed);
    let records = (0..n)
        .map(|i| {
            let k = r.gen_range(2..6);
            let mut toks: Vec<&str> = (0..k).map(|_| words[r.gen_range(0..words.len())]).collect();
            let label = u8::from(i % 2 == 0);
            if label == 1 {
                let at = r.gen_range(0..=toks.len());
                toks.insert(at, "alpha");
            }
            cueguard::data::Record {
                text: toks.join(" "),
                label,
                platform: "tiny".into(),
                hate_target: None,
                hate_type: None,
                raw_score: None,
            }
        })
        .collect();
    cueguard::data::Corpus::from_records("tiny", records).unwrap()
}

/// Cue module shape used by the learning and acceptance tests.
pub fn cue_config() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 1,
        d_head: 16,
        d_ff: 32,
        max_len: 24,
        dropout: 0.1,
    }
}

pub fn detector_config() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_head: 16,
        d_ff: 64,
        max_len: 24,
        dropout: 0.2,
    }
}

pub fn cue_schedule() -> cueguard::detector::TrainSchedule {
    cueguard::detector::TrainSchedule {
        learning_rate: 1e-3,
        dropout: 0.1,
        batch_size: 16,
        max_epochs: 30,
        early_stop_patience: 30,
        seed: 1,
        head_lr_scale: 1.0,
    }
}

pub fn detector_schedule(seed: u64) -> cueguard::detector::TrainSchedule {
    cueguard::detector::TrainSchedule {
        learning_rate: 1e-3,
        dropout: 0.2,
        batch_size: 16,
        max_epochs: 20,
        early_stop_patience: 3,
        seed,
        head_lr_scale: 3.0,
    }
}

/// Lexicon, vocabulary and cue modules pretrained once per test binary.
pub struct Desk {
    pub lex: cueguard::synth::Lexicon,
    pub vocab: Vocabulary,
    pub cues: CueExtractor,
    pub reports: [cueguard::encoder::PretrainReport; 2],
}

pub fn desk() -> &'static Desk {
    use cueguard::encoder::{pretrain_cue_classifier, CueTask};
    use cueguard::synth::{aggression_corpus, sentiment_corpus, Lexicon, LexiconSpec};
    static DESK: std::sync::OnceLock<Desk> = std::sync::OnceLock::new();
    DESK.get_or_init(|| {
        let lex = Lexicon::new(LexiconSpec::default()).unwrap();
        let vocab = lex.vocabulary().unwrap();
        let (cfg, sched) = (cue_config(), cue_schedule());
        let (s, rs) = pretrain_cue_classifier(
            &sentiment_corpus(&lex, 3000, 1),
            &sentiment_corpus(&lex, 300, 2),
            &vocab,
            cfg,
            CueTask::Sentiment,
            &sched,
        )
        .unwrap();
        let (a, ra) = pretrain_cue_classifier(
            &aggression_corpus(&lex, 2000, 3),
            &aggression_corpus(&lex, 300, 4),
            &vocab,
            cfg,
            CueTask::Aggression,
            &sched,
        )
        .unwrap();
        Desk {
            lex,
            vocab,
            cues: CueExtractor::new(freeze(s), freeze(a)),
            reports: [rs, ra],
        }
    })
}

pub fn desk_model(variant: CueVariant, seed: u64) -> HateModel {
    let d = desk();
    let sel = SelectorParams::new(SelectorMode::PerPosition, 16, seed + 7).unwrap();
    HateModel::new(d.vocab.clone(), detector_config(), d.cues.clone(), sel, variant, seed).unwrap()
}

/// Index of the largest entry among word positions (the CLS slot at 0 is
/// skipped), as a word offset.
pub fn word_argmax(v: &[f64]) -> usize {
    let mut best = 1;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best - 1
}

/// Worst relative error (and its index) between `analytic` and central
/// differences of `loss` over every entry of the store picked by `store`.
pub fn fd_worst<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut cueguard::params::ParamStore,
    analytic: &cueguard::params::ParamStore,
    loss: &dyn Fn(&M) -> f64,
) -> (f64, usize) {
    const STEP: f64 = 1e-5;
    let mut worst = (0.0f64, 0usize);
    for i in 0..analytic.len() {
        let orig = store(model).as_slice()[i];
        store(model).as_mut_slice()[i] = orig + STEP;
        let up = loss(model);
        store(model).as_mut_slice()[i] = orig - STEP;
        let dn = loss(model);
        store(model).as_mut_slice()[i] = orig;
        let e = rel_err(analytic.as_slice()[i], (up - dn) / (2.0 * STEP));
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}
