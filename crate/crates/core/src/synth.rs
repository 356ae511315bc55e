//! Synthetic corpora with known generating rules.
//!
//! Every generator draws from a [`Lexicon`] of made-up tokens: polarity
//! words (`pos*`, `neg*`), aggression markers (`agg*`), neutral filler
//! (`w*`) and per-platform spurious tokens (`sp{p}h*` leaning hateful,
//! `sp{p}n*` leaning non-hateful). Hatefulness is always decided by the cue
//! tokens: a text is hateful iff it carries a negative polarity word and an
//! aggression marker. Spurious tokens only correlate with the label, and the
//! direction of that correlation depends on the platform.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, LabeledText, Record, Splits};
use crate::encoder::Vocabulary;
use crate::error::{ensure, Result};

pub const SENTIMENT_NEGATIVE: usize = 0;
pub const SENTIMENT_NEUTRAL: usize = 1;
pub const SENTIMENT_POSITIVE: usize = 2;

pub const HATE_TYPES: [&str; 3] = ["insult", "threat", "violence"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconSpec {
    pub polarity_words: usize,
    pub aggression_markers: usize,
    pub filler_words: usize,
    pub spurious_per_side: usize,
    pub platforms: usize,
    pub min_filler: usize,
    pub max_filler: usize,
}

impl Default for LexiconSpec {
    fn default() -> Self {
        LexiconSpec {
            polarity_words: 60,
            aggression_markers: 60,
            filler_words: 200,
            spurious_per_side: 4,
            platforms: 3,
            min_filler: 5,
            max_filler: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub aggression: Vec<String>,
    pub filler: Vec<String>,
    /// `spurious[p] = (hate-leaning, non-hate-leaning)` pools of platform `p`.
    pub spurious: Vec<(Vec<String>, Vec<String>)>,
    pub spec: LexiconSpec,
}

fn pool(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl Lexicon {
    pub fn new(spec: LexiconSpec) -> Result<Self> {
        ensure!(
            spec.polarity_words > 0 && spec.aggression_markers > 0 && spec.filler_words > 0,
            Config,
            "lexicon pools must be non-empty"
        );
        ensure!(
            spec.min_filler >= 1 && spec.min_filler <= spec.max_filler,
            Config,
            "filler length range {}..={} is invalid",
            spec.min_filler,
            spec.max_filler
        );
        Ok(Lexicon {
            positive: pool("pos", spec.polarity_words),
            negative: pool("neg", spec.polarity_words),
            aggression: pool("agg", spec.aggression_markers),
            filler: pool("w", spec.filler_words),
            spurious: (0..spec.platforms)
                .map(|p| (pool(&format!("sp{p}h"), spec.spurious_per_side), pool(&format!("sp{p}n"), spec.spurious_per_side)))
                .collect(),
            spec,
        })
    }

    pub fn all_tokens(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in [&self.positive, &self.negative, &self.aggression, &self.filler] {
            out.extend(p.iter().map(String::as_str));
        }
        for (h, n) in &self.spurious {
            out.extend(h.iter().chain(n).map(String::as_str));
        }
        out
    }

    /// A vocabulary holding every lexicon token (plus the specials).
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let tokens = self.all_tokens();
        let joined = tokens.join(" ");
        Vocabulary::build([joined.as_str()], tokens.len() + 4)
    }

    /// Longest text any generator emits, in tokens (without CLS).
    pub fn max_words(&self) -> usize {
        self.spec.max_filler + 2 + self.spec.platforms
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let n = rng.gen_range(self.spec.min_filler..=self.spec.max_filler);
        (0..n).map(|_| self.filler.choose(rng).unwrap().clone()).collect()
    }
}

fn pick(pool: &[String], rng: &mut ChaCha8Rng) -> String {
    pool.choose(rng).unwrap().clone()
}

fn insert_random(words: &mut Vec<String>, token: String, rng: &mut ChaCha8Rng) -> usize {
    let at = rng.gen_range(0..=words.len());
    words.insert(at, token);
    at
}

/// A sentence with exactly one planted cue token at word index `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSentence {
    pub text: String,
    pub token: String,
    pub position: usize,
}

fn planted(lex: &Lexicon, token: String, rng: &mut ChaCha8Rng) -> PlantedSentence {
    let mut words = lex.filler(rng);
    let position = insert_random(&mut words, token.clone(), rng);
    PlantedSentence {
        text: words.join(" "),
        token,
        position,
    }
}

/// Filler sentences with one polarity word each, alternating sign.
pub fn polarity_probes(lex: &Lexicon, n: usize, seed: u64) -> Vec<PlantedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let side = if i % 2 == 0 { &lex.negative } else { &lex.positive };
            let token = pick(side, &mut rng);
            planted(lex, token, &mut rng)
        })
        .collect()
}

pub fn aggression_probes(lex: &Lexicon, n: usize, seed: u64) -> Vec<PlantedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let token = pick(&lex.aggression, &mut rng);
            planted(lex, token, &mut rng)
        })
        .collect()
}

/// Three-way sentiment corpus: the single polarity word (if any) decides
/// the label. Aggression markers appear as distractors independent of it.
pub fn sentiment_corpus(lex: &Lexicon, n: usize, seed: u64) -> Vec<LabeledText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 3;
            let mut words = lex.filler(&mut rng);
            match label {
                SENTIMENT_NEGATIVE => {
                    insert_random(&mut words, pick(&lex.negative, &mut rng), &mut rng);
                }
                SENTIMENT_POSITIVE => {
                    insert_random(&mut words, pick(&lex.positive, &mut rng), &mut rng);
                }
                _ => {}
            }
            if rng.gen_bool(0.3) {
                insert_random(&mut words, pick(&lex.aggression, &mut rng), &mut rng);
            }
            LabeledText {
                text: words.join(" "),
                label,
            }
        })
        .collect()
}

/// Binary aggression corpus: label 1 iff one aggression marker is present.
/// Polarity words appear as distractors independent of the label.
pub fn aggression_corpus(lex: &Lexicon, n: usize, seed: u64) -> Vec<LabeledText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut words = lex.filler(&mut rng);
            if label == 1 {
                insert_random(&mut words, pick(&lex.aggression, &mut rng), &mut rng);
            }
            if rng.gen_bool(0.4) {
                let side = if rng.gen_bool(0.5) { &lex.negative } else { &lex.positive };
                insert_random(&mut words, pick(side, &mut rng), &mut rng);
            }
            LabeledText {
                text: words.join(" "),
                label,
            }
        })
        .collect()
}

/// How one platform's hate corpus is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HateSpec {
    pub hateful_fraction: f64,
    /// Probability that a text carries a token from its own platform's
    /// spurious pools.
    pub own_rate: f64,
    /// Probability that the own-platform spurious token leans the same way
    /// as the label.
    pub own_alignment: f64,
    /// Probability that a text carries a token from each other platform's
    /// pools; such tokens lean against the label with `own_alignment`.
    pub foreign_rate: f64,
}

impl Default for HateSpec {
    fn default() -> Self {
        HateSpec {
            hateful_fraction: 0.4,
            own_rate: 0.0,
            own_alignment: 0.9,
            foreign_rate: 0.0,
        }
    }
}

impl HateSpec {
    pub fn shifted() -> Self {
        HateSpec {
            own_rate: 0.5,
            foreign_rate: 0.25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hateful_fraction", self.hateful_fraction),
            ("own_rate", self.own_rate),
            ("own_alignment", self.own_alignment),
            ("foreign_rate", self.foreign_rate),
        ] {
            ensure!((0.0..=1.0).contains(&v), Config, "{name} must lie in [0, 1], got {v}");
        }
        ensure!(
            self.hateful_fraction > 0.0 && self.hateful_fraction < 1.0,
            Config,
            "hateful_fraction must be strictly between 0 and 1"
        );
        Ok(())
    }
}

/// Cue content of a text. Only `Hateful` carries both a negative word and
/// an aggression marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Hateful,
    Neutral,
    Negative,
    Positive,
    Aggressive,
}

const NON_HATE_KINDS: [Kind; 4] = [Kind::Neutral, Kind::Negative, Kind::Positive, Kind::Aggressive];

/// Hate corpus for platform index `platform` (which selects the spurious
/// pools). Exactly `round(n * hateful_fraction)` records are hateful.
pub fn hate_corpus(lex: &Lexicon, platform: usize, name: &str, n: usize, spec: &HateSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    ensure!(
        platform < lex.spurious.len(),
        Config,
        "platform index {platform} exceeds the lexicon's {} platforms",
        lex.spurious.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hate = (n as f64 * spec.hateful_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_hate)).collect();
    labels.shuffle(&mut rng);

    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let kind = if label == 1 {
                Kind::Hateful
            } else {
                NON_HATE_KINDS[i % NON_HATE_KINDS.len()]
            };
            let mut words = lex.filler(&mut rng);
            if matches!(kind, Kind::Hateful | Kind::Negative) {
                insert_random(&mut words, pick(&lex.negative, &mut rng), &mut rng);
            }
            if kind == Kind::Positive {
                insert_random(&mut words, pick(&lex.positive, &mut rng), &mut rng);
            }
            if matches!(kind, Kind::Hateful | Kind::Aggressive) {
                insert_random(&mut words, pick(&lex.aggression, &mut rng), &mut rng);
            }
            for (q, (lean_hate, lean_clean)) in lex.spurious.iter().enumerate() {
                let (rate, agree) = if q == platform {
                    (spec.own_rate, spec.own_alignment)
                } else {
                    (spec.foreign_rate, 1.0 - spec.own_alignment)
                };
                if rate > 0.0 && rng.gen_bool(rate) {
                    let toward_label = rng.gen_bool(agree);
                    let pool = if (label == 1) == toward_label { lean_hate } else { lean_clean };
                    insert_random(&mut words, pick(pool, &mut rng), &mut rng);
                }
            }
            let hate_type = (label == 1).then(|| HATE_TYPES[rng.gen_range(0..HATE_TYPES.len())].to_string());
            Record {
                text: words.join(" "),
                label,
                platform: name.to_string(),
                hate_target: None,
                hate_type,
                raw_score: None,
            }
        })
        .collect();
    Corpus::from_records(name, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 250,
            test: 250,
        }
    }
}

fn splits(lex: &Lexicon, platform: usize, name: &str, sizes: SplitSizes, spec: &HateSpec, seed: u64) -> Result<Splits> {
    let base = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (platform as u64) << 8;
    Ok(Splits {
        train: hate_corpus(lex, platform, name, sizes.train, spec, base ^ 1)?,
        val: hate_corpus(lex, platform, name, sizes.val, spec, base ^ 2)?,
        test: hate_corpus(lex, platform, name, sizes.test, spec, base ^ 3)?,
    })
}

/// Single-platform corpus where cue tokens alone decide the label.
pub fn separable_splits(lex: &Lexicon, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    splits(lex, 0, "synthetic", sizes, &HateSpec::default(), seed)
}

pub fn platform_name(p: usize) -> String {
    format!("platform{p}")
}

/// One split set per lexicon platform, with platform-flipping spurious
/// tokens per `spec`. Keys are [`platform_name`]s.
pub fn shift_suite(lex: &Lexicon, sizes: SplitSizes, spec: &HateSpec, seed: u64) -> Result<BTreeMap<String, Splits>> {
    (0..lex.spurious.len())
        .map(|p| {
            let name = platform_name(p);
            Ok((name.clone(), splits(lex, p, &name, sizes, spec, seed)?))
        })
        .collect()
}

/// One platform whose records are split between two hate targets; the
/// targets play the role of platforms 0 and 1 for the spurious pools.
pub fn two_target_corpus(lex: &Lexicon, targets: [&str; 2], per_target: usize, spec: &HateSpec, seed: u64) -> Result<Corpus> {
    ensure!(lex.spurious.len() >= 2, Config, "two-target corpus needs a lexicon with at least 2 platforms");
    let mut records = Vec::with_capacity(2 * per_target);
    for (t, target) in targets.iter().enumerate() {
        let c = hate_corpus(lex, t, "synthetic", per_target, spec, seed ^ ((t as u64 + 1) << 16))?;
        records.extend(c.records.into_iter().map(|mut r| {
            r.hate_target = Some((*target).to_string());
            r
        }));
    }
    Corpus::from_records("synthetic", records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::new(LexiconSpec::default()).unwrap()
    }

    fn has_any(text: &str, pool: &[String]) -> bool {
        text.split(' ').any(|w| pool.iter().any(|p| p == w))
    }

    #[test]
    fn hateful_iff_negative_and_aggressive() {
        let lex = lex();
        let c = hate_corpus(&lex, 1, "p", 500, &HateSpec::shifted(), 3).unwrap();
        assert_eq!(c.hateful_count(), 200);
        for r in &c.records {
            let rule = has_any(&r.text, &lex.negative) && has_any(&r.text, &lex.aggression);
            assert_eq!(rule, r.label == 1, "{}", r.text);
            assert_eq!(r.hate_type.is_some(), r.label == 1);
        }
    }

    #[test]
    fn spurious_tokens_flip_across_platforms() {
        let lex = lex();
        let spec = HateSpec::shifted();
        let lean = |c: &Corpus, p: usize| {
            let (h, n) = &lex.spurious[p];
            let agree = c
                .records
                .iter()
                .filter(|r| (r.label == 1 && has_any(&r.text, h)) || (r.label == 0 && has_any(&r.text, n)))
                .count();
            let total = c.records.iter().filter(|r| has_any(&r.text, h) || has_any(&r.text, n)).count();
            agree as f64 / total as f64
        };
        let own = hate_corpus(&lex, 0, "a", 2000, &spec, 1).unwrap();
        let other = hate_corpus(&lex, 1, "b", 2000, &spec, 2).unwrap();
        assert!((lean(&own, 0) - 0.9).abs() < 0.03, "{}", lean(&own, 0));
        assert!((lean(&other, 0) - 0.1).abs() < 0.03, "{}", lean(&other, 0));
    }

    #[test]
    fn cue_corpora_follow_their_rules() {
        let lex = lex();
        for e in sentiment_corpus(&lex, 300, 4) {
            let expected = if has_any(&e.text, &lex.negative) {
                SENTIMENT_NEGATIVE
            } else if has_any(&e.text, &lex.positive) {
                SENTIMENT_POSITIVE
            } else {
                SENTIMENT_NEUTRAL
            };
            assert_eq!(e.label, expected);
        }
        for e in aggression_corpus(&lex, 300, 5) {
            assert_eq!(e.label == 1, has_any(&e.text, &lex.aggression));
        }
    }

    #[test]
    fn probes_plant_one_token() {
        let lex = lex();
        for p in polarity_probes(&lex, 20, 6).iter().chain(&aggression_probes(&lex, 20, 7)) {
            let words: Vec<&str> = p.text.split(' ').collect();
            assert_eq!(words[p.position], p.token);
            assert_eq!(words.iter().filter(|w| !w.starts_with('w')).count(), 1);
        }
    }

    #[test]
    fn vocabulary_covers_lexicon() {
        let lex = lex();
        let v = lex.vocabulary().unwrap();
        for t in lex.all_tokens() {
            assert!(v.id(t).is_some(), "{t}");
        }
    }

    #[test]
    fn two_target_corpus_tags_targets() {
        let lex = lex();
        let c = two_target_corpus(&lex, ["migrants", "lgbtq"], 100, &HateSpec::shifted(), 9).unwrap();
        assert_eq!(c.filter_target("migrants").len(), 100);
        assert_eq!(c.filter_target("lgbtq").len(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let lex = lex();
        let a = shift_suite(&lex, SplitSizes { train: 50, val: 20, test: 20 }, &HateSpec::shifted(), 11).unwrap();
        let b = shift_suite(&lex, SplitSizes { train: 50, val: 20, test: 20 }, &HateSpec::shifted(), 11).unwrap();
        assert_eq!(a, b);
    }
}
