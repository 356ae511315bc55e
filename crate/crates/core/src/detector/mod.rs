//! The trainable hate classifier: detector encoder, cue gate, fusion
//! `F = R ⊙ C` and the classification head on the fused CLS row.

mod bundle;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bundle::{BundleManifest, BUNDLE_VERSION};
pub use train::{predict_prepared, prepare, train, train_prepared, EpochLog, PreparedCorpus, TrainLog, Trainer};

use crate::cue::{
    extract_cue_attention, fuse_cues, CueAttention, CueExtractor, FusionVector, GateForward, SelectorParams,
};
use crate::data::ClassWeights;
use crate::encoder::{EncoderConfig, EncoderState, Forward, TokenSequence, Vocabulary};
use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax, Mat};

pub use crate::schedule::TrainSchedule;

/// Log clamp applied to predicted probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// `F[t][j] = R[t][j] · C[t]`.
pub fn fuse_representation(r: &Mat, c: &FusionVector) -> Result<Mat> {
    ensure!(
        r.rows == c.c.len(),
        Validation,
        "representation has {} rows but the gate has {} entries",
        r.rows,
        c.c.len()
    );
    let mut f = r.clone();
    for (t, &ct) in c.c.iter().enumerate() {
        f.row_mut(t).iter_mut().for_each(|v| *v *= ct);
    }
    Ok(f)
}

/// `w_y · (−log max(ŷ_y, ε))`.
pub fn loss(probs: &[f64; 2], y: u8, weights: &ClassWeights) -> f64 {
    weights.of(y) * -probs[usize::from(y)].max(LOG_EPS).ln()
}

/// Which cue signals reach the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueVariant {
    Full,
    SentimentOnly,
    AggressionOnly,
    /// Gate forced to 1: the plain detector.
    Base,
}

impl CueVariant {
    pub const ALL: [CueVariant; 4] = [
        CueVariant::Full,
        CueVariant::SentimentOnly,
        CueVariant::AggressionOnly,
        CueVariant::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CueVariant::Full => "full",
            CueVariant::SentimentOnly => "sentiment_only",
            CueVariant::AggressionOnly => "aggression_only",
            CueVariant::Base => "base",
        }
    }

    /// Suppress the cue vectors this variant ignores.
    pub fn apply(self, cue: &CueAttention) -> CueAttention {
        let zeros = vec![0.0; cue.len()];
        match self {
            CueVariant::Full | CueVariant::Base => cue.clone(),
            CueVariant::SentimentOnly => CueAttention {
                s: cue.s.clone(),
                a: zeros,
            },
            CueVariant::AggressionOnly => CueAttention {
                s: zeros,
                a: cue.a.clone(),
            },
        }
    }
}

impl std::str::FromStr for CueVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CueVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown cue variant {s:?}")))
    }
}

/// `f_φ`: `d → d/2 → 2` with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    d_model: usize,
    hidden: usize,
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct ClassifierForward {
    pub logits: [f64; 2],
    x: Vec<f64>,
    z: Vec<f64>,
}

impl ClassifierHead {
    fn build(d_model: usize, mut init: impl FnMut(&str, usize, usize, &mut ParamStore) -> ParamId) -> Result<Self> {
        ensure!(d_model > 0, Config, "classifier input width must be positive");
        let hidden = (d_model / 2).max(1);
        let mut store = ParamStore::new();
        let w1 = init("classifier.w1", d_model, hidden, &mut store);
        let b1 = init("classifier.b1", 1, hidden, &mut store);
        let w2 = init("classifier.w2", hidden, 2, &mut store);
        let b2 = init("classifier.b2", 1, 2, &mut store);
        Ok(ClassifierHead {
            d_model,
            hidden,
            store,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn new(d_model: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(d_model, |name, r, c, s| {
            if name.ends_with(".b1") || name.ends_with(".b2") {
                s.add_const(name, r, c, 0.0)
            } else {
                s.add_normal(name, r, c, 1.0 / (r as f64).sqrt(), &mut rng)
            }
        })
    }

    pub fn zeros(d_model: usize) -> Result<Self> {
        Self::build(d_model, |name, r, c, s| s.add_const(name, r, c, 0.0))
    }

    pub fn from_params(d_model: usize, params: &ParamStore) -> Result<Self> {
        let mut h = Self::zeros(d_model)?;
        h.store.load_from(params)?;
        Ok(h)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Overwrite the output bias, e.g. to pin logits in tests.
    pub fn set_output_bias(&mut self, b: [f64; 2]) {
        self.store.get_mut(self.b2).copy_from_slice(&b);
    }

    pub fn forward(&self, x: &[f64]) -> Result<ClassifierForward> {
        ensure!(
            x.len() == self.d_model,
            Config,
            "classifier expects width {}, got {}",
            self.d_model,
            x.len()
        );
        let s = &self.store;
        let mut z = s.get(self.b1).to_vec();
        gemm_nn(x, s.get(self.w1), 1, self.d_model, self.hidden, &mut z);
        z.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = [0.0; 2];
        logits.copy_from_slice(s.get(self.b2));
        gemm_nn(&z, s.get(self.w2), 1, self.hidden, 2, &mut logits);
        Ok(ClassifierForward {
            logits,
            x: x.to_vec(),
            z,
        })
    }

    /// Accumulate grads; returns `∂L/∂x`.
    pub fn backward(&self, cf: &ClassifierForward, d_logits: &[f64; 2], grads: &mut ParamStore) -> Vec<f64> {
        let (d, h) = (self.d_model, self.hidden);
        gemm_tn(&cf.z, d_logits, h, 1, 2, grads.get_mut(self.w2));
        crate::encoder::add_into(grads.get_mut(self.b2), d_logits);
        let mut dz = vec![0.0; h];
        gemm_nt(d_logits, self.store.get(self.w2), 1, 2, h, &mut dz);
        for (g, z) in dz.iter_mut().zip(&cf.z) {
            *g *= 1.0 - z * z;
        }
        gemm_tn(&cf.x, &dz, d, 1, h, grads.get_mut(self.w1));
        crate::encoder::add_into(grads.get_mut(self.b1), &dz);
        let mut dx = vec![0.0; d];
        gemm_nt(&dz, self.store.get(self.w1), 1, h, d, &mut dx);
        dx
    }
}

/// Softmax of `f_φ(F[cls])`.
pub fn classify(f: &Mat, cls_index: usize, head: &ClassifierHead) -> Result<[f64; 2]> {
    ensure!(cls_index < f.rows, Validation, "cls index {cls_index} outside {} rows", f.rows);
    ensure!(
        f.cols == head.d_model(),
        Config,
        "representation width {} != classifier width {}",
        f.cols,
        head.d_model()
    );
    let cf = head.forward(f.row(cls_index))?;
    Ok(probs2(&cf.logits))
}

fn probs2(logits: &[f64; 2]) -> [f64; 2] {
    let p = softmax(logits);
    [p[0], p[1]]
}

/// Token-level evidence attached to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub tokens: Vec<String>,
    pub cue: CueAttention,
    pub fusion: FusionVector,
    /// Head-averaged last-block CLS attention row of the detector itself.
    pub detector_attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub probs: [f64; 2],
    pub attribution: Attribution,
}

/// Gradients for every trainable component, laid out like the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub detector: ParamStore,
    pub selector: ParamStore,
    pub classifier: ParamStore,
}

impl ModelGrads {
    pub fn fill_zero(&mut self) {
        self.detector.fill_zero();
        self.selector.fill_zero();
        self.classifier.fill_zero();
    }
}

/// One example's forward activations.
pub struct ExampleForward {
    pub probs: [f64; 2],
    pub gate: f64,
    det: Forward,
    gate_fwd: Option<GateForward>,
    cls: ClassifierForward,
    drop_in: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HateModel {
    pub detector: EncoderState,
    pub cues: CueExtractor,
    pub selector: SelectorParams,
    pub classifier: ClassifierHead,
    pub vocab: Vocabulary,
    pub variant: CueVariant,
}

impl HateModel {
    pub fn new(
        vocab: Vocabulary,
        config: EncoderConfig,
        cues: CueExtractor,
        selector: SelectorParams,
        variant: CueVariant,
        seed: u64,
    ) -> Result<Self> {
        let detector = EncoderState::new(config, vocab.len(), None, seed)?;
        let classifier = ClassifierHead::new(config.d_model, seed.wrapping_add(1))?;
        let m = HateModel {
            detector,
            cues,
            selector,
            classifier,
            vocab,
            variant,
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let v = self.vocab.len();
        for (name, s) in [
            ("detector", &self.detector),
            ("sentiment", &self.cues.sentiment),
            ("aggression", &self.cues.aggression),
        ] {
            ensure!(
                s.vocab_size() == v,
                Config,
                "{name} encoder was built for {} tokens but the vocabulary has {v}",
                s.vocab_size()
            );
        }
        ensure!(
            self.classifier.d_model() == self.detector.config().d_model,
            Config,
            "classifier width {} != detector d_model {}",
            self.classifier.d_model(),
            self.detector.config().d_model
        );
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.detector
            .config()
            .max_len
            .min(self.cues.sentiment.config().max_len)
            .min(self.cues.aggression.config().max_len)
    }

    /// Tokenized text without trailing padding.
    pub fn sequence(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text, self.max_len()).trimmed()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            detector: self.detector.params().zeros_like(),
            selector: self.selector.params().zeros_like(),
            classifier: self.classifier.params().zeros_like(),
        }
    }

    /// Forward one example. `gate_override` replaces the learned gate (the
    /// base variant always uses 1).
    pub fn forward_example(
        &self,
        seq: &TokenSequence,
        cue: &CueAttention,
        gate_override: Option<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ExampleForward> {
        let det = self.detector.forward(&seq.ids, &seq.mask, dropout_rng.as_deref_mut())?;
        let (gate, gate_fwd) = match (gate_override, self.variant) {
            (Some(c), _) => (c, None),
            (None, CueVariant::Base) => (1.0, None),
            (None, v) => {
                let cue = v.apply(cue);
                ensure!(cue.len() == seq.len(), Validation, "cue vectors do not match the sequence");
                let g = self.selector.gate(&cue.s, &cue.a, seq.cls_index)?;
                (g.c, Some(g))
            }
        };
        let mut x: Vec<f64> = det.hidden.last().row(seq.cls_index).iter().map(|r| r * gate).collect();
        let p = self.detector.config().dropout;
        let drop_in = match dropout_rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let m: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };
        let cls = self.classifier.forward(&x)?;
        Ok(ExampleForward {
            probs: probs2(&cls.logits),
            gate,
            det,
            gate_fwd,
            cls,
            drop_in,
        })
    }

    /// Backpropagate `∂L/∂logits` into detector, selector and classifier.
    pub fn backward_example(&self, ef: &ExampleForward, seq: &TokenSequence, d_logits: &[f64; 2], grads: &mut ModelGrads) {
        let mut dx = self.classifier.backward(&ef.cls, d_logits, &mut grads.classifier);
        if let Some(m) = &ef.drop_in {
            dx.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        let r_cls = ef.det.hidden.last().row(seq.cls_index);
        if let Some(gf) = &ef.gate_fwd {
            let dc: f64 = dx.iter().zip(r_cls).map(|(g, r)| g * r).sum();
            self.selector.gate_backward(gf, dc, &mut grads.selector);
        }
        let d = self.detector.config().d_model;
        let mut d_out = Mat::zeros(seq.len(), d);
        for (o, g) in d_out.row_mut(seq.cls_index).iter_mut().zip(&dx) {
            *o = g * ef.gate;
        }
        self.detector.backward(&ef.det, &d_out, &mut grads.detector);
    }

    /// Weighted loss of one example and its exact gradients (no dropout).
    pub fn example_loss_and_grads(
        &self,
        seq: &TokenSequence,
        cue: &CueAttention,
        y: u8,
        weights: &ClassWeights,
    ) -> Result<(f64, ModelGrads)> {
        let ef = self.forward_example(seq, cue, None, None)?;
        let l = loss(&ef.probs, y, weights);
        let w = weights.of(y);
        let mut d_logits = [w * ef.probs[0], w * ef.probs[1]];
        d_logits[usize::from(y)] -= w;
        let mut grads = self.zero_grads();
        self.backward_example(&ef, seq, &d_logits, &mut grads);
        Ok((l, grads))
    }

    /// Eval-mode logits with an optional forced gate.
    pub fn logits(&self, seq: &TokenSequence, cue: &CueAttention, gate_override: Option<f64>) -> Result<[f64; 2]> {
        Ok(self.forward_example(seq, cue, gate_override, None)?.cls.logits)
    }

    /// Logits of the detector alone: `f_φ(R[cls])`, no gate applied.
    pub fn base_logits(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
        let (hidden, _) = self.detector.encode(seq, None)?;
        Ok(self.classifier.forward(hidden.last().row(seq.cls_index))?.logits)
    }

    pub fn predict(&self, text: &str) -> Result<Prediction> {
        ensure!(!text.trim().is_empty(), Validation, "cannot classify empty text");
        let seq = self.sequence(text);
        let cue = self.cues.attention(&seq)?;
        let ef = self.forward_example(&seq, &cue, None, None)?;
        let label = u8::from(ef.probs[1] > ef.probs[0]);
        let fusion = match self.variant {
            CueVariant::Base => FusionVector {
                c: seq.mask.iter().map(|&m| f64::from(m)).collect(),
            },
            v => fuse_cues(&v.apply(&cue), &self.selector, &seq.mask)?,
        };
        let detector_attention = extract_cue_attention(&ef.det.attention, seq.cls_index, &seq.mask)?;
        Ok(Prediction {
            label,
            probs: ef.probs,
            attribution: Attribution {
                tokens: self.vocab.surface(&seq),
                cue,
                fusion,
                detector_attention,
            },
        })
    }

    /// Label only, from precomputed cue attention.
    pub fn predict_label(&self, seq: &TokenSequence, cue: &CueAttention) -> Result<u8> {
        let ef = self.forward_example(seq, cue, None, None)?;
        Ok(u8::from(ef.probs[1] > ef.probs[0]))
    }
}
