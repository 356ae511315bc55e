use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cue::CueAttention;
use crate::data::{class_weights, ClassWeights, Corpus};
use crate::encoder::TokenSequence;
use crate::error::{ensure, Result};
use crate::metrics::macro_f1;
use crate::params::{Adam, ParamStore};
use crate::schedule::{epoch_batches, TrainSchedule};

use super::{loss, HateModel, ModelGrads};

/// Tokenized texts with their (frozen, hence fixed) cue attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub seqs: Vec<TokenSequence>,
    pub cues: Vec<CueAttention>,
    pub labels: Vec<u8>,
}

impl PreparedCorpus {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

pub fn prepare(model: &HateModel, corpus: &Corpus) -> Result<PreparedCorpus> {
    let mut seqs = Vec::with_capacity(corpus.len());
    let mut cues = Vec::with_capacity(corpus.len());
    for r in &corpus.records {
        let seq = model.sequence(&r.text);
        cues.push(model.cues.attention(&seq)?);
        seqs.push(seq);
    }
    Ok(PreparedCorpus {
        seqs,
        cues,
        labels: corpus.labels(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub steps: usize,
    pub class_weights: ClassWeights,
}

/// Owns the optimizer state for one training run. Only the detector,
/// selector and classifier are ever updated.
pub struct Trainer<'m> {
    model: &'m mut HateModel,
    data: PreparedCorpus,
    weights: ClassWeights,
    batch_size: usize,
    rng: ChaCha8Rng,
    opt_detector: Adam,
    opt_selector: Adam,
    opt_classifier: Adam,
    grads: ModelGrads,
    steps: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut HateModel, train: &Corpus, schedule: &TrainSchedule) -> Result<Self> {
        model.cues.check_frozen()?;
        let data = prepare(model, train)?;
        Self::from_prepared(model, data, schedule)
    }

    pub fn from_prepared(model: &'m mut HateModel, data: PreparedCorpus, schedule: &TrainSchedule) -> Result<Self> {
        model.cues.check_frozen()?;
        schedule.validate()?;
        ensure!(!data.is_empty(), Validation, "training corpus is empty");
        let weights = class_weights(&data.labels)?;
        model.detector.set_dropout(schedule.dropout)?;
        let lr = schedule.learning_rate;
        Ok(Trainer {
            opt_detector: Adam::new(model.detector.params().len(), lr),
            opt_selector: Adam::new(model.selector.params().len(), lr * schedule.head_lr_scale),
            opt_classifier: Adam::new(model.classifier.params().len(), lr * schedule.head_lr_scale),
            grads: model.zero_grads(),
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            batch_size: schedule.batch_size,
            data,
            weights,
            model,
            steps: 0,
        })
    }

    pub fn model(&self) -> &HateModel {
        self.model
    }

    pub fn class_weights(&self) -> ClassWeights {
        self.weights
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer update on the given example indices; returns the
    /// batch-mean weighted loss.
    pub fn step(&mut self, batch: &[usize]) -> Result<f64> {
        ensure!(!batch.is_empty(), Validation, "empty batch");
        self.grads.fill_zero();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in batch {
            let (seq, cue, y) = (&self.data.seqs[i], &self.data.cues[i], self.data.labels[i]);
            let ef = self.model.forward_example(seq, cue, None, Some(&mut self.rng))?;
            total += loss(&ef.probs, y, &self.weights);
            let w = self.weights.of(y) * scale;
            let mut d_logits = [w * ef.probs[0], w * ef.probs[1]];
            d_logits[usize::from(y)] -= w;
            self.model.backward_example(&ef, seq, &d_logits, &mut self.grads);
        }
        self.opt_detector
            .step(self.model.detector.params_mut()?.as_mut_slice(), self.grads.detector.as_slice());
        self.opt_selector
            .step(self.model.selector.params_mut().as_mut_slice(), self.grads.selector.as_slice());
        self.opt_classifier
            .step(self.model.classifier.params_mut().as_mut_slice(), self.grads.classifier.as_slice());
        self.steps += 1;
        Ok(total * scale)
    }

    /// One shuffled pass; returns the mean per-example training loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut total = 0.0;
        for batch in epoch_batches(self.data.len(), self.batch_size, &mut self.rng) {
            total += self.step(&batch)? * batch.len() as f64;
        }
        Ok(total / self.data.len() as f64)
    }

    pub fn evaluate(&self, data: &PreparedCorpus) -> Result<f64> {
        let preds = predict_prepared(self.model, data)?;
        macro_f1(&preds, &data.labels)
    }

    fn snapshot(&self) -> [ParamStore; 3] {
        [
            self.model.detector.params().clone(),
            self.model.selector.params().clone(),
            self.model.classifier.params().clone(),
        ]
    }

    fn restore(&mut self, snap: &[ParamStore; 3]) -> Result<()> {
        self.model.detector.params_mut()?.load_from(&snap[0])?;
        self.model.selector.params_mut().load_from(&snap[1])?;
        self.model.classifier.params_mut().load_from(&snap[2])
    }
}

pub fn predict_prepared(model: &HateModel, data: &PreparedCorpus) -> Result<Vec<u8>> {
    data.seqs
        .iter()
        .zip(&data.cues)
        .map(|(s, c)| model.predict_label(s, c))
        .collect()
}

/// Train with early stopping on validation macro-F1 and restore the best
/// epoch's parameters.
pub fn train(model: &mut HateModel, train: &Corpus, val: &Corpus, schedule: &TrainSchedule) -> Result<TrainLog> {
    model.cues.check_frozen()?;
    ensure!(!val.is_empty(), Validation, "validation corpus is empty");
    let val_data = prepare(model, val)?;
    let train_data = prepare(model, train)?;
    train_prepared(model, train_data, &val_data, schedule)
}

pub fn train_prepared(
    model: &mut HateModel,
    train_data: PreparedCorpus,
    val_data: &PreparedCorpus,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    let mut t = Trainer::from_prepared(model, train_data, schedule)?;
    let mut best = (f64::NEG_INFINITY, 0usize, t.snapshot());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=schedule.max_epochs {
        let train_loss = t.run_epoch()?;
        let f1 = t.evaluate(val_data)?;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_macro_f1: f1,
        });
        if f1 > best.0 {
            best = (f1, epoch, t.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.early_stop_patience {
                break;
            }
        }
    }
    t.restore(&best.2)?;
    Ok(TrainLog {
        epochs,
        best_epoch: best.1,
        best_val_macro_f1: best.0,
        steps: t.steps(),
        class_weights: t.class_weights(),
    })
}
