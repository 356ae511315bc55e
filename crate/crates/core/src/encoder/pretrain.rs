//! Fine-tune an encoder stack as a sentiment or aggression classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledText;
use crate::error::{ensure, Result};
use crate::params::Adam;
use crate::schedule::{epoch_batches, TrainSchedule};
use crate::tensor::softmax;

use super::model::{EncoderConfig, EncoderState};
use super::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueTask {
    /// positive / neutral / negative
    Sentiment,
    /// aggressive / non-aggressive
    Aggression,
}

impl CueTask {
    pub fn name(self) -> &'static str {
        match self {
            CueTask::Sentiment => "sentiment",
            CueTask::Aggression => "aggression",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            CueTask::Sentiment => 3,
            CueTask::Aggression => 2,
        }
    }
}

impl std::str::FromStr for CueTask {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(CueTask::Sentiment),
            "aggression" => Ok(CueTask::Aggression),
            other => Err(crate::error::Error::Validation(format!("unknown cue task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub task: CueTask,
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub majority_baseline: f64,
}

fn check_labels(examples: &[LabeledText], task: CueTask, what: &str) -> Result<()> {
    let n = task.n_classes();
    let mut seen = vec![false; n];
    for e in examples {
        ensure!(
            e.label < n,
            Validation,
            "{what} label {} is invalid for the {task:?} task ({n} classes)",
            e.label
        );
        seen[e.label] = true;
    }
    ensure!(
        what != "train" || seen.iter().all(|&s| s),
        Validation,
        "{task:?} training data must contain all {n} classes"
    );
    Ok(())
}

fn sequences(examples: &[LabeledText], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    examples.iter().map(|e| vocab.tokenize(&e.text, max_len).trimmed()).collect()
}

fn class_probs(state: &EncoderState, seq: &TokenSequence) -> Result<Vec<f64>> {
    let f = state.forward(&seq.ids, &seq.mask, None)?;
    let h = state.head_forward(&f, seq.cls_index, None)?;
    Ok(softmax(&h.logits))
}

/// Argmax class for every sequence under `state`'s task head.
pub fn predict_classes(state: &EncoderState, seqs: &[TokenSequence]) -> Result<Vec<usize>> {
    seqs.iter().map(|s| Ok(argmax(&class_probs(state, s)?))).collect()
}

pub fn accuracy(state: &EncoderState, examples: &[LabeledText], vocab: &Vocabulary) -> Result<f64> {
    let seqs = sequences(examples, vocab, state.config().max_len);
    let preds = predict_classes(state, &seqs)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / examples.len().max(1) as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn pretrain_cue_classifier(
    train: &[LabeledText],
    val: &[LabeledText],
    vocab: &Vocabulary,
    mut config: EncoderConfig,
    task: CueTask,
    schedule: &TrainSchedule,
) -> Result<(EncoderState, PretrainReport)> {
    schedule.validate()?;
    ensure!(!train.is_empty() && !val.is_empty(), Validation, "cue corpora must be non-empty");
    check_labels(train, task, "train")?;
    check_labels(val, task, "validation")?;
    config.dropout = schedule.dropout;

    let mut state = EncoderState::new(config, vocab.len(), Some(task.n_classes()), schedule.seed)?;
    let train_seqs = sequences(train, vocab, config.max_len);
    let val_seqs = sequences(val, vocab, config.max_len);

    let mut counts = vec![0usize; task.n_classes()];
    for e in val {
        counts[e.label] += 1;
    }
    let majority_baseline = *counts.iter().max().unwrap_or(&0) as f64 / val.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed_c0de);
    let mut opt = Adam::new(state.params().len(), schedule.learning_rate);
    let mut grads = state.params().zeros_like();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, state.params().clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=schedule.max_epochs {
        let mut total = 0.0;
        for batch in epoch_batches(train.len(), schedule.batch_size, &mut rng) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let seq = &train_seqs[i];
                let fwd = state.forward(&seq.ids, &seq.mask, Some(&mut rng))?;
                let hf = state.head_forward(&fwd, seq.cls_index, Some(&mut rng))?;
                let mut p = softmax(&hf.logits);
                let y = train[i].label;
                total += -p[y].max(1e-12).ln();
                p[y] -= 1.0;
                p.iter_mut().for_each(|g| *g *= scale);
                let d_out = state.head_backward(&fwd, &hf, seq.cls_index, &p, &mut grads);
                state.backward(&fwd, &d_out, &mut grads);
            }
            opt.step(state.params_mut()?.as_mut_slice(), grads.as_slice());
        }
        let (mut hits, mut val_loss) = (0usize, 0.0);
        for (seq, e) in val_seqs.iter().zip(val) {
            let p = class_probs(&state, seq)?;
            hits += usize::from(argmax(&p) == e.label);
            val_loss -= p[e.label].max(1e-12).ln();
        }
        let acc = hits as f64 / val.len() as f64;
        val_loss /= val.len() as f64;
        epochs.push(PretrainEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy: acc,
            val_loss,
        });
        // Accuracy saturates quickly on clean cue corpora; ties go to the
        // lower validation loss so training keeps sharpening the head.
        if acc > best.0 || (acc == best.0 && val_loss < best.1) {
            best = (acc, val_loss, epoch, state.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.early_stop_patience {
                break;
            }
        }
    }

    state.params_mut()?.load_from(&best.3)?;
    Ok((
        state,
        PretrainReport {
            task,
            epochs,
            best_epoch: best.2,
            best_val_accuracy: best.0,
            majority_baseline,
        },
    ))
}
