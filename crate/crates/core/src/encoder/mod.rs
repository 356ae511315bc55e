//! Transformer encoder stack, tokenization and cue-classifier pretraining.

mod model;
mod pretrain;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use model::{
    attention_probs, AttentionTensor, EncoderConfig, EncoderState, Forward, HeadForward, HiddenStates,
};
pub(crate) use model::add_into;
pub use pretrain::{accuracy, predict_classes, pretrain_cue_classifier, CueTask, PretrainEpoch, PretrainReport};
pub use vocab::{split_tokens, TokenSequence, Vocabulary, CLS, CLS_ID, PAD, PAD_ID, SEP_ID, UNK_ID};

use crate::checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderMeta {
    kind: String,
    config: EncoderConfig,
    vocab_size: usize,
    n_classes: Option<usize>,
    frozen: bool,
}

impl EncoderState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EncoderMeta {
            kind: "encoder".into(),
            config: *self.config(),
            vocab_size: self.vocab_size(),
            n_classes: self.n_classes(),
            frozen: self.is_frozen(),
        };
        checkpoint::save(path, &meta, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (EncoderMeta, _) = checkpoint::load(path)?;
        if meta.kind != "encoder" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} archive, not an encoder",
                path.display(),
                meta.kind
            )));
        }
        EncoderState::from_params(meta.config, meta.vocab_size, meta.n_classes, &params, meta.frozen)
    }
}
