//! Model bundle directory:
//!
//! ```text
//! manifest.json      BundleManifest
//! vocab.txt          one token per line
//! detector.ckpt      encoder archives (see `checkpoint`)
//! sentiment.ckpt
//! aggression.ckpt
//! selector.ckpt
//! classifier.ckpt
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cue::{CueExtractor, SelectorMode, SelectorParams};
use crate::encoder::{EncoderConfig, EncoderState, Vocabulary};
use crate::error::{Error, Result};
use crate::schedule::TrainSchedule;

use super::{ClassifierHead, CueVariant, HateModel};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub bundle_version: u32,
    pub crate_version: String,
    pub variant: CueVariant,
    pub detector_config: EncoderConfig,
    pub selector_mode: SelectorMode,
    pub selector_hidden: usize,
    pub schedule: Option<TrainSchedule>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectorMeta {
    kind: String,
    mode: SelectorMode,
    hidden: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    d_model: usize,
}

impl HateModel {
    pub fn save_bundle(&self, dir: &Path, schedule: Option<&TrainSchedule>) -> Result<BundleManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BundleManifest {
            bundle_version: BUNDLE_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            variant: self.variant,
            detector_config: *self.detector.config(),
            selector_mode: self.selector.mode(),
            selector_hidden: self.selector.hidden(),
            schedule: schedule.copied(),
            seed: schedule.map(|s| s.seed),
        };
        let mp = dir.join("manifest.json");
        fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.detector.save(&dir.join("detector.ckpt"))?;
        self.cues.sentiment.save(&dir.join("sentiment.ckpt"))?;
        self.cues.aggression.save(&dir.join("aggression.ckpt"))?;
        checkpoint::save(
            &dir.join("selector.ckpt"),
            &SelectorMeta {
                kind: "selector".into(),
                mode: self.selector.mode(),
                hidden: self.selector.hidden(),
            },
            self.selector.params(),
        )?;
        checkpoint::save(
            &dir.join("classifier.ckpt"),
            &ClassifierMeta {
                kind: "classifier".into(),
                d_model: self.classifier.d_model(),
            },
            self.classifier.params(),
        )?;
        Ok(manifest)
    }

    pub fn load_bundle(dir: &Path) -> Result<(Self, BundleManifest)> {
        let mp = dir.join("manifest.json");
        let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: BundleManifest = serde_json::from_slice(&bytes)?;
        if manifest.bundle_version != BUNDLE_VERSION {
            return Err(Error::Checkpoint(format!(
                "bundle version {} is not supported (expected {BUNDLE_VERSION})",
                manifest.bundle_version
            )));
        }
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let detector = EncoderState::load(&dir.join("detector.ckpt"))?;
        let sentiment = EncoderState::load(&dir.join("sentiment.ckpt"))?;
        let aggression = EncoderState::load(&dir.join("aggression.ckpt"))?;
        let (sm, sp): (SelectorMeta, _) = checkpoint::load(&dir.join("selector.ckpt"))?;
        let (cm, cp): (ClassifierMeta, _) = checkpoint::load(&dir.join("classifier.ckpt"))?;
        if sm.kind != "selector" || cm.kind != "classifier" {
            return Err(Error::Checkpoint("bundle head archives have the wrong kind".into()));
        }
        let model = HateModel {
            detector,
            cues: CueExtractor::new(sentiment, aggression),
            selector: SelectorParams::from_params(sm.mode, sm.hidden, &sp)?,
            classifier: ClassifierHead::from_params(cm.d_model, &cp)?,
            vocab,
            variant: manifest.variant,
        };
        model.check_shapes()?;
        Ok((model, manifest))
    }
}
