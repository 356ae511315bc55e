//! Cue attention extraction, the selector head that fuses the two cue
//! vectors into the gate `C`, and the frozen-weights contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionTensor, EncoderState, TokenSequence, Vocabulary};
use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, sigmoid};

/// Per-token cue weights taken from the CLS attention row of each cue
/// encoder. `s` is sentiment, `a` is aggression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueAttention {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
}

impl CueAttention {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// The gate `C`, one value in `(0, 1)` per real token and 0 at PAD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionVector {
    pub c: Vec<f64>,
}

/// Head-averaged CLS row of the last block's attention.
pub fn extract_cue_attention(attn: &AttentionTensor, cls_index: usize, mask: &[u8]) -> Result<Vec<f64>> {
    ensure!(attn.n_layers() > 0, Validation, "attention tensor has no layers");
    extract_cue_attention_at(attn, attn.n_layers() - 1, cls_index, mask)
}

/// As [`extract_cue_attention`] but from an arbitrary block.
pub fn extract_cue_attention_at(attn: &AttentionTensor, layer: usize, cls_index: usize, mask: &[u8]) -> Result<Vec<f64>> {
    ensure!(layer < attn.n_layers(), Validation, "layer {layer} out of range ({} layers)", attn.n_layers());
    let k = attn.seq_len();
    ensure!(cls_index < k, Validation, "cls index {cls_index} outside [0, {k})");
    ensure!(mask.len() == k, Validation, "mask length {} != sequence length {k}", mask.len());
    let heads = &attn.probs[layer];
    ensure!(!heads.is_empty(), Validation, "attention layer has no heads");
    let mut out = vec![0.0; k];
    for h in heads {
        for (o, p) in out.iter_mut().zip(h.row(cls_index)) {
            *o += p;
        }
    }
    let n = heads.len() as f64;
    for (o, &m) in out.iter_mut().zip(mask) {
        *o = if m == 1 { *o / n } else { 0.0 };
    }
    Ok(out)
}

/// How the selector reads the two cue vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorMode {
    /// One shared `2 → h → 1` network applied to `(s_t, a_t)` at every position.
    PerPosition,
    /// A `2L → h → L` network over the zero-padded concatenation `S ⊕ A`.
    Concatenated { max_len: usize },
}

/// Parameters θ of the selector head.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    mode: SelectorMode,
    hidden: usize,
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Activations of one gate evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GateForward {
    pub c: f64,
    position: usize,
    x: Vec<f64>,
    z: Vec<f64>,
}

pub const DEFAULT_SELECTOR_HIDDEN: usize = 16;

impl SelectorParams {
    fn dims(mode: SelectorMode) -> (usize, usize) {
        match mode {
            SelectorMode::PerPosition => (2, 1),
            SelectorMode::Concatenated { max_len } => (2 * max_len, max_len),
        }
    }

    fn with_init(mode: SelectorMode, hidden: usize, mut init: impl FnMut(&str, usize, usize, &mut ParamStore) -> ParamId) -> Result<Self> {
        ensure!(hidden > 0, Config, "selector hidden width must be positive");
        if let SelectorMode::Concatenated { max_len } = mode {
            ensure!(max_len > 0, Config, "concatenated selector needs max_len > 0");
        }
        let (n_in, n_out) = Self::dims(mode);
        let mut store = ParamStore::new();
        let w1 = init("selector.w1", n_in, hidden, &mut store);
        let b1 = init("selector.b1", 1, hidden, &mut store);
        let w2 = init("selector.w2", hidden, n_out, &mut store);
        let b2 = init("selector.b2", 1, n_out, &mut store);
        Ok(SelectorParams {
            mode,
            hidden,
            store,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Random weights, zero biases.
    pub fn new(mode: SelectorMode, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(mode, hidden, |name, r, c, s| {
            if name.contains(".b") {
                s.add_const(name, r, c, 0.0)
            } else {
                // cue inputs are attention weights in [0, 1]; a wide first layer
                // lets small differences between them move the gate
                let std = if name.ends_with("w1") { 4.0 } else { 1.0 / (r as f64).sqrt() };
                s.add_normal(name, r, c, std, &mut rng)
            }
        })
    }

    pub fn zeros(mode: SelectorMode, hidden: usize) -> Result<Self> {
        Self::with_init(mode, hidden, |name, r, c, s| s.add_const(name, r, c, 0.0))
    }

    /// Explicit per-position weights: `w1` is `2 × h` row-major, `w2` has `h`
    /// entries.
    pub fn per_position(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        let h = b1.len();
        ensure!(w1.len() == 2 * h && w2.len() == h, Validation, "selector weight shapes disagree with hidden width {h}");
        let mut s = Self::zeros(SelectorMode::PerPosition, h)?;
        s.store.get_mut(s.w1).copy_from_slice(&w1);
        s.store.get_mut(s.b1).copy_from_slice(&b1);
        s.store.get_mut(s.w2).copy_from_slice(&w2);
        s.store.get_mut(s.b2)[0] = b2;
        Ok(s)
    }

    pub fn from_params(mode: SelectorMode, hidden: usize, params: &ParamStore) -> Result<Self> {
        let mut s = Self::zeros(mode, hidden)?;
        s.store.load_from(params)?;
        Ok(s)
    }

    pub fn mode(&self) -> SelectorMode {
        self.mode
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input(&self, s: &[f64], a: &[f64], t: usize) -> Vec<f64> {
        match self.mode {
            SelectorMode::PerPosition => vec![s[t], a[t]],
            SelectorMode::Concatenated { max_len } => {
                let mut x = vec![0.0; 2 * max_len];
                x[..s.len()].copy_from_slice(s);
                x[max_len..max_len + a.len()].copy_from_slice(a);
                x
            }
        }
    }

    /// Gate value `c_t` for position `t`.
    pub fn gate(&self, s: &[f64], a: &[f64], t: usize) -> Result<GateForward> {
        ensure!(s.len() == a.len(), Validation, "S has {} entries but A has {}", s.len(), a.len());
        ensure!(t < s.len(), Validation, "position {t} outside sequence of length {}", s.len());
        let (n_in, n_out) = Self::dims(self.mode);
        if let SelectorMode::Concatenated { max_len } = self.mode {
            ensure!(s.len() <= max_len, Validation, "sequence length {} exceeds selector max_len {max_len}", s.len());
        }
        let x = self.input(s, a, t);
        let mut z = self.store.get(self.b1).to_vec();
        gemm_nn(&x, self.store.get(self.w1), 1, n_in, self.hidden, &mut z);
        z.iter_mut().for_each(|v| *v = v.tanh());
        let (col, w2) = (if n_out == 1 { 0 } else { t }, self.store.get(self.w2));
        let mut pre = self.store.get(self.b2)[col];
        for (j, zj) in z.iter().enumerate() {
            pre += zj * w2[j * n_out + col];
        }
        Ok(GateForward {
            c: sigmoid(pre),
            position: col,
            x,
            z,
        })
    }

    /// Accumulate `∂L/∂θ` given `∂L/∂c_t`.
    pub fn gate_backward(&self, gf: &GateForward, dc: f64, grads: &mut ParamStore) {
        let (n_in, n_out) = Self::dims(self.mode);
        let h = self.hidden;
        let dpre = dc * gf.c * (1.0 - gf.c);
        let col = gf.position;
        grads.get_mut(self.b2)[col] += dpre;
        let w2 = self.store.get(self.w2);
        let mut dz = vec![0.0; h];
        {
            let gw2 = grads.get_mut(self.w2);
            for j in 0..h {
                gw2[j * n_out + col] += dpre * gf.z[j];
                dz[j] = dpre * w2[j * n_out + col] * (1.0 - gf.z[j] * gf.z[j]);
            }
        }
        let gb1 = grads.get_mut(self.b1);
        for j in 0..h {
            gb1[j] += dz[j];
        }
        let gw1 = grads.get_mut(self.w1);
        for i in 0..n_in {
            let xi = gf.x[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..h {
                gw1[i * h + j] += xi * dz[j];
            }
        }
    }
}

/// `c_t = sigmoid(g_θ(s_t, a_t))` at real positions, 0 at PAD.
pub fn fuse_cues(cue: &CueAttention, params: &SelectorParams, mask: &[u8]) -> Result<FusionVector> {
    ensure!(
        cue.s.len() == cue.a.len() && cue.s.len() == mask.len(),
        Validation,
        "cue lengths differ: S {}, A {}, mask {}",
        cue.s.len(),
        cue.a.len(),
        mask.len()
    );
    let mut c = vec![0.0; mask.len()];
    for (t, &m) in mask.iter().enumerate() {
        if m == 1 {
            c[t] = params.gate(&cue.s, &cue.a, t)?.c;
        }
    }
    Ok(FusionVector { c })
}

/// Mark a trained cue classifier as frozen: no optimizer may touch it and
/// its forward passes run without dropout.
pub fn freeze(mut state: EncoderState) -> EncoderState {
    state.set_frozen(true);
    state
}

/// The pair of frozen cue encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct CueExtractor {
    pub sentiment: EncoderState,
    pub aggression: EncoderState,
}

impl CueExtractor {
    pub fn new(sentiment: EncoderState, aggression: EncoderState) -> Self {
        CueExtractor { sentiment, aggression }
    }

    pub fn check_frozen(&self) -> Result<()> {
        for (name, s) in [("sentiment", &self.sentiment), ("aggression", &self.aggression)] {
            if !s.is_frozen() {
                return Err(Error::Contract(format!("{name} cue module is not frozen")));
            }
        }
        Ok(())
    }

    /// S and A for one tokenized sequence.
    pub fn attention(&self, seq: &TokenSequence) -> Result<CueAttention> {
        let fs = self.sentiment.forward(&seq.ids, &seq.mask, None)?;
        let fa = self.aggression.forward(&seq.ids, &seq.mask, None)?;
        Ok(CueAttention {
            s: extract_cue_attention(&fs.attention, seq.cls_index, &seq.mask)?,
            a: extract_cue_attention(&fa.attention, seq.cls_index, &seq.mask)?,
        })
    }
}

/// Tokenize once, run both frozen cue encoders and fuse their attention.
pub fn cue_guidance(
    text: &str,
    sentiment: &EncoderState,
    aggression: &EncoderState,
    selector: &SelectorParams,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, CueAttention, FusionVector)> {
    ensure!(!text.trim().is_empty(), Validation, "empty text");
    let ex = CueExtractor {
        sentiment: sentiment.clone(),
        aggression: aggression.clone(),
    };
    ex.check_frozen()?;
    let max_len = sentiment.config().max_len.min(aggression.config().max_len);
    let seq = vocab.tokenize(text, max_len).trimmed();
    let cue = ex.attention(&seq)?;
    let fusion = fuse_cues(&cue, selector, &seq.mask)?;
    Ok((seq, cue, fusion))
}

/// JSON document handed to the visualization pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceExport {
    pub tokens: Vec<String>,
    #[serde(rename = "S")]
    pub s: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
}

impl GuidanceExport {
    pub fn new(tokens: Vec<String>, cue: &CueAttention, fusion: &FusionVector) -> Result<Self> {
        let n = tokens.len();
        ensure!(
            cue.s.len() == n && cue.a.len() == n && fusion.c.len() == n,
            Validation,
            "guidance tracks do not match {n} tokens"
        );
        Ok(GuidanceExport {
            tokens,
            s: cue.s.clone(),
            a: cue.a.clone(),
            c: fusion.c.clone(),
        })
    }
}
