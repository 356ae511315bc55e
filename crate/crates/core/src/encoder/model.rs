//! Post-LN transformer encoder with full attention capture and a
//! hand-written backward pass.
//!
//! Activations are row-major `k × d` matrices (one row per position); weight
//! matrices are stored `in × out` so a projection is `x · W + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Mat};

use super::vocab::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Default laptop-sized stack.
    pub fn desk() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            max_len: 128,
            dropout: 0.2,
        }
    }

    /// RoBERTa-base dimensions, for use with imported weights.
    pub fn roberta_base() -> Self {
        EncoderConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_ff: 3072,
            max_len: 512,
            dropout: 0.2,
        }
    }

    /// Gradient-check sized stack.
    pub fn tiny() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            max_len: 8,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_layers > 0 && self.d_model > 0 && self.n_heads > 0 && self.d_head > 0 && self.d_ff > 0 && self.max_len > 0,
            Config,
            "encoder dimensions must be positive: {self:?}"
        );
        ensure!(
            self.d_model == self.n_heads * self.d_head,
            Config,
            "d_model {} != n_heads {} * d_head {}",
            self.d_model,
            self.n_heads,
            self.d_head
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Config,
            "dropout must lie in [0, 1), got {}",
            self.dropout
        );
        ensure!(self.max_len <= 512, Config, "max_len {} exceeds 512", self.max_len);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadIds {
    dense_w: ParamId,
    dense_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    emb_g: ParamId,
    emb_b: ParamId,
    blocks: Vec<BlockIds>,
    head: Option<HeadIds>,
}

fn build_layout<R: Rng>(
    cfg: &EncoderConfig,
    vocab_size: usize,
    n_classes: Option<usize>,
    rng: &mut R,
) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    let emb_std = 0.1;
    let w = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    let tok = s.add_normal("emb.tok", vocab_size, d, emb_std, rng);
    let pos = s.add_normal("emb.pos", cfg.max_len, d, emb_std, rng);
    let emb_g = s.add_const("emb.ln.g", 1, d, 1.0);
    let emb_b = s.add_const("emb.ln.b", 1, d, 0.0);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        blocks.push(BlockIds {
            wq: s.add_normal(p("attn.wq"), d, d, w(d), rng),
            bq: s.add_const(p("attn.bq"), 1, d, 0.0),
            wk: s.add_normal(p("attn.wk"), d, d, w(d), rng),
            bk: s.add_const(p("attn.bk"), 1, d, 0.0),
            wv: s.add_normal(p("attn.wv"), d, d, w(d), rng),
            bv: s.add_const(p("attn.bv"), 1, d, 0.0),
            wo: s.add_normal(p("attn.wo"), d, d, w(d), rng),
            bo: s.add_const(p("attn.bo"), 1, d, 0.0),
            ln1_g: s.add_const(p("ln1.g"), 1, d, 1.0),
            ln1_b: s.add_const(p("ln1.b"), 1, d, 0.0),
            w1: s.add_normal(p("ffn.w1"), d, cfg.d_ff, w(d), rng),
            b1: s.add_const(p("ffn.b1"), 1, cfg.d_ff, 0.0),
            w2: s.add_normal(p("ffn.w2"), cfg.d_ff, d, w(cfg.d_ff), rng),
            b2: s.add_const(p("ffn.b2"), 1, d, 0.0),
            ln2_g: s.add_const(p("ln2.g"), 1, d, 1.0),
            ln2_b: s.add_const(p("ln2.b"), 1, d, 0.0),
        });
    }
    let head = n_classes.map(|c| HeadIds {
        dense_w: s.add_normal("head.dense.w", d, d, w(d), rng),
        dense_b: s.add_const("head.dense.b", 1, d, 0.0),
        out_w: s.add_normal("head.out.w", d, c, w(d), rng),
        out_b: s.add_const("head.out.b", 1, c, 0.0),
        n_classes: c,
    });
    (
        s,
        Layout {
            tok,
            pos,
            emb_g,
            emb_b,
            blocks,
            head,
        },
    )
}

/// Attention probabilities of every layer and head: `probs[layer][head]` is
/// a `k × k` row-stochastic matrix (query rows, key columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    pub probs: Vec<Vec<Mat>>,
}

impl AttentionTensor {
    pub fn n_layers(&self) -> usize {
        self.probs.len()
    }

    pub fn n_heads(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn seq_len(&self) -> usize {
        self.probs
            .first()
            .and_then(|l| l.first())
            .map_or(0, |m| m.rows)
    }
}

/// Output of each encoder block, `k × d_model`; the last entry is the
/// representation consumed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Mat>,
}

impl HiddenStates {
    pub fn last(&self) -> &Mat {
        self.layers.last().expect("encoder has at least one layer")
    }
}

/// `softmax(Q Kᵀ / sqrt(d_head))` with masked key columns forced to zero.
pub fn attention_probs(q: &Mat, k: &Mat, mask: &[u8]) -> Result<Mat> {
    let n = q.rows;
    ensure!(n > 0, Validation, "attention over an empty sequence");
    ensure!(
        k.rows == n && q.cols == k.cols && mask.len() == n,
        Validation,
        "attention shape mismatch: q {}x{}, k {}x{}, mask {}",
        q.rows,
        q.cols,
        k.rows,
        k.cols,
        mask.len()
    );
    ensure!(mask.contains(&1), Validation, "attention mask has no real positions");
    let mut p = Mat::zeros(n, n);
    gemm_nt(&q.data, &k.data, n, q.cols, n, &mut p.data);
    finish_probs(&mut p, q.cols, mask);
    Ok(p)
}

fn finish_probs(scores: &mut Mat, d_head: usize, mask: &[u8]) {
    let scale = 1.0 / (d_head as f64).sqrt();
    let n = scores.cols;
    for i in 0..scores.rows {
        let row = scores.row_mut(i);
        for j in 0..n {
            row[j] = if mask[j] == 1 { row[j] * scale } else { f64::NEG_INFINITY };
        }
        softmax_in_place(row);
    }
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (r[j] - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xh[j] * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(dy: &Mat, cache: &LnCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxh = vec![0.0; d];
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxh[j] = dyr[j] * g[j];
        }
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = is * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn linear(x: &Mat, w: &[f64], b: &[f64], out_dim: usize) -> Mat {
    let mut y = Mat::zeros(x.rows, out_dim);
    for i in 0..x.rows {
        y.row_mut(i).copy_from_slice(b);
    }
    gemm_nn(&x.data, w, x.rows, x.cols, out_dim, &mut y.data);
    y
}

/// Accumulates weight/bias grads and returns `dx`.
fn linear_back(x: &Mat, dy: &Mat, w: &[f64], dw: &mut [f64], db: &mut [f64]) -> Mat {
    gemm_tn(&x.data, &dy.data, x.cols, x.rows, dy.cols, dw);
    for i in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    let mut dx = Mat::zeros(x.rows, x.cols);
    gemm_nt(&dy.data, w, dy.rows, dy.cols, x.cols, &mut dx.data);
    dx
}

fn dropout_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn head_slice(x: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(x.rows, dh);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Mat, src: &Mat, h: usize, dh: usize) {
    for i in 0..dst.rows {
        for (a, b) in dst.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

struct BlockCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    ctx: Mat,
    ln1: LnCache,
    h1: Mat,
    u: Mat,
    g: Mat,
    ln2: LnCache,
    drop_attn: Option<Vec<f64>>,
    drop_ffn: Option<Vec<f64>>,
}

/// Everything a backward pass needs from one forward pass.
pub struct Forward {
    pub hidden: HiddenStates,
    pub attention: AttentionTensor,
    ids: Vec<usize>,
    emb_ln: LnCache,
    drop_emb: Option<Vec<f64>>,
    blocks: Vec<BlockCache>,
}

/// Cached activations of the CLS classification head.
pub struct HeadForward {
    pub logits: Vec<f64>,
    x: Vec<f64>,
    hidden: Vec<f64>,
    drop_in: Option<Vec<f64>>,
    drop_hidden: Option<Vec<f64>>,
}

/// Parameters of one encoder stack plus an optional CLS task head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    config: EncoderConfig,
    vocab_size: usize,
    store: ParamStore,
    layout: Layout,
    frozen: bool,
}

impl EncoderState {
    pub fn new(config: EncoderConfig, vocab_size: usize, n_classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(vocab_size > 0, Config, "vocabulary is empty");
        if let Some(c) = n_classes {
            ensure!(c >= 2, Config, "task head needs at least two classes, got {c}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, layout) = build_layout(&config, vocab_size, n_classes, &mut rng);
        Ok(EncoderState {
            config,
            vocab_size,
            store,
            layout,
            frozen: false,
        })
    }

    /// Rebuild from saved parameters; every name and shape must match what
    /// `config` implies.
    pub fn from_params(
        config: EncoderConfig,
        vocab_size: usize,
        n_classes: Option<usize>,
        params: &ParamStore,
        frozen: bool,
    ) -> Result<Self> {
        let mut s = Self::new(config, vocab_size, n_classes, 0)?;
        s.store.load_from(params)?;
        s.frozen = frozen;
        Ok(s)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.layout.head.as_ref().map(|h| h.n_classes)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access for optimizers; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Contract(
                "attempted to mutate the parameters of a frozen encoder".into(),
            ));
        }
        Ok(&mut self.store)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        ensure!((0.0..1.0).contains(&p), Config, "dropout must lie in [0, 1), got {p}");
        self.config.dropout = p;
        Ok(())
    }

    /// Verify the stored tensors agree with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Self::new(self.config, self.vocab_size, self.n_classes(), 0)?;
        if !fresh.store.same_layout(&self.store) {
            return Err(Error::Config("encoder parameters do not match configuration".into()));
        }
        Ok(())
    }

    fn validate_input(&self, ids: &[usize], mask: &[u8]) -> Result<()> {
        ensure!(!ids.is_empty(), Validation, "empty token sequence");
        ensure!(
            ids.len() <= self.config.max_len,
            Validation,
            "sequence length {} exceeds max_len {}",
            ids.len(),
            self.config.max_len
        );
        ensure!(ids.len() == mask.len(), Validation, "ids and mask lengths differ");
        ensure!(mask[0] == 1, Validation, "CLS position must be unmasked");
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass. `dropout_rng = Some(..)` enables training-mode
    /// dropout unless the state is frozen.
    pub fn forward(&self, ids: &[usize], mask: &[u8], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.validate_input(ids, mask)?;
        let cfg = &self.config;
        let (n, d, dh) = (ids.len(), cfg.d_model, cfg.d_head);
        let p = cfg.dropout;
        let mut rng = if self.frozen || p == 0.0 { None } else { dropout_rng };
        let s = &self.store;
        let lay = &self.layout;

        let tok = s.get(lay.tok);
        let pos = s.get(lay.pos);
        let mut e = Mat::zeros(n, d);
        for (t, &id) in ids.iter().enumerate() {
            let row = e.row_mut(t);
            for j in 0..d {
                row[j] = tok[id * d + j] + pos[t * d + j];
            }
        }
        let (mut x, emb_ln) = layer_norm(&e, s.get(lay.emb_g), s.get(lay.emb_b));
        let drop_emb = rng.as_deref_mut().map(|r| dropout_mask(n * d, p, r));
        apply_mask(&mut x, &drop_emb);

        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for b in &lay.blocks {
            let q = linear(&x, s.get(b.wq), s.get(b.bq), d);
            let k = linear(&x, s.get(b.wk), s.get(b.bk), d);
            let v = linear(&x, s.get(b.wv), s.get(b.bv), d);
            let mut ctx = Mat::zeros(n, d);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = head_slice(&q, h, dh);
                let kh = head_slice(&k, h, dh);
                let vh = head_slice(&v, h, dh);
                let mut ph = Mat::zeros(n, n);
                gemm_nt(&qh.data, &kh.data, n, dh, n, &mut ph.data);
                finish_probs(&mut ph, dh, mask);
                let mut ch = Mat::zeros(n, dh);
                gemm_nn(&ph.data, &vh.data, n, n, dh, &mut ch.data);
                add_head_slice(&mut ctx, &ch, h, dh);
                probs.push(ph);
            }
            let mut a = linear(&ctx, s.get(b.wo), s.get(b.bo), d);
            let drop_attn = rng.as_deref_mut().map(|r| dropout_mask(n * d, p, r));
            apply_mask(&mut a, &drop_attn);
            for (av, xv) in a.data.iter_mut().zip(&x.data) {
                *av += xv;
            }
            let (h1, ln1) = layer_norm(&a, s.get(b.ln1_g), s.get(b.ln1_b));
            let u = linear(&h1, s.get(b.w1), s.get(b.b1), cfg.d_ff);
            let g = Mat::from_vec(n, cfg.d_ff, u.data.iter().map(|&z| gelu(z)).collect());
            let mut f = linear(&g, s.get(b.w2), s.get(b.b2), d);
            let drop_ffn = rng.as_deref_mut().map(|r| dropout_mask(n * d, p, r));
            apply_mask(&mut f, &drop_ffn);
            for (fv, hv) in f.data.iter_mut().zip(&h1.data) {
                *fv += hv;
            }
            let (out, ln2) = layer_norm(&f, s.get(b.ln2_g), s.get(b.ln2_b));
            caches.push(BlockCache {
                x: std::mem::replace(&mut x, out.clone()),
                q,
                k,
                v,
                ctx,
                ln1,
                h1,
                u,
                g,
                ln2,
                drop_attn,
                drop_ffn,
            });
            hidden.push(out);
            attention.push(probs);
        }
        Ok(Forward {
            hidden: HiddenStates { layers: hidden },
            attention: AttentionTensor { probs: attention },
            ids: ids.to_vec(),
            emb_ln,
            drop_emb,
            blocks: caches,
        })
    }

    /// Encode a token sequence, returning hidden states and attention.
    pub fn encode(&self, seq: &TokenSequence, train_mode: Option<&mut ChaCha8Rng>) -> Result<(HiddenStates, AttentionTensor)> {
        let f = self.forward(&seq.ids, &seq.mask, train_mode)?;
        Ok((f.hidden, f.attention))
    }

    /// Backpropagate `d_out` (gradient w.r.t. the final hidden states) into
    /// `grads`, which must share this state's parameter layout.
    pub fn backward(&self, fwd: &Forward, d_out: &Mat, grads: &mut ParamStore) {
        debug_assert!(grads.same_layout(&self.store));
        let cfg = &self.config;
        let (n, d, dh) = (fwd.ids.len(), cfg.d_model, cfg.d_head);
        let scale = 1.0 / (dh as f64).sqrt();
        let s = &self.store;
        let lay = &self.layout;
        let mut dx = d_out.clone();

        for (l, b) in lay.blocks.iter().enumerate().rev() {
            let c = &fwd.blocks[l];
            let probs = &fwd.attention.probs[l];

            let (mut dg2, mut db2) = (vec![0.0; d], vec![0.0; d]);
            let ds2 = layer_norm_back(&dx, &c.ln2, s.get(b.ln2_g), &mut dg2, &mut db2);
            add_into(grads.get_mut(b.ln2_g), &dg2);
            add_into(grads.get_mut(b.ln2_b), &db2);

            let mut df = ds2.clone();
            apply_mask(&mut df, &c.drop_ffn);
            let dg = {
                let (mut dw, mut dbb) = (vec![0.0; cfg.d_ff * d], vec![0.0; d]);
                let r = linear_back(&c.g, &df, s.get(b.w2), &mut dw, &mut dbb);
                add_into(grads.get_mut(b.w2), &dw);
                add_into(grads.get_mut(b.b2), &dbb);
                r
            };
            let du = Mat::from_vec(
                n,
                cfg.d_ff,
                dg.data.iter().zip(&c.u.data).map(|(g, &u)| g * gelu_grad(u)).collect(),
            );
            let mut dh1 = {
                let (mut dw, mut dbb) = (vec![0.0; d * cfg.d_ff], vec![0.0; cfg.d_ff]);
                let r = linear_back(&c.h1, &du, s.get(b.w1), &mut dw, &mut dbb);
                add_into(grads.get_mut(b.w1), &dw);
                add_into(grads.get_mut(b.b1), &dbb);
                r
            };
            add_into(&mut dh1.data, &ds2.data);

            let (mut dg1, mut db1) = (vec![0.0; d], vec![0.0; d]);
            let ds1 = layer_norm_back(&dh1, &c.ln1, s.get(b.ln1_g), &mut dg1, &mut db1);
            add_into(grads.get_mut(b.ln1_g), &dg1);
            add_into(grads.get_mut(b.ln1_b), &db1);

            let mut da = ds1.clone();
            apply_mask(&mut da, &c.drop_attn);
            let dctx = {
                let (mut dw, mut dbb) = (vec![0.0; d * d], vec![0.0; d]);
                let r = linear_back(&c.ctx, &da, s.get(b.wo), &mut dw, &mut dbb);
                add_into(grads.get_mut(b.wo), &dw);
                add_into(grads.get_mut(b.bo), &dbb);
                r
            };

            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for (h, ph) in probs.iter().enumerate() {
                let dch = head_slice(&dctx, h, dh);
                let qh = head_slice(&c.q, h, dh);
                let kh = head_slice(&c.k, h, dh);
                let vh = head_slice(&c.v, h, dh);
                let mut dp = Mat::zeros(n, n);
                gemm_nt(&dch.data, &vh.data, n, dh, n, &mut dp.data);
                let mut dvh = Mat::zeros(n, dh);
                gemm_tn(&ph.data, &dch.data, n, n, dh, &mut dvh.data);
                let mut dsc = Mat::zeros(n, n);
                for i in 0..n {
                    let pr = ph.row(i);
                    let dpr = dp.row(i);
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    let out = dsc.row_mut(i);
                    for j in 0..n {
                        out[j] = pr[j] * (dpr[j] - dot) * scale;
                    }
                }
                let mut dqh = Mat::zeros(n, dh);
                gemm_nn(&dsc.data, &kh.data, n, n, dh, &mut dqh.data);
                let mut dkh = Mat::zeros(n, dh);
                gemm_tn(&dsc.data, &qh.data, n, n, dh, &mut dkh.data);
                add_head_slice(&mut dq, &dqh, h, dh);
                add_head_slice(&mut dk, &dkh, h, dh);
                add_head_slice(&mut dv, &dvh, h, dh);
            }

            let mut dxin = ds1;
            for (w, bb, dy) in [(b.wq, b.bq, &dq), (b.wk, b.bk, &dk), (b.wv, b.bv, &dv)] {
                let (mut dw, mut dbb) = (vec![0.0; d * d], vec![0.0; d]);
                let r = linear_back(&c.x, dy, s.get(w), &mut dw, &mut dbb);
                add_into(grads.get_mut(w), &dw);
                add_into(grads.get_mut(bb), &dbb);
                add_into(&mut dxin.data, &r.data);
            }
            dx = dxin;
        }

        apply_mask(&mut dx, &fwd.drop_emb);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let de = layer_norm_back(&dx, &fwd.emb_ln, s.get(lay.emb_g), &mut dg, &mut db);
        add_into(grads.get_mut(lay.emb_g), &dg);
        add_into(grads.get_mut(lay.emb_b), &db);
        {
            let dtok = grads.get_mut(lay.tok);
            for (t, &id) in fwd.ids.iter().enumerate() {
                add_into(&mut dtok[id * d..(id + 1) * d], de.row(t));
            }
        }
        let dpos = grads.get_mut(lay.pos);
        add_into(&mut dpos[..n * d], &de.data);
    }

    /// Classification logits from the final CLS representation.
    pub fn head_forward(&self, fwd: &Forward, cls_index: usize, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<HeadForward> {
        let head = self
            .layout
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("encoder has no task head".into()))?;
        let d = self.config.d_model;
        let p = self.config.dropout;
        let mut rng = if self.frozen || p == 0.0 { None } else { dropout_rng };
        let s = &self.store;
        let last = fwd.hidden.last();
        ensure!(cls_index < last.rows, Validation, "cls index {cls_index} out of range");
        let mut x = last.row(cls_index).to_vec();
        let drop_in = rng.as_deref_mut().map(|r| dropout_mask(d, p, r));
        if let Some(m) = &drop_in {
            mul_into(&mut x, m);
        }
        let mut hidden = s.get(head.dense_b).to_vec();
        gemm_nn(&x, s.get(head.dense_w), 1, d, d, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let drop_hidden = rng.map(|r| dropout_mask(d, p, r));
        let mut hd = hidden.clone();
        if let Some(m) = &drop_hidden {
            mul_into(&mut hd, m);
        }
        let mut logits = s.get(head.out_b).to_vec();
        gemm_nn(&hd, s.get(head.out_w), 1, d, head.n_classes, &mut logits);
        Ok(HeadForward {
            logits,
            x,
            hidden,
            drop_in,
            drop_hidden,
        })
    }

    /// Backpropagate `d_logits` through the head; returns the gradient for
    /// the final hidden states (non-zero only at `cls_index`).
    pub fn head_backward(&self, fwd: &Forward, hf: &HeadForward, cls_index: usize, d_logits: &[f64], grads: &mut ParamStore) -> Mat {
        let head = self.layout.head.as_ref().expect("head_backward without a head");
        let d = self.config.d_model;
        let c = head.n_classes;
        let s = &self.store;
        let mut hd = hf.hidden.clone();
        if let Some(m) = &hf.drop_hidden {
            mul_into(&mut hd, m);
        }
        gemm_tn(&hd, d_logits, d, 1, c, grads.get_mut(head.out_w));
        add_into(grads.get_mut(head.out_b), d_logits);
        let mut dhd = vec![0.0; d];
        gemm_nt(d_logits, s.get(head.out_w), 1, c, d, &mut dhd);
        if let Some(m) = &hf.drop_hidden {
            mul_into(&mut dhd, m);
        }
        let dz: Vec<f64> = dhd.iter().zip(&hf.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        gemm_tn(&hf.x, &dz, d, 1, d, grads.get_mut(head.dense_w));
        add_into(grads.get_mut(head.dense_b), &dz);
        let mut dx = vec![0.0; d];
        gemm_nt(&dz, s.get(head.dense_w), 1, d, d, &mut dx);
        if let Some(m) = &hf.drop_in {
            mul_into(&mut dx, m);
        }
        let n = fwd.ids.len();
        let mut d_out = Mat::zeros(n, d);
        d_out.row_mut(cls_index).copy_from_slice(&dx);
        d_out
    }
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
fn mul_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a *= b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk().validate().is_ok());
        assert!(EncoderConfig::roberta_base().validate().is_ok());
        let mut c = EncoderConfig::tiny();
        c.d_head = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = EncoderConfig::tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn attention_probs_examples() {
        let p = attention_probs(&Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]), &Mat::from_vec(1, 3, vec![-1.0, 0.5, 9.0]), &[1]).unwrap();
        assert_eq!(p.data, vec![1.0]);

        let q = Mat::zeros(4, 2);
        let k = Mat::from_vec(4, 2, vec![1.0, 2.0, -3.0, 0.5, 0.0, 7.0, 2.0, 2.0]);
        let p = attention_probs(&q, &k, &[1, 1, 1, 1]).unwrap();
        for v in &p.data {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let q = Mat::from_vec(2, 1, vec![1.0, 0.0]);
        let k = Mat::from_vec(2, 1, vec![1.0, 0.0]);
        let p = attention_probs(&q, &k, &[1, 1]).unwrap();
        assert!((p.get(0, 0) - 0.731).abs() < 1e-3);
        assert!((p.get(0, 1) - 0.269).abs() < 1e-3);

        let p = attention_probs(&Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]), &Mat::from_vec(3, 1, vec![1.0, 1.0, 5.0]), &[1, 1, 0]).unwrap();
        for i in 0..3 {
            assert_eq!(p.get(i, 2), 0.0);
        }

        assert!(attention_probs(&Mat::zeros(0, 2), &Mat::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn frozen_state_refuses_mutation() {
        let mut s = EncoderState::new(EncoderConfig::tiny(), 10, Some(2), 1).unwrap();
        assert!(s.params_mut().is_ok());
        s.set_frozen(true);
        assert!(matches!(s.params_mut(), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let s = EncoderState::new(EncoderConfig::tiny(), 10, None, 1).unwrap();
        assert!(s.forward(&[1; 9], &[1; 9], None).is_err());
        assert!(s.forward(&[1, 42], &[1, 1], None).is_err());
        assert!(s.forward(&[1, 2], &[0, 1], None).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let s = EncoderState::new(EncoderConfig::tiny(), 10, Some(3), 5).unwrap();
        let back = EncoderState::from_params(*s.config(), 10, Some(3), s.params(), false).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            EncoderState::from_params(*s.config(), 11, Some(3), s.params(), false),
            Err(Error::Config(_))
        ));
    }
}
