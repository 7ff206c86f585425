//! Desk-scale text, image and cross-modal transformer encoders.
//!
//! All three share one pre-norm transformer block. Text sequences are run
//! on their non-padding prefix only, which makes every output exactly
//! invariant to the amount of trailing padding.

mod image;
mod tokenizer;

use serde::{Deserialize, Serialize};

pub use image::PatchGrid;
pub use tokenizer::{TokenSequence, Tokenizer, CLS, PAD, SEP};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

pub const TEXT_PREFIX: &str = "text";
pub const IMAGE_PREFIX: &str = "image";
pub const CROSS_PREFIX: &str = "cross";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    pub cross_layers: usize,
    pub vocab_size: u32,
    pub max_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            text_layers: 2,
            image_layers: 2,
            cross_layers: 2,
            vocab_size: 2048,
            max_len: 64,
            image_size: 32,
            channels: 3,
            patch_size: 8,
        }
    }
}

impl EncoderConfig {
    /// Very small dimensions for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 8,
            text_layers: 1,
            image_layers: 1,
            cross_layers: 1,
            vocab_size: 32,
            max_len: 16,
            image_size: 8,
            channels: 3,
            patch_size: 4,
        }
    }

    pub fn with_hidden_dim(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size <= 3 || self.max_len < 2 {
            return Err(Error::Config("vocab_size must exceed 3 and max_len be at least 2".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab_size, self.max_len)
    }

    pub fn patch_count(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn black_image(&self) -> PatchGrid {
        PatchGrid::black(self.image_size, self.image_size, self.channels, self.patch_size)
    }

    pub fn check_image(&self, grid: &PatchGrid) -> Result<()> {
        if grid.height() != self.image_size
            || grid.width() != self.image_size
            || grid.channels() != self.channels
            || grid.patch_size() != self.patch_size
        {
            return Err(Error::Validation(format!(
                "image {}x{}x{} (patch {}) does not match configured {}x{}x{} (patch {})",
                grid.height(),
                grid.width(),
                grid.channels(),
                grid.patch_size(),
                self.image_size,
                self.image_size,
                self.channels,
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Per-patch saliency: final-layer attention from the summary position to
/// each patch, averaged over heads and renormalized over patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    scores: Vec<f64>,
}

impl AttentionProfile {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Validation("attention scores must be finite and non-negative".into()));
        }
        let total: f64 = scores.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("attention scores sum to {total}, not 1")));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

// ---------------------------------------------------------------------------
// parameter initialization

fn init_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let init = p.init();
    let w = format!("{name}.w");
    p.insert(&w, init.xavier(&w, fan_in, fan_out))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

fn init_layer_norm(p: &mut ParamSet, name: &str, dim: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[dim]))
}

fn init_attention(p: &mut ParamSet, name: &str, d: usize) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{name}.{proj}"), d, d)?;
    }
    Ok(())
}

fn init_block(p: &mut ParamSet, name: &str, cfg: &EncoderConfig, cross: bool) -> Result<()> {
    let d = cfg.hidden_dim;
    init_layer_norm(p, &format!("{name}.ln1"), d)?;
    init_attention(p, &format!("{name}.attn"), d)?;
    if cross {
        init_layer_norm(p, &format!("{name}.ln_x"), d)?;
        init_attention(p, &format!("{name}.xattn"), d)?;
    }
    init_layer_norm(p, &format!("{name}.ln2"), d)?;
    init_linear(p, &format!("{name}.ff1"), d, cfg.ffn_dim)?;
    init_linear(p, &format!("{name}.ff2"), cfg.ffn_dim, d)
}

fn init_embedding(p: &mut ParamSet, name: &str, rows: usize, dim: usize) -> Result<()> {
    let t = p.init().normal(name, &[rows, dim], 0.1);
    p.insert(name, t)
}

/// Adds the parameters of a text encoder under `prefix`.
pub fn init_text_encoder(p: &mut ParamSet, prefix: &str, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.hidden_dim;
    init_embedding(p, &format!("{prefix}.tok_emb"), cfg.vocab_size as usize, d)?;
    init_embedding(p, &format!("{prefix}.pos_emb"), cfg.max_len, d)?;
    init_embedding(p, &format!("{prefix}.seg_emb"), 2, d)?;
    for l in 0..cfg.text_layers {
        init_block(p, &format!("{prefix}.l{l}"), cfg, false)?;
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d)
}

/// Adds the parameters of a patch-based image encoder under `prefix`.
pub fn init_image_encoder(p: &mut ParamSet, prefix: &str, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.hidden_dim;
    init_linear(p, &format!("{prefix}.patch"), cfg.patch_dim(), d)?;
    init_embedding(p, &format!("{prefix}.summary"), 1, d)?;
    init_embedding(p, &format!("{prefix}.pos_emb"), cfg.patch_count() + 1, d)?;
    for l in 0..cfg.image_layers {
        init_block(p, &format!("{prefix}.l{l}"), cfg, false)?;
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d)
}

/// Adds the parameters of a cross-modal encoder (text layers with
/// cross-attention onto image states) under `prefix`.
pub fn init_cross_encoder(p: &mut ParamSet, prefix: &str, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.hidden_dim;
    init_embedding(p, &format!("{prefix}.tok_emb"), cfg.vocab_size as usize, d)?;
    init_embedding(p, &format!("{prefix}.pos_emb"), cfg.max_len, d)?;
    for l in 0..cfg.cross_layers {
        init_block(p, &format!("{prefix}.l{l}"), cfg, true)?;
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d)
}

/// Parameters for all three encoders under their default prefixes.
pub fn init_encoders(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new(seed);
    init_text_encoder(&mut p, TEXT_PREFIX, cfg)?;
    init_image_encoder(&mut p, IMAGE_PREFIX, cfg)?;
    init_cross_encoder(&mut p, CROSS_PREFIX, cfg)?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// forward building blocks

pub(crate) fn linear(t: &mut Tape<'_>, name: &str, x: Var) -> Result<Var> {
    let w = t.param(&format!("{name}.w"))?;
    let b = t.param(&format!("{name}.b"))?;
    t.affine(x, w, b)
}

fn layer_norm(t: &mut Tape<'_>, name: &str, x: Var) -> Result<Var> {
    let g = t.param(&format!("{name}.g"))?;
    let b = t.param(&format!("{name}.b"))?;
    t.layer_norm(x, g, b, LN_EPS)
}

/// Multi-head attention from `xq` onto `xkv`; returns the output and the
/// per-head probability matrices.
fn multi_head(t: &mut Tape<'_>, name: &str, heads: usize, xq: Var, xkv: Var) -> Result<(Var, Vec<Var>)> {
    let q = linear(t, &format!("{name}.q"), xq)?;
    let k = linear(t, &format!("{name}.k"), xkv)?;
    let v = linear(t, &format!("{name}.v"), xkv)?;
    let d = t.value(q).cols();
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh)?;
        let kh = t.slice_cols(k, h * dh, dh)?;
        let vh = t.slice_cols(v, h * dh, dh)?;
        let (o, p) = t.attention(qh, kh, vh)?;
        outs.push(o);
        probs.push(p);
    }
    let merged = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
    Ok((linear(t, &format!("{name}.o"), merged)?, probs))
}

/// Pre-norm transformer block, optionally with cross-attention onto `memory`.
/// Returns the new states and the self-attention probabilities per head.
fn block(t: &mut Tape<'_>, name: &str, heads: usize, x: Var, memory: Option<Var>) -> Result<(Var, Vec<Var>)> {
    let h = layer_norm(t, &format!("{name}.ln1"), x)?;
    let (a, probs) = multi_head(t, &format!("{name}.attn"), heads, h, h)?;
    let mut x = t.add(x, a)?;
    if let Some(mem) = memory {
        let h = layer_norm(t, &format!("{name}.ln_x"), x)?;
        let (c, _) = multi_head(t, &format!("{name}.xattn"), heads, h, mem)?;
        x = t.add(x, c)?;
    }
    let h = layer_norm(t, &format!("{name}.ln2"), x)?;
    let f = linear(t, &format!("{name}.ff1"), h)?;
    let f = t.relu(f);
    let f = linear(t, &format!("{name}.ff2"), f)?;
    Ok((t.add(x, f)?, probs))
}

fn check_tokens(cfg: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.ids().first() != Some(&CLS) {
        return Err(Error::Validation("token sequence must begin with CLS".into()));
    }
    if seq.content_len() > cfg.max_len {
        return Err(Error::Validation(format!(
            "sequence of {} tokens exceeds max length {}",
            seq.content_len(),
            cfg.max_len
        )));
    }
    if let Some(bad) = seq.ids().iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Validation(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Text encoder output on the tape: the CLS state and all content states.
#[derive(Debug, Clone, Copy)]
pub struct TextStates {
    pub cls: Var,
    pub states: Var,
}

pub fn text_forward(t: &mut Tape<'_>, cfg: &EncoderConfig, prefix: &str, seq: &TokenSequence) -> Result<TextStates> {
    check_tokens(cfg, seq)?;
    let content = seq.content();
    let n = content.len();
    let ids: Vec<usize> = content.iter().map(|&i| i as usize).collect();
    let tok = t.param(&format!("{prefix}.tok_emb"))?;
    let tok = t.gather_rows(tok, &ids)?;
    let pos = t.param(&format!("{prefix}.pos_emb"))?;
    let pos = t.slice_rows(pos, 0, n)?;
    let seg = t.param(&format!("{prefix}.seg_emb"))?;
    let seg = t.gather_rows(seg, &seq.segments())?;
    let x = t.add(tok, pos)?;
    let mut x = t.add(x, seg)?;
    for l in 0..cfg.text_layers {
        x = block(t, &format!("{prefix}.l{l}"), cfg.heads, x, None)?.0;
    }
    let states = layer_norm(t, &format!("{prefix}.ln_f"), x)?;
    let cls = t.slice_rows(states, 0, 1)?;
    Ok(TextStates { cls, states })
}

/// Image encoder output on the tape. Row 0 of `states` is the summary
/// position; rows `1..` are the patches.
#[derive(Debug, Clone)]
pub struct ImageStates {
    pub states: Var,
    pub summary: Var,
    pub last_attention: Vec<Var>,
}

pub fn image_forward(t: &mut Tape<'_>, cfg: &EncoderConfig, prefix: &str, grid: &PatchGrid) -> Result<ImageStates> {
    cfg.check_image(grid)?;
    let patches = grid.patchify();
    let flat: Vec<f64> = patches.into_iter().flatten().collect();
    let x = t.constant(Tensor::matrix(grid.patch_count(), grid.patch_dim(), flat)?);
    let emb = linear(t, &format!("{prefix}.patch"), x)?;
    let summary = t.param(&format!("{prefix}.summary"))?;
    let x = t.concat_rows(&[summary, emb])?;
    let pos = t.param(&format!("{prefix}.pos_emb"))?;
    let mut x = t.add(x, pos)?;
    let mut last_attention = Vec::new();
    for l in 0..cfg.image_layers {
        let (nx, probs) = block(t, &format!("{prefix}.l{l}"), cfg.heads, x, None)?;
        x = nx;
        last_attention = probs;
    }
    let states = layer_norm(t, &format!("{prefix}.ln_f"), x)?;
    let summary = t.slice_rows(states, 0, 1)?;
    Ok(ImageStates {
        states,
        summary,
        last_attention,
    })
}

/// Head-averaged attention from the summary position to each patch.
pub fn attention_profile(t: &Tape<'_>, image: &ImageStates) -> Result<AttentionProfile> {
    let heads = image.last_attention.len();
    if heads == 0 {
        return Err(Error::Config("image encoder has no layers".into()));
    }
    let cols = t.value(image.last_attention[0]).cols();
    let mut scores = vec![0.0; cols - 1];
    for &p in &image.last_attention {
        let row = t.value(p).row_slice(0);
        scores.iter_mut().zip(&row[1..]).for_each(|(s, v)| *s += v / heads as f64);
    }
    let total: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= total);
    AttentionProfile::new(scores)
}

/// Cross-modal encoder: text self-attention interleaved with cross-attention
/// onto `memory` (image states). Returns the CLS-position state.
pub fn cross_forward(t: &mut Tape<'_>, cfg: &EncoderConfig, prefix: &str, memory: Var, seq: &TokenSequence) -> Result<Var> {
    check_tokens(cfg, seq)?;
    if t.value(memory).cols() != cfg.hidden_dim {
        return Err(Error::shape(
            "cross_encode",
            format!("memory width {} vs hidden_dim {}", t.value(memory).cols(), cfg.hidden_dim),
        ));
    }
    let content = seq.content();
    let ids: Vec<usize> = content.iter().map(|&i| i as usize).collect();
    let tok = t.param(&format!("{prefix}.tok_emb"))?;
    let tok = t.gather_rows(tok, &ids)?;
    let pos = t.param(&format!("{prefix}.pos_emb"))?;
    let pos = t.slice_rows(pos, 0, ids.len())?;
    let mut x = t.add(tok, pos)?;
    for l in 0..cfg.cross_layers {
        x = block(t, &format!("{prefix}.l{l}"), cfg.heads, x, Some(memory))?.0;
    }
    let states = layer_norm(t, &format!("{prefix}.ln_f"), x)?;
    t.slice_rows(states, 0, 1)
}

// ---------------------------------------------------------------------------
// tensor-level entry points

/// `(h, all_states)`: the CLS state and every content-position state.
pub fn encode_text(cfg: &EncoderConfig, seq: &TokenSequence, params: &ParamSet) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new(params);
    let out = text_forward(&mut t, cfg, TEXT_PREFIX, seq)?;
    Ok((t.value(out.cls).clone(), t.value(out.states).clone()))
}

/// `(patch_states, summary_state, attention)`; `patch_states` holds the
/// summary row followed by one row per patch.
pub fn encode_image(cfg: &EncoderConfig, grid: &PatchGrid, params: &ParamSet) -> Result<(Tensor, Tensor, AttentionProfile)> {
    let mut t = Tape::new(params);
    let out = image_forward(&mut t, cfg, IMAGE_PREFIX, grid)?;
    let attn = attention_profile(&t, &out)?;
    Ok((t.value(out.states).clone(), t.value(out.summary).clone(), attn))
}

pub fn cross_encode(cfg: &EncoderConfig, patch_states: &Tensor, hypothesis: &TokenSequence, params: &ParamSet) -> Result<Tensor> {
    let mut t = Tape::new(params);
    let mem = t.constant(patch_states.clone());
    let h = cross_forward(&mut t, cfg, CROSS_PREFIX, mem, hypothesis)?;
    Ok(t.value(h).clone())
}
