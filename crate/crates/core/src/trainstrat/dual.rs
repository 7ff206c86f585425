use serde::{Deserialize, Serialize};

use super::graph::{filter_negative, EntailmentGraph};
use super::plan::Pair;
use crate::datapipe::RetrievalCorpus;
use crate::diffcore::{Optimizer, ParamSet, Tape, Tensor, Var};
use crate::encoders::{linear, Tokenizer};
use crate::error::{Error, Result};

pub const DUAL_PREFIX: &str = "retr";
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub pixel_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: u32,
    pub max_len: usize,
    pub init_temperature: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            pixel_dim: 32 * 32 * 3,
            hidden_dim: 64,
            embed_dim: 32,
            vocab_size: 2048,
            max_len: 64,
            init_temperature: 0.07,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 || self.vocab_size < 4 {
            return Err(Error::Config("dual encoder dimensions must be positive".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab_size, self.max_len)
    }
}

/// Image tower: two-layer ReLU MLP on raw pixels. Text tower: mean word
/// embedding, ReLU, projection. Similarities are scaled by a learnable
/// `exp(log_scale)`, the inverse temperature.
pub fn init_dual_encoder(cfg: &DualEncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new(seed);
    let init = p.init();
    let (h, d) = (cfg.hidden_dim, cfg.embed_dim);
    let mut add = |name: &str, t: Tensor| p.insert(format!("{DUAL_PREFIX}.{name}"), t);
    add("img.l1.w", init.xavier("img.l1.w", cfg.pixel_dim, h))?;
    add("img.l1.b", Tensor::zeros(&[1, h]))?;
    add("img.l2.w", init.xavier("img.l2.w", h, d))?;
    add("img.l2.b", Tensor::zeros(&[1, d]))?;
    add("txt.emb", init.normal("txt.emb", &[cfg.vocab_size as usize, h], 0.1))?;
    add("txt.l1.w", init.xavier("txt.l1.w", h, h))?;
    add("txt.l1.b", Tensor::zeros(&[1, h]))?;
    add("txt.l2.w", init.xavier("txt.l2.w", h, d))?;
    add("txt.l2.b", Tensor::zeros(&[1, d]))?;
    add("log_scale", Tensor::scalar((1.0 / cfg.init_temperature).ln()))?;
    Ok(p)
}

fn name(part: &str) -> String {
    format!("{DUAL_PREFIX}.{part}")
}

/// Unit-norm image embeddings, one row per image.
pub fn image_tower(t: &mut Tape<'_>, cfg: &DualEncoderConfig, pixels: Tensor) -> Result<Var> {
    if pixels.cols() != cfg.pixel_dim {
        return Err(Error::shape("image_tower", format!("{} pixels, expected {}", pixels.cols(), cfg.pixel_dim)));
    }
    let x = t.constant(pixels);
    let h = linear(t, &name("img.l1"), x)?;
    let h = t.relu(h);
    let z = linear(t, &name("img.l2"), h)?;
    Ok(t.l2_normalize_rows(z, NORM_EPS))
}

/// Unit-norm caption embeddings, one row per caption.
pub fn text_tower(t: &mut Tape<'_>, cfg: &DualEncoderConfig, texts: &[&str]) -> Result<Var> {
    let tok = cfg.tokenizer();
    let mut ids = Vec::new();
    let mut avg = vec![0.0; 0];
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|s| tok.tokenize(s).words().iter().map(|&w| w as usize).collect())
        .collect();
    let total: usize = seqs.iter().map(|s| s.len().max(1)).sum();
    avg.resize(texts.len() * total, 0.0);
    for (r, s) in seqs.iter().enumerate() {
        let start = ids.len();
        if s.is_empty() {
            // empty caption embeds as the PAD row
            ids.push(crate::encoders::PAD as usize);
        } else {
            ids.extend_from_slice(s);
        }
        let n = ids.len() - start;
        for c in start..ids.len() {
            avg[r * total + c] = 1.0 / n as f64;
        }
    }
    let emb = t.param(&name("txt.emb"))?;
    let rows = t.gather_rows(emb, &ids)?;
    let a = t.constant(Tensor::matrix(texts.len(), total, avg)?);
    let mean = t.matmul(a, rows)?;
    let h = linear(t, &name("txt.l1"), mean)?;
    let h = t.relu(h);
    let z = linear(t, &name("txt.l2"), h)?;
    Ok(t.l2_normalize_rows(z, NORM_EPS))
}

fn stack_pixels(corpus: &RetrievalCorpus, images: &[&str]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dim = 0;
    for id in images {
        let px = corpus.image(id)?.pixels();
        dim = px.len();
        data.extend_from_slice(px);
    }
    Tensor::matrix(images.len(), dim, data)
}

/// Off-diagonal entries that may not act as negatives: `mask[i * n + j]`
/// is true when image `i` and caption `j` are linked in the graph.
pub fn negative_mask(batch: &[Pair], graph: Option<&EntailmentGraph>) -> Vec<bool> {
    let n = batch.len();
    let mut mask = vec![false; n * n];
    if let Some(g) = graph {
        for (i, (img, _)) in batch.iter().enumerate() {
            for (j, (_, cap)) in batch.iter().enumerate() {
                if i != j && !filter_negative(img, cap, g) {
                    mask[i * n + j] = true;
                }
            }
        }
    }
    mask
}

fn transpose_mask(mask: &[bool], n: usize) -> Vec<bool> {
    (0..n * n).map(|k| mask[(k % n) * n + k / n]).collect()
}

/// Symmetric in-batch contrastive loss:
/// `mean_i CE(row i of S) + mean_j CE(column j of S)` where `S` holds scaled
/// cosine similarities and masked entries leave the normalizers.
pub fn contrastive_loss_on_tape(
    t: &mut Tape<'_>,
    cfg: &DualEncoderConfig,
    corpus: &RetrievalCorpus,
    batch: &[Pair],
    mask: &[bool],
) -> Result<Var> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<&str> = batch.iter().map(|(i, _)| i.as_str()).collect();
    let texts = batch.iter().map(|(_, c)| corpus.caption(c)).collect::<Result<Vec<_>>>()?;
    let img = image_tower(t, cfg, stack_pixels(corpus, &images)?)?;
    let txt = text_tower(t, cfg, &texts)?;
    let log_scale = t.param(&name("log_scale"))?;
    let scale = t.exp(log_scale);
    let sim = t.matmul_t(img, txt)?;
    let i2t = t.scale_by(sim, scale)?;
    let sim_t = t.matmul_t(txt, img)?;
    let t2i = t.scale_by(sim_t, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let a = t.cross_entropy_masked(i2t, &targets, Some(mask))?;
    let b = t.cross_entropy_masked(t2i, &targets, Some(&transpose_mask(mask, n)))?;
    let sum = t.add(a, b)?;
    Ok(t.scale(sum, 1.0 / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub masked_negatives: usize,
    /// The denominator mask used, row-major image × caption.
    pub mask: Vec<bool>,
}

/// One optimizer step on `batch` at `lr_effective`. Passing `None` for the
/// graph disables negative filtering.
pub fn contrastive_step(
    batch: &[Pair],
    corpus: &RetrievalCorpus,
    cfg: &DualEncoderConfig,
    params: &mut ParamSet,
    graph: Option<&EntailmentGraph>,
    optimizer: &mut dyn Optimizer,
    lr_effective: f64,
) -> Result<StepOutcome> {
    let mask = negative_mask(batch, graph);
    let (loss, grads) = {
        let mut t = Tape::new(params);
        let l = contrastive_loss_on_tape(&mut t, cfg, corpus, batch, &mask)?;
        (t.value(l).item(), t.backward(l)?)
    };
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0, loss });
    }
    optimizer.step(params, &grads.params, lr_effective)?;
    Ok(StepOutcome {
        loss,
        masked_negatives: mask.iter().filter(|&&m| m).count(),
        mask,
    })
}

/// Embeds images and captions in chunks; rows follow the given id order.
pub fn embed_corpus(
    corpus: &RetrievalCorpus,
    cfg: &DualEncoderConfig,
    params: &ParamSet,
    images: &[&str],
    captions: &[&str],
) -> Result<(Tensor, Tensor)> {
    const CHUNK: usize = 256;
    let mut img_rows = Vec::new();
    for chunk in images.chunks(CHUNK) {
        let mut t = Tape::new(params);
        let v = image_tower(&mut t, cfg, stack_pixels(corpus, chunk)?)?;
        img_rows.extend_from_slice(t.value(v).data());
    }
    let mut txt_rows = Vec::new();
    for chunk in captions.chunks(CHUNK) {
        let texts = chunk.iter().map(|c| corpus.caption(c)).collect::<Result<Vec<_>>>()?;
        let mut t = Tape::new(params);
        let v = text_tower(&mut t, cfg, &texts)?;
        txt_rows.extend_from_slice(t.value(v).data());
    }
    Ok((
        Tensor::matrix(images.len(), cfg.embed_dim, img_rows)?,
        Tensor::matrix(captions.len(), cfg.embed_dim, txt_rows)?,
    ))
}
