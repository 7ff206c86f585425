use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dual::{contrastive_step, embed_corpus, init_dual_encoder, DualEncoderConfig};
use super::graph::EntailmentGraph;
use super::plan::{plan_batches, BatchKind, PlanConfig};
use crate::datapipe::RetrievalCorpus;
use crate::diffcore::{make_optimizer, OptimizerKind, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub dual: DualEncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Keep gold and entailed pairs out of the contrastive denominators.
    pub negative_filtering: bool,
    /// Interleave weak-positive batches at `alpha * lr`.
    pub weak_batches: bool,
    pub seed: u64,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        Self {
            dual: DualEncoderConfig::default(),
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            alpha: 0.3,
            weight_decay: 0.02,
            optimizer: OptimizerKind::AdamW,
            negative_filtering: true,
            weak_batches: true,
            seed: 0,
        }
    }
}

impl RetrievalTrainConfig {
    /// Switches both strategy mechanisms together.
    pub fn with_strategy(mut self, on: bool) -> Self {
        self.negative_filtering = on;
        self.weak_batches = on;
        self
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch_kind: BatchKind,
    pub lr_effective: f64,
    pub loss: f64,
    pub masked_negatives: usize,
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)
}

/// Trains a fresh dual encoder on the gold pairs of `corpus`, with the
/// entailment strategy controlled by the config flags.
pub fn train_retrieval(
    corpus: &RetrievalCorpus,
    graph: &EntailmentGraph,
    cfg: &RetrievalTrainConfig,
) -> Result<(ParamSet, Vec<StepRecord>)> {
    let mut params = init_dual_encoder(&cfg.dual, cfg.seed)?;
    let mut opt = make_optimizer(cfg.optimizer, cfg.weight_decay);
    let filter = cfg.negative_filtering.then_some(graph);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let plan = plan_batches(
            corpus,
            graph,
            &PlanConfig {
                batch_size: cfg.batch_size,
                alpha: cfg.alpha,
                base_lr: cfg.lr,
                weak_batches: cfg.weak_batches,
                seed: epoch_seed(cfg.seed, epoch),
            },
        )?;
        for batch in &plan.batches {
            let lr = plan.lr_for(batch);
            let step = log.len();
            let out = contrastive_step(&batch.pairs, corpus, &cfg.dual, &mut params, filter, opt.as_mut(), lr)
                .map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged { step, loss },
                    other => other,
                })?;
            log.push(StepRecord {
                step,
                batch_kind: batch.kind,
                lr_effective: lr,
                loss: out.loss,
                masked_negatives: out.masked_negatives,
            });
        }
        if let Some(last) = log.last() {
            log::info!("retrieval epoch {epoch}: last loss {:.4}", last.loss);
        }
    }
    Ok((params, log))
}

/// Per image, every caption of the corpus by descending similarity; ties
/// go to the lower caption id.
pub fn rank_captions(
    corpus: &RetrievalCorpus,
    cfg: &DualEncoderConfig,
    params: &ParamSet,
) -> Result<BTreeMap<String, Vec<String>>> {
    let images: Vec<&str> = corpus.images.keys().map(String::as_str).collect();
    let captions: Vec<&str> = corpus.captions.keys().map(String::as_str).collect();
    let (img, txt) = embed_corpus(corpus, cfg, params, &images, &captions)?;
    let mut out = BTreeMap::new();
    for (r, image) in images.iter().enumerate() {
        let q = img.row_slice(r);
        let scores: Vec<f64> = (0..captions.len())
            .map(|c| q.iter().zip(txt.row_slice(c)).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..captions.len()).collect();
        // captions are already in ascending id order, so a stable sort keeps ties by id
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        out.insert(image.to_string(), order.into_iter().map(|c| captions[c].to_string()).collect());
    }
    Ok(out)
}
