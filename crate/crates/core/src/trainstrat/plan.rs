use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::EntailmentGraph;
use crate::datapipe::RetrievalCorpus;
use crate::error::{Error, Result};

pub type Pair = (String, String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Regular,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub kind: BatchKind,
    pub pairs: Vec<Pair>,
    pub lr_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<PlannedBatch>,
    pub base_lr: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub batch_size: usize,
    pub alpha: f64,
    pub base_lr: f64,
    /// Interleave weak-positive batches.
    pub weak_batches: bool,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            alpha: 0.3,
            base_lr: 1e-3,
            weak_batches: true,
            seed: 0,
        }
    }
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// One epoch: shuffled gold pairs in regular batches, each followed by a
/// weak batch when the graph has entailed edges.
///
/// A weak batch takes entailed edges incident to the regular batch's images
/// first (random subset if there are more than `batch_size`), then tops up
/// from a shuffled cursor over the whole weak pool. It is truncated when the
/// pool holds fewer than `batch_size` edges.
pub fn plan_batches(corpus: &RetrievalCorpus, graph: &EntailmentGraph, cfg: &PlanConfig) -> Result<BatchPlan> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    validate_alpha(cfg.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gold: Vec<Pair> = corpus.gold_pairs().map(|(i, c)| (i.to_string(), c.to_string())).collect();
    gold.shuffle(&mut rng);

    let weak_pool: Vec<Pair> = graph.entailed_edges().to_vec();
    let mut cursor_order: Vec<usize> = (0..weak_pool.len()).collect();
    cursor_order.shuffle(&mut rng);
    let mut cursor = 0;
    let use_weak = cfg.weak_batches && !weak_pool.is_empty();
    let weak_size = cfg.batch_size.min(weak_pool.len());

    let mut batches = Vec::new();
    for chunk in gold.chunks(cfg.batch_size) {
        batches.push(PlannedBatch {
            kind: BatchKind::Regular,
            pairs: chunk.to_vec(),
            lr_scale: 1.0,
        });
        if !use_weak {
            continue;
        }
        let images: HashSet<&str> = chunk.iter().map(|(i, _)| i.as_str()).collect();
        let mut incident: Vec<usize> = (0..weak_pool.len()).filter(|&k| images.contains(weak_pool[k].0.as_str())).collect();
        incident.shuffle(&mut rng);
        incident.truncate(weak_size);
        let mut chosen: HashSet<usize> = incident.iter().copied().collect();
        let mut picks = incident;
        while picks.len() < weak_size {
            if cursor == cursor_order.len() {
                cursor_order.shuffle(&mut rng);
                cursor = 0;
            }
            let k = cursor_order[cursor];
            cursor += 1;
            if chosen.insert(k) {
                picks.push(k);
            }
        }
        batches.push(PlannedBatch {
            kind: BatchKind::Weak,
            pairs: picks.into_iter().map(|k| weak_pool[k].clone()).collect(),
            lr_scale: cfg.alpha,
        });
    }
    Ok(BatchPlan {
        batches,
        base_lr: cfg.base_lr,
        alpha: cfg.alpha,
    })
}

impl BatchPlan {
    /// Structural law: weak batches directly follow a regular batch, carry
    /// scale `alpha` and only entailed edges; regular batches carry scale 1
    /// and only gold edges.
    pub fn validate(&self, graph: &EntailmentGraph) -> Result<()> {
        validate_alpha(self.alpha)?;
        let bad = |i: usize, m: &str| Err(Error::Validation(format!("batch {i}: {m}")));
        for (i, b) in self.batches.iter().enumerate() {
            if b.pairs.is_empty() {
                return bad(i, "empty batch");
            }
            match b.kind {
                BatchKind::Regular => {
                    if b.lr_scale != 1.0 {
                        return bad(i, "regular batch with lr_scale != 1");
                    }
                    if let Some((im, c)) = b.pairs.iter().find(|(im, c)| !graph.is_gold(im, c)) {
                        return bad(i, &format!("regular batch holds non-gold pair ({im}, {c})"));
                    }
                }
                BatchKind::Weak => {
                    if b.lr_scale != self.alpha {
                        return bad(i, "weak batch with lr_scale != alpha");
                    }
                    if i == 0 || self.batches[i - 1].kind != BatchKind::Regular {
                        return bad(i, "weak batch does not follow a regular batch");
                    }
                    if let Some((im, c)) = b.pairs.iter().find(|(im, c)| !graph.is_entailed(im, c)) {
                        return bad(i, &format!("weak batch holds non-entailed pair ({im}, {c})"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, batch: &PlannedBatch) -> f64 {
        self.base_lr * batch.lr_scale
    }
}
