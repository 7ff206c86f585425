use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{joint_loss_grad, BranchEval, EntailmentConfig, EntailmentExample};
use crate::augment::{augment_batch, MaskSpec};
use crate::diffcore::{make_optimizer, OptimizerKind, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Attention-guided masking of image-text positives; `None` disables it.
    pub mask: Option<MaskSpec>,
    pub seed: u64,
}

impl Default for EntailTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.02,
            optimizer: OptimizerKind::AdamW,
            mask: Some(MaskSpec::default()),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of `l_all` per example.
    pub mean_loss: f64,
    pub l_t: f64,
    pub l_v: f64,
    pub l_m: f64,
    pub masked_negatives: usize,
}

/// Jointly trains all three heads on `train`, starting from `params`.
pub fn train_entailment(
    train: &[EntailmentExample],
    cfg: &EntailmentConfig,
    tcfg: &EntailTrainConfig,
    mut params: ParamSet,
) -> Result<(ParamSet, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for ex in train {
        ex.validate()?;
    }
    let mut opt = make_optimizer(tcfg.optimizer, tcfg.weight_decay);
    let mut logs = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;
    for epoch in 0..tcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            steps: 0,
            mean_loss: 0.0,
            l_t: 0.0,
            l_v: 0.0,
            l_m: 0.0,
            masked_negatives: 0,
        };
        let mut seen = 0;
        for chunk in order.chunks(tcfg.batch_size) {
            let mut batch: Vec<EntailmentExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            if let Some(spec) = &tcfg.mask {
                let n = batch.len();
                batch = augment_batch(&batch, spec, &cfg.encoder, &params)?;
                log.masked_negatives += batch.len() - n;
            }
            let (loss, grads) = joint_loss_grad(&batch, cfg, &params, BranchEval::ActiveOnly)?;
            if !loss.l_all.is_finite() {
                return Err(Error::Diverged { step, loss: loss.l_all });
            }
            opt.step(&mut params, &grads.params, tcfg.lr)?;
            log.mean_loss += loss.l_all;
            log.l_t += loss.l_t;
            log.l_v += loss.l_v;
            log.l_m += loss.l_m;
            seen += batch.len();
            log.steps += 1;
            step += 1;
        }
        log.mean_loss /= seen.max(1) as f64;
        log::info!(
            "entail epoch {epoch}: loss/example {:.4} (L_t {:.2}, L_v {:.2}, L_m {:.2})",
            log.mean_loss,
            log.l_t,
            log.l_v,
            log.l_m
        );
        logs.push(log);
    }
    Ok((params, logs))
}
