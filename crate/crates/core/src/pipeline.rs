//! Experiment plumbing shared by the command line and the end-to-end
//! experiments: the flat `key=value` run configuration, held-out scoring of
//! the classifier, graph recovery against a planted oracle, and retrieval
//! scoring of a ranked run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::MaskSpec;
use crate::datapipe::{CandidatePair, RetrievalCorpus, SyntheticOracle};
use crate::diffcore::ParamSet;
use crate::entailment::{predict, EntailTrainConfig, EntailmentConfig, EntailmentExample};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, entail_at_k, recall_at_k, sha256_hex, ClassificationMetrics, RankedRun, Relation};
use crate::trainstrat::{EntailmentGraph, RetrievalTrainConfig};

/// Keys accepted in a run configuration file.
pub const CONFIG_KEYS: [&str; 9] = [
    "hidden_dim",
    "batch_size",
    "lr",
    "alpha",
    "mask_ratio",
    "mask_max_images",
    "threshold",
    "seed",
    "epochs",
];

/// Overrides read from a flat `key=value` file. Blank lines and lines
/// starting with `#` are ignored; unset keys keep each command's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hidden_dim: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub mask_max_images: Option<usize>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

fn parse_value<T: std::str::FromStr>(path: &Path, line: usize, key: &str, raw: &str) -> Result<Option<T>> {
    raw.parse().map(Some).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad value `{raw}` for `{key}`"),
    })
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got `{s}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(parse_err(format!("duplicate key `{k}`")));
            }
            match k {
                "hidden_dim" => cfg.hidden_dim = parse_value(origin, line, k, v)?,
                "batch_size" => cfg.batch_size = parse_value(origin, line, k, v)?,
                "lr" => cfg.lr = parse_value(origin, line, k, v)?,
                "alpha" => cfg.alpha = parse_value(origin, line, k, v)?,
                "mask_ratio" => cfg.mask_ratio = parse_value(origin, line, k, v)?,
                "mask_max_images" => cfg.mask_max_images = parse_value(origin, line, k, v)?,
                "threshold" => cfg.threshold = parse_value(origin, line, k, v)?,
                "seed" => cfg.seed = parse_value(origin, line, k, v)?,
                "epochs" => cfg.epochs = parse_value(origin, line, k, v)?,
                _ => {
                    return Err(parse_err(format!(
                        "unknown key `{k}` (expected one of {})",
                        CONFIG_KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Canonical `key=value` rendering of the set keys, in key order.
    pub fn canonical(&self) -> String {
        let v = serde_json::to_value(self).expect("plain struct");
        let mut out = String::new();
        for k in CONFIG_KEYS {
            if let Some(x) = v.get(k).filter(|x| !x.is_null()) {
                out.push_str(&format!("{k}={x}\n"));
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// Classifier architecture and training settings with overrides applied.
    pub fn entailment(&self, mut train: EntailTrainConfig) -> Result<(EntailmentConfig, EntailTrainConfig)> {
        let model = match self.hidden_dim {
            Some(d) => EntailmentConfig::with_hidden_dim(d),
            None => EntailmentConfig::default(),
        };
        model.encoder.validate()?;
        if let Some(b) = self.batch_size {
            train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            train.lr = lr;
        }
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(e) = self.epochs {
            train.epochs = e;
        }
        if self.mask_ratio.is_some() || self.mask_max_images.is_some() {
            let base = train.mask.unwrap_or_default();
            let spec = MaskSpec {
                ratio: self.mask_ratio.unwrap_or(base.ratio),
                max_images_per_batch: self.mask_max_images.unwrap_or(base.max_images_per_batch),
            };
            spec.validate()?;
            train.mask = Some(spec);
        }
        if !(train.lr > 0.0 && train.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", train.lr)));
        }
        Ok((model, train))
    }

    /// Retrieval training settings with overrides applied.
    pub fn retrieval(&self, mut cfg: RetrievalTrainConfig) -> Result<RetrievalTrainConfig> {
        if let Some(d) = self.hidden_dim {
            cfg.dual.hidden_dim = d;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if !(0.0..1.0).contains(&cfg.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1)", cfg.alpha)));
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", cfg.lr)));
        }
        Ok(cfg)
    }

    pub fn threshold_or(&self, default: f64) -> Result<f64> {
        let t = self.threshold.unwrap_or(default);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        Ok(t)
    }
}

/// Scores the classifier's verdicts against the example labels.
pub fn evaluate_classifier(
    examples: &[EntailmentExample],
    cfg: &EntailmentConfig,
    params: &ParamSet,
    threshold: f64,
) -> Result<ClassificationMetrics> {
    let verdicts = examples
        .iter()
        .map(|ex| predict(ex, cfg, params, threshold).map(|v| v.is_entail()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = examples.iter().map(|ex| ex.label == 1).collect();
    classification_metrics(&verdicts, &labels, 0.5)
}

/// How well a graph's entailed edges match the oracle on the candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecovery {
    /// Candidates the oracle marks as entailed.
    pub planted: usize,
    /// Planted candidates present in the graph.
    pub recovered: usize,
    /// Candidates accepted into the graph.
    pub accepted: usize,
    /// Accepted candidates the oracle rejects.
    pub false_edges: usize,
    /// `recovered / planted`.
    pub recovery: f64,
    /// `false_edges / accepted`.
    pub false_edge_rate: f64,
}

pub fn graph_recovery(graph: &EntailmentGraph, candidates: &[CandidatePair], oracle: &SyntheticOracle) -> GraphRecovery {
    let (mut planted, mut recovered, mut accepted, mut false_edges) = (0, 0, 0, 0);
    for c in candidates {
        let truth = oracle.entailed(&c.image_id, &c.caption_id);
        let got = graph.is_entailed(&c.image_id, &c.caption_id);
        planted += truth as usize;
        recovered += (truth && got) as usize;
        accepted += got as usize;
        false_edges += (got && !truth) as usize;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    GraphRecovery {
        planted,
        recovered,
        accepted,
        false_edges,
        recovery: ratio(recovered, planted),
        false_edge_rate: ratio(false_edges, accepted),
    }
}

/// Union of two relations.
pub struct Either<'a>(pub &'a dyn Relation, pub &'a dyn Relation);

impl Relation for Either<'_> {
    fn holds(&self, image: &str, caption: &str) -> bool {
        self.0.holds(image, caption) || self.1.holds(image, caption)
    }
}

/// `R@k` against gold and `E@k` against gold or `relation`, keyed
/// `R@1`, `E@10`, and so on.
pub fn retrieval_metrics(
    run: &RankedRun,
    corpus: &RetrievalCorpus,
    relation: Option<&dyn Relation>,
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    run.validate(corpus)?;
    let gold = crate::eval::GoldRelation(corpus);
    let mut out = BTreeMap::new();
    for &k in ks {
        out.insert(format!("R@{k}"), recall_at_k(run, &gold, k)?);
        if let Some(rel) = relation {
            out.insert(format!("E@{k}"), entail_at_k(run, &gold, rel, k)?);
        }
    }
    Ok(out)
}
