use std::collections::HashSet;

use crate::datapipe::{CandidatePair, PairClassifier, RetrievalCorpus};
use crate::error::Result;

/// Gold edges plus classifier-entailed edges, keyed by (image, caption).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntailmentGraph {
    gold: HashSet<(String, String)>,
    entailed: HashSet<(String, String)>,
    /// Entailed edges in insertion order, for deterministic iteration.
    entailed_order: Vec<(String, String)>,
}

impl EntailmentGraph {
    /// Gold edges of `corpus`, with its weak edges as the entailed set.
    pub fn from_corpus(corpus: &RetrievalCorpus) -> Self {
        let mut g = Self {
            gold: corpus.gold_pairs().map(|(i, c)| (i.to_string(), c.to_string())).collect(),
            ..Self::default()
        };
        for e in &corpus.weak {
            g.add_entailed(&e.image, &e.caption);
        }
        g
    }

    /// Adds a non-gold entailed edge; returns whether it was new.
    pub fn add_entailed(&mut self, image: &str, caption: &str) -> bool {
        let key = (image.to_string(), caption.to_string());
        if self.gold.contains(&key) || !self.entailed.insert(key.clone()) {
            return false;
        }
        self.entailed_order.push(key);
        true
    }

    pub fn is_gold(&self, image: &str, caption: &str) -> bool {
        self.gold.contains(&(image.to_string(), caption.to_string()))
    }

    pub fn is_entailed(&self, image: &str, caption: &str) -> bool {
        self.entailed.contains(&(image.to_string(), caption.to_string()))
    }

    pub fn contains(&self, image: &str, caption: &str) -> bool {
        let key = (image.to_string(), caption.to_string());
        self.gold.contains(&key) || self.entailed.contains(&key)
    }

    pub fn gold_len(&self) -> usize {
        self.gold.len()
    }

    pub fn entailed_len(&self) -> usize {
        self.entailed.len()
    }

    pub fn entailed_edges(&self) -> &[(String, String)] {
        &self.entailed_order
    }
}

/// Classifies each candidate against its image premise and records the
/// entailed ones on top of the gold edges.
pub fn build_entailment_graph(
    corpus: &RetrievalCorpus,
    classifier: &dyn PairClassifier,
    candidates: &[CandidatePair],
    threshold: f64,
) -> Result<EntailmentGraph> {
    let mut g = EntailmentGraph::from_corpus(&RetrievalCorpus {
        weak: Vec::new(),
        ..corpus.clone()
    });
    for cand in candidates {
        corpus.image(&cand.image_id)?;
        corpus.caption(&cand.caption_id)?;
        if g.is_gold(&cand.image_id, &cand.caption_id) {
            continue;
        }
        if classifier.p_entail(corpus, &cand.image_id, &cand.caption_id)? >= threshold {
            g.add_entailed(&cand.image_id, &cand.caption_id);
        }
    }
    Ok(g)
}

/// Whether the pair may serve as an in-batch negative.
pub fn filter_negative(image: &str, caption: &str, graph: &EntailmentGraph) -> bool {
    !graph.contains(image, caption)
}
