use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::candidates::{CandidatePair, CandidateSource};
use super::corpus::{RetrievalCorpus, WeakEdge};
use super::synth::SyntheticOracle;
use crate::diffcore::ParamSet;
use crate::entailment::{predict, Decision, EntailmentConfig, EntailmentExample};
use crate::error::Result;

/// Scores whether a corpus caption is entailed by an image and its gold
/// captions.
pub trait PairClassifier {
    fn p_entail(&self, corpus: &RetrievalCorpus, image: &str, caption: &str) -> Result<f64>;
}

impl<F: Fn(&str, &str) -> f64> PairClassifier for F {
    fn p_entail(&self, _: &RetrievalCorpus, image: &str, caption: &str) -> Result<f64> {
        Ok(self(image, caption))
    }
}

impl PairClassifier for SyntheticOracle {
    fn p_entail(&self, _: &RetrievalCorpus, image: &str, caption: &str) -> Result<f64> {
        Ok(if self.entailed(image, caption) { 1.0 } else { 0.0 })
    }
}

/// The trained multi-modal classifier, queried in image-text-text form.
#[derive(Debug, Clone)]
pub struct ModelClassifier<'a> {
    pub cfg: &'a EntailmentConfig,
    pub params: &'a ParamSet,
}

impl ModelClassifier<'_> {
    pub fn example(corpus: &RetrievalCorpus, image: &str, caption: &str) -> Result<EntailmentExample> {
        let premise = corpus.merge_premise_captions(image)?;
        let grid = corpus.image(image)?.clone();
        let hyp = corpus.caption(caption)?;
        Ok(EntailmentExample::image_text_text(grid, premise, hyp, 0).with_ids(image, caption))
    }
}

impl PairClassifier for ModelClassifier<'_> {
    fn p_entail(&self, corpus: &RetrievalCorpus, image: &str, caption: &str) -> Result<f64> {
        let ex = Self::example(corpus, image, caption)?;
        Ok(predict(&ex, self.cfg, self.params, 0.5)?.p_entail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub image_id: String,
    pub caption_id: String,
    pub source: CandidateSource,
    pub p_entail: f64,
    pub verdict: Decision,
}

/// Classifies every candidate and adds the entailed ones as weak edges.
/// Edges already present stay untouched, so revision is idempotent.
pub fn revise_corpus(
    corpus: &RetrievalCorpus,
    classifier: &dyn PairClassifier,
    candidates: &[CandidatePair],
    threshold: f64,
) -> Result<(RetrievalCorpus, Vec<AuditRecord>)> {
    let mut out = corpus.clone();
    let mut present: BTreeSet<(String, String)> = corpus.weak.iter().map(|e| (e.image.clone(), e.caption.clone())).collect();
    let mut audit = Vec::with_capacity(candidates.len());
    for cand in candidates {
        corpus.image(&cand.image_id)?;
        corpus.caption(&cand.caption_id)?;
        let p = classifier.p_entail(corpus, &cand.image_id, &cand.caption_id)?;
        let verdict = if p >= threshold { Decision::Entail } else { Decision::NonEntail };
        audit.push(AuditRecord {
            image_id: cand.image_id.clone(),
            caption_id: cand.caption_id.clone(),
            source: cand.source,
            p_entail: p,
            verdict,
        });
        if verdict == Decision::Entail
            && !corpus.is_gold(&cand.image_id, &cand.caption_id)
            && present.insert((cand.image_id.clone(), cand.caption_id.clone()))
        {
            out.weak.push(WeakEdge {
                image: cand.image_id.clone(),
                caption: cand.caption_id.clone(),
                p_entail: p,
            });
        }
    }
    out.validate()?;
    Ok((out, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth::{synth_generate, SyntheticSpec};

    fn setup() -> (RetrievalCorpus, SyntheticOracle, Vec<CandidatePair>) {
        let spec = SyntheticSpec { images_per_cluster: 3, ..SyntheticSpec::default() };
        let (c, o) = synth_generate(&spec).unwrap();
        let cands = c
            .images
            .keys()
            .zip(c.captions.keys().rev())
            .filter(|(i, k)| !c.is_gold(i, k))
            .map(|(i, k)| CandidatePair {
                image_id: i.clone(),
                caption_id: k.clone(),
                source: CandidateSource::TopKRetrieval,
            })
            .collect();
        (c, o, cands)
    }

    #[test]
    fn reject_all_and_accept_all() {
        let (c, _, cands) = setup();
        let (r, audit) = revise_corpus(&c, &|_: &str, _: &str| 0.0, &cands, 0.5).unwrap();
        assert!(r.weak.is_empty());
        assert_eq!(audit.len(), cands.len());
        let (r, _) = revise_corpus(&c, &|_: &str, _: &str| 1.0, &cands, 0.5).unwrap();
        assert_eq!(r.weak.len(), cands.len());
    }

    #[test]
    fn oracle_revision_matches_planted_edges_and_is_idempotent() {
        let (c, o, cands) = setup();
        let (r, _) = revise_corpus(&c, &o, &cands, 0.5).unwrap();
        let planted = cands.iter().filter(|p| o.entailed(&p.image_id, &p.caption_id)).count();
        assert_eq!(r.weak.len(), planted);
        assert!(r.weak.iter().all(|e| o.entailed(&e.image, &e.caption)));
        let (again, _) = revise_corpus(&r, &o, &cands, 0.5).unwrap();
        assert_eq!(again, r);
    }
}
