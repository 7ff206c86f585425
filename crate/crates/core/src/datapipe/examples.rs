use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::RetrievalCorpus;
use super::synth::SyntheticOracle;
use crate::entailment::{EntailmentExample, TaskForm};
use crate::error::{Error, Result};

/// How many labelled entailment examples to draw from an oracle corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub per_form: usize,
    pub forms: Vec<TaskForm>,
    pub seed: u64,
    /// Share of negatives chosen for word overlap with the premise captions
    /// instead of uniformly.
    #[serde(default)]
    pub hard_negative_fraction: f64,
}

/// Other-cluster captions scored per hard negative.
const HARD_POOL: usize = 16;

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Default for ExampleSpec {
    fn default() -> Self {
        Self {
            per_form: 2000,
            forms: vec![TaskForm::TextText, TaskForm::ImageText, TaskForm::ImageTextText],
            seed: 0,
            hard_negative_fraction: 0.5,
        }
    }
}

/// Builds label-balanced examples: the premise is a corpus image and/or its
/// merged gold captions, the hypothesis a non-gold caption labelled by the
/// oracle. Labels alternate so every form is exactly balanced (up to one).
/// A hard negative is the other-cluster caption, among a random sample,
/// sharing the most words with the premise captions.
pub fn entailment_examples(corpus: &RetrievalCorpus, oracle: &SyntheticOracle, spec: &ExampleSpec) -> Result<Vec<EntailmentExample>> {
    let mut by_cluster: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for id in corpus.captions.keys() {
        let k = oracle
            .caption_cluster
            .get(id)
            .ok_or_else(|| Error::Validation(format!("caption `{id}` has no oracle cluster")))?;
        by_cluster.entry(*k).or_default().push(id);
    }
    if by_cluster.len() < 2 {
        return Err(Error::Validation("need at least two clusters to draw negatives".into()));
    }
    let images: Vec<&String> = corpus.images.keys().collect();
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&spec.hard_negative_fraction) {
        return Err(Error::Config("hard_negative_fraction must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.per_form * spec.forms.len());
    for &form in &spec.forms {
        for n in 0..spec.per_form {
            let label = (n % 2 == 0) as u8;
            let image = *images.choose(&mut rng).unwrap();
            let cluster = oracle.image_cluster[image.as_str()];
            let pool: Vec<&String> = if label == 1 {
                let same: Vec<&String> = by_cluster[&cluster].iter().copied().filter(|c| !corpus.is_gold(image, c)).collect();
                if same.is_empty() { by_cluster[&cluster].clone() } else { same }
            } else {
                by_cluster.iter().filter(|(k, _)| **k != cluster).flat_map(|(_, v)| v.iter().copied()).collect()
            };
            let caption = if label == 0 && rng.random_bool(spec.hard_negative_fraction) {
                let premise = words(&corpus.merge_premise_captions(image)?);
                let overlap = |c: &&String| corpus.caption(c).map(|t| words(t).intersection(&premise).count()).unwrap_or(0);
                let sample: Vec<&String> = pool.choose_multiple(&mut rng, HARD_POOL).copied().collect();
                // first maximum keeps the choice deterministic
                sample.iter().fold(sample[0], |best, c| if overlap(c) > overlap(&best) { c } else { best })
            } else {
                *pool.choose(&mut rng).unwrap()
            };
            let hyp = corpus.caption(caption)?;
            let ex = match form {
                TaskForm::TextText => EntailmentExample::text_text(corpus.merge_premise_captions(image)?, hyp, label),
                TaskForm::ImageText => EntailmentExample::image_text(corpus.image(image)?.clone(), hyp, label),
                TaskForm::ImageTextText => EntailmentExample::image_text_text(
                    corpus.image(image)?.clone(),
                    corpus.merge_premise_captions(image)?,
                    hyp,
                    label,
                ),
            };
            out.push(ex.with_ids(image.as_str(), caption.as_str()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth::{synth_generate, SyntheticSpec};

    #[test]
    fn examples_are_balanced_and_oracle_labelled() {
        let (c, o) = synth_generate(&SyntheticSpec { images_per_cluster: 4, ..SyntheticSpec::default() }).unwrap();
        let ex = entailment_examples(&c, &o, &ExampleSpec { per_form: 20, ..ExampleSpec::default() }).unwrap();
        assert_eq!(ex.len(), 60);
        for e in &ex {
            e.validate().unwrap();
            let (i, h) = (e.premise_image_id.as_deref().unwrap(), e.hypothesis_id.as_deref().unwrap());
            assert_eq!(o.entailed(i, h), e.label == 1);
            assert!(!c.is_gold(i, h));
        }
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 30);
    }

    #[test]
    fn hard_negatives_overlap_more_than_uniform_ones() {
        let (c, o) = synth_generate(&SyntheticSpec { images_per_cluster: 4, ..SyntheticSpec::default() }).unwrap();
        let overlap = |f: f64| {
            let spec = ExampleSpec { per_form: 200, forms: vec![TaskForm::TextText], hard_negative_fraction: f, ..ExampleSpec::default() };
            let ex = entailment_examples(&c, &o, &spec).unwrap();
            ex.iter()
                .filter(|e| e.label == 0)
                .map(|e| {
                    let i = e.premise_image_id.as_deref().unwrap();
                    let h = e.hypothesis_id.as_deref().unwrap();
                    words(c.caption(h).unwrap()).intersection(&words(&c.merge_premise_captions(i).unwrap())).count()
                })
                .sum::<usize>()
        };
        assert!(overlap(1.0) > overlap(0.0));
        for e in entailment_examples(&c, &o, &ExampleSpec { per_form: 50, hard_negative_fraction: 1.0, ..ExampleSpec::default() }).unwrap() {
            assert_eq!(o.entailed(e.premise_image_id.as_deref().unwrap(), e.hypothesis_id.as_deref().unwrap()), e.label == 1);
        }
    }

    #[test]
    fn fraction_outside_unit_interval_is_rejected() {
        let (c, o) = synth_generate(&SyntheticSpec { images_per_cluster: 2, ..SyntheticSpec::default() }).unwrap();
        assert!(entailment_examples(&c, &o, &ExampleSpec { hard_negative_fraction: 1.5, ..ExampleSpec::default() }).is_err());
    }
}
