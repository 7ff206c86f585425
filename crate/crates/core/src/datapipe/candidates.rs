use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::RetrievalCorpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidateSource {
    TopKRetrieval,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidatePair {
    pub image_id: String,
    pub caption_id: String,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    /// Depth of the retrieval list sampled from.
    pub k: usize,
    /// Captions sampled from each image's top-k list.
    pub per_image: usize,
    /// Extra random pairs, as a fraction of the top-k candidates.
    pub random_fraction: f64,
    /// Fraction of corpus images that receive top-k candidates.
    pub image_fraction: f64,
    pub seed: u64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            k: 30,
            per_image: 1,
            random_fraction: 0.1,
            image_fraction: 1.0,
            seed: 0,
        }
    }
}

/// Samples annotation candidates from per-image caption rankings
/// (best first). Never emits gold pairs or duplicates.
pub fn generate_candidates(
    corpus: &RetrievalCorpus,
    rankings: &BTreeMap<String, Vec<String>>,
    cfg: &CandidateConfig,
) -> Result<Vec<CandidatePair>> {
    if cfg.k == 0 || cfg.per_image == 0 {
        return Err(Error::Config("k and per_image must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.random_fraction) || !(0.0..=1.0).contains(&cfg.image_fraction) {
        return Err(Error::Config("random_fraction and image_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all_images: Vec<&String> = corpus.images.keys().collect();
    let take = (cfg.image_fraction * all_images.len() as f64).round() as usize;
    let mut sampled: Vec<&String> = all_images.choose_multiple(&mut rng, take).copied().collect();
    sampled.sort();

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut warned = false;
    for image in sampled {
        let ranked = rankings
            .get(image)
            .ok_or_else(|| Error::Validation(format!("no ranking for image `{image}`")))?;
        if let Some(bad) = ranked.iter().find(|c| !corpus.captions.contains_key(*c)) {
            return Err(Error::Validation(format!("ranking names unknown caption id `{bad}`")));
        }
        let k = cfg.k.min(ranked.len());
        if k < cfg.k && !warned {
            log::warn!("k = {} exceeds the {} ranked captions; clamping", cfg.k, ranked.len());
            warned = true;
        }
        let pool: Vec<&String> = ranked[..k].iter().filter(|c| !corpus.is_gold(image, c)).collect();
        for caption in pool.choose_multiple(&mut rng, cfg.per_image) {
            if seen.insert((image.clone(), (*caption).clone())) {
                out.push(CandidatePair {
                    image_id: image.clone(),
                    caption_id: (*caption).clone(),
                    source: CandidateSource::TopKRetrieval,
                });
            }
        }
    }

    let extra = (cfg.random_fraction * out.len() as f64).round() as usize;
    let captions: Vec<&String> = corpus.captions.keys().collect();
    let free = all_images.len() * captions.len() - corpus.gold_pair_count() - seen.len();
    let mut added = 0;
    while added < extra.min(free) {
        let image = all_images[rng.random_range(0..all_images.len())];
        let caption = captions[rng.random_range(0..captions.len())];
        if corpus.is_gold(image, caption) || !seen.insert((image.clone(), caption.clone())) {
            continue;
        }
        out.push(CandidatePair {
            image_id: image.clone(),
            caption_id: caption.clone(),
            source: CandidateSource::Random,
        });
        added += 1;
    }
    Ok(out)
}
