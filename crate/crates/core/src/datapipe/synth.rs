//! Planted-cluster corpus generator with a ground-truth entailment oracle.
//!
//! Each cluster owns a color, an 8×8 binary block pattern and a set of
//! core words. An image draws its cluster motif into one patch slot over a
//! tinted background; its captions combine cluster core words with words
//! naming the slot and tint plus one filler word. Slot and tint are the
//! instance jitter: with `noise = 0` two images of a cluster differ only in
//! them. Slot and tint words are shared by all clusters, so they carry no
//! entailment signal. The oracle relation is cluster co-membership.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{RetrievalCorpus, Split};
use crate::encoders::{PatchGrid, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cluster_count: usize,
    pub images_per_cluster: usize,
    pub captions_per_image: usize,
    /// Size of each cluster's private vocabulary.
    pub core_words_per_cluster: usize,
    /// Core words drawn into every caption.
    pub core_words_per_caption: usize,
    /// Size of the shared pure-filler vocabulary.
    pub filler_words: usize,
    /// Background tint levels, each named by a shared word.
    pub tint_levels: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub split: Split,
    pub image_size: usize,
    pub patch_size: usize,
    /// Hash buckets the generated words must not collide in.
    pub vocab_size: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cluster_count: 8,
            images_per_cluster: 16,
            captions_per_image: 5,
            core_words_per_cluster: 6,
            core_words_per_caption: 2,
            filler_words: 16,
            tint_levels: 4,
            noise: 0.1,
            seed: 0,
            split: Split::Train,
            image_size: 32,
            patch_size: 8,
            vocab_size: 2048,
        }
    }
}

impl SyntheticSpec {
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn slot_count(&self) -> usize {
        let per_row = self.image_size / self.patch_size.max(1);
        per_row * per_row
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.cluster_count == 0 || self.images_per_cluster == 0 || self.captions_per_image == 0 {
            return bad("cluster, image and caption counts must be positive");
        }
        if self.cluster_count > PALETTE.len() {
            return bad(&format!("at most {} clusters are supported", PALETTE.len()));
        }
        if self.patch_size != MOTIF || !self.image_size.is_multiple_of(MOTIF) || self.image_size == 0 {
            return bad("motifs are 8x8 so patch_size must be 8 and image_size a multiple of 8");
        }
        if self.core_words_per_caption == 0 || self.core_words_per_caption > self.core_words_per_cluster {
            return bad("core_words_per_caption must be in 1..=core_words_per_cluster");
        }
        if self.tint_levels == 0 || self.filler_words == 0 {
            return bad("tint_levels and filler_words must be positive");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must be in [0, 0.5)");
        }
        Ok(())
    }
}

const MOTIF: usize = 8;

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.9, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [0.95, 0.55, 0.1],
    [0.55, 0.2, 0.95],
];

/// Ground truth of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub image_cluster: BTreeMap<String, usize>,
    pub caption_cluster: BTreeMap<String, usize>,
}

impl SyntheticOracle {
    /// Cluster co-membership; unknown ids are never entailed.
    pub fn entailed(&self, image: &str, caption: &str) -> bool {
        match (self.image_cluster.get(image), self.caption_cluster.get(caption)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

/// Cluster-level definitions shared by every split of one seed.
struct Clusters {
    patterns: Vec<[bool; MOTIF * MOTIF]>,
    core: Vec<Vec<String>>,
    slot_words: Vec<String>,
    tint_words: Vec<String>,
    fillers: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

fn cluster_definitions(spec: &SyntheticSpec) -> Clusters {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c105);
    let tok = Tokenizer::new(spec.vocab_size, 64);
    let mut used_words = BTreeSet::new();
    let mut used_ids = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        let id = tok.word_id(&w);
        // distinct words that also never share a hash bucket
        if !used_words.contains(&w) && !used_ids.contains(&id) {
            used_words.insert(w.clone());
            used_ids.insert(id);
            return w;
        }
    };
    let core = (0..spec.cluster_count)
        .map(|_| (0..spec.core_words_per_cluster).map(|_| fresh(&mut rng)).collect())
        .collect();
    let slot_words = (0..spec.slot_count()).map(|_| fresh(&mut rng)).collect();
    let tint_words = (0..spec.tint_levels).map(|_| fresh(&mut rng)).collect();
    let fillers = (0..spec.filler_words).map(|_| fresh(&mut rng)).collect();
    let mut patterns: Vec<[bool; MOTIF * MOTIF]> = Vec::new();
    while patterns.len() < spec.cluster_count {
        let mut p = [false; MOTIF * MOTIF];
        p.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
        let on = p.iter().filter(|&&b| b).count();
        let distinct = patterns
            .iter()
            .all(|q| q.iter().zip(&p).filter(|(a, b)| a != b).count() >= 16);
        if (24..=40).contains(&on) && distinct {
            patterns.push(p);
        }
    }
    Clusters {
        patterns,
        core,
        slot_words,
        tint_words,
        fillers,
    }
}

fn tint_level(spec: &SyntheticSpec, t: usize) -> f64 {
    0.05 + 0.3 * t as f64 / spec.tint_levels.max(2).saturating_sub(1) as f64
}

fn render(spec: &SyntheticSpec, defs: &Clusters, cluster: usize, slot: usize, tint: usize, rng: &mut ChaCha8Rng) -> Result<PatchGrid> {
    let size = spec.image_size;
    let per_row = size / MOTIF;
    let (sy, sx) = (slot / per_row * MOTIF, slot % per_row * MOTIF);
    let bg = tint_level(spec, tint);
    let color = PALETTE[cluster];
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let inside = (sy..sy + MOTIF).contains(&y) && (sx..sx + MOTIF).contains(&x);
            let on = inside && defs.patterns[cluster][(y - sy) * MOTIF + (x - sx)];
            for c in color {
                let base = if on { c } else { bg };
                let v = if spec.noise > 0.0 {
                    base + rng.random_range(-spec.noise..=spec.noise)
                } else {
                    base
                };
                // f32-representable so sidecar round-trips are exact
                pixels.push(v.clamp(0.0, 1.0) as f32 as f64);
            }
        }
    }
    PatchGrid::new(size, size, 3, spec.patch_size, pixels)
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7261_696e,
        Split::Val => 0x0076_616c,
        Split::Test => 0x7465_7374,
    }
}

/// Generates a corpus and its oracle; identical specs give identical output.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<(RetrievalCorpus, SyntheticOracle)> {
    spec.validate()?;
    let defs = cluster_definitions(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split_salt(spec.split));
    let tag = match spec.split {
        Split::Train => "tr",
        Split::Val => "va",
        Split::Test => "te",
    };
    let mut corpus = RetrievalCorpus::new(spec.split);
    let mut oracle = SyntheticOracle::default();
    let slots = spec.slot_count();
    let mut caption_no = 0;
    for cluster in 0..spec.cluster_count {
        // cycle through slots so every cluster covers them evenly
        let mut slot_order: Vec<usize> = (0..slots).collect();
        slot_order.shuffle(&mut rng);
        for j in 0..spec.images_per_cluster {
            let slot = slot_order[j % slots];
            let tint = rng.random_range(0..spec.tint_levels);
            let image_id = format!("{tag}-i{:04}", cluster * spec.images_per_cluster + j);
            let grid = render(spec, &defs, cluster, slot, tint, &mut rng)?;
            let mut caps = Vec::with_capacity(spec.captions_per_image);
            for _ in 0..spec.captions_per_image {
                let mut words: Vec<&str> = defs.core[cluster]
                    .choose_multiple(&mut rng, spec.core_words_per_caption)
                    .map(String::as_str)
                    .collect();
                words.push(&defs.slot_words[slot]);
                words.push(&defs.tint_words[tint]);
                words.push(defs.fillers.choose(&mut rng).unwrap());
                words.shuffle(&mut rng);
                let cap_id = format!("{tag}-c{caption_no:05}");
                caption_no += 1;
                corpus.captions.insert(cap_id.clone(), words.join(" "));
                oracle.caption_cluster.insert(cap_id.clone(), cluster);
                caps.push(cap_id);
            }
            corpus.images.insert(image_id.clone(), grid);
            corpus.gold.insert(image_id.clone(), caps);
            oracle.image_cluster.insert(image_id, cluster);
        }
    }
    corpus.validate()?;
    Ok((corpus, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::corpus::{load_corpus, save_corpus, ImageGeometry};

    #[test]
    fn default_corpus_has_expected_sizes() {
        let (c, o) = synth_generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(c.images.len(), 128);
        assert_eq!(c.captions.len(), 640);
        assert!(c.gold.values().all(|g| g.len() == 5));
        assert!(c.gold_pairs().all(|(i, cap)| o.entailed(i, cap)));
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let spec = SyntheticSpec::default();
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = synth_generate(&spec.clone().with_seed(1)).unwrap();
        assert_ne!(synth_generate(&spec).unwrap().0, other.0);
    }

    #[test]
    fn splits_share_cluster_vocabulary() {
        let spec = SyntheticSpec::default();
        let defs = cluster_definitions(&spec);
        let all_core: BTreeSet<&str> = defs.core.iter().flatten().map(String::as_str).collect();
        for split in [Split::Train, Split::Test] {
            let (c, o) = synth_generate(&spec.clone().with_split(split)).unwrap();
            for (id, text) in &c.captions {
                let k = o.caption_cluster[id];
                let core: Vec<&str> = text.split(' ').filter(|w| all_core.contains(w)).collect();
                assert_eq!(core.len(), spec.core_words_per_caption);
                assert!(core.iter().all(|w| defs.core[k].iter().any(|x| x == w)));
            }
        }
        let (train, _) = synth_generate(&spec).unwrap();
        let (test, _) = synth_generate(&spec.clone().with_split(Split::Test)).unwrap();
        assert!(train.images.keys().all(|k| !test.images.contains_key(k)));
    }

    #[test]
    fn noiseless_images_differ_only_by_jitter() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let defs = cluster_definitions(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = render(&spec, &defs, 2, 5, 1, &mut rng).unwrap();
        let b = render(&spec, &defs, 2, 5, 1, &mut rng).unwrap();
        assert_eq!(a, b);
        let c = render(&spec, &defs, 3, 5, 1, &mut rng).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn core_vocabularies_are_disjoint() {
        let defs = cluster_definitions(&SyntheticSpec::default());
        let all: Vec<&String> = defs.core.iter().flatten().chain(&defs.slot_words).chain(&defs.tint_words).chain(&defs.fillers).collect();
        let set: BTreeSet<&String> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            images_per_cluster: 3,
            seed: 17,
            ..SyntheticSpec::default()
        };
        let (mut c, o) = synth_generate(&spec).unwrap();
        let (img, cap) = c
            .images
            .keys()
            .flat_map(|i| c.captions.keys().map(move |k| (i.clone(), k.clone())))
            .find(|(i, k)| o.entailed(i, k) && !c.is_gold(i, k))
            .unwrap();
        c.weak.push(crate::datapipe::WeakEdge { image: img, caption: cap, p_entail: 0.75 });
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path, ImageGeometry::default()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { cluster_count: 0, ..SyntheticSpec::default() },
            SyntheticSpec { cluster_count: 9, ..SyntheticSpec::default() },
            SyntheticSpec { patch_size: 4, ..SyntheticSpec::default() },
            SyntheticSpec { noise: 0.7, ..SyntheticSpec::default() },
        ] {
            assert!(synth_generate(&spec).is_err());
        }
    }
}
