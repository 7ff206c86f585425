use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::RetrievalCorpus;

/// Many-to-many matching statistics over gold plus weak edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub captions: usize,
    pub gold_edges: usize,
    pub weak_edges: usize,
    /// Caption id → number of linked images.
    pub per_caption: BTreeMap<String, usize>,
    /// Image id → number of linked captions.
    pub per_image: BTreeMap<String, usize>,
    /// Largest per-caption count, lowest id on ties.
    pub max_images_per_caption: Option<(String, usize)>,
    pub max_captions_per_image: Option<(String, usize)>,
    /// Count → number of captions with that count.
    pub caption_histogram: BTreeMap<usize, usize>,
    pub image_histogram: BTreeMap<usize, usize>,
}

impl CorpusStats {
    pub fn edges(&self) -> usize {
        self.gold_edges + self.weak_edges
    }
}

fn maximum(counts: &BTreeMap<String, usize>) -> Option<(String, usize)> {
    counts
        .iter()
        .fold(None, |best: Option<(&String, usize)>, (id, &n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((id, n)),
        })
        .map(|(id, n)| (id.clone(), n))
}

fn histogram(counts: &BTreeMap<String, usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &n in counts.values() {
        *h.entry(n).or_insert(0) += 1;
    }
    h
}

pub fn corpus_stats(corpus: &RetrievalCorpus) -> CorpusStats {
    let mut per_caption: BTreeMap<String, usize> = corpus.captions.keys().map(|k| (k.clone(), 0)).collect();
    let mut per_image: BTreeMap<String, usize> = corpus.images.keys().map(|k| (k.clone(), 0)).collect();
    let edges = corpus
        .gold_pairs()
        .chain(corpus.weak.iter().map(|e| (e.image.as_str(), e.caption.as_str())));
    for (i, c) in edges {
        *per_image.entry(i.to_string()).or_insert(0) += 1;
        *per_caption.entry(c.to_string()).or_insert(0) += 1;
    }
    CorpusStats {
        images: corpus.images.len(),
        captions: corpus.captions.len(),
        gold_edges: corpus.gold_pair_count(),
        weak_edges: corpus.weak.len(),
        max_images_per_caption: maximum(&per_caption),
        max_captions_per_image: maximum(&per_image),
        caption_histogram: histogram(&per_caption),
        image_histogram: histogram(&per_image),
        per_caption,
        per_image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::corpus::WeakEdge;
    use crate::datapipe::synth::{synth_generate, SyntheticSpec};

    #[test]
    fn gold_only_corpus_has_five_per_image() {
        let (c, _) = synth_generate(&SyntheticSpec { images_per_cluster: 2, ..SyntheticSpec::default() }).unwrap();
        let s = corpus_stats(&c);
        assert_eq!(s.max_captions_per_image.as_ref().unwrap().1, 5);
        assert_eq!(s.max_images_per_caption.as_ref().unwrap().1, 1);
        let mass: usize = s.caption_histogram.iter().map(|(k, n)| k * n).sum();
        assert_eq!(mass, s.edges());
    }

    #[test]
    fn weak_edges_raise_caption_counts() {
        let (mut c, _) = synth_generate(&SyntheticSpec { images_per_cluster: 2, ..SyntheticSpec::default() }).unwrap();
        let cap = c.gold.values().next().unwrap()[0].clone();
        let others: Vec<String> = c.images.keys().filter(|i| !c.is_gold(i, &cap)).take(3).cloned().collect();
        for i in others {
            c.weak.push(WeakEdge { image: i, caption: cap.clone(), p_entail: 0.9 });
        }
        let s = corpus_stats(&c);
        assert_eq!(s.per_caption[&cap], 4);
        assert_eq!(s.max_images_per_caption, Some((cap, 4)));
        let mass: usize = s.image_histogram.iter().map(|(k, n)| k * n).sum();
        assert_eq!(mass, s.edges());
    }
}
