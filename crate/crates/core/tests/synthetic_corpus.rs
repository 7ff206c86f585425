//! Public-API checks of the synthetic corpus: image separability, manifest
//! round trips and split disjointness.

use entailkit::datapipe::{load_corpus, save_corpus, synth_generate, ImageGeometry, Split, SyntheticSpec};

/// Softmax regression on raw pixels, trained on the train split and scored on
/// the test split.
#[test]
fn pixel_linear_probe_separates_clusters() {
    let spec = SyntheticSpec::default();
    let (train, train_o) = synth_generate(&spec).unwrap();
    let (test, test_o) = synth_generate(&spec.clone().with_split(Split::Test)).unwrap();
    let k = spec.cluster_count;
    let data = |c: &entailkit::datapipe::RetrievalCorpus, o: &entailkit::datapipe::SyntheticOracle| {
        c.images
            .iter()
            .map(|(id, g)| (g.pixels().to_vec(), o.image_cluster[id]))
            .collect::<Vec<_>>()
    };
    let (tr, te) = (data(&train, &train_o), data(&test, &test_o));
    let d = tr[0].0.len();
    let mut w = vec![0.0; k * (d + 1)];
    for _ in 0..200 {
        let mut g = vec![0.0; w.len()];
        for (x, y) in &tr {
            let logits: Vec<f64> = (0..k)
                .map(|c| w[c * (d + 1) + d] + x.iter().zip(&w[c * (d + 1)..c * (d + 1) + d]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - m).exp() / z - if c == *y { 1.0 } else { 0.0 };
                for (j, xj) in x.iter().enumerate() {
                    g[c * (d + 1) + j] += p * xj;
                }
                g[c * (d + 1) + d] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.5 * gi / tr.len() as f64;
        }
    }
    let correct = te
        .iter()
        .filter(|(x, y)| {
            let score = |c: usize| w[c * (d + 1) + d] + x.iter().zip(&w[c * (d + 1)..]).map(|(a, b)| a * b).sum::<f64>();
            (0..k).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == *y
        })
        .count();
    let acc = correct as f64 / te.len() as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}

#[test]
fn manifest_round_trip_preserves_content_hash() {
    let spec = SyntheticSpec {
        images_per_cluster: 3,
        ..SyntheticSpec::default()
    };
    let (c, _) = synth_generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("corpus.jsonl");
    save_corpus(&c, &manifest).unwrap();
    let geom = ImageGeometry {
        size: spec.image_size,
        channels: 3,
        patch_size: spec.patch_size,
    };
    let back = load_corpus(&manifest, geom).unwrap();
    assert_eq!(back.content_hash(), c.content_hash());
    assert_eq!(back.gold_pair_count(), c.gold_pair_count());
}

#[test]
fn splits_share_clusters_but_not_ids_or_pixels() {
    let spec = SyntheticSpec {
        images_per_cluster: 4,
        ..SyntheticSpec::default()
    };
    let (a, oa) = synth_generate(&spec).unwrap();
    let (b, ob) = synth_generate(&spec.clone().with_split(Split::Test)).unwrap();
    assert!(a.images.keys().all(|id| !b.images.contains_key(id)));
    assert!(a.images.values().all(|g| b.images.values().all(|h| g.pixels() != h.pixels())));
    let clusters = |o: &entailkit::datapipe::SyntheticOracle| {
        o.image_cluster.values().copied().collect::<std::collections::BTreeSet<_>>()
    };
    assert_eq!(clusters(&oa), clusters(&ob));
}
