use super::*;
use crate::datapipe::{synth_generate, CandidatePair, CandidateSource, RetrievalCorpus, SyntheticOracle, SyntheticSpec};
use crate::diffcore::{finite_diff_check_with, FdOptions, Inputs, ParamSet, Sgd, Tape};
use crate::error::Error;

fn small(images_per_cluster: usize, seed: u64) -> (RetrievalCorpus, SyntheticOracle) {
    synth_generate(&SyntheticSpec {
        images_per_cluster,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn same_cluster_candidates(c: &RetrievalCorpus, o: &SyntheticOracle, per_image: usize) -> Vec<CandidatePair> {
    let mut out = Vec::new();
    for img in c.images.keys() {
        let picks = c
            .captions
            .keys()
            .filter(|k| o.entailed(img, k) && !c.is_gold(img, k))
            .take(per_image);
        out.extend(picks.map(|k| CandidatePair {
            image_id: img.clone(),
            caption_id: k.clone(),
            source: CandidateSource::TopKRetrieval,
        }));
    }
    out
}

fn graph_with_oracle(c: &RetrievalCorpus, o: &SyntheticOracle, per_image: usize) -> EntailmentGraph {
    build_entailment_graph(c, o, &same_cluster_candidates(c, o, per_image), 0.5).unwrap()
}

#[test]
fn graph_contains_gold_and_respects_classifier() {
    let (c, o) = small(3, 0);
    let (img, caps) = c.gold.iter().next().unwrap();
    let mut cands = same_cluster_candidates(&c, &o, 2);
    cands.push(CandidatePair {
        image_id: img.clone(),
        caption_id: caps[0].clone(),
        source: CandidateSource::Random,
    });
    let none = build_entailment_graph(&c, &|_: &str, _: &str| 0.0, &cands, 0.5).unwrap();
    assert!(none.contains(img, &caps[0]));
    assert_eq!(none.entailed_len(), 0);
    assert_eq!(none.gold_len(), c.gold_pair_count());
    let g = build_entailment_graph(&c, &o, &cands, 0.5).unwrap();
    assert_eq!(g.entailed_len(), cands.len() - 1);
    let bad = vec![CandidatePair {
        image_id: "nope".into(),
        caption_id: caps[0].clone(),
        source: CandidateSource::Random,
    }];
    assert!(build_entailment_graph(&c, &o, &bad, 0.5).is_err());
}

#[test]
fn filter_negative_cases() {
    let (c, o) = small(3, 0);
    let g = graph_with_oracle(&c, &o, 1);
    let (img, caps) = c.gold.iter().next().unwrap();
    assert!(!filter_negative(img, &caps[0], &g));
    let (ei, ec) = &g.entailed_edges()[0];
    assert!(!filter_negative(ei, ec, &g));
    let unrelated = c.captions.keys().find(|k| !o.entailed(img, k)).unwrap();
    assert!(filter_negative(img, unrelated, &g));
}

#[test]
fn plans_without_weak_edges_are_regular_only() {
    let (c, _) = small(4, 1);
    let g = EntailmentGraph::from_corpus(&c);
    let plan = plan_batches(&c, &g, &PlanConfig::default()).unwrap();
    assert!(plan.batches.iter().all(|b| b.kind == BatchKind::Regular && b.lr_scale == 1.0));
    assert_eq!(plan.batches.iter().map(|b| b.pairs.len()).sum::<usize>(), c.gold_pair_count());
    plan.validate(&g).unwrap();
}

#[test]
fn weak_batches_prefer_incident_edges() {
    let (c, o) = small(4, 2);
    // many weak edges per image so every regular batch has enough incident ones
    let g = graph_with_oracle(&c, &o, 20);
    let cfg = PlanConfig {
        batch_size: 8,
        ..PlanConfig::default()
    };
    let plan = plan_batches(&c, &g, &cfg).unwrap();
    plan.validate(&g).unwrap();
    for pair in plan.batches.chunks(2) {
        let (reg, weak) = (&pair[0], &pair[1]);
        assert_eq!(weak.kind, BatchKind::Weak);
        assert_eq!(weak.lr_scale, 0.3);
        assert_eq!(weak.pairs.len(), 8);
        assert!(weak.pairs.iter().all(|(i, _)| reg.pairs.iter().any(|(r, _)| r == i)));
    }
}

#[test]
fn scarce_weak_pool_truncates_and_tops_up() {
    let (c, o) = small(4, 3);
    let mut g = EntailmentGraph::from_corpus(&c);
    for cand in same_cluster_candidates(&c, &o, 1).into_iter().take(5) {
        assert!(o.entailed(&cand.image_id, &cand.caption_id));
        g.add_entailed(&cand.image_id, &cand.caption_id);
    }
    let plan = plan_batches(&c, &g, &PlanConfig::default()).unwrap();
    plan.validate(&g).unwrap();
    for b in plan.batches.iter().filter(|b| b.kind == BatchKind::Weak) {
        assert_eq!(b.pairs.len(), 5);
    }
}

#[test]
fn validator_rejects_broken_plans() {
    let (c, o) = small(3, 4);
    let g = graph_with_oracle(&c, &o, 1);
    let plan = plan_batches(&c, &g, &PlanConfig::default()).unwrap();
    plan.validate(&g).unwrap();
    let mut swapped = plan.clone();
    swapped.batches.swap(0, 1);
    assert!(swapped.validate(&g).is_err());
    let mut rescaled = plan.clone();
    rescaled.batches[1].lr_scale = 1.0;
    assert!(rescaled.validate(&g).is_err());
    let mut mixed = plan.clone();
    let weak_pair = mixed.batches[1].pairs[0].clone();
    mixed.batches[0].pairs.push(weak_pair);
    assert!(mixed.validate(&g).is_err());
    assert!(matches!(
        plan_batches(&c, &g, &PlanConfig { batch_size: 1, ..PlanConfig::default() }),
        Err(Error::Config(_))
    ));
}

fn two_unrelated(c: &RetrievalCorpus, o: &SyntheticOracle) -> Vec<Pair> {
    let mut it = c.gold.iter();
    let (i0, c0) = it.next().unwrap();
    let (i1, c1) = it.find(|(i, _)| !o.entailed(i, &c0[0])).unwrap();
    vec![(i0.clone(), c0[0].clone()), (i1.clone(), c1[0].clone())]
}

#[test]
fn zero_towers_give_two_ln_two() {
    let (c, o) = small(2, 5);
    let cfg = DualEncoderConfig::default();
    let mut p = init_dual_encoder(&cfg, 0).unwrap();
    p.zero_all();
    let batch = two_unrelated(&c, &o);
    let mask = negative_mask(&batch, None);
    let mut t = Tape::new(&p);
    let l = contrastive_loss_on_tape(&mut t, &cfg, &c, &batch, &mask).unwrap();
    assert!((t.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn masking_an_entailed_pair_lowers_the_loss() {
    let (c, o) = small(3, 6);
    let cfg = DualEncoderConfig::default();
    let p = init_dual_encoder(&cfg, 1).unwrap();
    let g = graph_with_oracle(&c, &o, 1);
    let (ei, ec) = g.entailed_edges()[0].clone();
    let gold_of_ec = c.gold.iter().find(|(_, cs)| cs.contains(&ec)).unwrap().0.clone();
    let other = c.gold[&ei][0].clone();
    // rows: (ei, gold caption), (owner of ec, ec) so (ei, ec) is off-diagonal
    let batch = vec![(ei.clone(), other), (gold_of_ec, ec.clone())];
    let loss = |mask: &[bool]| {
        let mut t = Tape::new(&p);
        let l = contrastive_loss_on_tape(&mut t, &cfg, &c, &batch, mask).unwrap();
        t.value(l).item()
    };
    let masked = negative_mask(&batch, Some(&g));
    assert!(masked[1]);
    assert!(loss(&masked) < loss(&negative_mask(&batch, None)));
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let (c, _) = small(2, 7);
    let cfg = DualEncoderConfig {
        hidden_dim: 6,
        embed_dim: 4,
        vocab_size: 64,
        ..DualEncoderConfig::default()
    };
    let p = init_dual_encoder(&cfg, 3).unwrap();
    let batch: Vec<Pair> = c.gold_pairs().step_by(7).take(4).map(|(i, k)| (i.into(), k.into())).collect();
    let mut mask = negative_mask(&batch, None);
    mask[1] = true;
    let g = |t: &mut Tape<'_>| Ok(vec![("loss".to_string(), contrastive_loss_on_tape(t, &cfg, &c, &batch, &mask)?)]);
    let opts = FdOptions {
        max_per_tensor: Some(24),
        ..FdOptions::default()
    };
    let r = finite_diff_check_with(&g, &Inputs::new(), &p, "loss", &opts).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

fn delta(before: &ParamSet, after: &ParamSet) -> Vec<f64> {
    before
        .iter()
        .flat_map(|(n, t)| t.data().iter().zip(after.get(n).unwrap().data()).map(|(a, b)| b - a).collect::<Vec<_>>())
        .collect()
}

#[test]
fn gradient_descent_step_scales_with_alpha() {
    let (c, o) = small(3, 8);
    let cfg = DualEncoderConfig::default();
    let p0 = init_dual_encoder(&cfg, 2).unwrap();
    let g = graph_with_oracle(&c, &o, 2);
    let batch: Vec<Pair> = g.entailed_edges().iter().take(8).cloned().collect();
    let lr = 0.5;
    let mut full = p0.clone();
    contrastive_step(&batch, &c, &cfg, &mut full, Some(&g), &mut Sgd, lr).unwrap();
    for alpha in [0.3, 0.0] {
        let mut weak = p0.clone();
        contrastive_step(&batch, &c, &cfg, &mut weak, Some(&g), &mut Sgd, alpha * lr).unwrap();
        let (df, dw) = (delta(&p0, &full), delta(&p0, &weak));
        let err: f64 = df.iter().zip(&dw).map(|(f, w)| (w - alpha * f).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = df.iter().map(|f| (alpha * f).powi(2)).sum::<f64>().sqrt();
        if alpha == 0.0 {
            assert!(dw.iter().all(|&d| d == 0.0));
        } else {
            assert!(err <= 1e-12 * norm, "relative error {}", err / norm);
        }
    }
}

#[test]
fn tower_outputs_are_unit_norm() {
    let (c, _) = small(2, 9);
    let cfg = DualEncoderConfig::default();
    let p = init_dual_encoder(&cfg, 4).unwrap();
    let images: Vec<&str> = c.images.keys().map(String::as_str).collect();
    let caps: Vec<&str> = c.captions.keys().map(String::as_str).collect();
    let (a, b) = embed_corpus(&c, &cfg, &p, &images, &caps).unwrap();
    for t in [&a, &b] {
        for r in 0..t.rows() {
            let n: f64 = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn training_is_deterministic_and_masks_every_linked_pair() {
    let (c, o) = small(3, 10);
    let g = graph_with_oracle(&c, &o, 3);
    let cfg = RetrievalTrainConfig {
        epochs: 2,
        batch_size: 8,
        ..RetrievalTrainConfig::default()
    };
    let (p1, log1) = train_retrieval(&c, &g, &cfg).unwrap();
    let (p2, log2) = train_retrieval(&c, &g, &cfg).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(p1, p2);
    assert!(log1.iter().any(|r| r.batch_kind == BatchKind::Weak && (r.lr_effective - 0.3e-3).abs() < 1e-18));
    let (_, off) = train_retrieval(&c, &g, &cfg.clone().with_strategy(false)).unwrap();
    assert!(off.iter().all(|r| r.batch_kind == BatchKind::Regular && r.masked_negatives == 0));
}

#[test]
fn ranking_lists_every_caption_once() {
    let (c, _) = small(2, 11);
    let cfg = DualEncoderConfig::default();
    let p = init_dual_encoder(&cfg, 5).unwrap();
    let r = rank_captions(&c, &cfg, &p).unwrap();
    assert_eq!(r.len(), c.images.len());
    for list in r.values() {
        let mut s = list.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), c.captions.len());
    }
}
