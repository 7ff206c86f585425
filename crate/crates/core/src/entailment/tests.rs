use super::*;
use crate::diffcore::{finite_diff_check_with, FdOptions, Inputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(cfg: &EncoderConfig, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    PatchGrid::new(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch_size, (0..n).map(|_| rng.random()).collect())
        .unwrap()
}

fn zero_head(p: &mut ParamSet, head: &str) {
    for (n, t) in p.iter_mut() {
        if n.starts_with(&format!("{head}.")) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn row(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::row((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn zero_head_gives_uniform_pair() {
    let cfg = EntailmentConfig::default();
    let mut p = init_params(&cfg, 1).unwrap();
    zero_head(&mut p, HEAD_TEXT);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = row(&mut rng, 64);
    assert_eq!(classify_head(&h, HEAD_TEXT, &p).unwrap(), [0.5, 0.5]);
    let pair = classify_head(&h, HEAD_VISUAL, &p).unwrap();
    assert!(pair.iter().all(|&x| x > 0.0 && x < 1.0));
    assert!((pair[0] + pair[1] - 1.0).abs() < 1e-15);
}

#[test]
fn head_gradient_matches_finite_differences() {
    let cfg = EntailmentConfig::default();
    let full = init_params(&cfg, 4).unwrap();
    let mut head = ParamSet::new(4);
    for (n, t) in full.iter().filter(|(n, _)| n.starts_with("head_t.")) {
        head.insert(n.clone(), t.clone()).unwrap();
    }
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Inputs = [("h".to_string(), row(&mut rng, 64))].into();
        let g = |t: &mut Tape<'_>| {
            let h = t.input("h")?;
            let z = head_logits(t, HEAD_TEXT, h)?;
            let l = t.cross_entropy(z, &[1])?;
            Ok(vec![("loss".to_string(), l)])
        };
        let opts = FdOptions {
            include_inputs: true,
            max_per_tensor: Some(64),
            seed,
            ..FdOptions::default()
        };
        let r = finite_diff_check_with(&g, &inputs, &head, "loss", &opts).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}

#[test]
fn zero_gate_params_average_the_states() {
    let cfg = EntailmentConfig::default();
    let mut p = init_params(&cfg, 1).unwrap();
    zero_head(&mut p, GATE_TEXT);
    zero_head(&mut p, GATE_VISUAL);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ht, hv) = (row(&mut rng, 64), row(&mut rng, 64));
    let hm = gate_fuse(&ht, &hv, &p).unwrap();
    for j in 0..64 {
        assert!((hm.data()[j] - 0.5 * (ht.data()[j] + hv.data()[j])).abs() < 1e-15);
    }
    let zero = Tensor::zeros(&[1, 64]);
    let p = init_params(&cfg, 9).unwrap();
    assert!(gate_fuse(&zero, &zero, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_matches_scalar_recomputation() {
    let cfg = EntailmentConfig::default();
    let mut p = init_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // non-zero biases so the bias path is exercised
    for name in ["gate.t.b", "gate.v.b"] {
        p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let (ht, hv) = (row(&mut rng, 64), row(&mut rng, 64));
    let hm = gate_fuse(&ht, &hv, &p).unwrap();
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (wt, bt) = (p.get("gate.t.w").unwrap(), p.get("gate.t.b").unwrap());
    let (wv, bv) = (p.get("gate.v.w").unwrap(), p.get("gate.v.b").unwrap());
    for j in 0..64 {
        let mut zt = bt.data()[j];
        let mut zv = bv.data()[j];
        for i in 0..64 {
            zt += ht.data()[i] * wt.get(i, j);
            zv += hv.data()[i] * wv.get(i, j);
        }
        let want = sigma(zt) * ht.data()[j] + sigma(zv) * hv.data()[j];
        assert!((hm.data()[j] - want).abs() < 1e-12, "component {j}");
    }
    let (gt, gv) = gate_values(&ht, &hv, &p).unwrap();
    assert!(gt.data().iter().chain(gv.data()).all(|&g| g > 0.0 && g < 1.0));
}

fn mixed_batch(cfg: &EncoderConfig) -> Vec<EntailmentExample> {
    vec![
        EntailmentExample::text_text("a dog runs. a dog plays", "a dog", 1),
        EntailmentExample::image_text(image(cfg, 1), "a cat sleeps", 0),
        EntailmentExample::image_text_text(image(cfg, 2), "red ball. ball on grass", "a ball", 1),
    ]
}

#[test]
fn indicators_gate_each_task_form() {
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 3).unwrap();
    let batch = mixed_batch(&cfg.encoder);
    let b = joint_loss(&batch, &cfg, &p).unwrap();
    let tt = &b.per_example[0];
    let it = &b.per_example[1];
    let itt = &b.per_example[2];
    // every branch is evaluated, only the indicated ones count
    assert!(tt.l_v.is_some() && tt.l_m.is_some());
    assert_eq!(b.l_t, tt.l_t.unwrap() + itt.l_t.unwrap());
    assert_eq!(b.l_v, it.l_v.unwrap() + itt.l_v.unwrap());
    assert_eq!(b.l_m, itt.l_m.unwrap());
    let single = joint_loss(&batch[2..], &cfg, &p).unwrap();
    let e = single.per_example[0];
    assert!((single.l_all - (e.l_t.unwrap() + e.l_v.unwrap() + e.l_m.unwrap())).abs() < 1e-12);
    assert!((b.l_all - b.recompute_all()).abs() <= 1e-12 * b.l_all);
    assert!(b.l_t >= 0.0 && b.l_v >= 0.0 && b.l_m >= 0.0);
}

#[test]
fn uniform_prediction_costs_ln2() {
    let cfg = EntailmentConfig::default();
    let mut p = init_params(&cfg, 3).unwrap();
    zero_head(&mut p, HEAD_TEXT);
    let b = joint_loss(&[EntailmentExample::text_text("x y", "x", 1)], &cfg, &p).unwrap();
    assert!((b.l_all - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn empty_batch_is_an_error() {
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 3).unwrap();
    assert!(matches!(joint_loss(&[], &cfg, &p), Err(Error::EmptyBatch)));
}

#[test]
fn malformed_examples_are_rejected() {
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 3).unwrap();
    let mut bad = EntailmentExample::image_text(image(&cfg.encoder, 0), "h", 1);
    bad.premise_text = "not empty".into();
    assert!(matches!(predict(&bad, &cfg, &p, 0.5), Err(Error::Validation(_))));
    let mut bad = EntailmentExample::text_text("p", "h", 1);
    bad.indicators.visual = true;
    assert!(bad.validate().is_err());
    let mut bad = EntailmentExample::text_text("p", "h", 1);
    bad.premise_image = Some(image(&cfg.encoder, 0));
    assert!(bad.validate().is_err());
    let mut ok = EntailmentExample::text_text("p", "h", 1);
    ok.premise_image = Some(cfg.encoder.black_image());
    assert!(ok.validate().is_ok());
    assert!(EntailmentExample::text_text("p", "h", 2).validate().is_err());
}

#[test]
fn text_only_batch_leaves_visual_side_untouched() {
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 5).unwrap();
    let batch = vec![
        EntailmentExample::text_text("a b c", "a", 1),
        EntailmentExample::text_text("d e", "f", 0),
    ];
    for mode in [BranchEval::All, BranchEval::ActiveOnly] {
        let (_, g) = joint_loss_grad(&batch, &cfg, &p, mode).unwrap();
        for (name, grad) in &g.params {
            if is_visual_side(name) || is_fusion(name) {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name} has gradient");
            }
        }
        assert!(g.params["head_t.out.w"].data().iter().any(|&v| v != 0.0));
    }
    let images = vec![EntailmentExample::image_text(image(&cfg.encoder, 4), "x", 1)];
    let (_, g) = joint_loss_grad(&images, &cfg, &p, BranchEval::All).unwrap();
    for (name, grad) in &g.params {
        if is_text_side(name) || is_fusion(name) {
            assert!(grad.data().iter().all(|&v| v == 0.0), "{name} has gradient");
        }
    }
}

#[test]
fn skipping_inactive_branches_keeps_gradients() {
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 6).unwrap();
    let batch = mixed_batch(&cfg.encoder);
    let (la, ga) = joint_loss_grad(&batch, &cfg, &p, BranchEval::All).unwrap();
    let (lb, gb) = joint_loss_grad(&batch, &cfg, &p, BranchEval::ActiveOnly).unwrap();
    assert_eq!(la.l_all, lb.l_all);
    for (name, a) in &ga.params {
        assert_eq!(a, &gb.params[name], "{name}");
    }
}

#[test]
fn verdict_threshold_convention() {
    assert!(EntailmentVerdict::new(0.5, 0.5, Branch::MultiModal).is_entail());
    assert!(!EntailmentVerdict::new(0.49, 0.5, Branch::MultiModal).is_entail());
    let cfg = EntailmentConfig::default();
    let p = init_params(&cfg, 7).unwrap();
    for ex in mixed_batch(&cfg.encoder) {
        let v = predict(&ex, &cfg, &p, 0.5).unwrap();
        let out = forward_example(&ex, &cfg, &p, 0.5).unwrap();
        let head = out.verdict_for(ex.task_form);
        assert_eq!(v.p_entail, head.p_entail);
        // argmax agreement
        assert_eq!(v.is_entail(), v.p_entail >= 1.0 - v.p_entail);
    }
    let itt = &mixed_batch(&cfg.encoder)[2];
    assert_eq!(predict(itt, &cfg, &p, 0.5).unwrap().branch, Branch::MultiModal);
}

#[test]
fn full_multimodal_graph_passes_finite_differences() {
    let cfg = EntailmentConfig::tiny();
    let p = init_params(&cfg, 12).unwrap();
    let batch = vec![
        EntailmentExample::image_text_text(image(&cfg.encoder, 1), "red ball", "ball", 1),
        EntailmentExample::image_text_text(image(&cfg.encoder, 2), "blue sky", "grass", 0),
    ];
    let g = |t: &mut Tape<'_>| {
        let (l, _) = joint_loss_on_tape(t, &cfg, &batch, BranchEval::ActiveOnly)?;
        Ok(vec![("loss".to_string(), l)])
    };
    let opts = FdOptions {
        max_per_tensor: Some(6),
        ..FdOptions::default()
    };
    let r = finite_diff_check_with(&g, &Inputs::new(), &p, "loss", &opts).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
