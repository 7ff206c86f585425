use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gate_fuse_on_tape, head_logits, init_params, is_fusion, is_text_side, is_visual_side};
use super::{joint_loss_on_tape, BranchEval, EntailmentConfig, EntailmentExample, HEAD_MULTI};
use crate::diffcore::{finite_diff_check_with, FdOptions, Inputs, ParamSet, Tape, Tensor};
use crate::encoders::PatchGrid;
use crate::error::Result;

/// Settings for [`gradcheck_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub eps: f64,
    /// Components sampled per tensor.
    pub per_tensor: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            eps: 1e-6,
            per_tensor: 16,
            tolerance: 1e-4,
        }
    }
}

/// Worst relative error of one checked sub-graph over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Uniform perturbation added to every parameter so zero-initialized biases
/// do not leave ReLU inputs exactly on their kink.
const JITTER: f64 = 0.05;

const WORDS: [&str; 8] = ["red", "ball", "dog", "sky", "runs", "on", "grass", "blue"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn image(cfg: &EntailmentConfig, rng: &mut ChaCha8Rng) -> Result<PatchGrid> {
    let e = &cfg.encoder;
    let n = e.image_size * e.image_size * e.channels;
    PatchGrid::new(e.image_size, e.image_size, e.channels, e.patch_size, (0..n).map(|_| rng.random()).collect())
}

fn subset(p: &ParamSet, keep: impl Fn(&str) -> bool) -> Result<ParamSet> {
    let mut out = ParamSet::new(p.rng_seed());
    for (n, t) in p.iter().filter(|(n, _)| keep(n)) {
        out.insert(n.clone(), t.clone())?;
    }
    Ok(out)
}

fn batch_loss(cfg: &EntailmentConfig, batch: &[EntailmentExample], params: &ParamSet, opts: &FdOptions) -> Result<(f64, usize)> {
    let g = |t: &mut Tape<'_>| {
        let (l, _) = joint_loss_on_tape(t, cfg, batch, BranchEval::ActiveOnly)?;
        Ok(vec![("loss".to_string(), l)])
    };
    let r = finite_diff_check_with(&g, &Inputs::new(), params, "loss", opts)?;
    Ok((r.max_rel_error, r.checked))
}

/// Central-difference check of the textual branch, the visual (cross-modal)
/// branch, gate fusion and the full multi-modal graph, each over
/// `gc.seeds` random parameter draws and inputs on the tiny architecture.
/// Parameters are jittered away from their initial values first.
pub fn gradcheck_suite(gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let cfg = EntailmentConfig::tiny();
    let d = cfg.encoder.hidden_dim;
    let names = ["textual", "visual", "gate_fusion", "multimodal"];
    let mut comps: Vec<ComponentCheck> = names
        .iter()
        .map(|n| ComponentCheck {
            component: n.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            worst_seed: gc.first_seed,
        })
        .collect();
    for seed in gc.first_seed..gc.first_seed + gc.seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = init_params(&cfg, seed)?;
        for (_, t) in full.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-JITTER..JITTER));
        }
        let opts = FdOptions {
            eps: gc.eps,
            max_per_tensor: Some(gc.per_tensor),
            seed,
            ..FdOptions::default()
        };
        let label = |rng: &mut ChaCha8Rng| rng.random_range(0..2u8);

        let tt = vec![EntailmentExample::text_text(sentence(&mut rng), sentence(&mut rng), label(&mut rng))];
        let textual = batch_loss(&cfg, &tt, &subset(&full, is_text_side)?, &opts)?;

        let it = vec![EntailmentExample::image_text(image(&cfg, &mut rng)?, sentence(&mut rng), label(&mut rng))];
        let visual = batch_loss(&cfg, &it, &subset(&full, is_visual_side)?, &opts)?;

        let inputs: Inputs = ["h_t", "h_v"]
            .iter()
            .map(|n| (n.to_string(), Tensor::row((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())))
            .collect();
        let target = [label(&mut rng) as usize];
        let g = |t: &mut Tape<'_>| {
            let (a, b) = (t.input("h_t")?, t.input("h_v")?);
            let m = gate_fuse_on_tape(t, a, b)?;
            let z = head_logits(t, HEAD_MULTI, m)?;
            let l = t.cross_entropy(z, &target)?;
            Ok(vec![("loss".to_string(), l)])
        };
        let gate_opts = FdOptions {
            include_inputs: true,
            ..opts.clone()
        };
        let r = finite_diff_check_with(&g, &inputs, &subset(&full, is_fusion)?, "loss", &gate_opts)?;
        let gate = (r.max_rel_error, r.checked);

        let itt = vec![EntailmentExample::image_text_text(
            image(&cfg, &mut rng)?,
            sentence(&mut rng),
            sentence(&mut rng),
            label(&mut rng),
        )];
        let multi = batch_loss(&cfg, &itt, &full, &opts)?;

        for (c, (err, checked)) in comps.iter_mut().zip([textual, visual, gate, multi]) {
            c.checked += checked;
            if err > c.max_rel_error {
                c.max_rel_error = err;
                c.worst_seed = seed;
            }
        }
    }
    Ok(GradcheckReport {
        components: comps,
        tolerance: gc.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let r = gradcheck_suite(&GradcheckConfig {
            seeds: 2,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert_eq!(r.components.len(), 4);
        assert!(r.components.iter().all(|c| c.checked > 0));
        assert!(r.passed(), "{r:?}");
    }
}
