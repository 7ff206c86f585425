//! Textual, visual and multi-modal entailment heads with gate fusion and the
//! indicator-weighted joint loss.
//!
//! Every example is run in the unified multi-modal input form: text-only
//! examples get the black placeholder image, image-only examples get an
//! empty premise string. The indicators decide which branch losses reach
//! the backward pass.

mod gradcheck;
mod train;

use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck_suite, ComponentCheck, GradcheckConfig, GradcheckReport};
pub use train::{train_entailment, EntailTrainConfig, EpochLog};

use crate::diffcore::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::encoders::{
    cross_forward, image_forward, init_cross_encoder, init_image_encoder, init_text_encoder, linear, text_forward,
    EncoderConfig, PatchGrid, CROSS_PREFIX, IMAGE_PREFIX, TEXT_PREFIX,
};
use crate::error::{Error, Result};

pub const HEAD_TEXT: &str = "head_t";
pub const HEAD_VISUAL: &str = "head_v";
pub const HEAD_MULTI: &str = "head_m";
pub const GATE_TEXT: &str = "gate.t";
pub const GATE_VISUAL: &str = "gate.v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskForm {
    TextText,
    ImageText,
    ImageTextText,
}

/// Which branch losses count for an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Indicators {
    pub text: bool,
    pub visual: bool,
    pub multi: bool,
}

impl Indicators {
    pub fn for_form(form: TaskForm) -> Self {
        match form {
            TaskForm::TextText => Self { text: true, visual: false, multi: false },
            TaskForm::ImageText => Self { text: false, visual: true, multi: false },
            TaskForm::ImageTextText => Self { text: true, visual: true, multi: true },
        }
    }

    pub fn as_weights(&self) -> [f64; 3] {
        [self.text as u8 as f64, self.visual as u8 as f64, self.multi as u8 as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Textual,
    Visual,
    MultiModal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentExample {
    /// `None` stands for the black placeholder.
    pub premise_image: Option<PatchGrid>,
    pub premise_text: String,
    pub hypothesis: String,
    /// 1 = entailment.
    pub label: u8,
    pub task_form: TaskForm,
    pub indicators: Indicators,
    #[serde(default)]
    pub premise_image_id: Option<String>,
    #[serde(default)]
    pub hypothesis_id: Option<String>,
}

impl EntailmentExample {
    pub fn text_text(premise: impl Into<String>, hypothesis: impl Into<String>, label: u8) -> Self {
        Self {
            premise_image: None,
            premise_text: premise.into(),
            hypothesis: hypothesis.into(),
            label,
            task_form: TaskForm::TextText,
            indicators: Indicators::for_form(TaskForm::TextText),
            premise_image_id: None,
            hypothesis_id: None,
        }
    }

    pub fn image_text(image: PatchGrid, hypothesis: impl Into<String>, label: u8) -> Self {
        Self {
            premise_image: Some(image),
            premise_text: String::new(),
            hypothesis: hypothesis.into(),
            label,
            task_form: TaskForm::ImageText,
            indicators: Indicators::for_form(TaskForm::ImageText),
            premise_image_id: None,
            hypothesis_id: None,
        }
    }

    pub fn image_text_text(image: PatchGrid, premise: impl Into<String>, hypothesis: impl Into<String>, label: u8) -> Self {
        Self {
            premise_image: Some(image),
            premise_text: premise.into(),
            hypothesis: hypothesis.into(),
            label,
            task_form: TaskForm::ImageTextText,
            indicators: Indicators::for_form(TaskForm::ImageTextText),
            premise_image_id: None,
            hypothesis_id: None,
        }
    }

    pub fn with_ids(mut self, image_id: impl Into<String>, hypothesis_id: impl Into<String>) -> Self {
        self.premise_image_id = Some(image_id.into());
        self.hypothesis_id = Some(hypothesis_id.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Validation(format!("label {} is not binary", self.label)));
        }
        if self.indicators != Indicators::for_form(self.task_form) {
            return Err(Error::Validation(format!(
                "indicators {:?} do not match task form {:?}",
                self.indicators, self.task_form
            )));
        }
        match self.task_form {
            TaskForm::TextText => {
                if let Some(img) = &self.premise_image {
                    if img.pixels().iter().any(|&v| v != 0.0) {
                        return Err(Error::Validation(
                            "text-text example must carry the black placeholder image".into(),
                        ));
                    }
                }
            }
            TaskForm::ImageText => {
                if !self.premise_text.is_empty() {
                    return Err(Error::Validation("image-text example must have an empty premise text".into()));
                }
                if self.premise_image.is_none() {
                    return Err(Error::Validation("image-text example needs a premise image".into()));
                }
            }
            TaskForm::ImageTextText => {
                if self.premise_image.is_none() {
                    return Err(Error::Validation("image-text-text example needs a premise image".into()));
                }
            }
        }
        Ok(())
    }
}

/// Architecture of the entailment classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentConfig {
    pub encoder: EncoderConfig,
    /// Width of both hidden layers of each classification head.
    pub head_hidden: usize,
}

impl Default for EntailmentConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            head_hidden: encoder.hidden_dim,
            encoder,
        }
    }
}

impl EntailmentConfig {
    pub fn tiny() -> Self {
        let encoder = EncoderConfig::tiny();
        Self {
            head_hidden: encoder.hidden_dim,
            encoder,
        }
    }

    pub fn with_hidden_dim(hidden_dim: usize) -> Self {
        let encoder = EncoderConfig::default().with_hidden_dim(hidden_dim);
        Self { encoder, head_hidden: hidden_dim }
    }
}

fn init_head(p: &mut ParamSet, name: &str, d: usize, hidden: usize) -> Result<()> {
    let init = p.init();
    for (layer, fan_in, fan_out) in [("l1", d, hidden), ("l2", hidden, hidden), ("out", hidden, 2)] {
        let w = format!("{name}.{layer}.w");
        p.insert(&w, init.xavier(&w, fan_in, fan_out))?;
        p.insert(format!("{name}.{layer}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

fn init_gate(p: &mut ParamSet, name: &str, d: usize) -> Result<()> {
    let w = format!("{name}.w");
    let t = p.init().xavier(&w, d, d);
    p.insert(&w, t)?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]))
}

/// Initializes every parameter of the classifier.
pub fn init_params(cfg: &EntailmentConfig, seed: u64) -> Result<ParamSet> {
    cfg.encoder.validate()?;
    let d = cfg.encoder.hidden_dim;
    let mut p = ParamSet::new(seed);
    init_text_encoder(&mut p, TEXT_PREFIX, &cfg.encoder)?;
    init_image_encoder(&mut p, IMAGE_PREFIX, &cfg.encoder)?;
    init_cross_encoder(&mut p, CROSS_PREFIX, &cfg.encoder)?;
    for head in [HEAD_TEXT, HEAD_VISUAL, HEAD_MULTI] {
        init_head(&mut p, head, d, cfg.head_hidden)?;
    }
    init_gate(&mut p, GATE_TEXT, d)?;
    init_gate(&mut p, GATE_VISUAL, d)?;
    Ok(p)
}

/// Parameters that only the visual branch (image encoder, cross encoder,
/// visual head) or the fusion path reads.
pub fn is_visual_side(name: &str) -> bool {
    [IMAGE_PREFIX, CROSS_PREFIX, HEAD_VISUAL]
        .iter()
        .any(|p| name.starts_with(&format!("{p}.")))
}

/// Parameters that only the textual branch reads.
pub fn is_text_side(name: &str) -> bool {
    [TEXT_PREFIX, HEAD_TEXT].iter().any(|p| name.starts_with(&format!("{p}.")))
}

/// Parameters only used by the multi-modal path.
pub fn is_fusion(name: &str) -> bool {
    [GATE_TEXT, GATE_VISUAL, HEAD_MULTI]
        .iter()
        .any(|p| name.starts_with(&format!("{p}.")))
}

// ---------------------------------------------------------------------------
// heads and gate on the tape

/// Two ReLU hidden layers, then 2-way logits.
pub fn head_logits(t: &mut Tape<'_>, name: &str, h: Var) -> Result<Var> {
    let x = linear(t, &format!("{name}.l1"), h)?;
    let x = t.relu(x);
    let x = linear(t, &format!("{name}.l2"), x)?;
    let x = t.relu(x);
    linear(t, &format!("{name}.out"), x)
}

/// `h_m = sigmoid(h_t W_t + b_t) * h_t + sigmoid(h_v W_v + b_v) * h_v`
/// (row-vector convention, element-wise gates).
pub fn gate_fuse_on_tape(t: &mut Tape<'_>, h_t: Var, h_v: Var) -> Result<Var> {
    let zt = linear(t, GATE_TEXT, h_t)?;
    let gt = t.sigmoid(zt);
    let zv = linear(t, GATE_VISUAL, h_v)?;
    let gv = t.sigmoid(zv);
    let a = t.mul(gt, h_t)?;
    let b = t.mul(gv, h_v)?;
    t.add(a, b)
}

/// Gate values `(g_t, g_v)` for inspection.
pub fn gate_values(h_t: &Tensor, h_v: &Tensor, params: &ParamSet) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new(params);
    let (a, b) = (t.constant(h_t.clone()), t.constant(h_v.clone()));
    let zt = linear(&mut t, GATE_TEXT, a)?;
    let gt = t.sigmoid(zt);
    let zv = linear(&mut t, GATE_VISUAL, b)?;
    let gv = t.sigmoid(zv);
    Ok((t.value(gt).clone(), t.value(gv).clone()))
}

pub fn gate_fuse(h_t: &Tensor, h_v: &Tensor, params: &ParamSet) -> Result<Tensor> {
    if h_t.shape() != h_v.shape() {
        return Err(Error::shape("gate_fuse", format!("{:?} vs {:?}", h_t.shape(), h_v.shape())));
    }
    let mut t = Tape::new(params);
    let (a, b) = (t.constant(h_t.clone()), t.constant(h_v.clone()));
    let m = gate_fuse_on_tape(&mut t, a, b)?;
    Ok(t.value(m).clone())
}

fn softmax_pair(logits: &Tensor) -> [f64; 2] {
    let (a, b) = (logits.data()[0], logits.data()[1]);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// `softmax(MLP(h))` for the named head: `[p(non-entail), p(entail)]`.
pub fn classify_head(h: &Tensor, head: &str, params: &ParamSet) -> Result<[f64; 2]> {
    let mut t = Tape::new(params);
    let hv = t.constant(h.clone());
    let z = head_logits(&mut t, head, hv)?;
    Ok(softmax_pair(t.value(z)))
}

// ---------------------------------------------------------------------------
// per-example forward

/// Whether inactive branches are built at all. Both modes produce identical
/// gradients; `ActiveOnly` is cheaper for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchEval {
    All,
    ActiveOnly,
}

#[derive(Debug, Clone, Copy, Default)]
struct ExampleVars {
    h_t: Option<Var>,
    h_v: Option<Var>,
    h_m: Option<Var>,
    logits_t: Option<Var>,
    logits_v: Option<Var>,
    logits_m: Option<Var>,
}

fn example_on_tape(t: &mut Tape<'_>, cfg: &EntailmentConfig, ex: &EntailmentExample, mode: BranchEval) -> Result<ExampleVars> {
    ex.validate()?;
    let enc = &cfg.encoder;
    let tok = enc.tokenizer();
    let want = match mode {
        BranchEval::All => Indicators { text: true, visual: true, multi: true },
        BranchEval::ActiveOnly => ex.indicators,
    };
    let need_text = want.text || want.multi;
    let need_visual = want.visual || want.multi;
    let hyp = tok.tokenize(&ex.hypothesis);
    let mut out = ExampleVars::default();
    if need_text {
        let packed = tok.pack_pair(&tok.tokenize(&ex.premise_text), &hyp);
        out.h_t = Some(text_forward(t, enc, TEXT_PREFIX, &packed)?.cls);
    }
    if need_visual {
        let black;
        let image = match &ex.premise_image {
            Some(img) => img,
            None => {
                black = enc.black_image();
                &black
            }
        };
        let img = image_forward(t, enc, IMAGE_PREFIX, image)?;
        out.h_v = Some(cross_forward(t, enc, CROSS_PREFIX, img.states, &hyp)?);
    }
    if want.text {
        out.logits_t = Some(head_logits(t, HEAD_TEXT, out.h_t.expect("built"))?);
    }
    if want.visual {
        out.logits_v = Some(head_logits(t, HEAD_VISUAL, out.h_v.expect("built"))?);
    }
    if want.multi {
        let hm = gate_fuse_on_tape(t, out.h_t.expect("built"), out.h_v.expect("built"))?;
        out.h_m = Some(hm);
        out.logits_m = Some(head_logits(t, HEAD_MULTI, hm)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub p_entail: f64,
    pub decision: Decision,
    pub threshold: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Entail,
    NonEntail,
}

impl EntailmentVerdict {
    pub fn new(p_entail: f64, threshold: f64, branch: Branch) -> Self {
        let decision = if p_entail >= threshold { Decision::Entail } else { Decision::NonEntail };
        Self {
            p_entail,
            decision,
            threshold,
            branch,
        }
    }

    pub fn is_entail(&self) -> bool {
        self.decision == Decision::Entail
    }
}

/// Everything [`forward_example`] computes for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutput {
    pub textual: EntailmentVerdict,
    pub visual: EntailmentVerdict,
    pub multi: EntailmentVerdict,
    pub h_t: Tensor,
    pub h_v: Tensor,
    pub h_m: Tensor,
}

impl ExampleOutput {
    /// The verdict of the head matching the example's task form.
    pub fn verdict_for(&self, form: TaskForm) -> &EntailmentVerdict {
        match form {
            TaskForm::TextText => &self.textual,
            TaskForm::ImageText => &self.visual,
            TaskForm::ImageTextText => &self.multi,
        }
    }
}

/// Runs all three branches in the unified input form.
pub fn forward_example(ex: &EntailmentExample, cfg: &EntailmentConfig, params: &ParamSet, threshold: f64) -> Result<ExampleOutput> {
    let mut t = Tape::new(params);
    let v = example_on_tape(&mut t, cfg, ex, BranchEval::All)?;
    let verdict = |t: &Tape<'_>, z: Option<Var>, b: Branch| {
        EntailmentVerdict::new(softmax_pair(t.value(z.expect("all branches built")))[1], threshold, b)
    };
    Ok(ExampleOutput {
        textual: verdict(&t, v.logits_t, Branch::Textual),
        visual: verdict(&t, v.logits_v, Branch::Visual),
        multi: verdict(&t, v.logits_m, Branch::MultiModal),
        h_t: t.value(v.h_t.expect("built")).clone(),
        h_v: t.value(v.h_v.expect("built")).clone(),
        h_m: t.value(v.h_m.expect("built")).clone(),
    })
}

/// Verdict from the head matching the example's task form; image-text-text
/// examples use the multi-modal head.
pub fn predict(ex: &EntailmentExample, cfg: &EntailmentConfig, params: &ParamSet, threshold: f64) -> Result<EntailmentVerdict> {
    let mut t = Tape::new(params);
    let v = example_on_tape(&mut t, cfg, ex, BranchEval::ActiveOnly)?;
    let (z, b) = match ex.task_form {
        TaskForm::TextText => (v.logits_t, Branch::Textual),
        TaskForm::ImageText => (v.logits_v, Branch::Visual),
        TaskForm::ImageTextText => (v.logits_m, Branch::MultiModal),
    };
    Ok(EntailmentVerdict::new(softmax_pair(t.value(z.expect("active")))[1], threshold, b))
}

// ---------------------------------------------------------------------------
// joint loss

/// Ungated per-branch negative log-likelihoods of one example; `None` for
/// branches that were not built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleLoss {
    pub indicators: Indicators,
    pub l_t: Option<f64>,
    pub l_v: Option<f64>,
    pub l_m: Option<f64>,
}

/// Batch losses. `l_t`, `l_v`, `l_m` sum each branch's loss over the
/// examples whose indicator enables it; `l_all` is the scalar that was
/// differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_v: f64,
    pub l_m: f64,
    pub l_all: f64,
    pub per_example: Vec<ExampleLoss>,
}

impl LossBreakdown {
    /// `sum_i theta_t l_t + theta_v l_v + theta_m l_m`, recomputed from the
    /// per-example terms.
    pub fn recompute_all(&self) -> f64 {
        self.per_example
            .iter()
            .map(|e| {
                let [wt, wv, wm] = e.indicators.as_weights();
                wt * e.l_t.unwrap_or(0.0) + wv * e.l_v.unwrap_or(0.0) + wm * e.l_m.unwrap_or(0.0)
            })
            .sum()
    }
}

/// Builds the joint loss for a batch on `t` and returns its node.
pub fn joint_loss_on_tape(
    t: &mut Tape<'_>,
    cfg: &EntailmentConfig,
    batch: &[EntailmentExample],
    mode: BranchEval,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut gated = Vec::new();
    let mut per_example = Vec::with_capacity(batch.len());
    let (mut l_t, mut l_v, mut l_m) = (0.0, 0.0, 0.0);
    for ex in batch {
        let v = example_on_tape(t, cfg, ex, mode)?;
        let target = [ex.label as usize];
        let mut branch = |t: &mut Tape<'_>, z: Option<Var>, on: bool, acc: &mut f64| -> Result<Option<f64>> {
            let Some(z) = z else { return Ok(None) };
            let l = t.cross_entropy(z, &target)?;
            let value = t.value(l).item();
            if on {
                gated.push(l);
                *acc += value;
            }
            Ok(Some(value))
        };
        let th = ex.indicators;
        let e = ExampleLoss {
            indicators: th,
            l_t: branch(t, v.logits_t, th.text, &mut l_t)?,
            l_v: branch(t, v.logits_v, th.visual, &mut l_v)?,
            l_m: branch(t, v.logits_m, th.multi, &mut l_m)?,
        };
        per_example.push(e);
    }
    let stacked = t.concat_rows(&gated)?;
    let total = t.sum(stacked);
    let breakdown = LossBreakdown {
        l_t,
        l_v,
        l_m,
        l_all: t.value(total).item(),
        per_example,
    };
    Ok((total, breakdown))
}

/// Loss breakdown with every branch evaluated.
pub fn joint_loss(batch: &[EntailmentExample], cfg: &EntailmentConfig, params: &ParamSet) -> Result<LossBreakdown> {
    let mut t = Tape::new(params);
    Ok(joint_loss_on_tape(&mut t, cfg, batch, BranchEval::All)?.1)
}

/// Joint loss and its gradient with respect to every parameter.
pub fn joint_loss_grad(
    batch: &[EntailmentExample],
    cfg: &EntailmentConfig,
    params: &ParamSet,
    mode: BranchEval,
) -> Result<(LossBreakdown, Gradients)> {
    let mut t = Tape::new(params);
    let (loss, breakdown) = joint_loss_on_tape(&mut t, cfg, batch, mode)?;
    Ok((breakdown, t.backward(loss)?))
}

#[cfg(test)]
mod tests;
