//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use entailkit::datapipe::{
    corpus_stats, entailment_examples, generate_candidates, load_corpus, revise_corpus, save_corpus, synth_generate,
    AuditRecord, CandidateConfig, ExampleSpec, ImageGeometry, ModelClassifier, PairClassifier, RetrievalCorpus,
    SyntheticOracle, SyntheticSpec,
};
use entailkit::diffcore::ParamSet;
use entailkit::entailment::{
    gradcheck_suite, train_entailment, Decision, EntailTrainConfig, EntailmentConfig, GradcheckConfig, TaskForm,
};
use entailkit::eval::{
    bar_chart_svg, classification_metrics, hash_file, line_chart_svg, sha256_hex, EdgeSet, MetricsReport, Provenance,
    RankedRun, Relation, Table,
};
use entailkit::pipeline::{evaluate_classifier, retrieval_metrics, RunConfig};
use entailkit::trainstrat::{self, rank_captions, EntailmentGraph, RetrievalTrainConfig};
use entailkit::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::files::{ensure_dir, read_json, read_jsonl, write_json, write_jsonl, write_text};
use crate::{
    EvalArgs, GradcheckArgs, OnOff, RankArgs, ReviseArgs, StatsArgs, SynthArgs, TrainEntailArgs, TrainRetrievalArgs,
};

const CORPUS_FILE: &str = "corpus.jsonl";
const ORACLE_FILE: &str = "oracle.json";
const ENTAIL_CKPT: &str = "model.ckpt";
const ENTAIL_META: &str = "model.json";
const RETRIEVAL_CKPT: &str = "retrieval.ckpt";
const RETRIEVAL_META: &str = "retrieval.json";

/// Sidecar describing an entailment checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct EntailMeta {
    model: EntailmentConfig,
    train: EntailTrainConfig,
    examples: ExampleSpec,
    corpus_hash: String,
}

/// Sidecar describing a retrieval checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct RetrievalMeta {
    train: RetrievalTrainConfig,
    corpus_hash: String,
}

/// One classifier decision in line-delimited form.
#[derive(Debug, Serialize, Deserialize)]
struct VerdictRecord {
    premise_image_id: String,
    hypothesis_id: String,
    p_entail: f64,
    decision: Decision,
    threshold: f64,
}

fn corpus(path: &Path) -> Result<RetrievalCorpus> {
    load_corpus(path, ImageGeometry::default())
}

fn run_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn provenance(corpus: &RetrievalCorpus, config: &str, seed: u64, inputs: &[(&str, &Path)]) -> Result<Provenance> {
    Ok(Provenance {
        corpus_hash: corpus.content_hash(),
        config_hash: sha256_hex(config.as_bytes()),
        seed,
        inputs: inputs
            .iter()
            .map(|(role, p)| hash_file(p).map(|h| (role.to_string(), h)))
            .collect::<Result<_>>()?,
    })
}

fn canonical<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn write_tables(out: &Path, report: &MetricsReport, title: &str) -> Result<()> {
    let mut table = Table::new(&["metric", "value"]);
    for (k, v) in report.metrics.iter().chain(&report.values) {
        table.push(vec![k.clone(), format!("{v:.6}")]);
    }
    write_text(&out.join("metrics.csv"), &table.to_csv())?;
    write_text(&out.join("metrics.txt"), &table.to_pretty())?;
    let bars: Vec<(String, f64)> = report.metrics.iter().map(|(k, v)| (k.clone(), *v)).collect();
    write_text(&out.join("metrics.svg"), &bar_chart_svg(title, &bars))
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec = SyntheticSpec::default().with_seed(a.seed).with_split(a.split.into());
    if let Some(n) = a.clusters {
        spec.cluster_count = n;
    }
    if let Some(n) = a.images_per_cluster {
        spec.images_per_cluster = n;
    }
    if let Some(n) = a.captions_per_image {
        spec.captions_per_image = n;
    }
    if let Some(x) = a.noise {
        spec.noise = x;
    }
    let (corpus, oracle) = synth_generate(&spec)?;
    ensure_dir(&a.out)?;
    save_corpus(&corpus, a.out.join(CORPUS_FILE))?;
    write_json(&a.out.join(ORACLE_FILE), &oracle)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} images, {} captions to {}",
        corpus.images.len(),
        corpus.captions.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train_entail(a: TrainEntailArgs) -> Result<ExitCode> {
    let rc = run_config(a.config.as_ref())?;
    let mut base = EntailTrainConfig::default();
    if a.no_mask {
        base.mask = None;
    }
    let (model, mut train) = rc.entailment(base)?;
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    let threshold = rc.threshold_or(0.5)?;
    let examples = ExampleSpec {
        per_form: a.per_form.unwrap_or(ExampleSpec::default().per_form),
        hard_negative_fraction: a.hard_negatives.unwrap_or(ExampleSpec::default().hard_negative_fraction),
        seed: train.seed,
        ..ExampleSpec::default()
    };
    let train_corpus = corpus(&a.corpus)?;
    let oracle: SyntheticOracle = read_json(&a.oracle)?;
    let data = entailment_examples(&train_corpus, &oracle, &examples)?;
    let init = entailkit::entailment::init_params(&model, train.seed)?;
    let (params, logs) = train_entailment(&data, &model, &train, init)?;

    ensure_dir(&a.out)?;
    params.save(a.out.join(ENTAIL_CKPT))?;
    let meta = EntailMeta {
        model,
        train: train.clone(),
        examples: examples.clone(),
        corpus_hash: train_corpus.content_hash(),
    };
    write_json(&a.out.join(ENTAIL_META), &meta)?;
    write_jsonl(&a.out.join("train_log.jsonl"), &logs)?;
    let losses: Vec<f64> = logs.iter().map(|l| l.mean_loss).collect();
    write_text(
        &a.out.join("loss.svg"),
        &line_chart_svg("entailment loss per example", &[("train".into(), losses)]),
    )?;

    let mut inputs = vec![("corpus", a.corpus.as_path()), ("oracle", a.oracle.as_path())];
    if let (Some(c), Some(o)) = (&a.heldout_corpus, &a.heldout_oracle) {
        inputs.push(("heldout_corpus", c.as_path()));
        inputs.push(("heldout_oracle", o.as_path()));
    }
    let config = format!("{}{}{}", rc.canonical(), canonical(&train), canonical(&examples));
    let mut report = MetricsReport::new(provenance(&train_corpus, &config, train.seed, &inputs)?);
    if let Some(last) = logs.last() {
        report.value("final_loss", last.mean_loss);
    }
    report.value("epochs", logs.len() as f64);
    report.value("examples", data.len() as f64);
    if let (Some(c), Some(o)) = (&a.heldout_corpus, &a.heldout_oracle) {
        let held = corpus(c)?;
        let held_oracle: SyntheticOracle = read_json(o)?;
        let spec = ExampleSpec {
            per_form: a.heldout_size,
            forms: vec![TaskForm::ImageTextText],
            seed: train.seed.wrapping_add(1),
            hard_negative_fraction: a.heldout_hard_fraction,
        };
        let held_examples = entailment_examples(&held, &held_oracle, &spec)?;
        let m = evaluate_classifier(&held_examples, &model, &params, threshold)?;
        report.metric("heldout_accuracy", m.accuracy)?;
        report.metric("heldout_precision", m.precision)?;
        report.metric("heldout_recall", m.recall)?;
        report.metric("heldout_f0.5", m.f_beta)?;
        println!("held-out accuracy {:.4} (F0.5 {:.4}) on {} pairs", m.accuracy, m.f_beta, held_examples.len());
    }
    report.save(a.out.join("report.json"))?;
    write_tables(&a.out, &report, "entailment classifier")?;
    println!("trained {} epochs; wrote {}", logs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_entail_model(dir: &Path) -> Result<(EntailMeta, ParamSet)> {
    let meta: EntailMeta = read_json(&dir.join(ENTAIL_META))?;
    let params = ParamSet::load(dir.join(ENTAIL_CKPT))?;
    Ok((meta, params))
}

pub fn revise(a: ReviseArgs) -> Result<ExitCode> {
    let rc = run_config(a.config.as_ref())?;
    let threshold = match a.threshold {
        Some(t) => RunConfig { threshold: Some(t), ..rc.clone() }.threshold_or(0.5)?,
        None => rc.threshold_or(0.5)?,
    };
    let seed = a.seed.or(rc.seed).unwrap_or(0);
    let c = corpus(&a.corpus)?;
    let run = RankedRun::load(&a.run)?;
    run.validate(&c)?;
    let cand_cfg = CandidateConfig {
        k: a.k,
        per_image: a.per_image,
        random_fraction: a.random_fraction,
        image_fraction: a.image_fraction,
        seed,
    };
    let candidates = generate_candidates(&c, &run.rankings, &cand_cfg)?;

    let loaded;
    let oracle: SyntheticOracle;
    let mut inputs = vec![("corpus", a.corpus.as_path()), ("run", a.run.as_path())];
    let classifier: &dyn PairClassifier = match (&a.model, &a.oracle) {
        (Some(dir), _) => {
            loaded = load_entail_model(dir)?;
            inputs.push(("model", dir.as_path()));
            &ModelClassifier {
                cfg: &loaded.0.model,
                params: &loaded.1,
            }
        }
        (None, Some(path)) => {
            oracle = read_json(path)?;
            inputs.push(("oracle", path.as_path()));
            &oracle
        }
        (None, None) => return Err(Error::Config("either --model or --oracle is required".into())),
    };
    let (revised, audit) = revise_corpus(&c, classifier, &candidates, threshold)?;

    ensure_dir(&a.out)?;
    save_corpus(&revised, a.out.join(CORPUS_FILE))?;
    write_jsonl(&a.out.join("candidates.jsonl"), &candidates)?;
    write_jsonl(&a.out.join("audit.jsonl"), &audit)?;
    let verdicts: Vec<VerdictRecord> = audit
        .iter()
        .map(|r| VerdictRecord {
            premise_image_id: r.image_id.clone(),
            hypothesis_id: r.caption_id.clone(),
            p_entail: r.p_entail,
            decision: r.verdict,
            threshold,
        })
        .collect();
    write_jsonl(&a.out.join("verdicts.jsonl"), &verdicts)?;

    let hashed: Vec<(&str, PathBuf)> = inputs
        .iter()
        .map(|(role, p)| (*role, if p.is_dir() { p.join(ENTAIL_CKPT) } else { p.to_path_buf() }))
        .collect();
    let hashed: Vec<(&str, &Path)> = hashed.iter().map(|(r, p)| (*r, p.as_path())).collect();
    let config = format!("{}{}threshold={threshold}", rc.canonical(), canonical(&cand_cfg));
    let mut report = MetricsReport::new(provenance(&c, &config, seed, &hashed)?);
    let accepted = audit.iter().filter(|r| r.verdict == Decision::Entail).count();
    report.value("candidates", candidates.len() as f64);
    report.value("accepted", accepted as f64);
    report.value("weak_edges", revised.weak.len() as f64);
    report.save(a.out.join("report.json"))?;
    println!(
        "{accepted} of {} candidates entailed; corpus now has {} weak edges",
        candidates.len(),
        revised.weak.len()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train_retrieval(a: TrainRetrievalArgs) -> Result<ExitCode> {
    let rc = run_config(a.config.as_ref())?;
    let mut overrides = rc.clone();
    if let Some(x) = a.alpha {
        overrides.alpha = Some(x);
    }
    if let Some(s) = a.seed {
        overrides.seed = Some(s);
    }
    if let Some(e) = a.epochs {
        overrides.epochs = Some(e);
    }
    let cfg = overrides
        .retrieval(RetrievalTrainConfig::default())?
        .with_strategy(a.strategy == OnOff::On);
    let c = corpus(&a.corpus)?;
    let graph = EntailmentGraph::from_corpus(&c);
    let (params, log) = trainstrat::train_retrieval(&c, &graph, &cfg)?;

    ensure_dir(&a.out)?;
    params.save(a.out.join(RETRIEVAL_CKPT))?;
    write_json(
        &a.out.join(RETRIEVAL_META),
        &RetrievalMeta {
            train: cfg.clone(),
            corpus_hash: c.content_hash(),
        },
    )?;
    write_jsonl(&a.out.join("train_log.jsonl"), &log)?;
    let mut report = MetricsReport::new(provenance(&c, &canonical(&cfg), cfg.seed, &[("corpus", a.corpus.as_path())])?);
    report.value("steps", log.len() as f64);
    report.value("weak_edges", graph.entailed_len() as f64);
    report.value("masked_negatives", log.iter().map(|s| s.masked_negatives).sum::<usize>() as f64);
    if let Some(last) = log.last() {
        report.value("final_loss", last.loss);
    }
    report.save(a.out.join("report.json"))?;
    println!(
        "trained {} steps (strategy {}), wrote {}",
        log.len(),
        if a.strategy == OnOff::On { "on" } else { "off" },
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn rank(a: RankArgs) -> Result<ExitCode> {
    let meta: RetrievalMeta = read_json(&a.model.join(RETRIEVAL_META))?;
    let params = ParamSet::load(a.model.join(RETRIEVAL_CKPT))?;
    let c = corpus(&a.corpus)?;
    let run = RankedRun::text_retrieval(rank_captions(&c, &meta.train.dual, &params)?);
    run.save(&a.out)?;
    println!("ranked {} captions for {} images", c.captions.len(), c.images.len());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let rc = run_config(a.config.as_ref())?;
    if a.ks.contains(&0) {
        return Err(Error::Config("every K must be at least 1".into()));
    }
    let c = corpus(&a.corpus)?;
    let run = RankedRun::load(&a.run)?;
    let mut inputs = vec![("run", a.run.as_path()), ("corpus", a.corpus.as_path())];
    let oracle: Option<SyntheticOracle> = a.oracle.as_deref().map(read_json).transpose()?;
    let edges = a.edges.as_deref().map(|p| EdgeSet::load(p, a.min_p)).transpose()?;
    let weak = EntailmentGraph::from_corpus(&c);
    let relation: &dyn Relation = match (&oracle, &edges) {
        (Some(o), _) => {
            inputs.push(("oracle", a.oracle.as_deref().expect("set")));
            o
        }
        (None, Some(e)) => {
            inputs.push(("edges", a.edges.as_deref().expect("set")));
            e
        }
        (None, None) => &weak,
    };
    let scores = retrieval_metrics(&run, &c, Some(relation), &a.ks)?;
    let config = format!("{}ks={:?};min_p={}", rc.canonical(), a.ks, a.min_p);
    if let Some(p) = &a.audit {
        inputs.push(("audit", p.as_path()));
    }
    let mut report = MetricsReport::new(provenance(&c, &config, rc.seed.unwrap_or(0), &inputs)?);
    for (k, v) in &scores {
        report.metric(k.clone(), *v)?;
    }
    report.value("queries", run.rankings.len() as f64);

    if let (Some(p), Some(o)) = (&a.audit, &oracle) {
        let audit: Vec<AuditRecord> = read_jsonl(p)?;
        let verdicts: Vec<bool> = audit.iter().map(|r| r.verdict == Decision::Entail).collect();
        let labels: Vec<bool> = audit.iter().map(|r| o.entailed(&r.image_id, &r.caption_id)).collect();
        let m = classification_metrics(&verdicts, &labels, 0.5)?;
        report.metric("audit_accuracy", m.accuracy)?;
        report.metric("audit_precision", m.precision)?;
        report.metric("audit_recall", m.recall)?;
        report.metric("audit_f0.5", m.f_beta)?;
        report.value("audit_pairs", audit.len() as f64);
        report.value("audit_planted", labels.iter().filter(|&&x| x).count() as f64);
    }

    ensure_dir(&a.out)?;
    report.save(a.out.join("report.json"))?;
    write_tables(&a.out, &report, "retrieval metrics")?;
    print!("{}", std::fs::read_to_string(a.out.join("metrics.txt")).unwrap_or_default());
    Ok(ExitCode::SUCCESS)
}

pub fn stats(a: StatsArgs) -> Result<ExitCode> {
    let s = corpus_stats(&corpus(&a.corpus)?);
    match &a.out {
        Some(p) => {
            write_json(p, &s)?;
            println!(
                "{} images, {} captions, {} gold + {} weak edges",
                s.images, s.captions, s.gold_edges, s.weak_edges
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&s).expect("serializable")),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let gc = GradcheckConfig {
        seeds: a.seeds,
        first_seed: a.seed,
        eps: a.eps,
        per_tensor: a.per_tensor,
        ..GradcheckConfig::default()
    };
    if gc.seeds == 0 || gc.per_tensor == 0 {
        return Err(Error::Config("seeds and per_tensor must be positive".into()));
    }
    let r = gradcheck_suite(&gc)?;
    let mut table = Table::new(&["component", "max_rel_error", "checked", "worst_seed"]);
    for c in &r.components {
        table.push(vec![
            c.component.clone(),
            format!("{:.3e}", c.max_rel_error),
            c.checked.to_string(),
            c.worst_seed.to_string(),
        ]);
    }
    print!("{}", table.to_pretty());
    println!("max rel error {:.3e} (tolerance {:.0e})", r.max_rel_error(), r.tolerance);
    if let Some(p) = &a.out {
        let values: BTreeMap<String, f64> = r
            .components
            .iter()
            .map(|c| (format!("max_rel_error.{}", c.component), c.max_rel_error))
            .collect();
        let mut report = MetricsReport::new(Provenance {
            config_hash: sha256_hex(canonical(&gc).as_bytes()),
            seed: gc.first_seed,
            ..Provenance::default()
        });
        report.values = values;
        report.save(p)?;
    }
    Ok(if r.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
