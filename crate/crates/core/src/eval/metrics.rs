use serde::{Deserialize, Serialize};

use super::run::{Relation, RankedRun};
use crate::error::{Error, Result};

/// Sum by recursive halving, bounding rounding drift for long inputs.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    (pairwise_sum(&sq) / (xs.len() - 1) as f64).sqrt()
}

fn clamp_k(run: &RankedRun, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if run.rankings.is_empty() {
        return Err(Error::Validation("run has no queries".into()));
    }
    if let Some((q, l)) = run.rankings.iter().find(|(_, l)| l.len() < k) {
        log::warn!("k = {k} exceeds the {} items ranked for `{q}`; clamping", l.len());
    }
    Ok(())
}

/// Fraction of queries with at least one gold item in the top `k`.
pub fn recall_at_k(run: &RankedRun, gold: &dyn Relation, k: usize) -> Result<f64> {
    clamp_k(run, k)?;
    let hits: Vec<f64> = run
        .rankings
        .iter()
        .map(|(q, items)| {
            let hit = items.iter().take(k).any(|c| run.holds(gold, q, c));
            hit as u8 as f64
        })
        .collect();
    Ok(mean(&hits))
}

/// Mean over queries of the fraction of the top `k` items that are gold or
/// entailed. Lists shorter than `k` are averaged over their length.
pub fn entail_at_k(run: &RankedRun, gold: &dyn Relation, entailed: &dyn Relation, k: usize) -> Result<f64> {
    clamp_k(run, k)?;
    let per_query: Vec<f64> = run
        .rankings
        .iter()
        .map(|(q, items)| {
            let top = &items[..k.min(items.len())];
            if top.is_empty() {
                return 0.0;
            }
            let e: Vec<f64> = top
                .iter()
                .map(|c| (run.holds(gold, q, c) || run.holds(entailed, q, c)) as u8 as f64)
                .collect();
            pairwise_sum(&e) / top.len() as f64
        })
        .collect();
    Ok(mean(&per_query))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub beta: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

/// `(1 + β²) P R / (β² P + R)`, or 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Accuracy, precision, recall and F-beta with ENTAIL (`true`) positive.
pub fn classification_metrics(verdicts: &[bool], labels: &[bool], beta: f64) -> Result<ClassificationMetrics> {
    if verdicts.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    if verdicts.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Config("beta must be positive".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&v, &l) in verdicts.iter().zip(labels) {
        match (v, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let accuracy = (tp + tn) as f64 / verdicts.len() as f64;
    if precision + recall == 0.0 {
        zero_division = true;
    }
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta),
        beta,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        zero_division,
    })
}

/// Fleiss' kappa over an items × categories count matrix.
///
/// When chance agreement is 1 (all ratings in one category) kappa is
/// reported as 1.0 for perfect agreement; anything else is an error.
pub fn fleiss_kappa(ratings: &[Vec<usize>]) -> Result<f64> {
    let first = ratings.first().ok_or_else(|| Error::Validation("no rated items".into()))?;
    let k = first.len();
    let n: usize = first.iter().sum();
    if n < 2 || k == 0 {
        return Err(Error::Validation("every item needs at least two ratings".into()));
    }
    if let Some(i) = ratings.iter().position(|r| r.len() != k || r.iter().sum::<usize>() != n) {
        return Err(Error::Validation(format!("item {i} has a different rater or category count")));
    }
    let items = ratings.len() as f64;
    let nf = n as f64;
    let p_items: Vec<f64> = ratings
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .collect();
    let p_bar = mean(&p_items);
    let p_cat: Vec<f64> = (0..k)
        .map(|j| ratings.iter().map(|r| r[j] as f64).sum::<f64>() / (items * nf))
        .collect();
    let p_e = pairwise_sum(&p_cat.iter().map(|p| p * p).collect::<Vec<_>>());
    if (1.0 - p_e).abs() < 1e-15 {
        return if (p_bar - 1.0).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(Error::Validation("kappa undefined: chance agreement is 1".into()))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
