//! Answer metrics and dataset-quality measures.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::embedding::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::retriever::RetrievalResult;

/// NFKC, lowercase, trim, and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub hit: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn normalized_set(items: &[String], normalizer: &dyn Fn(&str) -> String) -> BTreeSet<String> {
    items.iter().map(|s| normalizer(s)).collect()
}

/// Set-level hit, precision, recall and F1 after normalization.
pub fn hit_and_f1(record: &PredictionRecord, normalizer: &dyn Fn(&str) -> String) -> Result<AnswerScore> {
    let gold = normalized_set(&record.gold, normalizer);
    if gold.is_empty() {
        return Err(Error::Domain(format!("record `{}` has no gold answers", record.id)));
    }
    let pred = normalized_set(&record.predicted, normalizer);
    let common = pred.intersection(&gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { common / pred.len() as f64 };
    let recall = common / gold.len() as f64;
    Ok(AnswerScore { hit: u8::from(common > 0.0), precision, recall, f1: harmonic(precision, recall) })
}

/// Corpus means of hit, precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerSummary {
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn mean_answer_score(records: &[PredictionRecord]) -> Result<AnswerSummary> {
    if records.is_empty() {
        return Err(Error::Domain("no prediction records".into()));
    }
    let mut sum = AnswerSummary { hit: 0.0, precision: 0.0, recall: 0.0, f1: 0.0 };
    for rec in records {
        let s = hit_and_f1(rec, &normalize_answer)?;
        sum.hit += f64::from(s.hit);
        sum.precision += s.precision;
        sum.recall += s.recall;
        sum.f1 += s.f1;
    }
    let n = records.len() as f64;
    Ok(AnswerSummary { hit: sum.hit / n, precision: sum.precision / n, recall: sum.recall / n, f1: sum.f1 / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Per-question scores, then the mean.
    #[default]
    Macro,
    /// Pooled overlap counts across questions.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub type RelationSets = BTreeMap<String, BTreeSet<String>>;

/// Precision/recall/F1 of per-question relation sets against gold sets.
pub fn relation_coverage(train: &RelationSets, gold: &RelationSets, averaging: Averaging) -> Result<Prf> {
    if train.is_empty() {
        return Err(Error::Domain("relation coverage over zero questions".into()));
    }
    if train.len() != gold.len() || train.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        return Err(Error::Consistency("train and gold relation sets cover different ids".into()));
    }
    let mut sums = (0.0, 0.0, 0.0);
    let mut pooled = (0usize, 0usize, 0usize);
    for (id, t) in train {
        let g = &gold[id];
        let common = t.intersection(g).count();
        let p = if t.is_empty() { 0.0 } else { common as f64 / t.len() as f64 };
        let r = if g.is_empty() { 0.0 } else { common as f64 / g.len() as f64 };
        sums.0 += p;
        sums.1 += r;
        sums.2 += harmonic(p, r);
        pooled.0 += common;
        pooled.1 += t.len();
        pooled.2 += g.len();
    }
    Ok(match averaging {
        Averaging::Macro => {
            let n = train.len() as f64;
            Prf { precision: sums.0 / n, recall: sums.1 / n, f1: sums.2 / n }
        }
        Averaging::Micro => {
            let p = if pooled.1 == 0 { 0.0 } else { pooled.0 as f64 / pooled.1 as f64 };
            let r = if pooled.2 == 0 { 0.0 } else { pooled.0 as f64 / pooled.2 as f64 };
            Prf { precision: p, recall: r, f1: harmonic(p, r) }
        }
    })
}

/// Mean cosine of the `n` candidate paths most similar to each question,
/// averaged over questions with at least `n` candidates. `None` when no
/// question qualifies.
pub fn alignment_report(questions: &[(String, Vec<String>)], embedder: &dyn Embedder, n: usize) -> Result<Option<f64>> {
    if n == 0 {
        return Err(Error::Domain("alignment needs n ≥ 1".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (question, paths) in questions {
        if paths.len() < n {
            continue;
        }
        let q = embedder.embed(question)?;
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let mut sims = Vec::with_capacity(paths.len());
        for e in embedder.embed_batch(&refs)? {
            sims.push(cosine(&q, &e)?);
        }
        sims.sort_by(|a, b| b.total_cmp(a));
        total += sims[..n].iter().sum::<f64>() / n as f64;
        counted += 1;
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// Average number of retrieved paths per question.
pub fn arp(path_counts: &[usize]) -> Result<f64> {
    if path_counts.is_empty() {
        return Err(Error::Domain("ARP over zero questions".into()));
    }
    Ok(path_counts.iter().sum::<usize>() as f64 / path_counts.len() as f64)
}

pub fn arp_of_results(results: &[RetrievalResult]) -> Result<f64> {
    arp(&results.iter().map(RetrievalResult::path_count).collect::<Vec<_>>())
}

/// Fraction of questions where some retrieved terminal matches a gold answer.
pub fn retrieval_accuracy(terminals_and_gold: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if terminals_and_gold.is_empty() {
        return Err(Error::Domain("retrieval accuracy over zero questions".into()));
    }
    let hits = terminals_and_gold
        .iter()
        .filter(|(terminals, gold)| {
            let gold = normalized_set(gold, &normalize_answer);
            terminals.iter().any(|t| gold.contains(&normalize_answer(t)))
        })
        .count();
    Ok(hits as f64 / terminals_and_gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub coverage: Option<Prf>,
    pub coverage_averaging: Averaging,
    pub arp: f64,
    pub retrieval_accuracy: f64,
    pub alignment_top1: Option<f64>,
    pub alignment_top3: Option<f64>,
}
