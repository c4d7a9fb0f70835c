//! Relation-level preference pairs with relevance weights, and the
//! reference-free margin loss evaluated over them.
//!
//! For every hop of every kept path, the next relation on that path is the
//! chosen response and relations found at the same hop on paths of the
//! other clusters are rejected responses. After the last hop the chosen
//! response is `STOP`. Each response's distance to the representative
//! centroid sets its confidence, which sets its weight.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, Embedding};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, ARROW};
use crate::sampler::SamplingRun;

pub const STOP: &str = "STOP";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceHyper {
    /// Confidence decay rate, > 0.
    pub alpha: f64,
    /// Weight scale, > 0.
    pub beta: f64,
    /// Loss margin, ≥ 0.
    pub gamma: f64,
    /// Rejected responses kept per context, closest to the centroid first.
    pub max_negatives: usize,
}

impl Default for PreferenceHyper {
    fn default() -> Self {
        PreferenceHyper { alpha: 1.0, beta: 1.0, gamma: 0.3, max_negatives: 8 }
    }
}

impl PreferenceHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma >= 0.0) {
            return Err(Error::Domain(format!(
                "need alpha > 0, beta > 0, gamma ≥ 0 (got {}, {}, {})",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub question: String,
    pub current_path: String,
    pub chosen: String,
    pub rejected: String,
    pub u_chosen: f64,
    pub u_rejected: f64,
    pub s_chosen: f64,
    pub s_rejected: f64,
    pub w_chosen: f64,
    pub w_rejected: f64,
    /// `w_chosen` divided by the chosen label's length.
    pub norm_w_chosen: f64,
    pub norm_w_rejected: f64,
}

/// `e^{−αu}` for preferred responses, `1 − e^{−αu}` otherwise.
pub fn confidence(u: f64, alpha: f64, preferred: bool) -> f64 {
    let decay = (-alpha * u).exp();
    if preferred {
        decay
    } else {
        1.0 - decay
    }
}

/// `β (1 + 0.5 (s − 0.5))`, in `[0.75β, 1.25β]`.
pub fn weight(s: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("confidence {s} outside [0, 1]")));
    }
    Ok(beta * (1.0 + 0.5 * (s - 0.5)))
}

/// Whitespace token count of a response label, at least 1.
pub fn response_length(label: &str) -> usize {
    label.split_whitespace().count().max(1)
}

struct Scored {
    u: f64,
    s: f64,
    w: f64,
}

fn score_response(label: &str, u: f64, preferred: bool, hyper: &PreferenceHyper) -> Result<(Scored, f64)> {
    let s = confidence(u, hyper.alpha, preferred);
    let w = weight(s, hyper.beta)?;
    Ok((Scored { u, s, w }, w / response_length(label) as f64))
}

fn distance(embedding: &Embedding, centroid: &Embedding) -> Result<f64> {
    Ok((1.0 - cosine(embedding, centroid)?).max(0.0))
}

/// Builds preference pairs from one sampling run.
///
/// Returns no pairs when the run is unreachable or produced one cluster.
pub fn build_preference_pairs(
    g: &KnowledgeGraph,
    run: &SamplingRun,
    embedder: &dyn Embedder,
    hyper: &PreferenceHyper,
) -> Result<Vec<PreferencePair>> {
    hyper.validate()?;
    let Some(clusters) = &run.clusters else {
        return Ok(Vec::new());
    };
    if clusters.chosen_k < 2 {
        log::info!("single cluster for `{}`; no preference pairs", run.set.question);
        return Ok(Vec::new());
    }
    let rep = clusters.representative.unwrap_or(0);
    let centroid = &clusters.centroids[rep];

    // Paths are compared as relation sequences; drop repeated serializations.
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut others = Vec::new();
    for (i, &cluster) in clusters.assignments.iter().enumerate() {
        if !seen.insert(run.candidate_texts[i].as_str()) {
            continue;
        }
        if cluster == rep {
            kept.push(i);
        } else {
            others.push(i);
        }
    }

    let question = run.set.question.as_str();
    let mut pairs = Vec::new();
    let mut done_contexts: HashSet<(String, String)> = HashSet::new();
    for &pi in &kept {
        let path = &run.candidates[pi];
        for pos in 0..=path.hops.len() {
            let prefix = g.serialize_prefix(path.topic, &path.hops[..pos]);
            let at_end = pos == path.hops.len();
            let chosen = if at_end { STOP.to_owned() } else { g.hop_label(path.hops[pos]).into_owned() };
            if !done_contexts.insert((prefix.clone(), chosen.clone())) {
                continue;
            }
            // Rejected relations: the same hop position on other clusters' paths;
            // at the stop position, the final hop of those paths.
            let hop_index = if at_end { pos.checked_sub(1) } else { Some(pos) };
            let Some(hop_index) = hop_index else { continue };
            let rejected: BTreeSet<String> = others
                .iter()
                .filter_map(|&oi| run.candidates[oi].hops.get(hop_index))
                .map(|&h| g.hop_label(h).into_owned())
                .filter(|label| *label != chosen)
                .collect();
            if rejected.is_empty() {
                continue;
            }

            let chosen_text = if at_end { run.candidate_texts[pi].clone() } else { format!("{prefix}{ARROW}{chosen}") };
            let rejected_base = g.serialize_prefix(path.topic, &path.hops[..hop_index]);
            let mut texts = vec![chosen_text];
            texts.extend(rejected.iter().map(|r| format!("{rejected_base}{ARROW}{r}")));
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let embeddings = embedder.embed_batch(&refs)?;

            let u_chosen = distance(&embeddings[0], centroid)?;
            let (pos_score, norm_pos) = score_response(&chosen, u_chosen, true, hyper)?;

            let mut negatives: Vec<(f64, &String)> = Vec::with_capacity(rejected.len());
            for (label, e) in rejected.iter().zip(&embeddings[1..]) {
                negatives.push((distance(e, centroid)?, label));
            }
            negatives.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let limit = if at_end { 1 } else { hyper.max_negatives };
            for (u, label) in negatives.into_iter().take(limit) {
                let (neg, norm_neg) = score_response(label, u, false, hyper)?;
                pairs.push(PreferencePair {
                    question: question.to_owned(),
                    current_path: prefix.clone(),
                    chosen: chosen.clone(),
                    rejected: label.clone(),
                    u_chosen: pos_score.u,
                    u_rejected: neg.u,
                    s_chosen: pos_score.s,
                    s_rejected: neg.s,
                    w_chosen: pos_score.w,
                    w_rejected: neg.w,
                    norm_w_chosen: norm_pos,
                    norm_w_rejected: norm_neg,
                });
            }
        }
    }
    Ok(pairs)
}

/// Log-likelihood of a response given the question and partial path.
pub trait PolicyPort {
    fn logprob(&self, question: &str, current_path: &str, response: &str) -> Result<f64>;
}

impl<F> PolicyPort for F
where
    F: Fn(&str, &str, &str) -> f64,
{
    fn logprob(&self, question: &str, current_path: &str, response: &str) -> Result<f64> {
        Ok(self(question, current_path, response))
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(W⁺·lp⁺ − W⁻·lp⁻ − γ)` for one pair.
pub fn pair_loss(norm_w_chosen: f64, lp_chosen: f64, norm_w_rejected: f64, lp_rejected: f64, gamma: f64) -> f64 {
    -log_sigmoid(norm_w_chosen * lp_chosen - norm_w_rejected * lp_rejected - gamma)
}

/// Gradient of [`pair_loss`] with respect to `(lp_chosen, lp_rejected)`.
pub fn pair_loss_gradient(
    norm_w_chosen: f64,
    lp_chosen: f64,
    norm_w_rejected: f64,
    lp_rejected: f64,
    gamma: f64,
) -> (f64, f64) {
    let margin = norm_w_chosen * lp_chosen - norm_w_rejected * lp_rejected - gamma;
    let outer = -sigmoid(-margin);
    (outer * norm_w_chosen, -outer * norm_w_rejected)
}

/// Mean pair loss under `policy`, using each pair's stored normalized weights.
pub fn preference_loss(pairs: &[PreferencePair], policy: &dyn PolicyPort, gamma: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("preference loss over an empty pair list".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let lp_pos = policy.logprob(&p.question, &p.current_path, &p.chosen)?;
        let lp_neg = policy.logprob(&p.question, &p.current_path, &p.rejected)?;
        if !lp_pos.is_finite() || !lp_neg.is_finite() {
            return Err(Error::Domain("policy returned a non-finite log-probability".into()));
        }
        total += pair_loss(p.norm_w_chosen, lp_pos, p.norm_w_rejected, lp_neg, gamma);
    }
    Ok(total / pairs.len() as f64)
}

/// One line of the preference training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub id: String,
    pub question: String,
    pub current_path: String,
    pub chosen: String,
    pub rejected: String,
    pub s_chosen: f64,
    pub s_rejected: f64,
    pub w_chosen: f64,
    pub w_rejected: f64,
}

impl PreferenceRecord {
    pub fn from_pair(id: String, pair: &PreferencePair) -> Self {
        PreferenceRecord {
            id,
            question: pair.question.clone(),
            current_path: pair.current_path.clone(),
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
            s_chosen: pair.s_chosen,
            s_rejected: pair.s_rejected,
            w_chosen: pair.w_chosen,
            w_rejected: pair.w_rejected,
        }
    }
}

/// Writes one JSON object per line; returns the record count.
pub fn export_preference_records<W: Write>(records: &[PreferenceRecord], mut sink: W) -> Result<usize> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(records.len())
}

/// Fine-tuning defaults for downstream trainers, one block per stage.
pub fn trainer_config() -> serde_json::Value {
    serde_json::json!({
        "relation_preference": {
            "lora_r": 32,
            "lora_alpha": 64,
            "lora_dropout": 0.05,
            "optimizer": "AdamW",
            "warmup_ratio": 0.10,
            "learning_rate": { "webqsp": 7.5e-6, "cwq": 1.0e-6 },
            "scheduler": "cosine",
            "max_length": 2048,
            "epochs": { "webqsp": 3, "cwq": 1 }
        },
        "answer_centered_prompt": {
            "lora_r": 32,
            "lora_alpha": 64,
            "lora_dropout": 0.05,
            "optimizer": "AdamW",
            "warmup_ratio": 0.03,
            "learning_rate": 2.0e-4,
            "scheduler": "cosine",
            "max_length": 4096,
            "epochs": 3
        }
    })
}
