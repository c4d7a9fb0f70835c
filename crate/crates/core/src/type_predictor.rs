//! Bilinear question → answer-type relevance scorer.
//!
//! `m̂ = clamp(ReLU(⟨W_qᵀ h_q, W_τᵀ h_τ⟩), ε, 1 − ε)`, trained with binary
//! cross-entropy. The clamp keeps the log terms finite; its subgradient is
//! zero outside `(ε, 1 − ε)`, as is the ReLU's below zero.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::kg::TypeId;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TypeLabel {
    pub id: TypeId,
    pub label: String,
}

impl TypeLabel {
    /// Text handed to the embedder: the dotted label with dots as spaces.
    pub fn text(&self) -> String {
        type_text(&self.label)
    }
}

pub fn type_text(label: &str) -> String {
    label.replace('.', " ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeTrainingExample {
    pub question: String,
    pub type_label: String,
    /// 1 when the type belongs to an answer entity.
    pub label: u8,
}

/// `W_q`, `W_τ` are `dim × hidden`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TypePredictor {
    pub dim: usize,
    pub hidden: usize,
    pub epsilon: f64,
    pub w_q: Vec<f64>,
    pub w_t: Vec<f64>,
    /// Mean per-example loss on the training set after the last epoch.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_q: Vec<f64>,
    pub w_t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub negatives_per_positive: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.05, epochs: 30, batch: 16, negatives_per_positive: 4, hidden: 32, seed: 42 }
    }
}

struct Forward {
    q_proj: Vec<f64>,
    t_proj: Vec<f64>,
    raw: f64,
    score: f64,
}

impl TypePredictor {
    /// Seeded initialization. Both projections start from the same matrix,
    /// so the initial score is a positive semi-definite kernel and similar
    /// question/type texts begin in the active region.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Domain("type predictor needs dim ≥ 1 and hidden ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / hidden as f64).sqrt();
        let w: Vec<f64> = (0..dim * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(TypePredictor { dim, hidden, epsilon: DEFAULT_EPSILON, w_q: w.clone(), w_t: w, final_loss: None })
    }

    fn project(&self, w: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.hidden];
        for (i, &hi) in h.iter().enumerate() {
            let row = &w[i * self.hidden..(i + 1) * self.hidden];
            out.iter_mut().zip(row).for_each(|(o, &wij)| *o += hi * wij);
        }
        out
    }

    fn check(&self, h: &Embedding) -> Result<()> {
        if h.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: h.dim() });
        }
        Ok(())
    }

    fn forward(&self, h_q: &Embedding, h_t: &Embedding) -> Result<Forward> {
        self.check(h_q)?;
        self.check(h_t)?;
        let q_proj = self.project(&self.w_q, h_q.as_slice());
        let t_proj = self.project(&self.w_t, h_t.as_slice());
        let raw: f64 = q_proj.iter().zip(&t_proj).map(|(a, b)| a * b).sum();
        let score = raw.max(0.0).clamp(self.epsilon, 1.0 - self.epsilon);
        Ok(Forward { q_proj, t_proj, raw, score })
    }

    pub fn score(&self, h_q: &Embedding, h_t: &Embedding) -> Result<f64> {
        Ok(self.forward(h_q, h_t)?.score)
    }

    /// Summed binary cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradient(&self, batch: &[(Embedding, Embedding, u8)]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients { w_q: vec![0.0; self.w_q.len()], w_t: vec![0.0; self.w_t.len()] };
        let mut loss = 0.0;
        for (h_q, h_t, label) in batch {
            let f = self.forward(h_q, h_t)?;
            let m = f64::from(*label);
            loss -= m * f.score.ln() + (1.0 - m) * (1.0 - f.score).ln();
            let active = f.raw > self.epsilon && f.raw < 1.0 - self.epsilon;
            if !active {
                continue;
            }
            let g = -m / f.score + (1.0 - m) / (1.0 - f.score);
            for (i, (&hq, &ht)) in h_q.as_slice().iter().zip(h_t.as_slice()).enumerate() {
                let base = i * self.hidden;
                for j in 0..self.hidden {
                    grads.w_q[base + j] += g * hq * f.t_proj[j];
                    grads.w_t[base + j] += g * ht * f.q_proj[j];
                }
            }
        }
        Ok((loss, grads))
    }

    /// Same as [`Self::loss_and_gradient`], embedding texts first.
    pub fn loss_and_gradient_for(
        &self,
        batch: &[TypeTrainingExample],
        embedder: &dyn Embedder,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty type training batch"));
        }
        let q_texts: Vec<&str> = batch.iter().map(|e| e.question.as_str()).collect();
        let t_texts: Vec<String> = batch.iter().map(|e| type_text(&e.type_label)).collect();
        let t_refs: Vec<&str> = t_texts.iter().map(String::as_str).collect();
        let qs = embedder.embed_batch(&q_texts)?;
        let ts = embedder.embed_batch(&t_refs)?;
        let rows: Vec<_> = qs.into_iter().zip(ts).zip(batch).map(|((q, t), e)| (q, t, e.label)).collect();
        self.loss_and_gradient(&rows)
    }

    fn apply(&mut self, grads: &Gradients, step: f64) {
        self.w_q.iter_mut().zip(&grads.w_q).for_each(|(w, g)| *w -= step * g);
        self.w_t.iter_mut().zip(&grads.w_t).for_each(|(w, g)| *w -= step * g);
    }

    /// Top-`k` candidates by score; ties broken by type id.
    pub fn predict_topk(
        &self,
        question: &str,
        candidates: &[TypeLabel],
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<TypeLabel>> {
        if candidates.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let h_q = embedder.embed(question)?;
        let texts: Vec<String> = candidates.iter().map(TypeLabel::text).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let hs = embedder.embed_batch(&refs)?;
        let mut scored = Vec::with_capacity(candidates.len());
        for (c, h_t) in candidates.iter().zip(&hs) {
            scored.push((self.score(&h_q, h_t)?, c));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(scored.into_iter().take(k).map(|(_, c)| c.clone()).collect())
    }

    /// Text format: header `D H epsilon`, then the `D` rows of `W_q`,
    /// then the `D` rows of `W_τ`, space-separated.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.dim, self.hidden, self.epsilon)?;
        for m in [&self.w_q, &self.w_t] {
            for row in m.chunks(self.hidden) {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::ModelFormat("missing header".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::ModelFormat(format!("bad header `{header}`")));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::ModelFormat(format!("{s}: {e}")));
        let dim = parse_usize(fields[0])?;
        let hidden = parse_usize(fields[1])?;
        let epsilon: f64 = fields[2].parse().map_err(|e| Error::ModelFormat(format!("epsilon: {e}")))?;
        if dim == 0 || hidden == 0 {
            return Err(Error::ModelFormat("zero dimension".into()));
        }
        let mut values = Vec::with_capacity(2 * dim * hidden);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::ModelFormat(format!("row {}: {e}", n + 1)))?;
            if row.len() != hidden || row.iter().any(|x| !x.is_finite()) {
                return Err(Error::ModelFormat(format!("row {} must hold {hidden} finite values", n + 1)));
            }
            values.extend(row);
        }
        if values.len() != 2 * dim * hidden {
            return Err(Error::ModelFormat(format!("expected {} rows, found {}", 2 * dim, values.len() / hidden)));
        }
        let w_t = values.split_off(dim * hidden);
        Ok(TypePredictor { dim, hidden, epsilon, w_q: values, w_t, final_loss: None })
    }
}

/// Mini-batch gradient descent with seeded shuffling and per-question
/// negative subsampling.
pub fn train_type_predictor(
    dataset: &[TypeTrainingExample],
    embedder: &dyn Embedder,
    cfg: &TrainConfig,
) -> Result<TypePredictor> {
    if !dataset.iter().any(|e| e.label == 1) {
        return Err(Error::Training("dataset has no positive examples".into()));
    }
    let mut model = TypePredictor::init(embedder.dimension(), cfg.hidden, cfg.seed)?;

    // Embed each distinct text once.
    let mut cache: HashMap<String, Embedding> = HashMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut texts: Vec<String> = Vec::new();
    for e in dataset {
        for t in [e.question.clone(), type_text(&e.type_label)] {
            if seen.insert(t.clone()) {
                texts.push(t);
            }
        }
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    for (t, v) in texts.iter().zip(embedder.embed_batch(&refs)?) {
        cache.insert(t.clone(), v);
    }
    let rows: Vec<(Embedding, Embedding, u8)> = dataset
        .iter()
        .map(|e| (cache[&e.question].clone(), cache[&type_text(&e.type_label)].clone(), e.label))
        .collect();

    let mut by_question: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, e) in dataset.iter().enumerate() {
        let slot = by_question.entry(e.question.as_str()).or_default();
        if e.label == 1 {
            slot.0.push(i);
        } else {
            slot.1.push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7e57);
    for _ in 0..cfg.epochs {
        let mut epoch: Vec<usize> = Vec::new();
        for (positives, negatives) in by_question.values() {
            epoch.extend(positives);
            let mut negs = negatives.clone();
            negs.shuffle(&mut rng);
            let keep = if positives.is_empty() {
                cfg.negatives_per_positive
            } else {
                positives.len() * cfg.negatives_per_positive
            };
            epoch.extend(negs.into_iter().take(keep));
        }
        epoch.shuffle(&mut rng);
        for chunk in epoch.chunks(cfg.batch.max(1)) {
            let batch: Vec<_> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let (_, grads) = model.loss_and_gradient(&batch)?;
            model.apply(&grads, cfg.lr / batch.len() as f64);
        }
    }
    let (loss, _) = model.loss_and_gradient(&rows)?;
    model.final_loss = Some(loss / rows.len() as f64);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap().normalized().unwrap()
    }

    fn identity(dim: usize) -> TypePredictor {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        TypePredictor { dim, hidden: dim, epsilon: DEFAULT_EPSILON, w_q: w.clone(), w_t: w, final_loss: None }
    }

    #[test]
    fn zero_weights_clamp_to_epsilon() {
        let mut m = identity(3);
        m.w_q.iter_mut().for_each(|w| *w = 0.0);
        m.w_t.iter_mut().for_each(|w| *w = 0.0);
        let h = unit(&[1.0, 2.0, 3.0]);
        assert_eq!(m.score(&h, &h).unwrap(), DEFAULT_EPSILON);
    }

    #[test]
    fn identity_on_same_unit_vector_clamps_high() {
        let m = identity(4);
        let h = unit(&[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(m.score(&h, &h).unwrap(), 1.0 - DEFAULT_EPSILON);
    }

    #[test]
    fn shape_mismatch_errors() {
        let m = identity(3);
        assert!(matches!(m.score(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn loss_reference_points() {
        let m = identity(2);
        let h = unit(&[1.0, 0.0]);
        let (loss, _) = m.loss_and_gradient(&[(h.clone(), h.clone(), 1)]).unwrap();
        assert!(loss < 2e-6 && loss > 0.0);

        // raw = 0.5 · cos = 0.5 when both are the same unit vector scaled by √0.5.
        let mut half = identity(2);
        half.w_q.iter_mut().for_each(|w| *w *= 0.5f64.sqrt());
        half.w_t.iter_mut().for_each(|w| *w *= 0.5f64.sqrt());
        let batch = vec![(h.clone(), h.clone(), 1u8), (h.clone(), h, 0u8)];
        let (loss, _) = half.loss_and_gradient(&batch).unwrap();
        assert!((loss / 2.0 - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn model_text_round_trip() {
        let m = TypePredictor::init(5, 3, 9).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = TypePredictor::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.dim, 5);
        assert_eq!(back.hidden, 3);
        for (a, b) in m.w_q.iter().chain(&m.w_t).zip(back.w_q.iter().chain(&back.w_t)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn malformed_model_file_errors() {
        assert!(TypePredictor::read_from("2 2\n".as_bytes()).is_err());
        assert!(TypePredictor::read_from("1 2 0.000001\n1 2\n".as_bytes()).is_err());
        assert!(TypePredictor::read_from("1 2 0.000001\n1 2\n3\n".as_bytes()).is_err());
    }
}
