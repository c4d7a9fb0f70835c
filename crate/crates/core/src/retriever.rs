//! Relation-path retrieval by dynamic beam search.
//!
//! A beam entry is a relation sequence anchored at a topic entity together
//! with the set of entities it reaches. At each step the entry's state text
//! (`question [SEP] topic → r1 → …`) is compared with every relation leaving
//! that entity set and with the virtual `END` relation. The entry keeps at
//! most `beam_init` candidates, and only those whose cosine score lies within
//! `gap_threshold` of its best candidate. Choosing `END`, or reaching
//! `max_hops`, terminates an entry; terminated relation paths are then
//! grounded into concrete entity paths.

use std::collections::{BTreeSet, HashMap};

use crate::embedding::{cosine, Embedder, Embedding};
use crate::error::Result;
use crate::kg::{EntityId, Hop, KnowledgeGraph, Path, TypeId, END_RELATION};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverConfig {
    pub beam_init: usize,
    /// Maximum cosine gap to the step's best candidate; `f64::INFINITY` disables pruning.
    pub gap_threshold: f64,
    pub max_hops: usize,
    pub allow_inverse: bool,
    /// Concrete entity paths produced per terminated relation path.
    pub max_groundings: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig { beam_init: 10, gap_threshold: 0.3, max_hops: 2, allow_inverse: false, max_groundings: 64 }
    }
}

/// Query state at step `t`: question plus a partial relation path.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub question: String,
    pub topic: EntityId,
    pub hops: Vec<Hop>,
    /// Entities reached by following `hops` from the topic, sorted.
    pub frontier: Vec<EntityId>,
    pub embedding: Embedding,
}

impl QueryState {
    pub fn step(&self) -> usize {
        self.hops.len()
    }

    /// Canonical state text `question [SEP] topic → r1 → … → rt`.
    pub fn text(g: &KnowledgeGraph, question: &str, topic: EntityId, hops: &[Hop]) -> String {
        format!("{question} [SEP] {}", g.serialize_prefix(topic, hops))
    }
}

#[derive(Debug, Clone)]
pub struct BeamEntry {
    pub state: QueryState,
    /// Sum of log expansion probabilities so far; always ≤ 0.
    pub score: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPath {
    pub path: Path,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalResult {
    /// Sorted by score, descending.
    pub paths: Vec<ScoredPath>,
    /// Beam entries expanded during the search.
    pub expanded_states: usize,
}

impl RetrievalResult {
    pub fn path_count(&self) -> usize {
        self.paths.len()
    }

    fn sort(&mut self) {
        self.paths.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.path.hops.cmp(&b.path.hops))
                .then_with(|| a.path.terminal.cmp(&b.path.terminal))
                .then_with(|| a.path.topic.cmp(&b.path.topic))
                .then_with(|| a.path.intermediates.cmp(&b.path.intermediates))
        });
    }
}

/// Expansion probability `1 / (1 + exp(s_end − s_r))`.
pub fn expansion_probability(s_r: f64, s_end: f64) -> f64 {
    let x = s_r - s_end;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln p(r | state)`, computed without forming `p` first.
pub fn log_expansion_probability(s_r: f64, s_end: f64) -> f64 {
    let x = s_r - s_end;
    // ln σ(x) = −softplus(−x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Cosine between the state embedding and the embedding of `candidate`.
pub fn score_relation(state: &QueryState, candidate: &str, embedder: &dyn Embedder) -> Result<f64> {
    cosine(&state.embedding, &embedder.embed(candidate)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Candidate {
    Relation(Hop),
    End,
}

struct Search<'a> {
    g: &'a KnowledgeGraph,
    embedder: &'a dyn Embedder,
    cfg: &'a RetrieverConfig,
    question: &'a str,
    relation_cache: HashMap<Hop, Embedding>,
    end_embedding: Embedding,
}

impl<'a> Search<'a> {
    fn relation_embeddings(&mut self, hops: &BTreeSet<Hop>) -> Result<()> {
        let missing: Vec<Hop> = hops.iter().copied().filter(|h| !self.relation_cache.contains_key(h)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let labels: Vec<String> = missing.iter().map(|&h| self.g.hop_label(h).into_owned()).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        for (hop, e) in missing.into_iter().zip(self.embedder.embed_batch(&refs)?) {
            self.relation_cache.insert(hop, e);
        }
        Ok(())
    }

    fn candidate_hops(&self, frontier: &[EntityId]) -> BTreeSet<Hop> {
        frontier.iter().flat_map(|&e| self.g.neighbors(e, self.cfg.allow_inverse)).map(|(hop, _)| hop).collect()
    }

    fn advance(&self, frontier: &[EntityId], hop: Hop) -> Vec<EntityId> {
        frontier.iter().flat_map(|&e| self.g.step(e, hop)).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn states(&self, items: Vec<(EntityId, Vec<Hop>, Vec<EntityId>)>) -> Result<Vec<QueryState>> {
        let texts: Vec<String> =
            items.iter().map(|(t, hops, _)| QueryState::text(self.g, self.question, *t, hops)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embeddings = self.embedder.embed_batch(&refs)?;
        Ok(items
            .into_iter()
            .zip(embeddings)
            .map(|((topic, hops, frontier), embedding)| QueryState {
                question: self.question.to_owned(),
                topic,
                hops,
                frontier,
                embedding,
            })
            .collect())
    }

    /// Scores candidates of one entry and returns the retained ones with
    /// their log probabilities.
    fn select(&mut self, state: &QueryState) -> Result<Vec<(Candidate, f64)>> {
        let hops = self.candidate_hops(&state.frontier);
        self.relation_embeddings(&hops)?;
        let s_end = cosine(&state.embedding, &self.end_embedding)?;
        let mut scored: Vec<(Candidate, f64)> = Vec::with_capacity(hops.len() + 1);
        for hop in hops {
            scored.push((Candidate::Relation(hop), cosine(&state.embedding, &self.relation_cache[&hop])?));
        }
        // A path needs at least one relation, so END only competes from step 1.
        if state.step() > 0 {
            scored.push((Candidate::End, s_end));
        }
        if scored.is_empty() {
            return Ok(Vec::new());
        }
        // Stable sort: equal scores keep relation-id order, END last.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = scored[0].1;
        Ok(scored
            .into_iter()
            .take(self.cfg.beam_init)
            .filter(|&(_, s)| best - s <= self.cfg.gap_threshold)
            .map(|(c, s)| (c, log_expansion_probability(s, s_end)))
            .collect())
    }
}

/// Runs the search from each topic entity and unions the results.
pub fn dynamic_beam_search(
    g: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    embedder: &dyn Embedder,
    cfg: &RetrieverConfig,
) -> Result<RetrievalResult> {
    for &t in topics {
        if !g.has_entity(t) {
            return Err(crate::Error::Lookup { kind: "entity", name: format!("#{}", t.0) });
        }
    }
    let mut search = Search {
        g,
        embedder,
        cfg,
        question,
        relation_cache: HashMap::new(),
        end_embedding: embedder.embed(END_RELATION)?,
    };
    let end_log_p = log_expansion_probability(0.0, 0.0);

    let unique_topics: BTreeSet<EntityId> = topics.iter().copied().collect();
    let roots = search.states(unique_topics.iter().map(|&t| (t, Vec::new(), vec![t])).collect())?;
    let mut live: Vec<BeamEntry> =
        roots.into_iter().map(|state| BeamEntry { state, score: 0.0, terminated: false }).collect();
    let mut finished: Vec<BeamEntry> = Vec::new();
    let mut expanded = 0;

    while !live.is_empty() {
        let mut children: Vec<(EntityId, Vec<Hop>, Vec<EntityId>, f64)> = Vec::new();
        for entry in &live {
            expanded += 1;
            for (candidate, log_p) in search.select(&entry.state)? {
                match candidate {
                    Candidate::End => finished.push(BeamEntry {
                        state: entry.state.clone(),
                        score: entry.score + log_p,
                        terminated: true,
                    }),
                    Candidate::Relation(hop) => {
                        let mut hops = entry.state.hops.clone();
                        hops.push(hop);
                        let frontier = search.advance(&entry.state.frontier, hop);
                        children.push((entry.state.topic, hops, frontier, entry.score + log_p));
                    }
                }
            }
        }
        let scores: Vec<f64> = children.iter().map(|c| c.3).collect();
        let states = search.states(children.into_iter().map(|(t, h, f, _)| (t, h, f)).collect())?;
        live = Vec::new();
        for (state, score) in states.into_iter().zip(scores) {
            if state.step() >= cfg.max_hops {
                finished.push(BeamEntry { state, score: score + end_log_p, terminated: true });
            } else {
                live.push(BeamEntry { state, score, terminated: false });
            }
        }
    }

    let mut result = RetrievalResult { paths: Vec::new(), expanded_states: expanded };
    for entry in finished {
        for path in g.ground_relation_path(entry.state.topic, &entry.state.hops, cfg.max_groundings) {
            result.paths.push(ScoredPath { path, score: entry.score });
        }
    }
    result.sort();
    Ok(result)
}

/// Drops paths whose terminal has schema types, none of them predicted.
/// Untyped terminals are kept.
pub fn filter_by_types(result: &RetrievalResult, predicted: &[TypeId], g: &KnowledgeGraph) -> RetrievalResult {
    let wanted: BTreeSet<TypeId> = predicted.iter().copied().collect();
    RetrievalResult {
        paths: result
            .paths
            .iter()
            .filter(|sp| !g.has_types(sp.path.terminal) || g.types_of(sp.path.terminal).any(|t| wanted.contains(&t)))
            .cloned()
            .collect(),
        expanded_states: result.expanded_states,
    }
}
