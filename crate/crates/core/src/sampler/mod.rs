//! Query-path semantic sampling.
//!
//! Candidate paths between a topic and an answer entity are embedded,
//! clustered, and the cluster whose centroid sits closest to the question
//! embedding becomes the training path set.
//!
//! Two elbow rules are available. [`ElbowRule::LargestDrop`] (the default)
//! picks the k with the largest single inertia drop; [`ElbowRule::MaxCurvature`]
//! picks the knee of the normalized inertia curve. They usually agree on
//! well-separated data and can differ on smooth curves.

mod cluster;

use std::collections::BTreeSet;

pub use cluster::{choose_k, cluster_paths, select_representative_cluster, ClusterResult, ElbowRule, KMeansConfig};

use crate::embedding::{cosine, Embedder, Embedding};
use crate::error::Result;
use crate::kg::{EntityId, KnowledgeGraph, Path, PathQuery};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerConfig {
    pub kmeans: KMeansConfig,
    pub paths: PathQuery,
}

/// The training paths kept for one `(question, topic, answer)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrainingSet {
    pub question: String,
    pub topic: EntityId,
    pub answer: EntityId,
    pub paths: Vec<Path>,
    /// Cosine of each kept path to the question embedding.
    pub similarity: Vec<f64>,
    /// No candidate path connects topic and answer.
    pub unreachable: bool,
}

/// Everything computed while sampling one pair; preference construction
/// reuses the clusters and embeddings.
#[derive(Debug, Clone)]
pub struct SamplingRun {
    pub set: SampledTrainingSet,
    pub candidates: Vec<Path>,
    pub candidate_texts: Vec<String>,
    pub path_embeddings: Vec<Embedding>,
    pub query_embedding: Embedding,
    /// `None` when the pair is unreachable.
    pub clusters: Option<ClusterResult>,
}

impl SamplingRun {
    /// Indices into `candidates` of the kept paths.
    pub fn kept_indices(&self) -> Vec<usize> {
        match &self.clusters {
            Some(c) => c.members(c.representative.unwrap_or(0)).collect(),
            None => Vec::new(),
        }
    }
}

pub fn sample_training_paths(
    g: &KnowledgeGraph,
    question: &str,
    topic: EntityId,
    answer: EntityId,
    embedder: &dyn Embedder,
    cfg: &SamplerConfig,
) -> Result<SamplingRun> {
    let candidates = g.enumerate_shortest_paths(topic, answer, cfg.paths)?;
    let query_embedding = embedder.embed(question)?;
    if candidates.is_empty() {
        return Ok(SamplingRun {
            set: SampledTrainingSet {
                question: question.to_owned(),
                topic,
                answer,
                paths: Vec::new(),
                similarity: Vec::new(),
                unreachable: true,
            },
            candidates,
            candidate_texts: Vec::new(),
            path_embeddings: Vec::new(),
            query_embedding,
            clusters: None,
        });
    }
    let candidate_texts: Vec<String> = candidates.iter().map(|p| g.serialize_path(p)).collect();
    let refs: Vec<&str> = candidate_texts.iter().map(String::as_str).collect();
    let path_embeddings = embedder.embed_batch(&refs)?;

    let mut clusters = cluster_paths(&path_embeddings, &cfg.kmeans)?;
    let representative = select_representative_cluster(&query_embedding, &clusters)?;
    clusters.representative = Some(representative);

    let mut paths = Vec::new();
    let mut similarity = Vec::new();
    for i in clusters.members(representative) {
        paths.push(candidates[i].clone());
        similarity.push(cosine(&query_embedding, &path_embeddings[i])?);
    }
    Ok(SamplingRun {
        set: SampledTrainingSet { question: question.to_owned(), topic, answer, paths, similarity, unreachable: false },
        candidates,
        candidate_texts,
        path_embeddings,
        query_embedding,
        clusters: Some(clusters),
    })
}

/// Samples every `(topic, answer)` combination of a question.
pub fn sample_question(
    g: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    answers: &[EntityId],
    embedder: &dyn Embedder,
    cfg: &SamplerConfig,
) -> Result<Vec<SamplingRun>> {
    let mut runs = Vec::with_capacity(topics.len() * answers.len());
    for &t in topics {
        for &a in answers {
            runs.push(sample_training_paths(g, question, t, a, embedder, cfg)?);
        }
    }
    Ok(runs)
}

/// Set union of the kept paths across pair-level runs, in path order.
pub fn union_paths(runs: &[SamplingRun]) -> Vec<Path> {
    runs.iter().flat_map(|r| r.set.paths.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
}
