//! Pipeline configuration: one TOML file, paths relative to it, flags on top.

use std::path::{Path, PathBuf};
use std::time::Duration;

use pathwise_core::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use pathwise_core::eval::Averaging;
use pathwise_core::kg::PathQuery;
use pathwise_core::preference::PreferenceHyper;
use pathwise_core::prompt::PromptLimits;
use pathwise_core::retriever::RetrieverConfig;
use pathwise_core::sampler::{ElbowRule, KMeansConfig, SamplerConfig};
use pathwise_core::type_predictor::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kg: KgSection,
    pub qa: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// 0 means one worker per available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub embedder: EmbedderSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub retriever: RetrieverSection,
    #[serde(default)]
    pub types: TypesSection,
    #[serde(default)]
    pub preference: PreferenceSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgSection {
    pub triples: PathBuf,
    #[serde(default)]
    pub types: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Deterministic,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub batch_size: usize,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection {
            kind: EmbedderKind::Deterministic,
            dimension: 256,
            endpoint: None,
            timeout_ms: 30_000,
            batch_size: pathwise_core::embedding::DEFAULT_REMOTE_BATCH,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub k_max: usize,
    pub restarts: usize,
    pub elbow: ElbowRule,
    pub minibatch_cutoff: usize,
    pub path_cap: usize,
    pub allow_inverse: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let k = KMeansConfig::default();
        let p = PathQuery::default();
        SamplerSection {
            k_max: k.k_max,
            restarts: k.restarts,
            elbow: k.elbow,
            minibatch_cutoff: k.minibatch_cutoff,
            path_cap: p.cap,
            allow_inverse: p.allow_inverse,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverSection {
    pub beam_init: usize,
    pub gap_threshold: f64,
    pub max_hops: usize,
    pub allow_inverse: bool,
    pub max_groundings: usize,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let r = RetrieverConfig::default();
        RetrieverSection {
            beam_init: r.beam_init,
            gap_threshold: r.gap_threshold,
            max_hops: r.max_hops,
            allow_inverse: r.allow_inverse,
            max_groundings: r.max_groundings,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypesSection {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch: usize,
    pub negatives_per_positive: usize,
}

impl Default for TypesSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TypesSection {
            epochs: t.epochs,
            lr: t.lr,
            hidden: t.hidden,
            batch: t.batch,
            negatives_per_positive: t.negatives_per_positive,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_negatives: usize,
}

impl Default for PreferenceSection {
    fn default() -> Self {
        let h = PreferenceHyper::default();
        PreferenceSection { alpha: h.alpha, beta: h.beta, gamma: h.gamma, max_negatives: h.max_negatives }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub template: Option<PathBuf>,
    pub max_groups: usize,
    pub max_paths: usize,
    /// Keep only paths whose terminal type is among the top-k predicted
    /// types; 0 disables the filter.
    pub type_filter_k: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        let l = PromptLimits::default();
        PromptSection { template: None, max_groups: l.max_groups, max_paths: l.max_paths, type_filter_k: 0 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub averaging: Averaging,
    /// `{id, predicted}` lines from an external reader model. Without it the
    /// top answer group of each retrieval is scored.
    pub predictions: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_owned()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.kg.triples);
        if let Some(t) = self.kg.types.as_mut() {
            join(t);
        }
        join(&mut self.qa);
        join(&mut self.out);
        if let Some(t) = self.prompt.template.as_mut() {
            join(t);
        }
        if let Some(p) = self.eval.predictions.as_mut() {
            join(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_owned()));
        if self.embedder.dimension == 0 {
            return bad("embedder.dimension must be positive");
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.endpoint.is_none() {
            return bad("embedder.endpoint is required for the remote embedder");
        }
        if self.embedder.batch_size == 0 {
            return bad("embedder.batch_size must be positive");
        }
        if self.sampler.k_max == 0 || self.sampler.restarts == 0 {
            return bad("sampler.k_max and sampler.restarts must be positive");
        }
        if self.retriever.beam_init == 0 || self.retriever.max_hops == 0 {
            return bad("retriever.beam_init and retriever.max_hops must be positive");
        }
        if self.retriever.gap_threshold.is_nan() || self.retriever.gap_threshold < 0.0 {
            return bad("retriever.gap_threshold must be non-negative");
        }
        if self.types.epochs == 0
            || self.types.batch == 0
            || self.types.hidden == 0
            || self.types.lr.is_nan()
            || self.types.lr <= 0.0
        {
            return bad("types.epochs, types.batch, types.hidden and types.lr must be positive");
        }
        if self.prompt.max_groups == 0 || self.prompt.max_paths == 0 {
            return bad("prompt.max_groups and prompt.max_paths must be positive");
        }
        self.preference_hyper().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        Ok(match self.embedder.kind {
            EmbedderKind::Deterministic => Box::new(HashEmbedder::new(self.embedder.dimension, self.seed)?),
            EmbedderKind::Remote => Box::new(
                RemoteEmbedder::new(
                    self.embedder.endpoint.as_deref().unwrap_or_default(),
                    self.embedder.dimension,
                    Duration::from_millis(self.embedder.timeout_ms),
                )
                .with_batch_size(self.embedder.batch_size),
            ),
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kmeans: KMeansConfig {
                k_max: self.sampler.k_max,
                seed: self.seed,
                restarts: self.sampler.restarts,
                elbow: self.sampler.elbow,
                minibatch_cutoff: self.sampler.minibatch_cutoff,
                ..Default::default()
            },
            paths: PathQuery { cap: self.sampler.path_cap, allow_inverse: self.sampler.allow_inverse },
        }
    }

    pub fn retriever_config(&self) -> RetrieverConfig {
        RetrieverConfig {
            beam_init: self.retriever.beam_init,
            gap_threshold: self.retriever.gap_threshold,
            max_hops: self.retriever.max_hops,
            allow_inverse: self.retriever.allow_inverse,
            max_groundings: self.retriever.max_groundings,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.types.lr,
            epochs: self.types.epochs,
            batch: self.types.batch,
            negatives_per_positive: self.types.negatives_per_positive,
            hidden: self.types.hidden,
            seed: self.seed,
        }
    }

    pub fn preference_hyper(&self) -> PreferenceHyper {
        PreferenceHyper {
            alpha: self.preference.alpha,
            beta: self.preference.beta,
            gamma: self.preference.gamma,
            max_negatives: self.preference.max_negatives,
        }
    }

    pub fn prompt_limits(&self) -> PromptLimits {
        PromptLimits { max_groups: self.prompt.max_groups, max_paths: self.prompt.max_paths }
    }
}
