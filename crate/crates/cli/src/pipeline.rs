//! The six pipeline stages. Each reads its inputs fully, computes, and only
//! then stages its outputs, so a failed run leaves earlier artifacts intact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use pathwise_core::embedding::Embedder;
use pathwise_core::eval::{
    alignment_report, arp, mean_answer_score, relation_coverage, retrieval_accuracy, EvalReport, PredictionRecord,
    RelationSets,
};
use pathwise_core::kg::{EntityId, KnowledgeGraph};
use pathwise_core::preference::{build_preference_pairs, trainer_config, PreferenceRecord};
use pathwise_core::prompt::{export_sft_records, group_evidence, AnswerCenteredPrompt, Evidence, PromptTemplate};
use pathwise_core::records::{
    read_jsonl, write_jsonl, QaRecord, RetrievalRecord, RetrievedPath, SampleSummary, SampledRecord,
};
use pathwise_core::retriever::dynamic_beam_search;
use pathwise_core::sampler::{sample_training_paths, SamplingRun};
use pathwise_core::type_predictor::{train_type_predictor, TypeLabel, TypePredictor, TypeTrainingExample};
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::output::{self, Staged};

struct Inputs {
    graph: KnowledgeGraph,
    qa: Vec<QaRecord>,
    embedder: Box<dyn Embedder>,
    pool: rayon::ThreadPool,
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, CliError> {
    let input_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Input { path, source }
    };
    let mut graph = KnowledgeGraph::load_triples(open(&cfg.kg.triples)?).map_err(input_err(&cfg.kg.triples))?;
    if let Some(types) = &cfg.kg.types {
        graph.load_type_schema(open(types)?).map_err(input_err(types))?;
    }
    let qa: Vec<QaRecord> = read_jsonl(open(&cfg.qa)?).map_err(input_err(&cfg.qa))?;
    let mut ids = BTreeSet::new();
    for r in &qa {
        if !ids.insert(r.id.as_str()) {
            return Err(CliError::Input {
                path: cfg.qa.clone(),
                source: pathwise_core::Error::Consistency(format!("duplicate id `{}`", r.id)),
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    Ok(Inputs { graph, qa, embedder: cfg.embedder()?, pool })
}

/// Reads an upstream artifact, mapping absence to a dependency error.
fn upstream<T: serde::de::DeserializeOwned>(
    cfg: &PipelineConfig,
    name: &str,
    stage: &'static str,
) -> Result<Vec<T>, CliError> {
    let path = cfg.out.join(name);
    if !path.is_file() {
        return Err(CliError::Dependency { stage, artifact: path });
    }
    read_jsonl(open(&path)?).map_err(|source| CliError::Input { path, source })
}

/// Ids in an upstream file must be exactly the QA ids, in order.
fn check_ids<'a>(
    cfg: &PipelineConfig,
    qa: &[QaRecord],
    ids: impl Iterator<Item = &'a str>,
    name: &str,
    stage: &'static str,
) -> Result<(), CliError> {
    if qa.iter().map(|r| r.id.as_str()).ne(ids) {
        return Err(CliError::Dependency { stage, artifact: cfg.out.join(name) });
    }
    Ok(())
}

fn entities(g: &KnowledgeGraph, labels: &[String]) -> Vec<Option<EntityId>> {
    labels.iter().map(|l| g.entity_id(l).ok()).collect()
}

/// All `(topic, answer)` runs of one question; `None` for pairs with an
/// endpoint outside the graph.
fn sample_runs(inp: &Inputs, cfg: &PipelineConfig, q: &QaRecord) -> Result<Vec<Option<SamplingRun>>, CliError> {
    let sampler = cfg.sampler_config();
    let mut runs = Vec::new();
    for t in entities(&inp.graph, &q.topic_entities) {
        for a in entities(&inp.graph, &q.answers) {
            runs.push(match (t, a) {
                (Some(t), Some(a)) => {
                    Some(sample_training_paths(&inp.graph, &q.question, t, a, inp.embedder.as_ref(), &sampler)?)
                }
                _ => None,
            });
        }
    }
    Ok(runs)
}

fn sampled_record(g: &KnowledgeGraph, q: &QaRecord, run: &SamplingRun) -> Option<SampledRecord> {
    let clusters = run.clusters.as_ref()?;
    Some(SampledRecord {
        id: q.id.clone(),
        question: q.question.clone(),
        topic: g.entity_label(run.set.topic).to_owned(),
        answer: g.entity_label(run.set.answer).to_owned(),
        paths: run.set.paths.iter().map(|p| g.serialize_path(p)).collect(),
        similarities: run.set.similarity.clone(),
        relations: run
            .set
            .paths
            .iter()
            .map(|p| p.hops.iter().map(|h| g.hop_label(*h).into_owned()).collect())
            .collect(),
        chosen_k: clusters.chosen_k,
        candidates: run.candidates.len(),
    })
}

fn all_runs(inp: &Inputs, cfg: &PipelineConfig) -> Result<Vec<Vec<Option<SamplingRun>>>, CliError> {
    inp.pool.install(|| inp.qa.par_iter().map(|q| sample_runs(inp, cfg, q)).collect())
}

fn sampled_records(inp: &Inputs, runs: &[Vec<Option<SamplingRun>>]) -> Vec<SampledRecord> {
    inp.qa
        .iter()
        .zip(runs)
        .flat_map(|(q, rs)| rs.iter().flatten().filter_map(move |r| sampled_record(&inp.graph, q, r)))
        .collect()
}

fn jsonl<T: serde::Serialize>(records: &[T]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf)?;
    Ok(buf)
}

pub fn sample(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let inp = load_inputs(cfg)?;
    let runs = all_runs(&inp, cfg)?;
    let records = sampled_records(&inp, &runs);
    let pairs: usize = runs.iter().map(Vec::len).sum();
    let summary = SampleSummary {
        questions: inp.qa.len(),
        pairs,
        sampled: records.len(),
        unreachable: pairs - records.len(),
        kept_paths: records.iter().map(|r| r.paths.len()).sum(),
        candidate_paths: records.iter().map(|r| r.candidates).sum(),
    };
    log::info!("sampled {} of {} pairs, {} unreachable", summary.sampled, summary.pairs, summary.unreachable);
    let mut out = Staged::new(&cfg.out);
    out.add(output::SAMPLED, &jsonl(&records)?)?;
    out.add_json(output::SAMPLE_SUMMARY, &summary)?;
    out.commit()
}

pub fn build_prefs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let inp = load_inputs(cfg)?;
    let on_disk: Vec<SampledRecord> = upstream(cfg, output::SAMPLED, "sample")?;
    let runs = all_runs(&inp, cfg)?;
    // Pairs are rebuilt from fresh runs; the file on disk must agree with them.
    if sampled_records(&inp, &runs) != on_disk {
        return Err(CliError::Dependency { stage: "sample", artifact: cfg.out.join(output::SAMPLED) });
    }
    let hyper = cfg.preference_hyper();
    let per_question: Vec<Vec<PreferenceRecord>> = inp.pool.install(|| {
        inp.qa
            .par_iter()
            .zip(&runs)
            .map(|(q, rs)| -> Result<Vec<PreferenceRecord>, CliError> {
                let mut out = Vec::new();
                for run in rs.iter().flatten() {
                    for pair in build_preference_pairs(&inp.graph, run, inp.embedder.as_ref(), &hyper)? {
                        out.push(PreferenceRecord::from_pair(format!("{}-{}", q.id, out.len()), &pair));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()
    })?;
    let records: Vec<PreferenceRecord> = per_question.into_iter().flatten().collect();
    log::info!("{} preference pairs", records.len());
    let mut out = Staged::new(&cfg.out);
    out.add(output::PREFERENCES, &jsonl(&records)?)?;
    out.add_json(output::TRAINER_CONFIG, &trainer_config())?;
    out.commit()
}

pub fn retrieve(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let inp = load_inputs(cfg)?;
    let rcfg = cfg.retriever_config();
    let g = &inp.graph;
    let records: Vec<RetrievalRecord> = inp.pool.install(|| {
        inp.qa
            .par_iter()
            .map(|q| -> Result<RetrievalRecord, CliError> {
                let topics: Vec<EntityId> = entities(g, &q.topic_entities).into_iter().flatten().collect();
                if topics.len() < q.topic_entities.len() {
                    log::warn!("{}: topic entity missing from the graph", q.id);
                }
                let paths = if topics.is_empty() {
                    Vec::new()
                } else {
                    dynamic_beam_search(g, &q.question, &topics, inp.embedder.as_ref(), &rcfg)?
                        .paths
                        .into_iter()
                        .map(|sp| RetrievedPath {
                            text: g.serialize_path(&sp.path),
                            score: sp.score,
                            topic: g.entity_label(sp.path.topic).to_owned(),
                            relations: sp.path.hops.iter().map(|h| g.hop_label(*h).into_owned()).collect(),
                            terminal: g.entity_label(sp.path.terminal).to_owned(),
                        })
                        .collect()
                };
                Ok(RetrievalRecord { id: q.id.clone(), question: q.question.clone(), paths })
            })
            .collect::<Result<_, _>>()
    })?;
    let mut out = Staged::new(&cfg.out);
    out.add(output::RETRIEVAL, &jsonl(&records)?)?;
    out.commit()
}

fn type_labels(g: &KnowledgeGraph) -> Vec<TypeLabel> {
    g.all_types().map(|(id, label)| TypeLabel { id, label: label.to_owned() }).collect()
}

pub fn type_train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    if cfg.kg.types.is_none() {
        return Err(CliError::Config("type-train needs kg.types".into()));
    }
    let inp = load_inputs(cfg)?;
    let g = &inp.graph;
    let labels = type_labels(g);
    let mut dataset = Vec::new();
    for q in &inp.qa {
        let positive: BTreeSet<_> = entities(g, &q.answers).into_iter().flatten().flat_map(|a| g.types_of(a)).collect();
        if positive.is_empty() {
            continue;
        }
        for t in &labels {
            dataset.push(TypeTrainingExample {
                question: q.question.clone(),
                type_label: t.label.clone(),
                label: u8::from(positive.contains(&t.id)),
            });
        }
    }
    let model = train_type_predictor(&dataset, inp.embedder.as_ref(), &cfg.train_config())?;
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    let mut out = Staged::new(&cfg.out);
    out.add(output::TYPE_MODEL, &buf)?;
    out.commit()
}

fn answers_by_id(qa: &[QaRecord]) -> BTreeMap<String, Vec<String>> {
    qa.iter().map(|q| (q.id.clone(), q.answers.clone())).collect()
}

fn groups_of(g: &KnowledgeGraph, paths: &[RetrievedPath]) -> Vec<pathwise_core::prompt::CandidateGroup> {
    group_evidence(paths.iter().filter_map(|p| {
        let terminal = g.entity_id(&p.terminal).ok()?;
        Some((terminal, p.terminal.clone(), Evidence { text: p.text.clone(), score: p.score }))
    }))
}

pub fn build_prompts(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let inp = load_inputs(cfg)?;
    let retrieved: Vec<RetrievalRecord> = upstream(cfg, output::RETRIEVAL, "retrieve")?;
    check_ids(cfg, &inp.qa, retrieved.iter().map(|r| r.id.as_str()), output::RETRIEVAL, "retrieve")?;
    let template = match &cfg.prompt.template {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::File { path: path.clone(), source })?;
            PromptTemplate::parse(&text).map_err(|source| CliError::Input { path: path.clone(), source })?
        }
        None => PromptTemplate::default(),
    };
    let predictor = if cfg.prompt.type_filter_k > 0 {
        let path = cfg.out.join(output::TYPE_MODEL);
        if !path.is_file() {
            return Err(CliError::Dependency { stage: "type-train", artifact: path });
        }
        let model = TypePredictor::read_from(open(&path)?).map_err(|source| CliError::Input { path, source })?;
        Some(model)
    } else {
        None
    };
    let g = &inp.graph;
    let labels = type_labels(g);
    let limits = cfg.prompt_limits();
    let prompts: Vec<AnswerCenteredPrompt> = inp.pool.install(|| {
        retrieved
            .par_iter()
            .map(|r| -> Result<AnswerCenteredPrompt, CliError> {
                let mut paths = r.paths.clone();
                if let Some(model) = &predictor {
                    let wanted: BTreeSet<_> = model
                        .predict_topk(&r.question, &labels, cfg.prompt.type_filter_k, inp.embedder.as_ref())?
                        .into_iter()
                        .map(|t| t.id)
                        .collect();
                    // Same rule as the retriever's filter: untyped terminals stay.
                    paths.retain(|p| match g.entity_id(&p.terminal) {
                        Ok(e) => !g.has_types(e) || g.types_of(e).any(|t| wanted.contains(&t)),
                        Err(_) => true,
                    });
                }
                Ok(AnswerCenteredPrompt::build(&r.id, &r.question, groups_of(g, &paths), &template, limits))
            })
            .collect::<Result<_, _>>()
    })?;
    let mut buf = Vec::new();
    export_sft_records(&prompts, &answers_by_id(&inp.qa), &mut buf)?;
    let mut out = Staged::new(&cfg.out);
    out.add(output::PROMPTS, &buf)?;
    out.commit()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalPrediction {
    id: String,
    predicted: Vec<String>,
}

pub fn eval(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let inp = load_inputs(cfg)?;
    let retrieved: Vec<RetrievalRecord> = upstream(cfg, output::RETRIEVAL, "retrieve")?;
    check_ids(cfg, &inp.qa, retrieved.iter().map(|r| r.id.as_str()), output::RETRIEVAL, "retrieve")?;
    let g = &inp.graph;

    let predicted: BTreeMap<String, Vec<String>> = match &cfg.eval.predictions {
        Some(path) => {
            let preds: Vec<ExternalPrediction> =
                read_jsonl(open(path)?).map_err(|source| CliError::Input { path: path.clone(), source })?;
            preds.into_iter().map(|p| (p.id, p.predicted)).collect()
        }
        // No reader model: the best-scoring answer group stands in.
        None => retrieved
            .iter()
            .map(|r| (r.id.clone(), groups_of(g, &r.paths).first().map(|c| vec![c.label.clone()]).unwrap_or_default()))
            .collect(),
    };
    let mut records = Vec::with_capacity(inp.qa.len());
    for q in &inp.qa {
        let p = predicted
            .get(&q.id)
            .ok_or_else(|| pathwise_core::Error::Consistency(format!("no prediction for `{}`", q.id)))?;
        records.push(PredictionRecord { id: q.id.clone(), predicted: p.clone(), gold: q.answers.clone() });
    }
    let answers = mean_answer_score(&records)?;
    let counts: Vec<usize> = retrieved.iter().map(|r| r.paths.len()).collect();
    let terminals: Vec<(Vec<String>, Vec<String>)> = retrieved
        .iter()
        .zip(&inp.qa)
        .map(|(r, q)| (r.paths.iter().map(|p| p.terminal.clone()).collect(), q.answers.clone()))
        .collect();

    // Training-side measures need the sampled set and gold relations.
    let sampled_path = cfg.out.join(output::SAMPLED);
    let sampled: Option<Vec<SampledRecord>> = if sampled_path.is_file() {
        Some(read_jsonl(open(&sampled_path)?).map_err(|source| CliError::Input { path: sampled_path, source })?)
    } else {
        None
    };
    let mut coverage = None;
    let (mut top1, mut top3) = (None, None);
    if let Some(sampled) = &sampled {
        let mut kept: BTreeMap<&str, (BTreeSet<String>, Vec<String>)> =
            inp.qa.iter().map(|q| (q.id.as_str(), Default::default())).collect();
        for s in sampled {
            let slot = kept
                .get_mut(s.id.as_str())
                .ok_or_else(|| CliError::Dependency { stage: "sample", artifact: cfg.out.join(output::SAMPLED) })?;
            slot.0.extend(s.relations.iter().flatten().cloned());
            slot.1.extend(s.paths.iter().cloned());
        }
        if inp.qa.iter().all(|q| q.gold_relations.is_some()) {
            let train: RelationSets = kept.iter().map(|(id, (rels, _))| (id.to_string(), rels.clone())).collect();
            let gold: RelationSets =
                inp.qa.iter().map(|q| (q.id.clone(), q.gold_relations.iter().flatten().cloned().collect())).collect();
            coverage = Some(relation_coverage(&train, &gold, cfg.eval.averaging)?);
        }
        let questions: Vec<(String, Vec<String>)> =
            inp.qa.iter().map(|q| (q.question.clone(), kept[q.id.as_str()].1.clone())).collect();
        top1 = alignment_report(&questions, inp.embedder.as_ref(), 1)?;
        top3 = alignment_report(&questions, inp.embedder.as_ref(), 3)?;
    }

    let report = EvalReport {
        questions: inp.qa.len(),
        hit: answers.hit,
        precision: answers.precision,
        recall: answers.recall,
        f1: answers.f1,
        coverage,
        coverage_averaging: cfg.eval.averaging,
        arp: arp(&counts)?,
        retrieval_accuracy: retrieval_accuracy(&terminals)?,
        alignment_top1: top1,
        alignment_top3: top3,
    };
    let mut out = Staged::new(&cfg.out);
    out.add_json(output::REPORT, &report)?;
    out.commit()
}
