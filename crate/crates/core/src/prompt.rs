//! Answer-centered prompts: retrieved paths grouped under the candidate
//! answer they end at, plus supervised fine-tuning records.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::records::SftRecord;
use crate::retriever::RetrievalResult;

/// Separator between gold answers in an SFT target.
pub const TARGET_SEPARATOR: &str = "; ";

pub const DEFAULT_TEMPLATE: &str = "\
Answer the question using the reasoning paths below. Each candidate answer \
appears in angle brackets, followed by the knowledge graph paths that lead \
to it. Reply with the answer labels only, separated by semicolons.

Question: {question}

Candidate answers and reasoning paths:
{groups}
";

/// One serialized path and its retrieval score.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub candidate: EntityId,
    pub label: String,
    /// Sorted by descending score.
    pub paths: Vec<Evidence>,
    pub index: usize,
}

impl CandidateGroup {
    pub fn best_score(&self) -> f64 {
        self.paths.first().map_or(f64::NEG_INFINITY, |e| e.score)
    }
}

/// Groups evidence by terminal entity.
///
/// Groups are ordered by best score (descending) then entity id; paths inside
/// a group by score (descending) then text. Repeated texts (paths that differ
/// only in intermediate entities) keep their best score.
pub fn group_evidence<I>(items: I) -> Vec<CandidateGroup>
where
    I: IntoIterator<Item = (EntityId, String, Evidence)>,
{
    let mut by_terminal: BTreeMap<EntityId, (String, Vec<Evidence>)> = BTreeMap::new();
    for (terminal, label, evidence) in items {
        by_terminal.entry(terminal).or_insert_with(|| (label, Vec::new())).1.push(evidence);
    }
    let mut groups: Vec<CandidateGroup> = by_terminal
        .into_iter()
        .map(|(candidate, (label, mut paths))| {
            paths.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
            let mut seen = BTreeSet::new();
            paths.retain(|e| seen.insert(e.text.clone()));
            CandidateGroup { candidate, label, paths, index: 0 }
        })
        .collect();
    groups.sort_by(|a, b| b.best_score().total_cmp(&a.best_score()).then_with(|| a.candidate.cmp(&b.candidate)));
    for (i, group) in groups.iter_mut().enumerate() {
        group.index = i;
    }
    groups
}

pub fn group_paths_by_answer(g: &KnowledgeGraph, result: &RetrievalResult) -> Vec<CandidateGroup> {
    group_evidence(result.paths.iter().map(|sp| {
        (
            sp.path.terminal,
            g.entity_label(sp.path.terminal).to_owned(),
            Evidence { text: g.serialize_path(&sp.path), score: sp.score },
        )
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Question,
    Groups,
}

/// Prompt text with `{question}` and `{groups}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = text;
        let mut literal = String::new();
        while let Some(start) = rest.find('{') {
            literal.push_str(&rest[..start]);
            let tail = &rest[start..];
            let placeholder = if tail.starts_with("{question}") {
                Some(Segment::Question)
            } else if tail.starts_with("{groups}") {
                Some(Segment::Groups)
            } else {
                None
            };
            match placeholder {
                Some(seg) => {
                    let len = if seg == Segment::Question { "{question}".len() } else { "{groups}".len() };
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(seg);
                    rest = &tail[len..];
                }
                None => {
                    literal.push('{');
                    rest = &tail[1..];
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        for (seg, name) in [(Segment::Question, "{question}"), (Segment::Groups, "{groups}")] {
            if !segments.contains(&seg) {
                return Err(Error::Template(format!("missing placeholder {name}")));
            }
        }
        Ok(PromptTemplate { segments })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLimits {
    pub max_groups: usize,
    pub max_paths: usize,
}

impl Default for PromptLimits {
    fn default() -> Self {
        PromptLimits { max_groups: 20, max_paths: 10 }
    }
}

fn render_groups(groups: &[CandidateGroup], limits: PromptLimits) -> String {
    let mut out = String::new();
    let mut dropped_paths = 0;
    for group in groups.iter().take(limits.max_groups) {
        out.push('<');
        out.push_str(&group.label);
        out.push_str(">\n");
        for e in group.paths.iter().take(limits.max_paths) {
            out.push_str(&e.text);
            out.push('\n');
        }
        dropped_paths += group.paths.len().saturating_sub(limits.max_paths);
    }
    let dropped_groups = groups.len().saturating_sub(limits.max_groups);
    if dropped_groups > 0 || dropped_paths > 0 {
        out.push_str(&format!(
            "({dropped_groups} lower-scoring candidates and {dropped_paths} lower-scoring paths not shown)\n"
        ));
    }
    out
}

pub fn render_prompt(
    question: &str,
    groups: &[CandidateGroup],
    template: &PromptTemplate,
    limits: PromptLimits,
) -> String {
    let mut out = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Question => out.push_str(question),
            Segment::Groups => out.push_str(&render_groups(groups, limits)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerCenteredPrompt {
    pub id: String,
    pub question: String,
    pub groups: Vec<CandidateGroup>,
    pub text: String,
}

impl AnswerCenteredPrompt {
    pub fn build(
        id: &str,
        question: &str,
        groups: Vec<CandidateGroup>,
        template: &PromptTemplate,
        limits: PromptLimits,
    ) -> Self {
        let text = render_prompt(question, &groups, template, limits);
        AnswerCenteredPrompt { id: id.to_owned(), question: question.to_owned(), groups, text }
    }
}

/// Writes `{id, prompt, target}` lines. `gold` must hold exactly the prompt ids.
pub fn export_sft_records<W: Write>(
    prompts: &[AnswerCenteredPrompt],
    gold: &BTreeMap<String, Vec<String>>,
    sink: W,
) -> Result<usize> {
    let ids: BTreeSet<&str> = prompts.iter().map(|p| p.id.as_str()).collect();
    if ids.len() != prompts.len() {
        return Err(Error::Consistency("duplicate prompt id".into()));
    }
    if let Some(extra) = gold.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(Error::Consistency(format!("gold answers for unknown id `{extra}`")));
    }
    let mut records = Vec::with_capacity(prompts.len());
    for p in prompts {
        let answers = gold.get(&p.id).ok_or_else(|| Error::Consistency(format!("no gold answers for `{}`", p.id)))?;
        records.push(SftRecord { id: p.id.clone(), prompt: p.text.clone(), target: answers.join(TARGET_SEPARATOR) });
    }
    crate::records::write_jsonl(&records, sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, score: f64) -> Evidence {
        Evidence { text: text.into(), score }
    }

    #[test]
    fn repeated_text_keeps_best_score() {
        let groups = group_evidence(vec![
            (EntityId(1), "A".to_string(), ev("x → r → A", -2.0)),
            (EntityId(1), "A".to_string(), ev("x → r → A", -1.0)),
            (EntityId(1), "A".to_string(), ev("y → r → A", -1.5)),
        ]);
        assert_eq!(groups[0].paths, vec![ev("x → r → A", -1.0), ev("y → r → A", -1.5)]);
    }

    #[test]
    fn empty_result_gives_no_groups() {
        assert!(group_evidence(Vec::new()).is_empty());
    }

    #[test]
    fn ties_on_score_order_by_entity_id() {
        let groups = group_evidence([
            (EntityId(7), "B".to_string(), ev("x → B", -1.0)),
            (EntityId(3), "A".to_string(), ev("x → A", -1.0)),
        ]);
        assert_eq!(groups[0].candidate, EntityId(3));
        assert_eq!(groups[1].index, 1);
    }

    #[test]
    fn one_group_one_path_has_one_bracketed_candidate() {
        let groups = group_evidence([(EntityId(0), "Bishop".to_string(), ev("Juice → r → Bishop", -0.1))]);
        let text = render_prompt("who?", &groups, &PromptTemplate::default(), PromptLimits::default());
        assert_eq!(text.matches('<').count(), 1);
        assert!(text.contains("<Bishop>\nJuice → r → Bishop\n"));
    }

    #[test]
    fn missing_placeholder_is_a_template_error() {
        assert!(matches!(PromptTemplate::parse("Q: {question}"), Err(Error::Template(_))));
        assert!(matches!(PromptTemplate::parse("{groups}"), Err(Error::Template(_))));
        assert!(PromptTemplate::parse("{question} {other} {groups}").is_ok());
    }

    #[test]
    fn placeholders_inside_the_question_are_not_expanded() {
        let t = PromptTemplate::parse("{question}|{groups}").unwrap();
        let text = render_prompt("what is {groups}?", &[], &t, PromptLimits::default());
        assert_eq!(text, "what is {groups}?|");
    }

    #[test]
    fn caps_add_a_footer() {
        let groups =
            group_evidence((0..3).map(|i| (EntityId(i), format!("E{i}"), ev(&format!("t → E{i}"), -(i as f64)))));
        let text =
            render_prompt("q", &groups, &PromptTemplate::default(), PromptLimits { max_groups: 2, max_paths: 10 });
        assert!(!text.contains("<E2>"));
        assert!(text.contains("(1 lower-scoring candidates and 0 lower-scoring paths not shown)"));
    }

    #[test]
    fn sft_export_checks_alignment() {
        let p = AnswerCenteredPrompt::build("q1", "q", Vec::new(), &PromptTemplate::default(), PromptLimits::default());
        let mut gold = BTreeMap::new();
        let mut buf = Vec::new();
        assert!(matches!(export_sft_records(std::slice::from_ref(&p), &gold, &mut buf), Err(Error::Consistency(_))));
        gold.insert("q1".to_string(), vec!["A".to_string(), "B".to_string()]);
        assert_eq!(export_sft_records(std::slice::from_ref(&p), &gold, &mut buf).unwrap(), 1);
        assert!(String::from_utf8(buf).unwrap().contains("\"target\":\"A; B\""));
        assert_eq!(export_sft_records(&[], &BTreeMap::new(), Vec::new()).unwrap(), 0);
    }
}
