//! Line-delimited record formats shared by the pipeline stages.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One question of a QA file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    pub answers: Vec<String>,
    /// Relations of the annotated query, when the dataset provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_relations: Option<Vec<String>>,
}

/// Kept paths for one reachable `(topic, answer)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampledRecord {
    pub id: String,
    pub question: String,
    pub topic: String,
    pub answer: String,
    /// Serialized kept paths.
    pub paths: Vec<String>,
    /// Cosine of each kept path to the question.
    pub similarities: Vec<f64>,
    /// Relation labels of each kept path.
    pub relations: Vec<Vec<String>>,
    pub chosen_k: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSummary {
    pub questions: usize,
    pub pairs: usize,
    pub sampled: usize,
    pub unreachable: usize,
    pub kept_paths: usize,
    pub candidate_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievedPath {
    pub text: String,
    pub score: f64,
    pub topic: String,
    pub relations: Vec<String>,
    pub terminal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub id: String,
    pub question: String,
    pub paths: Vec<RetrievedPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub id: String,
    pub prompt: String,
    pub target: String,
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut sink: W) -> Result<usize> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_round_trip_omits_missing_gold() {
        let r = QaRecord {
            id: "q1".into(),
            question: "who?".into(),
            topic_entities: vec!["A".into()],
            answers: vec!["B".into()],
            gold_relations: None,
        };
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&r), &mut buf).unwrap();
        assert!(!String::from_utf8_lossy(&buf).contains("gold_relations"));
        let back: Vec<QaRecord> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn parse_error_carries_line_number() {
        let src = "{\"id\":\"a\",\"prompt\":\"p\",\"target\":\"t\"}\n\nnot json\n";
        match read_jsonl::<SftRecord, _>(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
