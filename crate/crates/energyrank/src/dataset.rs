//! On-disk dataset format: one request per line as a JSON record. The format
//! is streamable and diff-able; an independent validator binary ships with
//! the CLI.

use crate::error::{Error, Result};
use crate::featurizer::{IntentCandidate, InformationState};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RequestRecord {
    pub request_id: String,
    pub intents: Vec<IntentCandidate>,
    pub info_state: InformationState,
}

impl RequestRecord {
    /// Index of the gold intent (the unique maximal relevance label).
    pub fn gold_index(&self) -> Result<usize> {
        let max_rel = self
            .intents
            .iter()
            .map(|c| c.relevance)
            .max()
            .ok_or_else(|| Error::validation("request has no intents"))?;
        let golds: Vec<usize> = self
            .intents
            .iter()
            .enumerate()
            .filter(|(_, c)| c.relevance == max_rel)
            .map(|(i, _)| i)
            .collect();
        if golds.len() != 1 {
            return Err(Error::validation(format!(
                "request {}: {} intents share the maximal relevance {}",
                self.request_id,
                golds.len(),
                max_rel
            )));
        }
        Ok(golds[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.request_id.is_empty() {
            return Err(Error::validation("empty request_id"));
        }
        for c in &self.intents {
            c.validate()?;
        }
        self.gold_index()?;
        Ok(())
    }

    pub fn relevances(&self) -> Vec<u32> {
        self.intents.iter().map(|c| c.relevance).collect()
    }
}

pub fn write_jsonl<W: Write>(out: W, records: &[RequestRecord]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<RequestRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {}", lineno + 1, e)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl_path(path: &Path, records: &[RequestRecord]) -> Result<()> {
    write_jsonl(std::fs::File::create(path)?, records)
}

pub fn read_jsonl_path(path: &Path) -> Result<Vec<RequestRecord>> {
    read_jsonl(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record(id: &str, rels: &[u32]) -> RequestRecord {
        RequestRecord {
            request_id: id.to_string(),
            intents: rels
                .iter()
                .map(|&r| IntentCandidate {
                    scores: vec![0.5; crate::featurizer::NUM_SCORES],
                    tokens: vec!["play".into(), "music".into()],
                    slot_labels: vec!["O".into(), "B-genre".into()],
                    relevance: r,
                })
                .collect(),
            info_state: InformationState {
                attributes: BTreeMap::from([("attr_000".to_string(), "on".to_string())]),
            },
        }
    }

    #[test]
    fn round_trip_preserves_records() {
        let recs = vec![record("r1", &[2, 0, 1]), record("r2", &[1, 0])];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn gold_index_is_argmax_relevance() {
        assert_eq!(record("r", &[0, 2, 1]).gold_index().unwrap(), 1);
    }

    #[test]
    fn duplicate_gold_rejected() {
        assert!(record("r", &[2, 2, 0]).validate().is_err());
    }

    #[test]
    fn malformed_line_is_format_error() {
        let res = read_jsonl("{not json}\n".as_bytes());
        assert!(matches!(res, Err(Error::Format(_))));
    }

    #[test]
    fn blank_lines_skipped() {
        let recs = vec![record("r1", &[1, 0])];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        buf.extend_from_slice(b"\n\n");
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), recs);
    }
}
