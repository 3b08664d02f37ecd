//! Standalone JSONL dataset validator.
//!
//! Deliberately does not reuse the library's serde types: every check is
//! written against the raw JSON so the validator can catch serialization
//! bugs in the main code path instead of inheriting them.
//!
//! Usage: validate_dataset FILE [FILE...]
//! Exit codes: 0 all files valid, 1 validation failure, 2 i/o error.

use serde_json::Value;
use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::process::ExitCode;

const NUM_SCORES: usize = 11;
const NUM_ATTRIBUTES: usize = 114;

fn fail(file: &str, lineno: usize, msg: &str) -> String {
    format!("{file}:{lineno}: {msg}")
}

fn check_intent(intent: &Value) -> Result<u64, String> {
    let obj = intent.as_object().ok_or("intent is not an object")?;
    for key in ["scores", "tokens", "slot_labels", "relevance"] {
        if !obj.contains_key(key) {
            return Err(format!("intent missing field {key:?}"));
        }
    }
    let scores = obj["scores"].as_array().ok_or("scores is not an array")?;
    if scores.len() != NUM_SCORES {
        return Err(format!("expected {NUM_SCORES} scores, found {}", scores.len()));
    }
    for s in scores {
        let v = s.as_f64().ok_or("score is not a number")?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("score {v} outside [0,1]"));
        }
    }
    let tokens = obj["tokens"].as_array().ok_or("tokens is not an array")?;
    let slots = obj["slot_labels"].as_array().ok_or("slot_labels is not an array")?;
    if tokens.is_empty() {
        return Err("intent has no tokens".to_string());
    }
    if tokens.len() != slots.len() {
        return Err(format!(
            "{} tokens but {} slot labels",
            tokens.len(),
            slots.len()
        ));
    }
    for t in tokens.iter().chain(slots) {
        let s = t.as_str().ok_or("token/slot entry is not a string")?;
        if s.is_empty() {
            return Err("empty token or slot label".to_string());
        }
    }
    obj["relevance"]
        .as_u64()
        .ok_or_else(|| "relevance is not a non-negative integer".to_string())
}

fn check_record(line: &str, seen_ids: &mut HashSet<String>) -> Result<(), String> {
    let rec: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = rec.as_object().ok_or("record is not an object")?;
    for key in ["request_id", "intents", "info_state"] {
        if !obj.contains_key(key) {
            return Err(format!("missing field {key:?}"));
        }
    }
    let id = obj["request_id"].as_str().ok_or("request_id is not a string")?;
    if id.is_empty() {
        return Err("empty request_id".to_string());
    }
    if !seen_ids.insert(id.to_string()) {
        return Err(format!("duplicate request_id {id:?}"));
    }

    let intents = obj["intents"].as_array().ok_or("intents is not an array")?;
    if intents.is_empty() {
        return Err("request has no intents".to_string());
    }
    let mut relevances = Vec::with_capacity(intents.len());
    for (i, intent) in intents.iter().enumerate() {
        relevances.push(check_intent(intent).map_err(|e| format!("intent {i}: {e}"))?);
    }
    let max_rel = *relevances.iter().max().expect("non-empty");
    if relevances.iter().filter(|&&r| r == max_rel).count() != 1 {
        return Err(format!(
            "maximal relevance {max_rel} is not unique across {} intents",
            relevances.len()
        ));
    }

    let state = obj["info_state"]
        .as_object()
        .and_then(|s| s.get("attributes"))
        .and_then(Value::as_object)
        .ok_or("info_state.attributes is not an object")?;
    if state.len() != NUM_ATTRIBUTES {
        return Err(format!(
            "expected {NUM_ATTRIBUTES} information-state attributes, found {}",
            state.len()
        ));
    }
    for (i, (key, value)) in state.iter().enumerate() {
        let expected = format!("attr_{i:03}");
        if key != &expected {
            return Err(format!("attribute key {key:?} where {expected:?} was expected"));
        }
        if !value.is_string() {
            return Err(format!("attribute {key:?} value is not a string"));
        }
    }
    Ok(())
}

fn validate_file(path: &str) -> Result<usize, (ExitCode, String)> {
    let file = std::fs::File::open(path)
        .map_err(|e| (ExitCode::from(2), format!("{path}: {e}")))?;
    let mut seen_ids = HashSet::new();
    let mut count = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| (ExitCode::from(2), format!("{path}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        check_record(&line, &mut seen_ids)
            .map_err(|e| (ExitCode::from(1), fail(path, lineno + 1, &e)))?;
        count += 1;
    }
    if count == 0 {
        return Err((ExitCode::from(1), format!("{path}: no records")));
    }
    Ok(count)
}

fn main() -> ExitCode {
    let files: Vec<String> = std::env::args().skip(1).collect();
    if files.is_empty() {
        eprintln!("usage: validate_dataset FILE [FILE...]");
        return ExitCode::from(1);
    }
    for path in &files {
        match validate_file(path) {
            Ok(n) => println!("{path}: {n} records ok"),
            Err((code, msg)) => {
                eprintln!("{msg}");
                return code;
            }
        }
    }
    ExitCode::SUCCESS
}
