//! Answer-string normalization and the exact-match metric.
//!
//! A prediction counts as correct when it equals any gold answer after
//! lower-casing, removing punctuation and collapsing whitespace. The same
//! normalization defines string identity wherever spans are grouped into
//! answer strings, so training supervision, aggregation and evaluation all
//! agree on what "the same answer" means.

use crate::error::{Error, Result};

/// Lower-case, strip punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut last_was_space = true;
    for ch in lowered.chars() {
        if ch.is_ascii_punctuation() {
            continue;
        }
        if ch.is_whitespace() {
            if !last_was_space {
                out.push(' ');
                last_was_space = true;
            }
        } else {
            out.push(ch);
            last_was_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Exact-match fraction over aligned prediction / gold-answer lists.
pub fn evaluate_em(predictions: &[String], gold: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "evaluate_em length mismatch: {} predictions vs {} gold lists",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, answers) in predictions.iter().zip(gold) {
        if em_single(p, answers) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Per-example exact match: 1 if the normalized prediction equals any
/// normalized gold answer.
pub fn em_single(prediction: &str, gold: &[String]) -> bool {
    let p = normalize_answer(prediction);
    gold.iter().any(|g| normalize_answer(g) == p)
}
