//! Answer and retrieval metrics with SQuAD-style answer normalization.

use std::collections::{HashMap, HashSet};

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 if the normalized prediction equals any normalized gold answer.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let pred = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g.as_ref()) == pred) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-level F1 over the gold answers.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(prediction, g.as_ref()))
        .fold(0.0, f64::max)
}

/// Fraction of gold ids found among the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], gold: &[G], k: usize) -> f64 {
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return 0.0;
    }
    let found: HashSet<&str> = ranked
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(|id| gold.contains(id))
        .collect();
    found.len() as f64 / gold.len() as f64
}

/// 1.0 if any gold id appears among the first `k` ranked ids.
pub fn hit_at_k<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], gold: &[G], k: usize) -> f64 {
    let hit = ranked
        .iter()
        .take(k)
        .any(|r| gold.iter().any(|g| g.as_ref() == r.as_ref()));
    if hit {
        1.0
    } else {
        0.0
    }
}
