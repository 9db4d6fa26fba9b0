//! Positional exact-match / F1 scoring of `;`-separated answers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::normalize::normalize_words;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub em: u8,
    pub f1: f64,
}

/// Scores `pred` against `gold` position by position. Missing parts score 0;
/// surplus parts only break exact match.
pub fn judge_answer<S: AsRef<str>>(pred: &str, gold: &[S]) -> Judgement {
    let parts: Vec<Vec<String>> = pred.split(';').map(normalize_words).collect();
    let golds: Vec<Vec<String>> = gold.iter().map(|g| normalize_words(g.as_ref())).collect();
    if golds.is_empty() {
        let em = u8::from(parts.iter().all(Vec::is_empty));
        return Judgement {
            em,
            f1: f64::from(em),
        };
    }
    let em = parts.len() == golds.len() && parts.iter().zip(&golds).all(|(p, g)| p == g);
    let f1 = golds
        .iter()
        .enumerate()
        .map(|(i, g)| parts.get(i).map_or(0.0, |p| word_f1(p, g)))
        .sum::<f64>()
        / golds.len() as f64;
    Judgement {
        em: u8::from(em),
        f1,
    }
}

/// Bag-of-words F1 between two normalized word lists.
pub fn word_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred.is_empty() && gold.is_empty()));
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for w in gold {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in pred {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}
