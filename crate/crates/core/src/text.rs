//! Word-level tokenization shared by the embedder, the mock backend and the judges.

use std::collections::HashMap;

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "of", "and", "or", "in", "on", "at", "is", "are", "was", "were", "be", "did", "does",
    "do", "what", "why", "how", "who", "which", "he", "she", "it", "they", "his", "her", "their", "its", "by",
    "before", "after", "with", "for", "as", "that", "this", "from",
];

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// [`tokens`] without function words.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokens(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// Token-multiset F1 between a prediction and a reference.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(reference);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
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
