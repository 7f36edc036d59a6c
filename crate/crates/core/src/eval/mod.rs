//! Accuracy metrics, judge scoring, robustness protocol, and correlation.

mod judge;

pub use judge::{Judge, JudgeVerdict, LlmJudge, MockJudge};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClueAnnotation, IVQAItem};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::reasoner::prompt::{option_letter, PSAV_STRATEGIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_text: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub question: String,
    pub question_first_word: String,
    /// Wall-clock seconds; only recorded on request since it breaks byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kept_clues: Vec<usize>,
    /// Set when the item failed, e.g. `"transport: ..."`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.predicted_index.is_none() && self.predicted_text.is_none() && self.error.is_none() {
            return Err(Error::validation(format!("{}: no prediction", self.item_id)));
        }
        Ok(())
    }

    fn is_correct(&self) -> Result<bool> {
        let gold = self
            .gold_index
            .ok_or_else(|| Error::validation(format!("{}: missing gold_index", self.item_id)))?;
        Ok(self.predicted_index == Some(gold))
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Percentage of records whose predicted option equals the gold option. Missing
/// predictions count as wrong.
pub fn mc_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("no records to score"));
    }
    let mut correct = 0;
    for r in records {
        correct += usize::from(r.is_correct()?);
    }
    Ok(percent(correct, records.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeExclusion {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenEndedReport {
    pub mean_score: f64,
    pub accuracy: f64,
    pub evaluated: usize,
    pub exclusions: Vec<JudgeExclusion>,
}

/// Mean judge score and percentage judged correct. Items the judge fails on are
/// listed in `exclusions` and left out of both means.
pub fn open_ended_eval(records: &[PredictionRecord], judge: &dyn Judge, mode: ExecMode) -> Result<OpenEndedReport> {
    let verdicts = par::map(mode, records, |r| {
        let gold = r.gold_text.as_deref().ok_or_else(|| Error::validation("missing gold_text"))?;
        let pred = r.predicted_text.as_deref().unwrap_or("");
        judge.judge(&r.question, gold, pred)
    });
    let mut exclusions = Vec::new();
    let (mut score_sum, mut correct, mut n) = (0.0, 0, 0);
    for (r, v) in records.iter().zip(verdicts) {
        match v {
            Ok(v) => {
                score_sum += v.score;
                correct += usize::from(v.correct);
                n += 1;
            }
            Err(e) => exclusions.push(JudgeExclusion { item_id: r.item_id.clone(), error: e.to_string() }),
        }
    }
    if n == 0 {
        return Err(Error::validation("no records could be judged"));
    }
    Ok(OpenEndedReport { mean_score: score_sum / n as f64, accuracy: percent(correct, n), evaluated: n, exclusions })
}

/// Maps a strategy letter (`"A"`, `"(h)"`) or full strategy name to its index.
pub fn psav_label_index(label: &str) -> Result<usize> {
    let t = label.trim().trim_start_matches('(').trim_end_matches(')').trim();
    if t.len() == 1 {
        let c = t.chars().next().expect("one char").to_ascii_uppercase();
        if let Some(i) = (0..PSAV_STRATEGIES.len()).find(|&i| option_letter(i) == c) {
            return Ok(i);
        }
    }
    PSAV_STRATEGIES
        .iter()
        .position(|s| s.trim().eq_ignore_ascii_case(t))
        .ok_or_else(|| Error::validation(format!("unknown strategy label {label:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsavRecord {
    pub item_id: String,
    pub gold: Vec<String>,
    pub predicted: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsavMetrics {
    pub recall: f64,
    pub accuracy: f64,
    pub items: usize,
}

/// Accuracy: prediction inside the gold set. Recall: per-item share of the gold
/// set covered by the prediction, averaged over items.
pub fn psav_metrics(records: &[PsavRecord]) -> Result<PsavMetrics> {
    if records.is_empty() {
        return Err(Error::validation("no records to score"));
    }
    let (mut recall, mut hits) = (0.0, 0);
    for r in records {
        let gold = r.gold.iter().map(|g| psav_label_index(g)).collect::<Result<BTreeSet<_>>>()?;
        if gold.is_empty() {
            return Err(Error::validation(format!("{}: empty gold set", r.item_id)));
        }
        let hit = gold.contains(&psav_label_index(&r.predicted)?);
        hits += usize::from(hit);
        recall += if hit { 1.0 / gold.len() as f64 } else { 0.0 };
    }
    Ok(PsavMetrics { recall: 100.0 * recall / records.len() as f64, accuracy: percent(hits, records.len()), items: records.len() })
}

/// Appends `ceil(ratio * n)` clues drawn from items of other videos to every item
/// with `n` clues. Injected clues are flagged `noisy` and carry their source video.
pub fn noisy_augment(items: &[IVQAItem], ratio: f64, seed: u64) -> Result<Vec<IVQAItem>> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::validation("ratio must be finite and >= 0"));
    }
    let videos: BTreeSet<&str> = items.iter().map(|i| i.video_id.as_str()).collect();
    if videos.len() < 2 {
        return Err(Error::validation("no unrelated source"));
    }
    let pool: Vec<(&str, &ClueAnnotation)> = items
        .iter()
        .flat_map(|i| i.clues.iter().filter(|c| !c.noisy).map(move |c| (i.video_id.as_str(), c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let mut out = item.clone();
            let n_add = (ratio * item.clues.len() as f64).ceil() as usize;
            if n_add == 0 {
                return Ok(out);
            }
            let foreign: Vec<&(&str, &ClueAnnotation)> = pool.iter().filter(|(v, _)| *v != item.video_id).collect();
            if foreign.is_empty() {
                return Err(Error::validation(format!("no unrelated source for {}", item.item_id)));
            }
            let picks: Vec<&&(&str, &ClueAnnotation)> = if foreign.len() >= n_add {
                foreign.choose_multiple(&mut rng, n_add).collect()
            } else {
                (0..n_add).map(|_| foreign.choose(&mut rng).expect("non-empty")).collect()
            };
            out.clues.extend(picks.into_iter().map(|(video, clue)| ClueAnnotation {
                relation_label: None,
                noisy: true,
                source_video: Some(video.to_string()),
                ..(*clue).clone()
            }));
            Ok(out)
        })
        .collect()
}

/// Drops injected clues, undoing [`noisy_augment`].
pub fn remove_noise(items: &[IVQAItem]) -> Vec<IVQAItem> {
    items
        .iter()
        .map(|i| IVQAItem { clues: i.clues.iter().filter(|c| !c.noisy).cloned().collect(), ..i.clone() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub vanilla_accuracy: f64,
    pub noisy_accuracy: f64,
    pub drop: f64,
}

impl RobustnessReport {
    pub fn from_accuracies(vanilla_accuracy: f64, noisy_accuracy: f64) -> Self {
        Self { vanilla_accuracy, noisy_accuracy, drop: vanilla_accuracy - noisy_accuracy }
    }
}

pub fn robustness_report(vanilla: &[PredictionRecord], noisy: &[PredictionRecord]) -> Result<RobustnessReport> {
    let ids = |r: &[PredictionRecord]| r.iter().map(|p| p.item_id.clone()).collect::<BTreeSet<_>>();
    if vanilla.len() != noisy.len() || ids(vanilla) != ids(noisy) {
        return Err(Error::validation("vanilla and noisy runs cover different items"));
    }
    Ok(RobustnessReport::from_accuracies(mc_accuracy(vanilla)?, mc_accuracy(noisy)?))
}

pub const QUESTION_TYPES: [&str; 3] = ["why", "what", "how"];

pub fn question_type(first_word: &str) -> &'static str {
    let w = first_word.trim().to_lowercase();
    QUESTION_TYPES.iter().copied().find(|t| *t == w).unwrap_or("other")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

/// Accuracy per question type (`why`, `what`, `how`, `other`); empty types are absent.
pub fn breakdown_by_question_type(records: &[PredictionRecord]) -> Result<BTreeMap<String, TypeAccuracy>> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = counts.entry(question_type(&r.question_first_word).to_string()).or_default();
        entry.0 += usize::from(r.is_correct()?);
        entry.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(k, (correct, count))| (k, TypeAccuracy { accuracy: percent(correct, count), correct, count }))
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation("pearson needs two equal-length series of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::validation("undefined correlation"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedAggregate {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
}

pub fn mean_over_seeds(seeds: &[u64], values: &[f64]) -> Result<SeedAggregate> {
    if seeds.is_empty() || seeds.len() != values.len() {
        return Err(Error::validation("one value per seed required"));
    }
    Ok(SeedAggregate { seeds: seeds.to_vec(), values: values.to_vec(), mean: values.iter().sum::<f64>() / values.len() as f64 })
}
