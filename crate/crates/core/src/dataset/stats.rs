use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::item::{question_first_word, IVQAItem};
use super::span::union_measure;
use crate::error::{Error, Result};

pub const DURATION_BUCKET_SECONDS: f64 = 30.0;
pub const EVIDENCE_RATIO_BUCKET: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub item_count: usize,
    pub duration_histogram: Vec<HistogramBin>,
    pub evidence_ratio_histogram: Vec<HistogramBin>,
    pub question_first_word_histogram: BTreeMap<String, usize>,
    pub clues_per_item_histogram: BTreeMap<usize, usize>,
    /// Fraction of labeled clues with label 1; `None` when nothing is labeled.
    pub relation_positive_fraction: Option<f64>,
}

fn bucket_index(value: f64, width: f64) -> i64 {
    // the epsilon keeps 0.2 * 10 style products from landing one bucket low
    (value / width + 1e-9).floor() as i64
}

fn bin_histogram(values: impl Iterator<Item = f64>, width: f64) -> Vec<HistogramBin> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(bucket_index(v, width)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(idx, count)| HistogramBin {
            lower: idx as f64 * width,
            upper: (idx + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Fraction of the video covered by the union of its excluded spans.
pub fn evidence_ratio(item: &IVQAItem) -> f64 {
    union_measure(&item.excluded_spans) / item.duration
}

pub fn compute_statistics(items: &[IVQAItem]) -> Result<DatasetStats> {
    if items.is_empty() {
        return Err(Error::validation("cannot compute statistics of an empty dataset"));
    }
    let mut first_words = BTreeMap::new();
    let mut clue_counts = BTreeMap::new();
    let (mut labeled, mut positive) = (0usize, 0usize);
    for item in items {
        *first_words.entry(question_first_word(&item.question)).or_insert(0) += 1;
        *clue_counts.entry(item.clues.len()).or_insert(0) += 1;
        for clue in &item.clues {
            if let Some(label) = clue.relation_label {
                labeled += 1;
                positive += label as usize;
            }
        }
    }
    Ok(DatasetStats {
        item_count: items.len(),
        duration_histogram: bin_histogram(items.iter().map(|i| i.duration), DURATION_BUCKET_SECONDS),
        evidence_ratio_histogram: bin_histogram(items.iter().map(evidence_ratio), EVIDENCE_RATIO_BUCKET),
        question_first_word_histogram: first_words,
        clues_per_item_histogram: clue_counts,
        relation_positive_fraction: (labeled > 0).then(|| positive as f64 / labeled as f64),
    })
}

/// Minimal SVG bar chart for one histogram.
pub fn render_histogram_svg(title: &str, bars: &[(String, usize)]) -> String {
    let (bar_w, gap, height, top) = (40.0, 10.0, 200.0, 30.0);
    let max = bars.iter().map(|(_, c)| *c).max().unwrap_or(1).max(1) as f64;
    let width = bars.len() as f64 * (bar_w + gap) + gap;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\">\n<text x=\"{gap}\" y=\"20\" font-size=\"14\">{}</text>\n",
        height + top + 40.0,
        xml_escape(title)
    );
    for (i, (label, count)) in bars.iter().enumerate() {
        let h = height * *count as f64 / max;
        let x = gap + i as f64 * (bar_w + gap);
        let y = top + height - h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4a78b0\"/>\n\
             <text x=\"{x}\" y=\"{}\" font-size=\"10\">{}</text>\n\
             <text x=\"{x}\" y=\"{}\" font-size=\"10\">{count}</text>\n",
            top + height + 14.0,
            xml_escape(label),
            y - 2.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl DatasetStats {
    /// One `(file stem, svg)` per histogram.
    pub fn render_svgs(&self) -> Vec<(String, String)> {
        let bins = |h: &[HistogramBin]| -> Vec<(String, usize)> {
            h.iter().map(|b| (format!("{}", b.lower), b.count)).collect()
        };
        vec![
            ("duration".into(), render_histogram_svg("Duration (s)", &bins(&self.duration_histogram))),
            (
                "evidence_ratio".into(),
                render_histogram_svg("Evidence ratio", &bins(&self.evidence_ratio_histogram)),
            ),
            (
                "question_first_word".into(),
                render_histogram_svg(
                    "Question first word",
                    &self.question_first_word_histogram.iter().map(|(k, v)| (k.clone(), *v)).collect::<Vec<_>>(),
                ),
            ),
            (
                "clues_per_item".into(),
                render_histogram_svg(
                    "Clues per item",
                    &self.clues_per_item_histogram.iter().map(|(k, v)| (k.to_string(), *v)).collect::<Vec<_>>(),
                ),
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::item::ClueAnnotation;
    use crate::dataset::span::EvidenceSpan;

    fn item(question: &str, duration: f64, excluded: &[(f64, f64)], clues: usize) -> IVQAItem {
        IVQAItem {
            item_id: String::new(),
            video_id: "v".into(),
            duration,
            excluded_spans: excluded.iter().map(|&(s, e)| EvidenceSpan::new(s, e).unwrap()).collect(),
            question: question.into(),
            options: vec![],
            answer_index: None,
            answer: Some("x".into()),
            clues: (0..clues)
                .map(|i| ClueAnnotation::new("a", "b", EvidenceSpan::new(0.0, 1.0).unwrap()).with_label((i % 2) as u8))
                .collect(),
            open_ended_eligible: true,
        }
    }

    #[test]
    fn evidence_ratio_bucket() {
        let stats = compute_statistics(&[item("Why?", 60.0, &[(24.0, 36.0)], 0)]).unwrap();
        assert_eq!(stats.evidence_ratio_histogram.len(), 1);
        assert!((stats.evidence_ratio_histogram[0].lower - 0.2).abs() < 1e-12);
        assert_eq!(stats.duration_histogram[0].lower, 60.0);
    }

    #[test]
    fn first_word_and_clue_histograms() {
        let items = vec![
            item("Why did it", 60.0, &[], 3),
            item("What is", 60.0, &[], 4),
            item("Why not", 60.0, &[], 3),
        ];
        let stats = compute_statistics(&items).unwrap();
        assert_eq!(stats.question_first_word_histogram.get("Why"), Some(&2));
        assert_eq!(stats.question_first_word_histogram.get("What"), Some(&1));
        assert_eq!(stats.clues_per_item_histogram, BTreeMap::from([(3, 2), (4, 1)]));
        let total: usize = stats.duration_histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, 3);
        // labels alternate 0,1,0 / 0,1,0,1 / 0,1,0 -> 4 of 10
        assert!((stats.relation_positive_fraction.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(compute_statistics(&[]).is_err());
    }

    #[test]
    fn svg_renders_every_histogram() {
        let stats = compute_statistics(&[item("Why?", 60.0, &[], 2)]).unwrap();
        let svgs = stats.render_svgs();
        assert_eq!(svgs.len(), 4);
        assert!(svgs.iter().all(|(_, s)| s.starts_with("<svg")));
    }
}
