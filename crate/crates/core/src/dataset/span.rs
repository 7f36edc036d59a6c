//! Time-span arithmetic: evidence extension, masking, and frame placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default extension divisor applied to grounded evidence before masking.
pub const DEFAULT_SIGMA: f64 = 20.0;

/// A closed interval of video time, in seconds. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct EvidenceSpan {
    start: f64,
    end: f64,
}

impl EvidenceSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::validation(format!("non-finite span [{start}, {end}]")));
        }
        if start < 0.0 || start >= end {
            return Err(Error::validation(format!(
                "invalid span [{start}, {end}]: need 0 <= start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_within(&self, duration: f64) -> Result<()> {
        if self.end > duration {
            return Err(Error::validation(format!(
                "span [{}, {}] exceeds video duration {duration}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Overlap with positive measure. Spans that only touch at an endpoint do not overlap.
    pub fn overlaps(&self, other: &EvidenceSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl TryFrom<[f64; 2]> for EvidenceSpan {
    type Error = Error;

    fn try_from([start, end]: [f64; 2]) -> Result<Self> {
        EvidenceSpan::new(start, end)
    }
}

impl From<EvidenceSpan> for [f64; 2] {
    fn from(span: EvidenceSpan) -> Self {
        [span.start, span.end]
    }
}

/// An open visible interval `(start, end)` left over after masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains_strictly(&self, t: f64) -> bool {
        t > self.start && t < self.end
    }
}

impl From<[f64; 2]> for Interval {
    fn from([start, end]: [f64; 2]) -> Self {
        Interval { start, end }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(iv: Interval) -> Self {
        [iv.start, iv.end]
    }
}

/// Widens `span` by `duration / sigma` on both sides, clamped to `[0, duration]`.
pub fn extend_span(span: EvidenceSpan, duration: f64, sigma: f64) -> Result<EvidenceSpan> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("sigma must be > 0, got {sigma}")));
    }
    if !(duration > 0.0) {
        return Err(Error::validation(format!("duration must be > 0, got {duration}")));
    }
    span.check_within(duration)?;
    let pad = duration / sigma;
    EvidenceSpan::new((span.start - pad).max(0.0), (span.end + pad).min(duration))
}

/// Sorted union of spans; overlapping or touching spans are merged.
pub fn merge_spans(spans: &[EvidenceSpan]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = spans.iter().map(|s| (s.start, s.end)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// Total measure of the union of `spans`.
pub fn union_measure(spans: &[EvidenceSpan]) -> f64 {
    merge_spans(spans).iter().map(|(s, e)| e - s).sum()
}

/// Complement of the excluded spans within `[0, duration]`.
pub fn visible_timeline(duration: f64, excluded: &[EvidenceSpan]) -> Result<Vec<Interval>> {
    if !(duration > 0.0) {
        return Err(Error::validation(format!("duration must be > 0, got {duration}")));
    }
    for span in excluded {
        span.check_within(duration)?;
    }
    let mut visible = Vec::new();
    let mut cursor = 0.0;
    for (s, e) in merge_spans(excluded) {
        if s > cursor {
            visible.push(Interval { start: cursor, end: s });
        }
        cursor = cursor.max(e);
    }
    if duration > cursor {
        visible.push(Interval { start: cursor, end: duration });
    }
    Ok(visible)
}

/// Places `k` timestamps at bin midpoints of the concatenated visible timeline.
pub fn sample_frames(visible: &[Interval], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::validation("frame count must be >= 1"));
    }
    let intervals: Vec<Interval> = visible.iter().copied().filter(|iv| !iv.is_empty()).collect();
    let total: f64 = intervals.iter().map(Interval::len).sum();
    if intervals.is_empty() || !(total > 0.0) {
        return Err(Error::validation("fully masked video"));
    }

    let mut out = Vec::with_capacity(k);
    let mut idx = 0;
    let mut offset = 0.0;
    for i in 0..k {
        let pos = (2 * i + 1) as f64 * total / (2 * k) as f64;
        // advance while the position lies at or past the end of the current interval
        while idx + 1 < intervals.len() && pos >= offset + intervals[idx].len() {
            offset += intervals[idx].len();
            idx += 1;
        }
        let iv = intervals[idx];
        let mut t = iv.start + (pos - offset);
        if !iv.contains_strictly(t) {
            t = iv.start + 0.5 * iv.len();
        }
        out.push(t);
    }
    Ok(out)
}

/// A context span may feed clues only if it has no positive-measure overlap with any
/// excluded span.
pub fn check_clue_eligibility(context: &EvidenceSpan, excluded: &[EvidenceSpan]) -> bool {
    excluded.iter().all(|ex| !context.overlaps(ex))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: f64, e: f64) -> EvidenceSpan {
        EvidenceSpan::new(s, e).unwrap()
    }

    fn pairs(v: &[Interval]) -> Vec<[f64; 2]> {
        v.iter().map(|&iv| iv.into()).collect()
    }

    #[test]
    fn extension_examples() {
        assert_eq!(extend_span(span(10.0, 20.0), 60.0, 20.0).unwrap(), span(7.0, 23.0));
        assert_eq!(extend_span(span(0.0, 5.0), 60.0, 20.0).unwrap(), span(0.0, 8.0));
        assert_eq!(extend_span(span(55.0, 60.0), 60.0, 20.0).unwrap(), span(52.0, 60.0));
    }

    #[test]
    fn extension_rejects_bad_input() {
        assert!(EvidenceSpan::new(5.0, 5.0).is_err());
        assert!(EvidenceSpan::new(-1.0, 5.0).is_err());
        assert!(extend_span(span(50.0, 70.0), 60.0, 20.0).is_err());
        assert!(extend_span(span(1.0, 2.0), 60.0, 0.0).is_err());
    }

    #[test]
    fn visible_examples() {
        assert_eq!(pairs(&visible_timeline(60.0, &[span(7.0, 23.0)]).unwrap()), vec![[0.0, 7.0], [23.0, 60.0]]);
        assert!(visible_timeline(60.0, &[span(0.0, 60.0)]).unwrap().is_empty());
        assert_eq!(
            pairs(&visible_timeline(60.0, &[span(10.0, 20.0), span(15.0, 30.0)]).unwrap()),
            vec![[0.0, 10.0], [30.0, 60.0]]
        );
        assert_eq!(pairs(&visible_timeline(10.0, &[]).unwrap()), vec![[0.0, 10.0]]);
    }

    #[test]
    fn frame_examples() {
        let iv = |s, e| Interval { start: s, end: e };
        assert_eq!(sample_frames(&[iv(0.0, 8.0)], 4).unwrap(), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(sample_frames(&[iv(0.0, 4.0), iv(6.0, 10.0)], 4).unwrap(), vec![1.0, 3.0, 7.0, 9.0]);
        let eight = sample_frames(&[iv(0.0, 60.0)], 8).unwrap();
        let expected: Vec<f64> = (0..8).map(|i| 3.75 + 7.5 * i as f64).collect();
        assert_eq!(eight, expected);
        assert!(sample_frames(&[], 4).is_err());
        assert!(sample_frames(&[iv(0.0, 1.0)], 0).is_err());
    }

    #[test]
    fn junction_sample_is_pushed_inside() {
        let iv = |s, e| Interval { start: s, end: e };
        let visible = [iv(0.0, 4.0), iv(6.0, 10.0)];
        let t = sample_frames(&visible, 1).unwrap();
        assert!(visible.iter().any(|v| v.contains_strictly(t[0])), "{t:?}");
    }

    #[test]
    fn eligibility_examples() {
        let ex = [span(7.0, 23.0)];
        assert!(check_clue_eligibility(&span(0.0, 6.0), &ex));
        assert!(!check_clue_eligibility(&span(5.0, 9.0), &ex));
        assert!(check_clue_eligibility(&span(23.0, 30.0), &ex));
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = span(1.5, 2.25);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[1.5,2.25]");
        assert!(serde_json::from_str::<EvidenceSpan>("[3.0,1.0]").is_err());
    }
}
