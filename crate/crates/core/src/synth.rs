//! Seeded synthetic data: frame features, a smoke-test corpus, and a separable
//! clue-relevance training set.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{sample_frames, visible_timeline, ClueAnnotation, EvidenceSpan, IVQAItem};
use crate::error::Result;
use crate::nn::embed::fnv1a;
use crate::vem::FrameFeatures;

/// N(0, 1) frame tokens, one `[tokens_per_frame x d_visual]` block per timestamp.
pub fn synthetic_frames(timestamps: &[f64], tokens_per_frame: usize, d_visual: usize, seed: u64) -> FrameFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn((timestamps.len(), tokens_per_frame, d_visual), || {
        StandardNormal.sample(&mut rng)
    });
    FrameFeatures::new(data, timestamps.to_vec()).expect("timestamps from sample_frames are sorted")
}

/// Samples `n_frames` visible timestamps for `item` and generates features seeded by
/// the item id.
pub fn item_frames(item: &IVQAItem, n_frames: usize, tokens_per_frame: usize, d_visual: usize) -> Result<FrameFeatures> {
    let visible = visible_timeline(item.duration, &item.excluded_spans)?;
    let ts = sample_frames(&visible, n_frames)?;
    Ok(synthetic_frames(&ts, tokens_per_frame, d_visual, fnv1a(item.item_id.as_bytes())))
}

const SUBJECTS: [&str; 6] = ["boy", "girl", "man", "woman", "chef", "dog"];
const ACTIONS: [&str; 8] = ["climbs", "waves", "pours", "jumps", "runs", "paints", "reads", "sings"];
const GOALS: [&str; 8] = ["practice", "greet", "cook", "celebrate", "escape", "decorate", "study", "perform"];
const DISTRACTORS: [&str; 8] = ["sleep", "shop", "swim", "drive", "knit", "garden", "fish", "travel"];

/// A small multi-choice corpus with labeled clues, one video per item.
pub fn smoke_dataset(n_items: usize, seed: u64) -> Vec<IVQAItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items)
        .map(|i| {
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            let k = rng.random_range(0..ACTIONS.len());
            let duration = rng.random_range(70.0..180.0_f64).round();
            let center = rng.random_range(40.0..duration - 20.0);
            let excluded = EvidenceSpan::new(center - 20.0, (center + 20.0).min(duration)).expect("ordered span");
            let before = EvidenceSpan::new(0.0, (center - 30.0).max(1.0)).expect("ordered span");
            let mut options: Vec<String> = vec![GOALS[k].to_string()];
            let mut pool: Vec<&str> = DISTRACTORS.to_vec();
            pool.shuffle(&mut rng);
            options.extend(pool.iter().take(3).map(|s| s.to_string()));
            options.shuffle(&mut rng);
            let answer_index = options.iter().position(|o| o == GOALS[k]);
            let distractor = ACTIONS[(k + 1 + rng.random_range(0..ACTIONS.len() - 1)) % ACTIONS.len()];
            let clues = vec![
                ClueAnnotation::new(format!("{subject} {}", ACTIONS[k]), GOALS[k], before).with_label(1),
                ClueAnnotation::new(format!("{subject} {distractor}"), "pass the time", before).with_label(0),
            ];
            IVQAItem {
                item_id: format!("smoke-{i:03}"),
                video_id: format!("video-{i:03}"),
                duration,
                excluded_spans: vec![excluded],
                question: format!("Why does the {subject} {} in the video?", ACTIONS[k].trim_end_matches('s')),
                options,
                answer_index,
                answer: Some(GOALS[k].to_string()),
                clues,
                open_ended_eligible: true,
            }
        })
        .collect()
}

pub const TOPIC_WORDS: [&str; 8] = ["guitar", "ladder", "kettle", "bicycle", "camera", "garden", "ball", "brush"];
pub const FILLER_WORDS: [&str; 8] = ["quietly", "slowly", "nearby", "often", "again", "later", "around", "briefly"];

/// Clue-relevance data where a clue is relevant exactly when its intent contains
/// the question's topic word. Relevant intents pair the topic with a filler word,
/// irrelevant intents use two filler words, so mean-pooled intent embeddings are
/// linearly separable.
///
/// All clues of one item share a label (alternating across items). The matched
/// relation loss is blind to which clue carries which label inside an item, so
/// mixed-label items would only supervise the label count.
pub fn separable_relation_dataset(n_items: usize, clues_per_item: usize, seed: u64) -> Vec<IVQAItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = EvidenceSpan::new(0.0, 10.0).expect("ordered span");
    let excluded = EvidenceSpan::new(40.0, 60.0).expect("ordered span");
    (0..n_items)
        .map(|i| {
            let topic = TOPIC_WORDS[rng.random_range(0..TOPIC_WORDS.len())];
            let labels = vec![u8::from(i % 2 == 0); clues_per_item];
            let mut filler = || FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())];
            let clues = labels
                .iter()
                .map(|&label| {
                    let intent = if label == 1 { format!("{topic} {}", filler()) } else { format!("{} {}", filler(), filler()) };
                    ClueAnnotation::new(format!("person moves {}", filler()), intent, span).with_label(label)
                })
                .collect();
            IVQAItem {
                item_id: format!("sep-{i:04}"),
                video_id: format!("sep-video-{i:04}"),
                duration: 100.0,
                excluded_spans: vec![excluded],
                question: format!("Why is the {topic} used?"),
                options: vec![],
                answer_index: None,
                answer: Some(format!("to use the {topic}")),
                clues,
                open_ended_eligible: true,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::content_tokens;

    #[test]
    fn smoke_items_are_valid_and_seeded() {
        let a = smoke_dataset(20, 3);
        assert_eq!(a, smoke_dataset(20, 3));
        for item in &a {
            item.validate().unwrap();
            assert_eq!(item.options[item.answer_index.unwrap()], item.answer.clone().unwrap());
        }
    }

    #[test]
    fn separable_labels_follow_topic_overlap() {
        for item in separable_relation_dataset(30, 4, 1) {
            item.validate().unwrap();
            let q = content_tokens(&item.question);
            for clue in &item.clues {
                let shares = content_tokens(&clue.intent).iter().any(|t| q.contains(t));
                assert_eq!(shares, clue.relation_label == Some(1));
            }
        }
    }

    #[test]
    fn item_frames_avoid_masked_evidence() {
        let item = &smoke_dataset(1, 9)[0];
        let frames = item_frames(item, 8, 2, 4).unwrap();
        frames.check_visible(&visible_timeline(item.duration, &item.excluded_spans).unwrap()).unwrap();
    }
}
