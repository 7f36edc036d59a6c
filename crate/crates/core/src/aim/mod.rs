//! Action-intent clues: embedding, visual verification, relation classification,
//! matched relation loss, and refinement.

pub mod matching;

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use matching::{assignment_cost, hungarian_match};

use crate::dataset::ClueAnnotation;
use crate::error::{Error, Result};
use crate::nn::{
    binary_cross_entropy, binary_cross_entropy_grad, join_name, mean_pool_backward, mean_pool_segments, vstack,
    AttentionBlock, AttentionCache, EmbeddingSeq, Linear, Params, TextEmbedder,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClueCandidate {
    pub action: String,
    pub intent: String,
}

impl ClueCandidate {
    pub fn new(action: impl Into<String>, intent: impl Into<String>) -> Self {
        Self { action: action.into().trim().to_string(), intent: intent.into().trim().to_string() }
    }
}

impl From<&ClueAnnotation> for ClueCandidate {
    fn from(c: &ClueAnnotation) -> Self {
        ClueCandidate::new(&c.action, &c.intent)
    }
}

/// Embedded clue set: actions and intents concatenated along the token axis, one
/// boundary per clue in both.
#[derive(Debug, Clone, PartialEq)]
pub struct ClueBank {
    pub actions: EmbeddingSeq,
    pub intents: EmbeddingSeq,
    pub n_clues: usize,
}

impl ClueBank {
    pub fn empty(d_model: usize) -> Self {
        Self {
            actions: EmbeddingSeq::new(Array2::zeros((0, d_model))),
            intents: EmbeddingSeq::new(Array2::zeros((0, d_model))),
            n_clues: 0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.actions.d_model()
    }

    /// Bank holding only the clues at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> ClueBank {
        let d = self.d_model();
        if indices.is_empty() {
            return ClueBank::empty(d);
        }
        let pick = |seq: &EmbeddingSeq| {
            let parts: Vec<Array2<f64>> = indices
                .iter()
                .map(|&i| {
                    let (a, b) = seq.boundaries[i];
                    seq.data.slice(s![a..b, ..]).to_owned()
                })
                .collect();
            EmbeddingSeq::concat(&parts, d)
        };
        ClueBank { actions: pick(&self.actions), intents: pick(&self.intents), n_clues: indices.len() }
    }

    /// `Cat(X_A, X_I)` along the token axis.
    pub fn concat_tokens(&self) -> Array2<f64> {
        vstack(&[&self.actions.data, &self.intents.data])
    }
}

pub fn embed_clues(clues: &[ClueCandidate], embedder: &dyn TextEmbedder) -> ClueBank {
    let d = embedder.dim();
    if clues.is_empty() {
        return ClueBank::empty(d);
    }
    let actions: Vec<Array2<f64>> = clues.iter().map(|c| embedder.embed(&c.action)).collect();
    let intents: Vec<Array2<f64>> = clues.iter().map(|c| embedder.embed(&c.intent)).collect();
    ClueBank {
        actions: EmbeddingSeq::concat(&actions, d),
        intents: EmbeddingSeq::concat(&intents, d),
        n_clues: clues.len(),
    }
}

/// Cross-attends the action tokens to the global visual tokens. The result keeps the
/// action boundaries.
pub fn hallucination_verify(bank: &ClueBank, visual: &Array2<f64>, block: &AttentionBlock) -> Result<EmbeddingSeq> {
    hallucination_verify_cached(bank, visual, block).map(|(seq, _)| seq)
}

pub fn hallucination_verify_cached(
    bank: &ClueBank,
    visual: &Array2<f64>,
    block: &AttentionBlock,
) -> Result<(EmbeddingSeq, Option<AttentionCache>)> {
    if visual.ncols() != bank.d_model() {
        return Err(Error::shape(format!(
            "visual features have {} dims, clues have {}",
            visual.ncols(),
            bank.d_model()
        )));
    }
    if bank.n_clues == 0 {
        return Ok((bank.actions.clone(), None));
    }
    let (out, cache) = block.forward_cached(&bank.actions.data, visual)?;
    Ok((EmbeddingSeq { data: out, boundaries: bank.actions.boundaries.clone() }, Some(cache)))
}

/// Per-clue scores; column 0 is "relevant", column 1 "irrelevant".
#[derive(Debug, Clone, PartialEq)]
pub struct RelationLogits {
    pub scores: Array2<f64>,
}

impl RelationLogits {
    pub fn n_clues(&self) -> usize {
        self.scores.nrows()
    }

    pub fn row(&self, i: usize) -> [f64; 2] {
        [self.scores[[i, 0]], self.scores[[i, 1]]]
    }

    /// 0 when the relevant score wins or ties, else 1.
    pub fn predicted_labels(&self) -> Vec<u8> {
        (0..self.n_clues()).map(|i| u8::from(self.scores[[i, 0]] < self.scores[[i, 1]])).collect()
    }
}

/// Relation labels in the data use 1 for "contributes"; logit column 0 is "relevant".
pub fn label_to_class(label: u8) -> u8 {
    1 - label.min(1)
}

/// Cross- and self-attention over intent-plus-question tokens followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationClassifier {
    pub cross: AttentionBlock,
    pub self_attn: AttentionBlock,
    pub head: Linear,
}

pub struct ClassifierCache {
    cross: AttentionCache,
    self_attn: AttentionCache,
    pooled: Array2<f64>,
    intent_boundaries: Vec<(usize, usize)>,
    n_intent: usize,
    n_verified: usize,
}

impl RelationClassifier {
    /// Head weights start at zero, so initial logits equal the head bias.
    pub fn init(rng: &mut impl Rng, d_model: usize, heads: usize) -> Result<Self> {
        let mut head = Linear::init(rng, 2 * d_model, 2);
        head.weight.fill(0.0);
        Ok(Self {
            cross: AttentionBlock::init(rng, d_model, heads)?,
            self_attn: AttentionBlock::init(rng, d_model, heads)?,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self { cross: self.cross.zeros_like(), self_attn: self.self_attn.zeros_like(), head: self.head.zeros_like() }
    }

    pub fn classify(&self, bank: &ClueBank, verified: &EmbeddingSeq, question: &Array2<f64>) -> Result<RelationLogits> {
        self.forward_cached(bank, verified, question).map(|(logits, _)| logits)
    }

    pub fn forward_cached(
        &self,
        bank: &ClueBank,
        verified: &EmbeddingSeq,
        question: &Array2<f64>,
    ) -> Result<(RelationLogits, Option<ClassifierCache>)> {
        let d = bank.d_model();
        if verified.d_model() != d || question.ncols() != d {
            return Err(Error::shape("clue, verified-clue and question embeddings must share d_model"));
        }
        if bank.n_clues == 0 {
            return Ok((RelationLogits { scores: Array2::zeros((0, 2)) }, None));
        }
        let n_intent = bank.intents.n_tokens();
        let intent_q = vstack(&[&bank.intents.data, question]);
        let verified_q = vstack(&[&verified.data, question]);
        let (cross_out, cross_cache) = self.cross.forward_cached(&intent_q, &verified_q)?;
        let (self_out, self_cache) = self.self_attn.forward_cached(&intent_q, &intent_q)?;

        let mut features = Array2::zeros((n_intent, 2 * d));
        features.slice_mut(s![.., ..d]).assign(&cross_out.slice(s![..n_intent, ..]));
        features.slice_mut(s![.., d..]).assign(&self_out.slice(s![..n_intent, ..]));
        let pooled = mean_pool_segments(&EmbeddingSeq { data: features, boundaries: bank.intents.boundaries.clone() })?;
        let scores = self.head.forward(&pooled)?;
        let cache = ClassifierCache {
            cross: cross_cache,
            self_attn: self_cache,
            pooled,
            intent_boundaries: bank.intents.boundaries.clone(),
            n_intent,
            n_verified: verified.n_tokens(),
        };
        Ok((RelationLogits { scores }, Some(cache)))
    }

    /// Returns `(dL/dparams, dL/dverified)`. Gradients into the intent and question
    /// embeddings are dropped; the embedder is not trained.
    pub fn backward(&self, cache: &ClassifierCache, grad_logits: &Array2<f64>) -> (RelationClassifier, Array2<f64>) {
        let d = self.cross.d_model();
        let (g_head, d_pooled) = self.head.backward(&cache.pooled, grad_logits);
        let d_features = mean_pool_backward(&cache.intent_boundaries, cache.n_intent, &d_pooled);
        let rows = cache.n_intent + (cache.cross.weights[0].nrows() - cache.n_intent);
        let mut d_cross = Array2::zeros((rows, d));
        let mut d_self = Array2::zeros((rows, d));
        d_cross.slice_mut(s![..cache.n_intent, ..]).assign(&d_features.slice(s![.., ..d]));
        d_self.slice_mut(s![..cache.n_intent, ..]).assign(&d_features.slice(s![.., d..]));
        let (g_cross, _, d_verified_q) = self.cross.backward(&cache.cross, &d_cross);
        let (g_self, _) = self.self_attn.self_backward(&cache.self_attn, &d_self);
        let d_verified = d_verified_q.slice(s![..cache.n_verified, ..]).to_owned();
        (RelationClassifier { cross: g_cross, self_attn: g_self, head: g_head }, d_verified)
    }
}

impl Params for RelationClassifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.cross.visit(&join_name(prefix, "cross"), f);
        self.self_attn.visit(&join_name(prefix, "self"), f);
        self.head.visit(&join_name(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.cross.visit_mut(&join_name(prefix, "cross"), f);
        self.self_attn.visit_mut(&join_name(prefix, "self"), f);
        self.head.visit_mut(&join_name(prefix, "head"), f);
    }
}

/// Cost matrix `cost[i][j] = CE(logits row i, target j)`.
///
/// Targets index logit columns (0 = relevant, 1 = irrelevant); convert dataset
/// relation labels with [`label_to_class`] first.
pub fn relation_cost(logits: &RelationLogits, targets: &[u8]) -> Vec<Vec<f64>> {
    (0..logits.n_clues())
        .map(|i| targets.iter().map(|&t| binary_cross_entropy(logits.row(i), t.min(1))).collect())
        .collect()
}

/// Sum of cross-entropies over the minimum-cost matching of predictions to targets
/// (logit-column convention). Unmatched predictions or targets contribute nothing.
pub fn relation_loss(logits: &RelationLogits, labels: &[u8]) -> Result<(f64, Vec<(usize, usize)>)> {
    if logits.n_clues() == 0 || labels.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let cost = relation_cost(logits, labels);
    let assignment = hungarian_match(&cost)?;
    let mut by_label = assignment.clone();
    by_label.sort_unstable_by_key(|&(_, j)| j);
    let loss = by_label.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok((loss, assignment))
}

/// dL/dlogits with the matching held fixed.
pub fn relation_loss_grad(logits: &RelationLogits, labels: &[u8], assignment: &[(usize, usize)]) -> Array2<f64> {
    let mut grad = Array2::zeros((logits.n_clues(), 2));
    for &(i, j) in assignment {
        let g = binary_cross_entropy_grad(logits.row(i), labels[j].min(1));
        grad[[i, 0]] += g[0];
        grad[[i, 1]] += g[1];
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub bank: ClueBank,
    /// Indices into the input candidate list, ascending.
    pub kept: Vec<usize>,
}

/// Keeps clue `i` when `scores[i,0] >= scores[i,1]`; if nothing qualifies, keeps the
/// single clue with the largest margin `scores[i,0] - scores[i,1]`.
pub fn refine_clues(bank: &ClueBank, logits: &RelationLogits) -> Result<Refinement> {
    let kept = select_relevant(logits)?;
    if logits.n_clues() != bank.n_clues {
        return Err(Error::shape(format!("{} logit rows for {} clues", logits.n_clues(), bank.n_clues)));
    }
    Ok(Refinement { bank: bank.select(&kept), kept })
}

pub fn select_relevant(logits: &RelationLogits) -> Result<Vec<usize>> {
    let n = logits.n_clues();
    if logits.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite relation logits"));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| logits.scores[[i, 0]] >= logits.scores[[i, 1]]).collect();
    if !kept.is_empty() || n == 0 {
        return Ok(kept);
    }
    let margin = |i: usize| logits.scores[[i, 0]] - logits.scores[[i, 1]];
    let best = (1..n).fold(0, |best, i| if margin(i) > margin(best) { i } else { best });
    Ok(vec![best])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub generation_weight: f64,
    pub relation_weight: f64,
    pub epoch: usize,
}

/// Relation-loss weight decays linearly per epoch and floors at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSchedule {
    pub generation_weight: f64,
    pub initial_relation_weight: f64,
    pub relation_decay_per_epoch: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self { generation_weight: 1.0, initial_relation_weight: 2.0, relation_decay_per_epoch: 0.05 }
    }
}

impl LossSchedule {
    pub fn weights(&self, epoch: usize) -> LossWeights {
        LossWeights {
            generation_weight: self.generation_weight,
            relation_weight: (self.initial_relation_weight - self.relation_decay_per_epoch * epoch as f64).max(0.0),
            epoch,
        }
    }

    pub fn combined(&self, gen_loss: f64, rel_loss: f64, epoch: usize) -> f64 {
        let w = self.weights(epoch);
        w.generation_weight * gen_loss + w.relation_weight * rel_loss
    }
}

pub fn loss_schedule(epoch: usize) -> LossWeights {
    LossSchedule::default().weights(epoch)
}

pub fn combined_loss(gen_loss: f64, rel_loss: f64, epoch: usize) -> f64 {
    LossSchedule::default().combined(gen_loss, rel_loss, epoch)
}

/// Debug dump line for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClueDump {
    pub action: String,
    pub intent: String,
    pub kept: bool,
    pub logits: [f64; 2],
}

pub fn dump_clues(clues: &[ClueCandidate], logits: &RelationLogits, kept: &[usize]) -> Vec<ClueDump> {
    clues
        .iter()
        .enumerate()
        .map(|(i, c)| ClueDump {
            action: c.action.clone(),
            intent: c.intent.clone(),
            kept: kept.contains(&i),
            logits: if i < logits.n_clues() { logits.row(i) } else { [f64::NAN; 2] },
        })
        .collect()
}
