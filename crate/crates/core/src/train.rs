//! Desk-scale trainer: relation loss plus a proxy answer-generation loss, combined
//! with the epoch-decayed weighting and optimized with Adam.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aim::{
    embed_clues, hallucination_verify_cached, label_to_class, refine_clues, relation_loss, relation_loss_grad,
    ClassifierCache, ClueCandidate, LossSchedule, LossWeights, RelationLogits,
};
use crate::checkpoint::NamedArrays;
use crate::dataset::IVQAItem;
use crate::error::{Error, Result};
use crate::model::{IrmModel, ModelConfig};
use crate::nn::embed::fnv1a;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::{add_scaled, assign_params, flatten_params, join_name, AttentionCache, Linear, Params, TextEmbedder};
use crate::par::{self, ExecMode};
use crate::synth::item_frames;
use crate::text::tokens;
use crate::vem::{compressor_instruction, enhance_cached, CompressorCache, FrameFeatures};

/// Model parameters plus the proxy decoder over answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: IrmModel,
    /// Mean enhanced visual token to hashed answer-token logits.
    pub decoder: Linear,
}

impl TrainState {
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let model = IrmModel::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_c0de);
        let decoder = Linear::init(&mut rng, model.config.d_model, vocab_size);
        Ok(Self { model, decoder })
    }

    pub fn zeros_like(&self) -> Self {
        Self { model: self.model.zeros_like(), decoder: self.decoder.zeros_like() }
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.out_dim()
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let mut pack = NamedArrays::from_params(self, "");
        pack.metadata.insert(
            "model_config".into(),
            serde_json::to_string(&self.model.config).expect("config serializes"),
        );
        pack.metadata.insert("vocab_size".into(), self.vocab_size().to_string());
        pack
    }

    pub fn from_arrays(pack: &NamedArrays) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(
            pack.metadata.get("model_config").ok_or_else(|| Error::validation("checkpoint lacks model_config"))?,
        )?;
        let vocab = pack
            .metadata
            .get("vocab_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::validation("checkpoint lacks vocab_size"))?;
        let mut state = Self::init(config, vocab, 0)?;
        pack.load_into(&mut state, "")?;
        Ok(state)
    }
}

impl Params for TrainState {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.model.visit(&join_name(prefix, "model"), f);
        self.decoder.visit(&join_name(prefix, "decoder"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.model.visit_mut(&join_name(prefix, "model"), f);
        self.decoder.visit_mut(&join_name(prefix, "decoder"), f);
    }
}

pub fn answer_targets(answer: &str, vocab_size: usize) -> Vec<usize> {
    tokens(answer).iter().map(|t| (fnv1a(t.as_bytes()) % vocab_size as u64) as usize).collect()
}

/// Losses, relation predictions, and weighted gradients for one item.
#[derive(Debug, Clone)]
pub struct ItemStep {
    pub gen_loss: f64,
    pub rel_loss: f64,
    pub correct: usize,
    pub n_clues: usize,
    pub grads: TrainState,
}

struct Forward {
    q_v: Array2<f64>,
    comp_cache: CompressorCache,
    verify_cache: Option<AttentionCache>,
    cls_cache: Option<ClassifierCache>,
    logits: RelationLogits,
    targets: Vec<u8>,
    assignment: Vec<(usize, usize)>,
    enh_cache: Option<AttentionCache>,
    n_visual: usize,
    pooled: Array2<f64>,
    d_dec: Vec<f64>,
    gen_loss: f64,
    rel_loss: f64,
}

fn forward(state: &TrainState, item: &IVQAItem, frames: &FrameFeatures) -> Result<Forward> {
    let model = &state.model;
    let embedder = model.text_embedder();
    let clues: Vec<ClueCandidate> = item.clues.iter().map(ClueCandidate::from).collect();
    let targets: Vec<u8> = item
        .clues
        .iter()
        .map(|c| c.relation_label.map(label_to_class))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::validation(format!("{}: clue without relation label", item.item_id)))?;

    let (q_v, comp_cache) = model.compressor.forward_cached(frames, &compressor_instruction(&item.question))?;
    let x_v = model.projection.forward(&q_v)?;
    let bank = embed_clues(&clues, &embedder);
    let question = embedder.embed(&item.question);
    let (verified, verify_cache) = hallucination_verify_cached(&bank, &x_v, &model.verify)?;
    let (logits, cls_cache) = model.relation.forward_cached(&bank, &verified, &question)?;
    let (rel_loss, assignment) = relation_loss(&logits, &targets)?;
    let refinement = refine_clues(&bank, &logits)?;
    let (x_v_enh, enh_cache) = enhance_cached(&x_v, &refinement.bank, &model.enhance)?;

    let pooled = x_v_enh.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
    let dec_logits = state.decoder.forward(&pooled)?;
    let gen_targets = answer_targets(item.answer_text().unwrap_or(""), state.vocab_size());
    let (gen_loss, d_dec) = if gen_targets.is_empty() {
        (0.0, vec![0.0; state.vocab_size()])
    } else {
        softmax_cross_entropy(dec_logits.row(0).as_slice().expect("contiguous"), &gen_targets)
    };
    Ok(Forward {
        q_v,
        comp_cache,
        verify_cache,
        cls_cache,
        logits,
        targets,
        assignment,
        enh_cache,
        n_visual: x_v_enh.nrows(),
        pooled,
        d_dec,
        gen_loss,
        rel_loss,
    })
}

/// `(gen_loss, rel_loss)` without gradients.
pub fn item_losses(state: &TrainState, item: &IVQAItem, frames: &FrameFeatures) -> Result<(f64, f64)> {
    forward(state, item, frames).map(|f| (f.gen_loss, f.rel_loss))
}

/// Forward and backward pass for one item. `weights` scales the two loss gradients.
pub fn item_step(
    state: &TrainState,
    item: &IVQAItem,
    frames: &FrameFeatures,
    weights: LossWeights,
) -> Result<ItemStep> {
    let model = &state.model;
    let f = forward(state, item, frames)?;
    let mut grads = state.zeros_like();

    let d_dec = Array2::from_shape_vec((1, f.d_dec.len()), f.d_dec).expect("row vector") * weights.generation_weight;
    let (g_dec, d_pooled) = state.decoder.backward(&f.pooled, &d_dec);
    grads.decoder = g_dec;
    let d_enh = Array2::from_shape_fn((f.n_visual, d_pooled.ncols()), |(_, c)| d_pooled[[0, c]] / f.n_visual as f64);
    let mut d_xv = match &f.enh_cache {
        Some(cache) => {
            let (g, dq, _) = model.enhance.backward(cache, &d_enh);
            grads.model.enhance = g;
            dq
        }
        None => d_enh,
    };
    if let (Some(cls_cache), Some(verify_cache)) = (&f.cls_cache, &f.verify_cache) {
        let d_logits = relation_loss_grad(&f.logits, &f.targets, &f.assignment) * weights.relation_weight;
        let (g_rel, d_verified) = model.relation.backward(cls_cache, &d_logits);
        let (g_ver, _, d_kv) = model.verify.backward(verify_cache, &d_verified);
        grads.model.relation = g_rel;
        grads.model.verify = g_ver;
        d_xv += &d_kv;
    }
    let (g_proj, d_qv) = model.projection.backward(&f.q_v, &d_xv);
    grads.model.projection = g_proj;
    grads.model.compressor = model.compressor.backward(&f.comp_cache, &d_qv);

    let predicted = f.logits.predicted_labels();
    let correct = predicted.iter().zip(&f.targets).filter(|(p, t)| p == t).count();
    Ok(ItemStep { gen_loss: f.gen_loss, rel_loss: f.rel_loss, correct, n_clues: f.targets.len(), grads })
}

/// Adam over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut impl Params, grads: &impl Params) -> Result<()> {
        let mut p = flatten_params(params);
        let g = flatten_params(grads);
        if p.len() != self.m.len() || g.len() != p.len() {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
        assign_params(params, &p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub frame_count: usize,
    pub vocab_size: usize,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub schedule: LossSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            learning_rate: 0.01,
            frame_count: 8,
            vocab_size: 64,
            max_steps: Some(200),
            schedule: LossSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub generation_weight: f64,
    pub relation_weight: f64,
    pub gen_loss: f64,
    pub rel_loss: f64,
    pub combined_loss: f64,
    /// Training-set relation accuracy during the epoch, percent.
    pub relation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

pub fn prepare_frames(items: &[IVQAItem], config: &ModelConfig, n_frames: usize, mode: ExecMode) -> Result<Vec<FrameFeatures>> {
    par::map(mode, items, |item| item_frames(item, n_frames, config.tokens_per_frame, config.d_visual))
        .into_iter()
        .collect()
}

pub fn train(
    items: &[IVQAItem],
    model_config: ModelConfig,
    config: &TrainConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if let Some(item) = items.iter().find(|i| !i.has_relation_labels()) {
        return Err(Error::validation(format!("{}: training items need relation labels on every clue", item.item_id)));
    }
    if config.batch_size == 0 || config.vocab_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::validation("batch size, vocabulary size and learning rate must be positive"));
    }
    let frames = prepare_frames(items, &model_config, config.frame_count, mode)?;
    let mut state = TrainState::init(model_config, config.vocab_size, seed)?;
    let mut adam = Adam::new(config.learning_rate, crate::nn::param_count(&state));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    'epochs: for epoch in 0..config.epochs {
        let weights = config.schedule.weights(epoch);
        order.shuffle(&mut rng);
        let (mut gen_sum, mut rel_sum, mut correct, mut total, mut seen) = (0.0, 0.0, 0, 0, 0);
        let mut epoch_steps = 0;
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let results = par::map(mode, batch, |&i| item_step(&state, &items[i], &frames[i], weights));
            let mut grads = state.zeros_like();
            for r in results {
                let r = r?;
                gen_sum += r.gen_loss;
                rel_sum += r.rel_loss;
                correct += r.correct;
                total += r.n_clues;
                seen += 1;
                add_scaled(&mut grads, &r.grads, 1.0 / batch.len() as f64);
            }
            adam.step(&mut state, &grads)?;
            steps += 1;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break 'epochs;
        }
        let (gen_loss, rel_loss) = (gen_sum / seen as f64, rel_sum / seen as f64);
        log.push(EpochLog {
            epoch,
            steps,
            generation_weight: weights.generation_weight,
            relation_weight: weights.relation_weight,
            gen_loss,
            rel_loss,
            combined_loss: weights.generation_weight * gen_loss + weights.relation_weight * rel_loss,
            relation_accuracy: 100.0 * correct as f64 / total.max(1) as f64,
        });
    }
    Ok(TrainOutcome { state, log, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelationAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Per-clue relation accuracy of `model` on labeled items.
pub fn relation_accuracy(model: &IrmModel, items: &[IVQAItem], n_frames: usize, mode: ExecMode) -> Result<RelationAccuracy> {
    let frames = prepare_frames(items, &model.config, n_frames, mode)?;
    let embedder = model.text_embedder();
    let per_item = par::map_range(mode, items.len(), |i| -> Result<(usize, usize)> {
        let item = &items[i];
        let clues: Vec<ClueCandidate> = item.clues.iter().map(ClueCandidate::from).collect();
        let q_v = crate::vem::compress_visual(&frames[i], &compressor_instruction(&item.question), &model.compressor)?;
        let x_v = crate::vem::project(&q_v, &model.projection)?;
        let bank = embed_clues(&clues, &embedder);
        let verified = crate::aim::hallucination_verify(&bank, &x_v, &model.verify)?;
        let logits = model.relation.classify(&bank, &verified, &embedder.embed(&item.question))?;
        let correct = logits
            .predicted_labels()
            .iter()
            .zip(&item.clues)
            .filter(|(p, c)| c.relation_label.map(label_to_class) == Some(**p))
            .count();
        Ok((correct, clues.len()))
    });
    let (mut correct, mut total) = (0, 0);
    for r in per_item {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::validation("no labeled clues to score"));
    }
    Ok(RelationAccuracy { accuracy: 100.0 * correct as f64 / total as f64, correct, total })
}

/// Model sizes used for the synthetic relation task.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig { d_model: 32, head_count: 4, d_visual: 16, visual_head_count: 2, n_queries: 8, tokens_per_frame: 2, ..ModelConfig::default() }
}

pub fn weight_trace(log: &[EpochLog]) -> BTreeMap<usize, f64> {
    log.iter().map(|e| (e.epoch, e.relation_weight)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::separable_relation_dataset;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 8, head_count: 2, d_visual: 4, visual_head_count: 2, n_queries: 3, tokens_per_frame: 2, embed_seed: 3 }
    }

    #[test]
    fn short_run_is_deterministic_and_logs_weights() {
        let items = separable_relation_dataset(12, 4, 5);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, frame_count: 3, max_steps: None, ..TrainConfig::default() };
        let a = train(&items, tiny(), &cfg, 1, ExecMode::Parallel).unwrap();
        let b = train(&items, tiny(), &cfg, 1, ExecMode::Sequential).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(flatten_params(&a.state), flatten_params(&b.state));
        let w: Vec<f64> = a.log.iter().map(|e| e.relation_weight).collect();
        let expected: Vec<f64> = (0..3).map(|e| (2.0 - 0.05 * e as f64).max(0.0)).collect();
        assert_eq!(w, expected);
        assert!((w[1] - 1.95).abs() < 1e-12 && (w[2] - 1.9).abs() < 1e-12);
        assert_eq!(a.steps, 9);
    }

    #[test]
    fn unlabeled_items_are_rejected() {
        let mut items = separable_relation_dataset(2, 2, 5);
        items[1].clues[0].relation_label = None;
        assert!(train(&items, tiny(), &TrainConfig::default(), 1, ExecMode::Sequential).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let state = TrainState::init(tiny(), 16, 4).unwrap();
        let back = TrainState::from_arrays(&state.to_arrays()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn answer_targets_hash_tokens() {
        let t = answer_targets("to use the guitar", 64);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|&x| x < 64));
        assert!(answer_targets("", 64).is_empty());
    }
}
