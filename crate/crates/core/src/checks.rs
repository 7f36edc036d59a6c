//! Finite-difference checks for every differentiable operation in the model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aim::{embed_clues, hallucination_verify_cached, relation_loss, relation_loss_grad, ClueCandidate, RelationClassifier, RelationLogits};
use crate::aim::LossWeights;
use crate::model::ModelConfig;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::{
    assign_params, binary_cross_entropy, binary_cross_entropy_grad, grad_check, mean_pool_backward, mean_pool_segments,
    uniform_matrix, AttentionBlock, EmbeddingSeq, GradCheckReport, HashEmbedder, Linear, Params, TextEmbedder,
};
use crate::par::{self, ExecMode};
use crate::synth::{separable_relation_dataset, synthetic_frames};
use crate::train::{item_losses, item_step, TrainState};
use crate::vem::{enhance_cached, Compressor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 13] = [
    "linear",
    "self_attention",
    "cross_attention",
    "mean_pool",
    "binary_cross_entropy",
    "softmax_cross_entropy",
    "relation_classifier",
    "relation_loss",
    "hallucination_verify",
    "projection",
    "compressor",
    "enhance",
    "train_step",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeededReport {
    pub seed: u64,
    pub report: GradCheckReport,
}

fn named_params(module: &impl Params) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, view| out.push((name, view.iter().copied().collect())));
    out
}

fn with_values<M: Params + Clone>(module: &M, values: &[Vec<f64>]) -> M {
    let mut m = module.clone();
    assign_params(&mut m, &values.concat()).expect("same layout");
    m
}

fn mat(values: &[f64], like: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.raw_dim(), values.to_vec()).expect("same shape")
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

/// Checks a module's parameter gradients and the gradients of matrix inputs under
/// `loss = f(module, inputs)`.
fn check_module<M, F>(
    op: &str,
    module: &M,
    grads: &M,
    inputs: &[(&str, &Array2<f64>, &Array2<f64>)],
    loss: F,
    tolerance: f64,
) -> GradCheckReport
where
    M: Params + Clone,
    F: Fn(&M, &[Array2<f64>]) -> f64,
{
    let params = named_params(module);
    let n_params = params.len();
    let mut all = params;
    let mut analytic: Vec<Vec<f64>> = named_params(grads).into_iter().map(|(_, g)| g).collect();
    for (name, x, g) in inputs {
        all.push((format!("input.{name}"), x.iter().copied().collect()));
        analytic.push(g.iter().copied().collect());
    }
    grad_check(
        op,
        &all,
        &analytic,
        |values| {
            let m = with_values(module, &values[..n_params]);
            let xs: Vec<Array2<f64>> = inputs.iter().zip(&values[n_params..]).map(|((_, x, _), v)| mat(v, x)).collect();
            loss(&m, &xs)
        },
        tolerance,
    )
}

fn live_block(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionBlock {
    let mut block = AttentionBlock::init(rng, d, heads).expect("valid sizes");
    block.output = Linear::init(rng, d, d);
    block
}

fn clues(rng: &mut ChaCha8Rng) -> Vec<ClueCandidate> {
    const WORDS: [&str; 8] = ["boy", "climbs", "bars", "practice", "girl", "waves", "friend", "greet"];
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let (a, b) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let mut pick = |k: usize| (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
            let action = pick(a);
            ClueCandidate::new(action, pick(b))
        })
        .collect()
}

/// Runs the check for `op` at `seed` with `d_model = 8`.
pub fn check_op(op: &str, seed: u64, tolerance: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads) = (8, 2);
    match op {
        "linear" | "projection" => {
            let (fan_in, fan_out) = if op == "linear" { (5, 3) } else { (4, d) };
            let lin = Linear::init(&mut rng, fan_in, fan_out);
            let x = uniform_matrix(&mut rng, 3, fan_in, 1.0);
            let r = uniform_matrix(&mut rng, 3, fan_out, 1.0);
            let (g, dx) = lin.backward(&x, &r);
            check_module(op, &lin, &g, &[("x", &x, &dx)], |m, xs| dot(&m.forward(&xs[0]).unwrap(), &r), tolerance)
        }
        "self_attention" => {
            let block = live_block(&mut rng, d, heads);
            let x = uniform_matrix(&mut rng, 4, d, 1.0);
            let r = uniform_matrix(&mut rng, 4, d, 1.0);
            let (_, cache) = block.forward_cached(&x, &x).unwrap();
            let (g, dx) = block.self_backward(&cache, &r);
            check_module(op, &block, &g, &[("x", &x, &dx)], |m, xs| dot(&m.self_forward(&xs[0]).unwrap(), &r), tolerance)
        }
        "cross_attention" => {
            let block = live_block(&mut rng, d, heads);
            let q = uniform_matrix(&mut rng, 3, d, 1.0);
            let kv = uniform_matrix(&mut rng, 5, d, 1.0);
            let r = uniform_matrix(&mut rng, 3, d, 1.0);
            let (_, cache) = block.forward_cached(&q, &kv).unwrap();
            let (g, dq, dkv) = block.backward(&cache, &r);
            check_module(op, &block, &g, &[("query", &q, &dq), ("kv", &kv, &dkv)], |m, xs| dot(&m.forward(&xs[0], &xs[1]).unwrap(), &r), tolerance)
        }
        "mean_pool" => {
            let boundaries = vec![(0, 2), (2, 3), (3, 6)];
            let x = uniform_matrix(&mut rng, 6, d, 1.0);
            let r = uniform_matrix(&mut rng, 3, d, 1.0);
            let dx = mean_pool_backward(&boundaries, 6, &r);
            let pool = |x: &Array2<f64>| {
                mean_pool_segments(&EmbeddingSeq::with_boundaries(x.clone(), boundaries.clone()).unwrap()).unwrap()
            };
            check_module(op, &Linear::zeros(0, 0), &Linear::zeros(0, 0), &[("x", &x, &dx)], |_, xs| dot(&pool(&xs[0]), &r), tolerance)
        }
        "binary_cross_entropy" => {
            let logits = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let label = rng.random_range(0..2u8);
            let g = binary_cross_entropy_grad(logits, label);
            grad_check(op, &[("logits".into(), logits.to_vec())], &[g.to_vec()], |v| binary_cross_entropy([v[0][0], v[0][1]], label), tolerance)
        }
        "softmax_cross_entropy" => {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
            let (_, g) = softmax_cross_entropy(&logits, &targets);
            grad_check(op, &[("logits".into(), logits)], &[g], |v| softmax_cross_entropy(&v[0], &targets).0, tolerance)
        }
        "relation_classifier" => {
            let mut cls = RelationClassifier::init(&mut rng, d, heads).unwrap();
            cls.cross.output = Linear::init(&mut rng, d, d);
            cls.self_attn.output = Linear::init(&mut rng, d, d);
            cls.head = Linear::init(&mut rng, 2 * d, 2);
            let embedder = HashEmbedder::new(d, seed);
            let bank = embed_clues(&clues(&mut rng), &embedder);
            let question = embedder.embed("why does the boy climb");
            let verified = uniform_matrix(&mut rng, bank.actions.n_tokens(), d, 1.0);
            let seq = |v: &Array2<f64>| EmbeddingSeq::with_boundaries(v.clone(), bank.actions.boundaries.clone()).unwrap();
            let r = uniform_matrix(&mut rng, bank.n_clues, 2, 1.0);
            let (_, cache) = cls.forward_cached(&bank, &seq(&verified), &question).unwrap();
            let (g, dv) = cls.backward(&cache.unwrap(), &r);
            check_module(op, &cls, &g, &[("verified", &verified, &dv)], |m, xs| dot(&m.classify(&bank, &seq(&xs[0]), &question).unwrap().scores, &r), tolerance)
        }
        "relation_loss" => {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let scores = uniform_matrix(&mut rng, n, 2, 3.0);
            let labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
            let logits = RelationLogits { scores: scores.clone() };
            let (_, assignment) = relation_loss(&logits, &labels).unwrap();
            let g = relation_loss_grad(&logits, &labels, &assignment);
            check_module(op, &Linear::zeros(0, 0), &Linear::zeros(0, 0), &[("logits", &scores, &g)], |_, xs| {
                relation_loss(&RelationLogits { scores: xs[0].clone() }, &labels).unwrap().0
            }, tolerance)
        }
        "hallucination_verify" => {
            let block = live_block(&mut rng, d, heads);
            let bank = embed_clues(&clues(&mut rng), &HashEmbedder::new(d, seed));
            let visual = uniform_matrix(&mut rng, 4, d, 1.0);
            let r = uniform_matrix(&mut rng, bank.actions.n_tokens(), d, 1.0);
            let (_, cache) = hallucination_verify_cached(&bank, &visual, &block).unwrap();
            let (g, _, dvis) = block.backward(&cache.unwrap(), &r);
            check_module(op, &block, &g, &[("visual", &visual, &dvis)], |m, xs| {
                dot(&hallucination_verify_cached(&bank, &xs[0], m).unwrap().0.data, &r)
            }, tolerance)
        }
        "compressor" => {
            let config = ModelConfig { d_model: d, head_count: heads, d_visual: 4, visual_head_count: 2, n_queries: 3, tokens_per_frame: 2, embed_seed: seed };
            let mut comp = Compressor::init(&mut rng, &config).unwrap();
            comp.block.output = Linear::init(&mut rng, 4, 4);
            let frames = synthetic_frames(&[1.0, 2.0, 3.0], 2, 4, seed);
            let r = uniform_matrix(&mut rng, 3, 4, 1.0);
            let (_, cache) = comp.forward_cached(&frames, "extract clues").unwrap();
            let g = comp.backward(&cache, &r);
            check_module(op, &comp, &g, &[], |m, _| dot(&m.forward_cached(&frames, "extract clues").unwrap().0, &r), tolerance)
        }
        "enhance" => {
            let block = live_block(&mut rng, d, heads);
            let bank = embed_clues(&clues(&mut rng), &HashEmbedder::new(d, seed));
            let x_v = uniform_matrix(&mut rng, 4, d, 1.0);
            let r = uniform_matrix(&mut rng, 4, d, 1.0);
            let (_, cache) = enhance_cached(&x_v, &bank, &block).unwrap();
            let (g, dx, _) = block.backward(&cache.unwrap(), &r);
            check_module(op, &block, &g, &[("x_v", &x_v, &dx)], |m, xs| dot(&enhance_cached(&xs[0], &bank, m).unwrap().0, &r), tolerance)
        }
        "train_step" => {
            let config = ModelConfig { d_model: d, head_count: heads, d_visual: 4, visual_head_count: 2, n_queries: 3, tokens_per_frame: 2, embed_seed: seed };
            let mut state = TrainState::init(config, 16, seed).unwrap();
            for block in [&mut state.model.compressor.block, &mut state.model.verify, &mut state.model.relation.cross, &mut state.model.relation.self_attn, &mut state.model.enhance] {
                let d = block.d_model();
                block.output = Linear::init(&mut rng, d, d);
            }
            state.model.relation.head = Linear::init(&mut rng, 2 * d, 2);
            let item = separable_relation_dataset(1, 3, seed).remove(0);
            let frames = synthetic_frames(&[5.0, 20.0, 70.0], 2, 4, seed);
            let weights = LossWeights { generation_weight: 1.0, relation_weight: rng.random_range(0.5..2.0), epoch: 0 };
            let step = item_step(&state, &item, &frames, weights).unwrap();
            check_module(op, &state, &step.grads, &[], |m, _| {
                let (gen, rel) = item_losses(m, &item, &frames).unwrap();
                weights.generation_weight * gen + weights.relation_weight * rel
            }, tolerance)
        }
        other => GradCheckReport {
            op: other.to_string(),
            per_param: Vec::new(),
            tolerance,
            pass: false,
            diagnostic: Some(format!("unknown op {other:?}")),
        },
    }
}

/// Every op in [`OPS`] at every seed.
pub fn run_suite(seeds: &[u64], tolerance: f64, mode: ExecMode) -> Vec<SeededReport> {
    let jobs: Vec<(&str, u64)> = OPS.iter().flat_map(|&op| seeds.iter().map(move |&s| (op, s))).collect();
    par::map(mode, &jobs, |&(op, seed)| SeededReport { seed, report: check_op(op, seed, tolerance) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for r in run_suite(&[0, 1, 2], DEFAULT_TOLERANCE, ExecMode::Parallel) {
            assert!(r.report.pass, "{} seed {}: {:?}", r.report.op, r.seed, r.report);
        }
    }

    #[test]
    fn unknown_op_fails() {
        assert!(!check_op("nope", 0, DEFAULT_TOLERANCE).pass);
    }
}
