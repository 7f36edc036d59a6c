//! Visual compression, projection, clue-conditioned enhancement, and the iterative
//! verify/classify/refine/enhance loop.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::Serialize;

use crate::aim::{
    embed_clues, hallucination_verify, refine_clues, ClueBank, ClueCandidate, RelationLogits, Refinement,
};
use crate::dataset::Interval;
use crate::error::{Error, Result};
use crate::model::{IrmModel, ModelConfig};
use crate::nn::{join_name, uniform_matrix, vstack, AttentionBlock, AttentionCache, HashEmbedder, Linear, Params, TextEmbedder};
use crate::reasoner::prompt::COMPRESSOR_INSTRUCTION;

/// Per-frame visual tokens tagged with the frame timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    data: Array3<f64>,
    timestamps: Vec<f64>,
}

impl FrameFeatures {
    pub fn new(data: Array3<f64>, timestamps: Vec<f64>) -> Result<Self> {
        if data.shape()[0] != timestamps.len() {
            return Err(Error::shape(format!("{} frames but {} timestamps", data.shape()[0], timestamps.len())));
        }
        if timestamps.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::validation("frame timestamps must be sorted"));
        }
        Ok(Self { data, timestamps })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn n_frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn d_visual(&self) -> usize {
        self.data.shape()[2]
    }

    /// `[n_frames * tokens_per_frame x d_visual]`.
    pub fn flatten(&self) -> Array2<f64> {
        let (f, t, d) = self.data.dim();
        self.data.to_shape((f * t, d)).expect("contiguous frame tensor").to_owned()
    }

    /// Every timestamp lies strictly inside one of the visible intervals.
    pub fn check_visible(&self, visible: &[Interval]) -> Result<()> {
        match self.timestamps.iter().find(|&&t| !visible.iter().any(|iv| iv.contains_strictly(t))) {
            Some(t) => Err(Error::validation(format!("frame at {t}s falls inside masked evidence"))),
            None => Ok(()),
        }
    }
}

/// Learned queries cross-attending to frame tokens plus the embedded instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    pub queries: Array2<f64>,
    pub block: AttentionBlock,
    pub instruction_embedder: HashEmbedder,
}

pub struct CompressorCache {
    attention: AttentionCache,
}

impl Compressor {
    pub fn init(rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            queries: uniform_matrix(rng, config.n_queries, config.d_visual, 1.0 / (config.d_visual as f64).sqrt()),
            block: AttentionBlock::init(rng, config.d_visual, config.visual_head_count)?,
            instruction_embedder: config.instruction_embedder(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            queries: Array2::zeros(self.queries.raw_dim()),
            block: self.block.zeros_like(),
            instruction_embedder: self.instruction_embedder.clone(),
        }
    }

    pub fn n_queries(&self) -> usize {
        self.queries.nrows()
    }

    pub fn forward_cached(&self, frames: &FrameFeatures, instruction: &str) -> Result<(Array2<f64>, CompressorCache)> {
        if frames.n_frames() == 0 || frames.data.shape()[1] == 0 {
            return Err(Error::validation("no visual input"));
        }
        if frames.d_visual() != self.queries.ncols() {
            return Err(Error::shape(format!(
                "frame features have {} dims, compressor expects {}",
                frames.d_visual(),
                self.queries.ncols()
            )));
        }
        let kv = vstack(&[&frames.flatten(), &self.instruction_embedder.embed(instruction)]);
        let (out, attention) = self.block.forward_cached(&self.queries, &kv)?;
        Ok((out, CompressorCache { attention }))
    }

    /// Parameter gradients; frames and instruction are inputs, not parameters.
    pub fn backward(&self, cache: &CompressorCache, grad_out: &Array2<f64>) -> Compressor {
        let (block, d_queries, _) = self.block.backward(&cache.attention, grad_out);
        Compressor { queries: d_queries, block, instruction_embedder: self.instruction_embedder.clone() }
    }
}

impl Params for Compressor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join_name(prefix, "queries"), self.queries.view().into_dyn());
        self.block.visit(&join_name(prefix, "block"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(join_name(prefix, "queries"), self.queries.view_mut().into_dyn());
        self.block.visit_mut(&join_name(prefix, "block"), f);
    }
}

pub fn compressor_instruction(question: &str) -> String {
    COMPRESSOR_INSTRUCTION.replace("{q}", question)
}

/// `Q_V`: `[n_queries x d_visual]`.
pub fn compress_visual(frames: &FrameFeatures, instruction: &str, params: &Compressor) -> Result<Array2<f64>> {
    params.forward_cached(frames, instruction).map(|(q, _)| q)
}

/// `X_V = f_P(Q_V)`.
pub fn project(q_v: &Array2<f64>, projection: &Linear) -> Result<Array2<f64>> {
    if q_v.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite compressed visual state"));
    }
    projection.forward(q_v)
}

/// Cross-attends the visual tokens to the refined clue tokens. An empty clue set
/// leaves the visual tokens unchanged.
pub fn enhance(x_v: &Array2<f64>, refined: &ClueBank, block: &AttentionBlock) -> Result<Array2<f64>> {
    enhance_cached(x_v, refined, block).map(|(out, _)| out)
}

pub fn enhance_cached(
    x_v: &Array2<f64>,
    refined: &ClueBank,
    block: &AttentionBlock,
) -> Result<(Array2<f64>, Option<AttentionCache>)> {
    if refined.n_clues == 0 {
        return Ok((x_v.clone(), None));
    }
    let (out, cache) = block.forward_cached(x_v, &refined.concat_tokens())?;
    Ok((out, Some(cache)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub kept: Vec<usize>,
    pub logits: Vec<[f64; 2]>,
}

/// Compressed, projected, and enhanced visual representations.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualState {
    pub compressed: Array2<f64>,
    pub projected: Array2<f64>,
    pub enhanced: Option<Array2<f64>>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub refinement: Refinement,
    pub visual: VisualState,
    pub logits: RelationLogits,
    pub trace: Vec<IterationTrace>,
}

impl IterationOutcome {
    pub fn enhanced(&self) -> &Array2<f64> {
        self.visual.enhanced.as_ref().unwrap_or(&self.visual.projected)
    }
}

/// One verify/classify/refine/enhance pass followed by `k` extra passes in which the
/// verification attends to the previous enhanced state. Every pass re-selects from
/// the full candidate set.
pub fn run_iterations(
    frames: &FrameFeatures,
    clues: &[ClueCandidate],
    question: &str,
    k: usize,
    model: &IrmModel,
) -> Result<IterationOutcome> {
    let embedder = model.text_embedder();
    let compressed = compress_visual(frames, &compressor_instruction(question), &model.compressor)?;
    let projected = project(&compressed, &model.projection)?;
    let bank = embed_clues(clues, &embedder);
    let question_emb = embedder.embed(question);

    let mut global = projected.clone();
    let mut trace = Vec::with_capacity(k + 1);
    let mut last = None;
    for iteration in 0..=k {
        let verified = hallucination_verify(&bank, &global, &model.verify)?;
        let logits = model.relation.classify(&bank, &verified, &question_emb)?;
        let refinement = refine_clues(&bank, &logits)?;
        let enhanced = enhance(&projected, &refinement.bank, &model.enhance)?;
        trace.push(IterationTrace {
            iteration,
            kept: refinement.kept.clone(),
            logits: (0..logits.n_clues()).map(|i| logits.row(i)).collect(),
        });
        global = enhanced.clone();
        last = Some((refinement, logits, enhanced));
    }
    let (refinement, logits, enhanced) = last.expect("at least one pass");
    Ok(IterationOutcome {
        refinement,
        visual: VisualState { compressed, projected, enhanced: Some(enhanced), iteration: k },
        logits,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_frames;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { d_model: 16, head_count: 2, d_visual: 8, visual_head_count: 2, n_queries: 4, tokens_per_frame: 2, embed_seed: 5 }
    }

    fn frames(n: usize, seed: u64) -> FrameFeatures {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        synthetic_frames(&ts, 2, 8, seed)
    }

    #[test]
    fn compression_shape_and_identity() {
        let config = ModelConfig { d_visual: 64, n_queries: 32, tokens_per_frame: 4, ..small_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comp = Compressor::init(&mut rng, &config).unwrap();
        let ts: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let f = synthetic_frames(&ts, 4, 64, 3);
        let q = compress_visual(&f, "Extract", &comp).unwrap();
        assert_eq!(q.dim(), (32, 64));
        assert_eq!(q, comp.queries);
    }

    #[test]
    fn compression_is_frame_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut comp = Compressor::init(&mut rng, &small_config()).unwrap();
        comp.block.output = Linear::init(&mut rng, 8, 8);
        let f = frames(4, 9);
        let mut reversed = f.data().clone();
        reversed.invert_axis(ndarray::Axis(0));
        let g = FrameFeatures::new(reversed, f.timestamps().to_vec()).unwrap();
        let a = compress_visual(&f, "q", &comp).unwrap();
        let b = compress_visual(&g, "q", &comp).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn empty_frames_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let comp = Compressor::init(&mut rng, &small_config()).unwrap();
        let empty = FrameFeatures::new(Array3::zeros((0, 2, 8)), vec![]).unwrap();
        assert!(compress_visual(&empty, "q", &comp).is_err());
        assert!(FrameFeatures::new(Array3::zeros((2, 2, 8)), vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::init(&mut rng, 64, 256);
        assert_eq!(project(&Array2::zeros((32, 64)), &lin).unwrap().dim(), (32, 256));
        let zero = Linear::zeros(64, 256);
        assert!(project(&uniform_matrix(&mut rng, 32, 64, 1.0), &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhancement_identity_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = AttentionBlock::init(&mut rng, 16, 2).unwrap();
        let x_v = uniform_matrix(&mut rng, 4, 16, 1.0);
        let bank = embed_clues(&[ClueCandidate::new("a b", "c")], &HashEmbedder::new(16, 1));
        assert_eq!(enhance(&x_v, &bank, &block).unwrap(), x_v);
        block.output = Linear::init(&mut rng, 16, 16);
        assert_eq!(enhance(&x_v, &bank, &block).unwrap().dim(), (4, 16));
        assert_eq!(enhance(&x_v, &ClueBank::empty(16), &block).unwrap(), x_v);
    }

    #[test]
    fn iterations_control_flow() {
        let model = IrmModel::init(small_config(), 7).unwrap();
        let clues = vec![ClueCandidate::new("boy climbs", "practice"), ClueCandidate::new("girl waves", "greet")];
        for k in 0..4 {
            let out = run_iterations(&frames(3, 1), &clues, "why climb", k, &model).unwrap();
            assert_eq!(out.trace.len(), k + 1);
            assert_eq!(out.visual.iteration, k);
            assert_eq!(out.enhanced().dim(), out.visual.projected.dim());
        }
        let a = run_iterations(&frames(3, 1), &clues, "why", 2, &model).unwrap();
        let b = run_iterations(&frames(3, 1), &clues, "why", 2, &model).unwrap();
        assert_eq!(a, b);
    }
}
