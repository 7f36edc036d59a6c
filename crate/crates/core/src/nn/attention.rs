//! Multi-head scaled dot-product attention with an optional residual path.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::linear::Linear;
use super::Params;
use crate::error::{Error, Result};

/// Query/key/value/output projections. `output` starts at zero so that, with the
/// residual enabled, a freshly initialized block is the identity on its query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    query_in: Array2<f64>,
    kv_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic attention weights, one `[n_query x n_kv]` matrix per head.
    pub weights: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl AttentionBlock {
    pub fn init(rng: &mut impl Rng, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::shape(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::init(rng, d_model, d_model),
            key: Linear::init(rng, d_model, d_model),
            value: Linear::init(rng, d_model, d_model),
            output: Linear::zeros(d_model, d_model),
            heads,
            residual: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            heads: self.heads,
            residual: self.residual,
        }
    }

    pub fn d_model(&self) -> usize {
        self.query.in_dim()
    }

    fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn is_finite(&self) -> bool {
        super::flatten_params(self).iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, query: &Array2<f64>, kv: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(query, kv).map(|(out, _)| out)
    }

    pub fn self_forward(&self, seq: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(seq, seq)
    }

    pub fn forward_cached(&self, query: &Array2<f64>, kv: &Array2<f64>) -> Result<(Array2<f64>, AttentionCache)> {
        let d = self.d_model();
        if query.ncols() != d || kv.ncols() != d {
            return Err(Error::shape(format!(
                "attention d_model {d}, got query {} and key/value {}",
                query.ncols(),
                kv.ncols()
            )));
        }
        if kv.nrows() == 0 {
            return Err(Error::shape("attention over an empty key/value set"));
        }
        let q = self.query.forward(query)?;
        let k = self.key.forward(kv)?;
        let v = self.value.forward(kv)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = Array2::zeros((query.nrows(), d));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            weights.push(scores);
        }
        let mut out = self.output.forward(&mixed)?;
        if self.residual {
            out += query;
        }
        let cache = AttentionCache {
            query_in: query.clone(),
            kv_in: kv.clone(),
            q,
            k,
            v,
            weights,
            mixed,
        };
        Ok((out, cache))
    }

    /// Returns `(dL/dparams, dL/dquery, dL/dkv)`.
    pub fn backward(&self, cache: &AttentionCache, grad_out: &Array2<f64>) -> (AttentionBlock, Array2<f64>, Array2<f64>) {
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let (g_output, d_mixed) = self.output.backward(&cache.mixed, grad_out);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, attn) in cache.weights.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_head = d_mixed.slice(cols);
            let d_attn = d_head.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&attn.t().dot(&d_head));
            // softmax backward, row by row
            let row_dot = (&d_attn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = attn * &(&d_attn - &row_dot) * scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        let (g_query, mut d_query) = self.query.backward(&cache.query_in, &dq);
        let (g_key, d_kv_k) = self.key.backward(&cache.kv_in, &dk);
        let (g_value, d_kv_v) = self.value.backward(&cache.kv_in, &dv);
        if self.residual {
            d_query += grad_out;
        }
        let grads = AttentionBlock {
            query: g_query,
            key: g_key,
            value: g_value,
            output: g_output,
            heads: self.heads,
            residual: self.residual,
        };
        (grads, d_query, d_kv_k + d_kv_v)
    }

    /// Backward for `self_forward`: query and key/value gradients are summed.
    pub fn self_backward(&self, cache: &AttentionCache, grad_out: &Array2<f64>) -> (AttentionBlock, Array2<f64>) {
        let (grads, dq, dkv) = self.backward(cache, grad_out);
        (grads, dq + dkv)
    }
}

impl Params for AttentionBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.query.visit(&super::join_name(prefix, "query"), f);
        self.key.visit(&super::join_name(prefix, "key"), f);
        self.value.visit(&super::join_name(prefix, "value"), f);
        self.output.visit(&super::join_name(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.query.visit_mut(&super::join_name(prefix, "query"), f);
        self.key.visit_mut(&super::join_name(prefix, "key"), f);
        self.value.visit_mut(&super::join_name(prefix, "value"), f);
        self.output.visit_mut(&super::join_name(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ChaCha8Rng, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = AttentionBlock::init(&mut rng, 8, 2).unwrap();
        (rng, block)
    }

    fn randomize_output(block: &mut AttentionBlock, rng: &mut ChaCha8Rng) {
        block.output = Linear::init(rng, 8, 8);
    }

    #[test]
    fn cross_attention_shape_and_weights() {
        let (mut rng, mut block) = setup(1);
        randomize_output(&mut block, &mut rng);
        let q = uniform_matrix(&mut rng, 3, 8, 1.0);
        let kv = uniform_matrix(&mut rng, 5, 8, 1.0);
        let (out, cache) = block.forward_cached(&q, &kv).unwrap();
        assert_eq!(out.dim(), (3, 8));
        for w in &cache.weights {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_kv_token_is_residual_plus_projected_value() {
        let (mut rng, mut block) = setup(2);
        randomize_output(&mut block, &mut rng);
        let q = uniform_matrix(&mut rng, 3, 8, 1.0);
        let kv = uniform_matrix(&mut rng, 1, 8, 1.0);
        let out = block.forward(&q, &kv).unwrap();
        let value = block.value.forward(&kv).unwrap();
        let projected = block.output.forward(&value).unwrap();
        for r in 0..3 {
            let expected = &q.row(r) + &projected.row(0);
            for (a, b) in out.row(r).iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_at_init() {
        let (mut rng, block) = setup(3);
        let q = uniform_matrix(&mut rng, 3, 8, 1.0);
        let kv = uniform_matrix(&mut rng, 5, 8, 1.0);
        assert_eq!(block.forward(&q, &kv).unwrap(), q);
        assert_eq!(block.self_forward(&q).unwrap(), q);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (mut rng, mut block) = setup(4);
        randomize_output(&mut block, &mut rng);
        let seq = uniform_matrix(&mut rng, 4, 8, 1.0);
        let perm = [2usize, 0, 3, 1];
        let permuted = seq.select(Axis(0), &perm);
        let out = block.self_forward(&seq).unwrap();
        let out_perm = block.self_forward(&permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in out_perm.row(i).iter().zip(out.row(p).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (mut rng, block) = setup(5);
        let q = uniform_matrix(&mut rng, 3, 8, 1.0);
        let kv = uniform_matrix(&mut rng, 5, 6, 1.0);
        assert!(block.forward(&q, &kv).is_err());
        assert!(AttentionBlock::init(&mut rng, 8, 3).is_err());
    }

    #[test]
    fn deterministic() {
        let (mut rng, mut block) = setup(6);
        randomize_output(&mut block, &mut rng);
        let q = uniform_matrix(&mut rng, 3, 8, 1.0);
        let kv = uniform_matrix(&mut rng, 5, 8, 1.0);
        let a = block.forward(&q, &kv).unwrap();
        let b = block.forward(&q, &kv).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
