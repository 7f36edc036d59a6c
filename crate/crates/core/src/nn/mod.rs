//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer exposes `forward_cached` returning the activations its `backward`
//! needs. Gradients are returned as a value of the layer's own type (a `Linear`
//! whose `weight` holds dL/dW, and so on), which lets optimizers and checkpoints
//! walk parameters and gradients with the same [`Params`] visitor.

pub mod attention;
pub mod embed;
pub mod gradcheck;
pub mod linear;
pub mod loss;

pub use attention::{AttentionBlock, AttentionCache};
pub use embed::{HashEmbedder, TextEmbedder};
pub use gradcheck::{grad_check, GradCheckReport, ParamError};
pub use linear::Linear;
pub use loss::{binary_cross_entropy, binary_cross_entropy_grad};

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Token embeddings plus optional per-unit segment boundaries (half-open ranges).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub data: Array2<f64>,
    pub boundaries: Vec<(usize, usize)>,
}

impl EmbeddingSeq {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data, boundaries: Vec::new() }
    }

    pub fn with_boundaries(data: Array2<f64>, boundaries: Vec<(usize, usize)>) -> Result<Self> {
        let n = data.nrows();
        let mut prev_end = 0;
        for &(start, end) in &boundaries {
            if start < prev_end || start >= end || end > n {
                return Err(Error::shape(format!("bad segment ({start}, {end}) for {n} tokens")));
            }
            prev_end = end;
        }
        Ok(Self { data, boundaries })
    }

    pub fn n_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.data.ncols()
    }

    /// Concatenates along the token axis, shifting boundaries.
    pub fn concat(parts: &[Array2<f64>], d_model: usize) -> Self {
        let total: usize = parts.iter().map(|p| p.nrows()).sum();
        let mut data = Array2::zeros((total, d_model));
        let mut boundaries = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for part in parts {
            let n = part.nrows();
            data.slice_mut(s![offset..offset + n, ..]).assign(part);
            boundaries.push((offset, offset + n));
            offset += n;
        }
        Self { data, boundaries }
    }
}

/// Stacks matrices along the token axis.
pub fn vstack(parts: &[&Array2<f64>]) -> Array2<f64> {
    let d = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let total: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((total, d));
    let mut offset = 0;
    for part in parts {
        out.slice_mut(s![offset..offset + part.nrows(), ..]).assign(*part);
        offset += part.nrows();
    }
    out
}

/// Row `i` is the mean of the tokens in segment `i`.
pub fn mean_pool_segments(seq: &EmbeddingSeq) -> Result<Array2<f64>> {
    if seq.boundaries.is_empty() {
        return Err(Error::shape("mean pooling needs segment boundaries"));
    }
    let mut out = Array2::zeros((seq.boundaries.len(), seq.d_model()));
    for (row, &(start, end)) in seq.boundaries.iter().enumerate() {
        let segment = seq.data.slice(s![start..end, ..]);
        out.row_mut(row).assign(&segment.mean_axis(Axis(0)).expect("non-empty segment"));
    }
    Ok(out)
}

pub fn mean_pool_backward(boundaries: &[(usize, usize)], n_tokens: usize, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((n_tokens, grad.ncols()));
    for (row, &(start, end)) in boundaries.iter().enumerate() {
        let share = &grad.row(row) / (end - start) as f64;
        for t in start..end {
            out.row_mut(t).assign(&share);
        }
    }
    out
}

/// Visits named parameter arrays in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>));
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn flatten_params(module: &impl Params) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit("", &mut |_, view| out.extend(view.iter().copied()));
    out
}

pub fn param_count(module: &impl Params) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, view| n += view.len());
    n
}

/// Overwrites every parameter from `values`, in visit order.
pub fn assign_params(module: &mut impl Params, values: &[f64]) -> Result<()> {
    let expected = param_count(module);
    if values.len() != expected {
        return Err(Error::shape(format!("expected {expected} parameter values, got {}", values.len())));
    }
    let mut cursor = 0;
    module.visit_mut("", &mut |_, mut view| {
        for v in view.iter_mut() {
            *v = values[cursor];
            cursor += 1;
        }
    });
    Ok(())
}

/// `module += scale * other`, for accumulating gradients of identical layout.
pub fn add_scaled(module: &mut impl Params, other: &impl Params, scale: f64) {
    let flat = flatten_params(other);
    let mut cursor = 0;
    module.visit_mut("", &mut |_, mut view| {
        for v in view.iter_mut() {
            *v += scale * flat[cursor];
            cursor += 1;
        }
    });
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pooling_examples() {
        let v = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let seq = EmbeddingSeq::with_boundaries(v, vec![(0, 1), (1, 3)]).unwrap();
        assert_eq!(mean_pool_segments(&seq).unwrap(), array![[1.0, 2.0], [1.0, 2.0]]);

        let seq = EmbeddingSeq::with_boundaries(array![[1.0, 0.0], [0.0, 1.0]], vec![(0, 2)]).unwrap();
        assert_eq!(mean_pool_segments(&seq).unwrap(), array![[0.5, 0.5]]);

        let data = array![[1.0, 4.0], [2.0, 5.0], [3.0, 9.0]];
        let seq = EmbeddingSeq::with_boundaries(data.clone(), vec![(0, 3)]).unwrap();
        assert_eq!(mean_pool_segments(&seq).unwrap().row(0), data.mean_axis(Axis(0)).unwrap());

        assert!(mean_pool_segments(&EmbeddingSeq::new(data)).is_err());
    }

    #[test]
    fn boundaries_validated() {
        let data = Array2::<f64>::zeros((4, 2));
        assert!(EmbeddingSeq::with_boundaries(data.clone(), vec![(0, 2), (1, 3)]).is_err());
        assert!(EmbeddingSeq::with_boundaries(data.clone(), vec![(0, 5)]).is_err());
        assert!(EmbeddingSeq::with_boundaries(data, vec![(2, 2)]).is_err());
    }

    #[test]
    fn concat_records_boundaries() {
        let seq = EmbeddingSeq::concat(&[Array2::zeros((3, 4)), Array2::zeros((5, 4))], 4);
        assert_eq!(seq.data.dim(), (8, 4));
        assert_eq!(seq.boundaries, vec![(0, 3), (3, 8)]);
    }
}
