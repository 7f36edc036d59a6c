use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join_name, uniform_matrix, Params};
use crate::error::{Error, Result};

/// Affine map `y = x W + b` with `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform in +-1/sqrt(fan_in) for both weight and bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform_matrix(rng, fan_in, fan_out, bound),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(format!("linear expects {} features, got {}", self.in_dim(), x.ncols())));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// Returns `(dL/dparams, dL/dx)`.
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> (Linear, Array2<f64>) {
        let grads = Linear { weight: x.t().dot(grad_out), bias: grad_out.sum_axis(Axis(0)) };
        (grads, grad_out.dot(&self.weight.t()))
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join_name(prefix, "weight"), self.weight.view().into_dyn());
        f(join_name(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(join_name(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join_name(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_map_gives_zero() {
        let lin = Linear::zeros(3, 2);
        assert_eq!(lin.forward(&array![[1.0, 2.0, 3.0]]).unwrap(), array![[0.0, 0.0]]);
        assert!(lin.forward(&array![[1.0, 2.0]]).is_err());
    }
}
