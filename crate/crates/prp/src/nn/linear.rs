//! Fully-connected layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Ix1, Ix2, NdFloat};
use rand::Rng;

use super::{he_normal, join_path, Param, ParamSet};

/// `y = x·Wᵀ + b` over `(N, in) → (N, out)` feature matrices.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// `(out, in)`
    pub weight: Param<F>,
    /// `(out,)`
    pub bias: Param<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(he_normal(&[out_features, in_features], in_features, rng)),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            general_mat_mul(F::one(), &gy.t(), x, F::one(), &mut gw);
        }
        {
            let mut gb = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            gb += &gy.sum_axis(ndarray::Axis(0));
        }
        gy.dot(&w)
    }
}

impl<F: NdFloat> ParamSet<F> for Linear<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        f(&join_path(prefix, "bias"), &mut self.bias);
    }
}
