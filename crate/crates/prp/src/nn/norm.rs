//! Batch normalization over `(N, C, T, H, W)` tensors.

use ndarray::{Array1, Array5, Axis, Ix1, NdFloat};

use super::{join_path, Param, ParamSet};

/// Per-channel batch normalization with running statistics.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running estimates as
/// `running ← (1 − momentum)·running + momentum·batch`; evaluation mode
/// normalizes with the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm3d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: f64,
    pub momentum: f64,
}

/// Values saved by the training-mode forward pass for backward.
#[derive(Debug)]
pub struct BnCache<F> {
    pub xhat: Array5<F>,
    pub invstd: Array1<F>,
}

impl<F: NdFloat> BatchNorm3d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Param::new(ndarray::ArrayD::ones(vec![channels])),
            beta: Param::new(ndarray::ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn gamma_view(&self) -> ndarray::ArrayView1<'_, F> {
        self.gamma.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn beta_view(&self) -> ndarray::ArrayView1<'_, F> {
        self.beta.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Array5<F>) -> (Array5<F>, BnCache<F>) {
        let (n, c, t, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let count = (n * t * h * w) as f64;
        let eps = F::from(self.eps).unwrap();
        let m = F::from(self.momentum).unwrap();
        let one_m = F::one() - m;

        let mut xhat = x.clone();
        let mut invstd = Array1::zeros(c);
        for ci in 0..c {
            let lane = x.index_axis(Axis(1), ci);
            let mean = lane.sum() / F::from(count).unwrap();
            let var = lane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / F::from(count).unwrap();
            let istd = F::one() / (var + eps).sqrt();
            invstd[ci] = istd;
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * istd);

            // Unbiased variance feeds the running estimate, matching the
            // usual convention; a single-element batch falls back to biased.
            let run_var = if count > 1.0 {
                var * F::from(count / (count - 1.0)).unwrap()
            } else {
                var
            };
            self.running_mean[ci] = one_m * self.running_mean[ci] + m * mean;
            self.running_var[ci] = one_m * self.running_var[ci] + m * run_var;
        }

        let mut y = xhat.clone();
        let gamma = self.gamma_view();
        let beta = self.beta_view();
        for ci in 0..c {
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| v * gamma[ci] + beta[ci]);
        }
        (y, BnCache { xhat, invstd })
    }

    /// Normalizes with the running statistics; no state is modified.
    pub fn forward_eval(&self, x: &Array5<F>) -> Array5<F> {
        let c = x.dim().1;
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let eps = F::from(self.eps).unwrap();
        let gamma = self.gamma_view();
        let beta = self.beta_view();
        let mut y = x.clone();
        for ci in 0..c {
            let istd = F::one() / (self.running_var[ci] + eps).sqrt();
            let mean = self.running_mean[ci];
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * istd * gamma[ci] + beta[ci]);
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<F>, gy: &Array5<F>) -> Array5<F> {
        let (n, c, t, h, w) = gy.dim();
        let count = F::from((n * t * h * w) as f64).unwrap();
        let gamma = self.gamma.value.clone().into_dimensionality::<Ix1>().unwrap();

        let mut gx = Array5::zeros(gy.raw_dim());
        for ci in 0..c {
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let g = gy.index_axis(Axis(1), ci);

            let sum_g = g.sum();
            let sum_g_xh = g
                .iter()
                .zip(xh.iter())
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b);

            self.beta.grad[ci] = self.beta.grad[ci] + sum_g;
            self.gamma.grad[ci] = self.gamma.grad[ci] + sum_g_xh;

            // dx = γ·invstd/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
            let scale = gamma[ci] * cache.invstd[ci] / count;
            let mut out = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| {
                    *o = scale * (count * gv - sum_g - xv * sum_g_xh);
                });
        }
        gx
    }
}

impl<F: NdFloat> ParamSet<F> for BatchNorm3d<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_path(prefix, "gamma"), &mut self.gamma);
        f(&join_path(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<F>)) {
        let mut rm = std::mem::replace(&mut self.running_mean, Array1::zeros(0)).into_dyn();
        f(&join_path(prefix, "running_mean"), &mut rm);
        self.running_mean = rm.into_dimensionality().unwrap();

        let mut rv = std::mem::replace(&mut self.running_var, Array1::zeros(0)).into_dyn();
        f(&join_path(prefix, "running_var"), &mut rv);
        self.running_var = rv.into_dimensionality().unwrap();
    }
}
