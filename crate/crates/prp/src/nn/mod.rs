//! Minimal 3D neural-network engine.
//!
//! Layers operate on dense [`ndarray`] tensors in `(N, C, T, H, W)` layout
//! and implement explicit forward/backward passes. Everything is generic
//! over the element type so that models train in `f32` while gradient
//! checks run in `f64`, where central finite differences are trustworthy.
//!
//! There is no autograd tape: each layer returns whatever cache its
//! backward pass needs, and the model structs in [`crate::models`] wire
//! the passes together by hand. This keeps execution single-threaded and
//! bit-reproducible for a fixed seed.


mod conv;
mod interp;
mod linear;
mod norm;
mod pool;
mod sgd;

pub use conv::{Conv3d, Deconv3d};
pub use interp::{
    bilinear_resize_frame, trilinear_resize, trilinear_resize_backward, SpatialResize,
};
pub use linear::Linear;
pub use norm::{BatchNorm3d, BnCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, pool_out_len_ceil, MaxPool3d};
pub use sgd::Sgd;

use ndarray::{ArrayD, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: NdFloat> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Number of scalar elements in the parameter tensor.
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over the named parameters of a model or layer.
///
/// Names are `/`-separated paths (`"encoder/block1/conv/weight"`), stable
/// across runs, and used for checkpoint serialization, optimizer state,
/// and gradient checks.
pub trait ParamSet<F: NdFloat> {
    /// Calls `f` once per parameter with its full path under `prefix`.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    /// Calls `f` once per non-trainable state tensor (e.g. batchnorm
    /// running statistics). These are saved in checkpoints but never
    /// touched by the optimizer.
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {}
}

/// Total number of trainable scalars in `set`.
pub fn param_count<F: NdFloat>(set: &mut dyn ParamSet<F>) -> usize {
    let mut n = 0;
    set.visit("", &mut |_, p| n += p.len());
    n
}

/// Zeroes the gradient buffers of every parameter in `set`.
pub fn zero_grads<F: NdFloat>(set: &mut dyn ParamSet<F>) {
    set.visit("", &mut |_, p| p.zero_grad());
}

/// FNV-1a hash over the bit patterns of every parameter value, in visit
/// order. Two models with identical parameters hash identically, which
/// makes "these weights did not move" assertions cheap.
pub fn param_fingerprint<F: NdFloat>(set: &mut dyn ParamSet<F>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    set.visit("", &mut |name, p| {
        for b in name.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
        }
        for &v in p.value.iter() {
            let bits = v.to_f64().unwrap().to_bits();
            for b in bits.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
            }
        }
    });
    h
}

/// Joins a parameter path segment onto a prefix.
pub(crate) fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// He-normal initialization: zero-mean Gaussian with `sqrt(2 / fan_in)`
/// standard deviation, the standard choice for ReLU networks.
pub fn he_normal<F: NdFloat, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    ArrayD::from_shape_simple_fn(shape, || F::from(dist.sample(rng)).unwrap())
}

/// In-place ReLU forward; returns the activation mask needed by backward.
pub fn relu_forward<F: NdFloat, D: ndarray::Dimension>(
    x: &mut ndarray::Array<F, D>,
) -> ndarray::Array<bool, D> {
    let mask = x.mapv(|v| v > F::zero());
    x.zip_mut_with(&mask, |v, &m| {
        if !m {
            *v = F::zero();
        }
    });
    mask
}

/// ReLU backward: zeroes the gradient wherever the forward input was
/// non-positive.
pub fn relu_backward<F: NdFloat, D: ndarray::Dimension>(
    gy: &mut ndarray::Array<F, D>,
    mask: &ndarray::Array<bool, D>,
) {
    gy.zip_mut_with(mask, |g, &m| {
        if !m {
            *g = F::zero();
        }
    });
}
