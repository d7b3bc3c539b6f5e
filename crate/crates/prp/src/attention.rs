//! Motion attention for reconstruction weighting.
//!
//! The weight map is built in four steps from the frames the loss will
//! reconstruct: squared frame differencing (channel-averaged), average
//! pooling to suppress pixel noise, a global affine rescale onto
//! `[lambda1, lambda2]`, and trilinear upsampling back to ground-truth
//! resolution. High-motion regions therefore weigh more than static
//! background, but never by more than `lambda2 / lambda1`.
//!
//! Attention is a function of the data only — no gradient flows through
//! it during training.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::trilinear_resize;

/// Parameters of the attention pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionParams {
    /// Weight assigned to the least-moving region.
    pub lambda1: f32,
    /// Weight assigned to the most-moving region.
    pub lambda2: f32,
    /// Average-pooling window `(t, h, w)` over the difference stack.
    pub pool_kernel: (usize, usize, usize),
    pub pool_stride: (usize, usize, usize),
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            lambda1: 0.8,
            lambda2: 2.0,
            pool_kernel: (15, 28, 28),
            pool_stride: (16, 7, 7),
        }
    }
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 >= self.lambda1) {
            return Err(Error::Config(format!(
                "attention bounds need 0 < lambda1 <= lambda2, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        let k = self.pool_kernel;
        let s = self.pool_stride;
        if k.0 == 0 || k.1 == 0 || k.2 == 0 || s.0 == 0 || s.1 == 0 || s.2 == 0 {
            return Err(Error::Config("pool kernel/stride must be positive".into()));
        }
        Ok(())
    }
}

/// A per-voxel reconstruction weight map `(T, H, W)`, broadcast over
/// channels when applied to the loss.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub weights: Array3<f32>,
}

/// Motion energy between consecutive frames: each output map `t` is the
/// channel mean of the squared difference between frames `t+1` and `t`.
/// `(T, H, W, C) → (T−1, H, W)`.
pub fn frame_difference(frames: &Array4<f32>) -> Result<Array3<f32>> {
    let (t, h, w, c) = frames.dim();
    if t < 2 {
        return Err(Error::Input(format!(
            "frame differencing needs at least 2 frames, got {t}"
        )));
    }
    let mut out = Array3::zeros((t - 1, h, w));
    for ti in 0..t - 1 {
        let a = frames.index_axis(Axis(0), ti);
        let b = frames.index_axis(Axis(0), ti + 1);
        let mut dst = out.index_axis_mut(Axis(0), ti);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for ci in 0..c {
                    let d = b[(y, x, ci)] - a[(y, x, ci)];
                    acc += d * d;
                }
                dst[(y, x)] = acc / c as f32;
            }
        }
    }
    Ok(out)
}

/// Average pooling with floor sizing: `out = (in − k)/stride + 1`.
///
/// An axis shorter than its kernel is first padded by replicating its
/// last plane up to kernel length (so that axis pools to exactly 1).
pub fn pool3d_average(
    maps: &Array3<f32>,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<Array3<f32>> {
    let dims = maps.dim();
    let (k, st) = (
        [kernel.0, kernel.1, kernel.2],
        [stride.0, stride.1, stride.2],
    );
    if k.contains(&0) || st.contains(&0) {
        return Err(Error::Input("pool kernel/stride must be positive".into()));
    }
    let in_dims = [dims.0, dims.1, dims.2];

    // Replicate the trailing plane along any axis shorter than the kernel.
    let padded_dims = [
        in_dims[0].max(k[0]),
        in_dims[1].max(k[1]),
        in_dims[2].max(k[2]),
    ];
    let read = |t: usize, h: usize, w: usize| -> f32 {
        maps[(
            t.min(in_dims[0] - 1),
            h.min(in_dims[1] - 1),
            w.min(in_dims[2] - 1),
        )]
    };

    let out_dims = [
        (padded_dims[0] - k[0]) / st[0] + 1,
        (padded_dims[1] - k[1]) / st[1] + 1,
        (padded_dims[2] - k[2]) / st[2] + 1,
    ];
    let denom = (k[0] * k[1] * k[2]) as f64;
    let mut out = Array3::zeros((out_dims[0], out_dims[1], out_dims[2]));
    for to in 0..out_dims[0] {
        for ho in 0..out_dims[1] {
            for wo in 0..out_dims[2] {
                let mut acc = 0.0f64;
                for i in 0..k[0] {
                    for j in 0..k[1] {
                        for l in 0..k[2] {
                            acc += f64::from(read(to * st[0] + i, ho * st[1] + j, wo * st[2] + l));
                        }
                    }
                }
                out[(to, ho, wo)] = (acc / denom) as f32;
            }
        }
    }
    Ok(out)
}

/// Global affine rescale onto `[lambda1, lambda2]`: the minimum maps to
/// `lambda1`, the maximum to `lambda2`. A constant input (no motion
/// contrast) maps to the neutral weight `1.0` everywhere.
pub fn activate(maps: &Array3<f32>, lambda1: f32, lambda2: f32) -> Array3<f32> {
    let (lo, hi) = maps
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Array3::ones(maps.raw_dim());
    }
    let scale = (lambda2 - lambda1) / (hi - lo);
    maps.mapv(|v| lambda1 + (v - lo) * scale)
}

/// Trilinear upsampling of the pooled maps to `target` (align-corners).
pub fn upsample3d(maps: &Array3<f32>, target: (usize, usize, usize)) -> Array3<f32> {
    trilinear_resize(maps, target)
}

/// Full attention pipeline: difference → pool → rescale → upsample.
///
/// `frames` is the `(T, H, W, C)` clip the loss reconstructs (or the raw
/// window standing in for it); the returned weights have shape
/// `(T, H, W)` matching that clip.
pub fn motion_attention(frames: &Array4<f32>, params: &AttentionParams) -> Result<AttentionMap> {
    params.validate()?;
    let (t, h, w, _) = frames.dim();
    let d = frame_difference(frames)?;
    let pooled = pool3d_average(&d, params.pool_kernel, params.pool_stride)?;
    let activated = activate(&pooled, params.lambda1, params.lambda2);
    let mut weights = upsample3d(&activated, (t, h, w));
    // Interpolation rounding may drift an ulp past the bounds; the
    // documented weight range is hard.
    weights.mapv_inplace(|v| v.clamp(params.lambda1, params.lambda2));
    Ok(AttentionMap { weights })
}
