//! Linear interpolation resampling (align-corners convention).
//!
//! Output index `o` samples source coordinate `o·(I−1)/(O−1)`, so the
//! first and last samples along every axis are copied exactly and all
//! interior samples are convex combinations of their two neighbours.

use ndarray::{Array3, Array5, NdFloat};

/// Per-axis interpolation taps: `(lo, hi, frac)` where the resampled
/// value is `(1−frac)·x[lo] + frac·x[hi]`.
fn axis_taps<F: NdFloat>(in_len: usize, out_len: usize) -> Vec<(usize, usize, F)> {
    assert!(in_len > 0 && out_len > 0, "empty axis in resize");
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, F::zero());
            }
            let coord = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (coord.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, F::from(coord - lo as f64).unwrap())
        })
        .collect()
}

/// Trilinear resampling of a `(T, H, W)` volume to `target`.
pub fn trilinear_resize<F: NdFloat>(x: &Array3<F>, target: (usize, usize, usize)) -> Array3<F> {
    let (t_in, h_in, w_in) = x.dim();
    let (t_out, h_out, w_out) = target;
    let tt = axis_taps::<F>(t_in, t_out);
    let th = axis_taps::<F>(h_in, h_out);
    let tw = axis_taps::<F>(w_in, w_out);

    let mut y = Array3::zeros(target);
    for (ti, &(t0, t1, ft)) in tt.iter().enumerate() {
        for (hi, &(h0, h1, fh)) in th.iter().enumerate() {
            for (wi, &(w0, w1, fw)) in tw.iter().enumerate() {
                let c00 = lerp(x[(t0, h0, w0)], x[(t0, h0, w1)], fw);
                let c01 = lerp(x[(t0, h1, w0)], x[(t0, h1, w1)], fw);
                let c10 = lerp(x[(t1, h0, w0)], x[(t1, h0, w1)], fw);
                let c11 = lerp(x[(t1, h1, w0)], x[(t1, h1, w1)], fw);
                let c0 = lerp(c00, c01, fh);
                let c1 = lerp(c10, c11, fh);
                y[(ti, hi, wi)] = lerp(c0, c1, ft);
            }
        }
    }
    y
}

/// Transpose of [`trilinear_resize`]: scatters output gradients onto the
/// eight source taps of each voxel.
pub fn trilinear_resize_backward<F: NdFloat>(
    gy: &Array3<F>,
    in_shape: (usize, usize, usize),
) -> Array3<F> {
    let (t_out, h_out, w_out) = gy.dim();
    let tt = axis_taps::<F>(in_shape.0, t_out);
    let th = axis_taps::<F>(in_shape.1, h_out);
    let tw = axis_taps::<F>(in_shape.2, w_out);

    let mut gx = Array3::zeros(in_shape);
    let one = F::one();
    for (ti, &(t0, t1, ft)) in tt.iter().enumerate() {
        for (hi, &(h0, h1, fh)) in th.iter().enumerate() {
            for (wi, &(w0, w1, fw)) in tw.iter().enumerate() {
                let g = gy[(ti, hi, wi)];
                for (tsrc, wt) in [(t0, one - ft), (t1, ft)] {
                    if wt == F::zero() {
                        continue;
                    }
                    for (hsrc, wh) in [(h0, one - fh), (h1, fh)] {
                        if wh == F::zero() {
                            continue;
                        }
                        for (wsrc, ww) in [(w0, one - fw), (w1, fw)] {
                            if ww == F::zero() {
                                continue;
                            }
                            gx[(tsrc, hsrc, wsrc)] =
                                gx[(tsrc, hsrc, wsrc)] + g * wt * wh * ww;
                        }
                    }
                }
            }
        }
    }
    gx
}

fn lerp<F: NdFloat>(a: F, b: F, f: F) -> F {
    a + (b - a) * f
}

/// Parameter-free bilinear resize of the spatial axes of a
/// `(N, C, T, H, W)` tensor; the temporal axis is untouched.
#[derive(Debug, Clone, Copy)]
pub struct SpatialResize {
    pub target_hw: (usize, usize),
}

impl SpatialResize {
    pub fn new(target_hw: (usize, usize)) -> Self {
        SpatialResize { target_hw }
    }

    pub fn forward<F: NdFloat>(&self, x: &Array5<F>) -> Array5<F> {
        let (n, c, t, h_in, w_in) = x.dim();
        let (h_out, w_out) = self.target_hw;
        if (h_in, w_in) == (h_out, w_out) {
            return x.clone();
        }
        let th = axis_taps::<F>(h_in, h_out);
        let tw = axis_taps::<F>(w_in, w_out);
        let mut y = Array5::zeros((n, c, t, h_out, w_out));
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let plane = x.slice(ndarray::s![ni, ci, ti, .., ..]);
                    let mut out = y.slice_mut(ndarray::s![ni, ci, ti, .., ..]);
                    for (hi, &(h0, h1, fh)) in th.iter().enumerate() {
                        for (wi, &(w0, w1, fw)) in tw.iter().enumerate() {
                            let c0 = lerp(plane[(h0, w0)], plane[(h0, w1)], fw);
                            let c1 = lerp(plane[(h1, w0)], plane[(h1, w1)], fw);
                            out[(hi, wi)] = lerp(c0, c1, fh);
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<F: NdFloat>(&self, gy: &Array5<F>, in_hw: (usize, usize)) -> Array5<F> {
        let (n, c, t, h_out, w_out) = gy.dim();
        let (h_in, w_in) = in_hw;
        if (h_in, w_in) == (h_out, w_out) {
            return gy.clone();
        }
        let th = axis_taps::<F>(h_in, h_out);
        let tw = axis_taps::<F>(w_in, w_out);
        let one = F::one();
        let mut gx = Array5::zeros((n, c, t, h_in, w_in));
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let plane = gy.slice(ndarray::s![ni, ci, ti, .., ..]);
                    let mut out = gx.slice_mut(ndarray::s![ni, ci, ti, .., ..]);
                    for (hi, &(h0, h1, fh)) in th.iter().enumerate() {
                        for (wi, &(w0, w1, fw)) in tw.iter().enumerate() {
                            let g = plane[(hi, wi)];
                            for (hsrc, wh) in [(h0, one - fh), (h1, fh)] {
                                if wh == F::zero() {
                                    continue;
                                }
                                for (wsrc, ww) in [(w0, one - fw), (w1, fw)] {
                                    if ww == F::zero() {
                                        continue;
                                    }
                                    out[(hsrc, wsrc)] = out[(hsrc, wsrc)] + g * wh * ww;
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Bilinear resize of one `(H, W, C)` frame; used by the data pipeline.
pub fn bilinear_resize_frame(
    frame: ndarray::ArrayView3<f32>,
    target_hw: (usize, usize),
) -> Array3<f32> {
    let (h_in, w_in, c) = frame.dim();
    let (h_out, w_out) = target_hw;
    if (h_in, w_in) == (h_out, w_out) {
        return frame.to_owned();
    }
    let th = axis_taps::<f32>(h_in, h_out);
    let tw = axis_taps::<f32>(w_in, w_out);
    let mut out = Array3::zeros((h_out, w_out, c));
    for (hi, &(h0, h1, fh)) in th.iter().enumerate() {
        for (wi, &(w0, w1, fw)) in tw.iter().enumerate() {
            for ci in 0..c {
                let c0 = lerp(frame[(h0, w0, ci)], frame[(h0, w1, ci)], fw);
                let c1 = lerp(frame[(h1, w0, ci)], frame[(h1, w1, ci)], fw);
                out[(hi, wi, ci)] = lerp(c0, c1, fh);
            }
        }
    }
    out
}
