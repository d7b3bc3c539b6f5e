//! Max pooling with ceil-mode sizing, and global average pooling.

use ndarray::{Array2, Array5, NdFloat};

/// Ceil-mode output length: `ceil(input / stride)`, with windows clipped
/// at the input boundary.
pub fn pool_out_len_ceil(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Max pooling over `(N, C, T, H, W)` with kernel equal to stride.
///
/// Output sizes use ceil-mode: a trailing window that extends past the
/// input is clipped rather than dropped, so no frame or pixel is ever
/// discarded. Backward routes each gradient to the argmax of its window
/// (first occurrence on ties).
#[derive(Debug, Clone, Copy)]
pub struct MaxPool3d {
    pub stride: [usize; 3],
}

impl MaxPool3d {
    pub fn new(stride: [usize; 3]) -> Self {
        MaxPool3d { stride }
    }

    pub fn out_size(&self, input: [usize; 3]) -> [usize; 3] {
        [
            pool_out_len_ceil(input[0], self.stride[0]),
            pool_out_len_ceil(input[1], self.stride[1]),
            pool_out_len_ceil(input[2], self.stride[2]),
        ]
    }

    /// Returns the pooled tensor and the flat input index of each
    /// selected element (for backward).
    pub fn forward<F: NdFloat>(&self, x: &Array5<F>) -> (Array5<F>, Array5<usize>) {
        let (n, c, t, h, w) = x.dim();
        let [to, ho, wo] = self.out_size([t, h, w]);
        let [st, sh, sw] = self.stride;
        let xs = x.as_slice().expect("input is standard layout");
        let (s_n, s_c, s_t, s_h) = (c * t * h * w, t * h * w, h * w, w);

        let mut y = Array5::zeros((n, c, to, ho, wo));
        let mut arg = Array5::zeros((n, c, to, ho, wo));
        {
            let ys = y.as_slice_mut().unwrap();
            let args = arg.as_slice_mut().unwrap();
            let mut out = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = ni * s_n + ci * s_c;
                    for ti in 0..to {
                        let tr = (ti * st)..(ti * st + st).min(t);
                        for hi in 0..ho {
                            let hr = (hi * sh)..(hi * sh + sh).min(h);
                            for wi in 0..wo {
                                let wr = (wi * sw)..(wi * sw + sw).min(w);
                                let mut best = F::neg_infinity();
                                let mut best_idx = 0;
                                for tt in tr.clone() {
                                    for hh in hr.clone() {
                                        let row = base + tt * s_t + hh * s_h;
                                        for ww in wr.clone() {
                                            let v = xs[row + ww];
                                            if v > best {
                                                best = v;
                                                best_idx = row + ww;
                                            }
                                        }
                                    }
                                }
                                ys[out] = best;
                                args[out] = best_idx;
                                out += 1;
                            }
                        }
                    }
                }
            }
        }
        (y, arg)
    }

    /// Scatters output gradients back to the winning input positions.
    pub fn backward<F: NdFloat>(
        &self,
        arg: &Array5<usize>,
        gy: &Array5<F>,
        in_shape: (usize, usize, usize, usize, usize),
    ) -> Array5<F> {
        let mut gx = Array5::zeros(in_shape);
        {
            let gxs = gx.as_slice_mut().unwrap();
            for (&idx, &g) in arg.iter().zip(gy.iter()) {
                gxs[idx] = gxs[idx] + g;
            }
        }
        gx
    }
}

/// Mean over `(T, H, W)` per `(N, C)`: `(N, C, T, H, W) → (N, C)`.
pub fn global_avg_pool<F: NdFloat>(x: &Array5<F>) -> Array2<F> {
    let (n, c, t, h, w) = x.dim();
    let denom = F::from((t * h * w) as f64).unwrap();
    let mut y = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[(ni, ci)] = x.slice(ndarray::s![ni, ci, .., .., ..]).sum() / denom;
        }
    }
    y
}

/// Backward of [`global_avg_pool`]: spreads each gradient uniformly over
/// the pooled voxels.
pub fn global_avg_pool_backward<F: NdFloat>(
    gy: &Array2<F>,
    in_shape: (usize, usize, usize, usize, usize),
) -> Array5<F> {
    let (_, _, t, h, w) = in_shape;
    let denom = F::from((t * h * w) as f64).unwrap();
    let mut gx = Array5::zeros(in_shape);
    for ((ni, ci), &g) in gy.indexed_iter() {
        gx.slice_mut(ndarray::s![ni, ci, .., .., ..])
            .fill(g / denom);
    }
    gx
}
