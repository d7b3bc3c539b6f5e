//! 3D convolution and transposed convolution.
//!
//! [`Conv3d`] lowers each sample to column matrices (im2col) and runs the
//! contraction as a single matrix product, chunking over output frames so
//! the scratch buffer stays small at any input size. [`Deconv3d`] is the
//! special case used by the decoder — kernel equal to stride — where the
//! output patches never overlap and the scatter step is a pure reshape.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array5, ArrayView4, ArrayViewMut4, Ix1, NdFloat};
use rand::Rng;

use super::{he_normal, join_path, Param, ParamSet};

/// Soft cap on im2col scratch elements (~16 MB in `f32`).
const COL_BUDGET: usize = 4 << 20;

/// 3D convolution over `(N, C, T, H, W)` tensors with zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d<F> {
    /// `(c_out, c_in, kt, kh, kw)`
    pub weight: Param<F>,
    /// `(c_out,)`
    pub bias: Param<F>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<F: NdFloat> Conv3d<F> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
        let weight = he_normal(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        Conv3d {
            weight: Param::new(weight),
            bias: Param::new(ndarray::ArrayD::zeros(vec![c_out])),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.value.shape();
        [s[2], s[3], s[4]]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Output `(T, H, W)` for an input of the given size: `(in + 2p - k) / s + 1`.
    pub fn out_size(&self, input: [usize; 3]) -> [usize; 3] {
        let k = self.kernel();
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            assert!(
                padded >= k[d],
                "conv input {:?} too small for kernel {:?} with padding {:?}",
                input,
                k,
                self.padding
            );
            out[d] = (padded - k[d]) / self.stride[d] + 1;
        }
        out
    }

    pub fn forward(&self, x: &Array5<F>) -> Array5<F> {
        let (n, c_in, t, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "conv input channel mismatch");
        let [to, ho, wo] = self.out_size([t, h, w]);
        let k = self.kernel();
        let krows = c_in * k[0] * k[1] * k[2];
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out(), krows))
            .expect("weight is contiguous");

        let mut y = Array5::zeros((n, self.c_out(), to, ho, wo));
        let frames_per_chunk = (COL_BUDGET / (krows * ho * wo).max(1)).clamp(1, to);

        for ni in 0..n {
            let xn = x.slice(s![ni, .., .., .., ..]);
            let mut t0 = 0;
            while t0 < to {
                let t1 = (t0 + frames_per_chunk).min(to);
                let ncols = (t1 - t0) * ho * wo;
                let mut col = Array2::zeros((krows, ncols));
                im2col(&xn, k, self.stride, self.padding, (t0, t1), (ho, wo), col.as_slice_mut().unwrap());
                let prod = w2.dot(&col);
                let mut y_chunk = y.slice_mut(s![ni, .., t0..t1, .., ..]);
                let flat = prod
                    .into_shape_with_order((self.c_out(), t1 - t0, ho, wo))
                    .unwrap();
                y_chunk.assign(&flat);
                t0 = t1;
            }
        }
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for (co, &b) in bias.iter().enumerate() {
            y.slice_mut(s![.., co, .., .., ..]).mapv_inplace(|v| v + b);
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array5<F>, gy: &Array5<F>) -> Array5<F> {
        let (n, c_in, t, h, w) = x.dim();
        let (gn, c_out, to, ho, wo) = gy.dim();
        assert_eq!(n, gn);
        assert_eq!(c_out, self.c_out());
        let k = self.kernel();
        let krows = c_in * k[0] * k[1] * k[2];
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, krows))
            .expect("weight is contiguous");

        for (co, gb) in self
            .bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .iter_mut()
            .enumerate()
        {
            *gb = *gb + gy.slice(s![.., co, .., .., ..]).sum();
        }

        let mut gw2 = Array2::zeros((c_out, krows));
        let mut gx = Array5::zeros((n, c_in, t, h, w));
        let frames_per_chunk = (COL_BUDGET / (krows * ho * wo).max(1)).clamp(1, to);

        for ni in 0..n {
            let xn = x.slice(s![ni, .., .., .., ..]);
            let mut gxn = gx.slice_mut(s![ni, .., .., .., ..]);
            let mut t0 = 0;
            while t0 < to {
                let t1 = (t0 + frames_per_chunk).min(to);
                let ncols = (t1 - t0) * ho * wo;
                let gy_chunk = gy
                    .slice(s![ni, .., t0..t1, .., ..])
                    .to_owned()
                    .into_shape_with_order((c_out, ncols))
                    .unwrap();

                let mut col = Array2::zeros((krows, ncols));
                im2col(&xn, k, self.stride, self.padding, (t0, t1), (ho, wo), col.as_slice_mut().unwrap());
                // dW += dY · colᵀ
                general_mat_mul(F::one(), &gy_chunk, &col.view().reversed_axes(), F::one(), &mut gw2);
                // dcol = Wᵀ · dY, scattered back into dX
                let gcol = w2.t().dot(&gy_chunk);
                col2im(
                    &mut gxn,
                    k,
                    self.stride,
                    self.padding,
                    (t0, t1),
                    (ho, wo),
                    gcol.as_slice().unwrap(),
                );
                t0 = t1;
            }
        }

        let gw_flat = gw2
            .into_shape_with_order(self.weight.value.raw_dim())
            .unwrap();
        self.weight.grad += &gw_flat;
        gx
    }
}

impl<F: NdFloat> ParamSet<F> for Conv3d<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        f(&join_path(prefix, "bias"), &mut self.bias);
    }
}

/// Fills `col` (row-major `(c_in·kt·kh·kw, (t1-t0)·ho·wo)`, pre-zeroed)
/// from one sample. Out-of-bounds taps stay zero (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col<F: NdFloat>(
    x: &ArrayView4<F>,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    (t0, t1): (usize, usize),
    (ho, wo): (usize, usize),
    col: &mut [F],
) {
    let (c_in, t_in, h_in, w_in) = x.dim();
    let xs = x.as_slice().expect("input is standard layout");
    let (s_c, s_t, s_h) = (t_in * h_in * w_in, h_in * w_in, w_in);
    let ncols = (t1 - t0) * ho * wo;

    let mut row = 0;
    for ci in 0..c_in {
        for i in 0..k[0] {
            for j in 0..k[1] {
                for kk in 0..k[2] {
                    let row_base = row * ncols;
                    row += 1;
                    for to in t0..t1 {
                        let t = (to * stride[0] + i) as isize - pad[0] as isize;
                        if t < 0 || t >= t_in as isize {
                            continue;
                        }
                        for hh in 0..ho {
                            let h = (hh * stride[1] + j) as isize - pad[1] as isize;
                            if h < 0 || h >= h_in as isize {
                                continue;
                            }
                            let in_base = ci * s_c + t as usize * s_t + h as usize * s_h;
                            let out_base = row_base + ((to - t0) * ho + hh) * wo;
                            for ww in 0..wo {
                                let w = (ww * stride[2] + kk) as isize - pad[2] as isize;
                                if w >= 0 && w < w_in as isize {
                                    col[out_base + ww] = xs[in_base + w as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds column gradients back onto the
/// input gradient of one sample.
#[allow(clippy::too_many_arguments)]
fn col2im<F: NdFloat>(
    gx: &mut ArrayViewMut4<F>,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    (t0, t1): (usize, usize),
    (ho, wo): (usize, usize),
    col: &[F],
) {
    let (c_in, t_in, h_in, w_in) = gx.dim();
    let gxs = gx.as_slice_mut().expect("gradient is standard layout");
    let (s_c, s_t, s_h) = (t_in * h_in * w_in, h_in * w_in, w_in);
    let ncols = (t1 - t0) * ho * wo;

    let mut row = 0;
    for ci in 0..c_in {
        for i in 0..k[0] {
            for j in 0..k[1] {
                for kk in 0..k[2] {
                    let row_base = row * ncols;
                    row += 1;
                    for to in t0..t1 {
                        let t = (to * stride[0] + i) as isize - pad[0] as isize;
                        if t < 0 || t >= t_in as isize {
                            continue;
                        }
                        for hh in 0..ho {
                            let h = (hh * stride[1] + j) as isize - pad[1] as isize;
                            if h < 0 || h >= h_in as isize {
                                continue;
                            }
                            let in_base = ci * s_c + t as usize * s_t + h as usize * s_h;
                            let out_base = row_base + ((to - t0) * ho + hh) * wo;
                            for ww in 0..wo {
                                let w = (ww * stride[2] + kk) as isize - pad[2] as isize;
                                if w >= 0 && w < w_in as isize {
                                    gxs[in_base + w as usize] =
                                        gxs[in_base + w as usize] + col[out_base + ww];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed 3D convolution with kernel equal to stride.
///
/// Every input voxel expands into a disjoint `kt×kh×kw` output patch, so
/// the layer exactly multiplies each spatial dimension by its stride:
/// `(N, c_in, T, H, W) → (N, c_out, T·kt, H·kh, W·kw)`.
#[derive(Debug, Clone)]
pub struct Deconv3d<F> {
    /// `(c_in, c_out, kt, kh, kw)`
    pub weight: Param<F>,
    /// `(c_out,)`
    pub bias: Param<F>,
}

impl<F: NdFloat> Deconv3d<F> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, kernel: [usize; 3], rng: &mut R) -> Self {
        let weight = he_normal(&[c_in, c_out, kernel[0], kernel[1], kernel[2]], c_in, rng);
        Deconv3d {
            weight: Param::new(weight),
            bias: Param::new(ndarray::ArrayD::zeros(vec![c_out])),
        }
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.value.shape();
        [s[2], s[3], s[4]]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_size(&self, input: [usize; 3]) -> [usize; 3] {
        let k = self.kernel();
        [input[0] * k[0], input[1] * k[1], input[2] * k[2]]
    }

    pub fn forward(&self, x: &Array5<F>) -> Array5<F> {
        let (n, c_in, t, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "deconv input channel mismatch");
        let k = self.kernel();
        let (c_out, patch) = (self.c_out(), k[0] * k[1] * k[2]);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_in, c_out * patch))
            .expect("weight is contiguous");
        let p = t * h * w;

        let mut y = Array5::zeros((n, c_out, t * k[0], h * k[1], w * k[2]));
        for ni in 0..n {
            let xn = x
                .slice(s![ni, .., .., .., ..])
                .to_owned()
                .into_shape_with_order((c_in, p))
                .unwrap();
            // (c_out·patch, p) = W₂ᵀ · x
            let cols = w2.t().dot(&xn.view());
            scatter_patches(&mut y.slice_mut(s![ni, .., .., .., ..]), &cols, k, (t, h, w));
        }
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for (co, &b) in bias.iter().enumerate() {
            y.slice_mut(s![.., co, .., .., ..]).mapv_inplace(|v| v + b);
        }
        y
    }

    pub fn backward(&mut self, x: &Array5<F>, gy: &Array5<F>) -> Array5<F> {
        let (n, c_in, t, h, w) = x.dim();
        let k = self.kernel();
        let (c_out, patch) = (self.c_out(), k[0] * k[1] * k[2]);
        let p = t * h * w;
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_in, c_out * patch))
            .expect("weight is contiguous");

        for (co, gb) in self
            .bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .iter_mut()
            .enumerate()
        {
            *gb = *gb + gy.slice(s![.., co, .., .., ..]).sum();
        }

        let mut gw2 = Array2::zeros((c_in, c_out * patch));
        let mut gx = Array5::zeros((n, c_in, t, h, w));
        for ni in 0..n {
            let gcols = gather_patches(&gy.slice(s![ni, .., .., .., ..]), k, (t, h, w), c_out);
            let xn = x
                .slice(s![ni, .., .., .., ..])
                .to_owned()
                .into_shape_with_order((c_in, p))
                .unwrap();
            general_mat_mul(F::one(), &xn, &gcols.view().reversed_axes(), F::one(), &mut gw2);
            let gxn = w2.dot(&gcols);
            gx.slice_mut(s![ni, .., .., .., ..])
                .assign(&gxn.into_shape_with_order((c_in, t, h, w)).unwrap());
        }
        self.weight.grad += &gw2
            .into_shape_with_order(self.weight.value.raw_dim())
            .unwrap();
        gx
    }
}

impl<F: NdFloat> ParamSet<F> for Deconv3d<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        f(&join_path(prefix, "bias"), &mut self.bias);
    }
}

/// Writes `cols[(c_out,i,j,k), (t,h,w)]` into `y[c_out, t·kt+i, h·kh+j, w·kw+k]`.
fn scatter_patches<F: NdFloat>(
    y: &mut ArrayViewMut4<F>,
    cols: &Array2<F>,
    k: [usize; 3],
    (t, h, w): (usize, usize, usize),
) {
    let cs = cols.as_slice().expect("cols is standard layout");
    let (c_out, t_out, h_out, w_out) = y.dim();
    let ys = y.as_slice_mut().expect("output is standard layout");
    let p = t * h * w;
    for co in 0..c_out {
        for i in 0..k[0] {
            for j in 0..k[1] {
                for kk in 0..k[2] {
                    let row = (((co * k[0] + i) * k[1] + j) * k[2] + kk) * p;
                    for ti in 0..t {
                        for hi in 0..h {
                            let y_base =
                                ((co * t_out + ti * k[0] + i) * h_out + hi * k[1] + j) * w_out + kk;
                            let c_base = row + (ti * h + hi) * w;
                            for wi in 0..w {
                                ys[y_base + wi * k[2]] = cs[c_base + wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`scatter_patches`]: reads output-patch gradients back into
/// column layout.
fn gather_patches<F: NdFloat>(
    gy: &ArrayView4<F>,
    k: [usize; 3],
    (t, h, w): (usize, usize, usize),
    c_out: usize,
) -> Array2<F> {
    let (_, t_out, h_out, w_out) = gy.dim();
    let gs = gy.as_slice().expect("gradient is standard layout");
    let p = t * h * w;
    let patch = k[0] * k[1] * k[2];
    let mut cols = Array2::zeros((c_out * patch, p));
    let cs = cols.as_slice_mut().unwrap();
    for co in 0..c_out {
        for i in 0..k[0] {
            for j in 0..k[1] {
                for kk in 0..k[2] {
                    let row = (((co * k[0] + i) * k[1] + j) * k[2] + kk) * p;
                    for ti in 0..t {
                        for hi in 0..h {
                            let y_base =
                                ((co * t_out + ti * k[0] + i) * h_out + hi * k[1] + j) * w_out + kk;
                            let c_base = row + (ti * h + hi) * w;
                            for wi in 0..w {
                                cs[c_base + wi] = gs[y_base + wi * k[2]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}
