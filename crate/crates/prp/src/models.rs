//! Encoder backbones, the playback-rate head, and the slow-down decoder.
//!
//! Three encoder variants share one block skeleton: a plain
//! convolutional block (conv → batchnorm → ReLU), a residual block (two
//! convolutions with an identity shortcut summed before the final ReLU),
//! and a factored residual block whose 3D convolutions are split into a
//! spatial `1×k×k` convolution and a temporal `k×1×1` convolution with a
//! normalization + ReLU in between. Every block is followed by a
//! kernel-equals-stride max pool, so the downsampling schedule lives
//! entirely in the pool stride configuration.
//!
//! The decoder mirrors the encoder coarsely: four transposed-convolution
//! blocks (the first three with temporal stride 2, the fourth with the
//! reconstruction rate `r`) followed by a parameter-free trilinear resize
//! that maps the `×16` spatial upsampling onto the exact clip resolution.
//!
//! [`PrpModel`] owns an encoder, a linear rate-classification head, and an
//! optional decoder, and [`Checkpoint`] serializes all of it — parameters,
//! batchnorm running statistics, optimizer velocity, and the config needed
//! to rebuild identical shapes — into a single self-describing file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array5, ArrayD, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join_path, pool_out_len_ceil, relu_backward,
    relu_forward, BatchNorm3d, BnCache, Conv3d, Deconv3d, Linear, MaxPool3d, Param, ParamSet, Sgd,
    SpatialResize,
};

/// Shape of one input clip, in `(len, height, width, channels)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipShape {
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ClipShape {
    fn default() -> Self {
        ClipShape {
            len: 16,
            height: 112,
            width: 112,
            channels: 3,
        }
    }
}

impl ClipShape {
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Which encoder block family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    C3d,
    R3d,
    R2plus1d,
}

/// Five-block encoder configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub block_channels: [usize; 5],
    pub conv_kernel: [usize; 3],
    pub temporal_pool_strides: [usize; 5],
    pub spatial_pool_strides: [usize; 5],
    pub input_shape: ClipShape,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::C3d,
            block_channels: [64, 128, 256, 512, 512],
            conv_kernel: [3, 3, 3],
            // Stride-1 temporal pooling in the first and last blocks keeps
            // conv5 at temporal length len/8, which the decoder's 2·2·2·r
            // upsampling turns into exactly r·len.
            temporal_pool_strides: [1, 2, 2, 2, 1],
            spatial_pool_strides: [2, 2, 2, 2, 2],
            input_shape: ClipShape::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "backbone.block_channels entries must be positive".into(),
            ));
        }
        if self.conv_kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(
                "backbone.conv_kernel components must be odd so convolutions preserve size".into(),
            ));
        }
        if self.temporal_pool_strides.iter().any(|&s| s == 0)
            || self.spatial_pool_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::Config(
                "backbone pool strides must be positive".into(),
            ));
        }
        let sh = self.input_shape;
        if sh.len == 0 || sh.height == 0 || sh.width == 0 || sh.channels == 0 {
            return Err(Error::Config(
                "backbone.input_shape dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(t, h, w)` of the conv5 feature map for the configured input,
    /// folding one ceil-mode pool per block.
    pub fn conv5_shape(&self) -> [usize; 3] {
        let mut t = self.input_shape.len;
        let mut h = self.input_shape.height;
        let mut w = self.input_shape.width;
        for i in 0..5 {
            t = pool_out_len_ceil(t, self.temporal_pool_strides[i]);
            h = pool_out_len_ceil(h, self.spatial_pool_strides[i]);
            w = pool_out_len_ceil(w, self.spatial_pool_strides[i]);
        }
        [t, h, w]
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.block_channels[4]
    }
}

/// Decoder configuration: four transposed-convolution blocks whose fourth
/// temporal stride is the reconstruction rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Output channels of the four blocks; the last entry must match the
    /// clip channel count.
    pub block_channels: [usize; 4],
    /// Temporal stride of the fourth block, i.e. the slow-down factor `r`.
    pub recon_rate: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            block_channels: [256, 128, 64, 3],
            recon_rate: 2,
        }
    }
}

/// Everything needed to build the full model: encoder, head width, and an
/// optional decoder (absent when training without the reconstruction
/// objective).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_rate_classes: usize,
    pub decoder: Option<DecoderConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            num_rate_classes: 4,
            decoder: Some(DecoderConfig::default()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_rate_classes < 2 {
            return Err(Error::Config("num_rate_classes must be at least 2".into()));
        }
        if let Some(dec) = &self.decoder {
            if dec.recon_rate == 0 {
                return Err(Error::Config("decoder.recon_rate must be positive".into()));
            }
            if dec.block_channels.iter().any(|&c| c == 0) {
                return Err(Error::Config(
                    "decoder.block_channels entries must be positive".into(),
                ));
            }
            let clip_c = self.backbone.input_shape.channels;
            if dec.block_channels[3] != clip_c {
                return Err(Error::Config(format!(
                    "decoder output channels ({}) must match clip channels ({clip_c})",
                    dec.block_channels[3]
                )));
            }
            let [t5, _, _] = self.backbone.conv5_shape();
            let len = self.backbone.input_shape.len;
            if t5 * 8 != len {
                return Err(Error::Config(format!(
                    "decoder needs conv5 temporal length == clip_len/8 to reconstruct \
                     exactly r·clip_len frames, but got {t5} for clip_len {len}; \
                     adjust temporal_pool_strides"
                )));
            }
        }
        Ok(())
    }
}

/// One convolution "unit": either a full 3D convolution or its factored
/// spatial + temporal form with a normalization and ReLU in between.
#[derive(Debug, Clone)]
enum ConvUnit<F> {
    Full(Conv3d<F>),
    Split {
        spatial: Conv3d<F>,
        norm: BatchNorm3d<F>,
        temporal: Conv3d<F>,
    },
}

#[derive(Debug)]
enum UnitCache<F> {
    Full,
    Split {
        norm: BnCache<F>,
        mask: Array5<bool>,
        /// Input to the temporal convolution.
        mid: Array5<F>,
    },
}

impl<F: NdFloat> ConvUnit<F> {
    fn new<R: Rng>(
        variant: BackboneVariant,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        match variant {
            BackboneVariant::C3d | BackboneVariant::R3d => {
                ConvUnit::Full(Conv3d::new(c_in, c_out, kernel, [1, 1, 1], pad, rng))
            }
            BackboneVariant::R2plus1d => ConvUnit::Split {
                spatial: Conv3d::new(
                    c_in,
                    c_out,
                    [1, kernel[1], kernel[2]],
                    [1, 1, 1],
                    [0, pad[1], pad[2]],
                    rng,
                ),
                norm: BatchNorm3d::new(c_out),
                temporal: Conv3d::new(
                    c_out,
                    c_out,
                    [kernel[0], 1, 1],
                    [1, 1, 1],
                    [pad[0], 0, 0],
                    rng,
                ),
            },
        }
    }

    fn forward_train(&mut self, x: &Array5<F>) -> (Array5<F>, UnitCache<F>) {
        match self {
            ConvUnit::Full(conv) => (conv.forward(x), UnitCache::Full),
            ConvUnit::Split {
                spatial,
                norm,
                temporal,
            } => {
                let (mut mid, cache) = norm.forward_train(&spatial.forward(x));
                let mask = relu_forward(&mut mid);
                let y = temporal.forward(&mid);
                (
                    y,
                    UnitCache::Split {
                        norm: cache,
                        mask,
                        mid,
                    },
                )
            }
        }
    }

    fn forward_eval(&self, x: &Array5<F>) -> Array5<F> {
        match self {
            ConvUnit::Full(conv) => conv.forward(x),
            ConvUnit::Split {
                spatial,
                norm,
                temporal,
            } => {
                let mut mid = norm.forward_eval(&spatial.forward(x));
                mid.mapv_inplace(|v| v.max(F::zero()));
                temporal.forward(&mid)
            }
        }
    }

    fn backward(&mut self, x: &Array5<F>, cache: &UnitCache<F>, gy: &Array5<F>) -> Array5<F> {
        match (self, cache) {
            (ConvUnit::Full(conv), UnitCache::Full) => conv.backward(x, gy),
            (
                ConvUnit::Split {
                    spatial,
                    norm,
                    temporal,
                },
                UnitCache::Split {
                    norm: bn_cache,
                    mask,
                    mid,
                },
            ) => {
                let mut gmid = temporal.backward(mid, gy);
                relu_backward(&mut gmid, mask);
                let gs = norm.backward(bn_cache, &gmid);
                spatial.backward(x, &gs)
            }
            _ => unreachable!("cache variant always matches the unit that produced it"),
        }
    }
}

impl<F: NdFloat> ParamSet<F> for ConvUnit<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            ConvUnit::Full(conv) => conv.visit(prefix, f),
            ConvUnit::Split {
                spatial,
                norm,
                temporal,
            } => {
                spatial.visit(&join_path(prefix, "spatial"), f);
                norm.visit(&join_path(prefix, "norm"), f);
                temporal.visit(&join_path(prefix, "temporal"), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        if let ConvUnit::Split { norm, .. } = self {
            norm.visit_buffers(&join_path(prefix, "norm"), f);
        }
    }
}

/// One encoder block followed by its max pool.
#[derive(Debug, Clone)]
struct EncoderBlock<F> {
    unit1: ConvUnit<F>,
    norm1: BatchNorm3d<F>,
    unit2: Option<ConvUnit<F>>,
    norm2: Option<BatchNorm3d<F>>,
    /// `1×1×1` shortcut projection, present only when a residual block
    /// changes channel count.
    proj: Option<Conv3d<F>>,
    pool: MaxPool3d,
    residual: bool,
}

#[derive(Debug)]
struct BlockCache<F> {
    x: Array5<F>,
    u1: UnitCache<F>,
    n1: BnCache<F>,
    mask1: Array5<bool>,
    /// Input to the second unit (output of the first ReLU).
    mid: Option<Array5<F>>,
    u2: Option<UnitCache<F>>,
    n2: Option<BnCache<F>>,
    mask2: Option<Array5<bool>>,
    prepool: (usize, usize, usize, usize, usize),
    arg: Array5<usize>,
}

impl<F: NdFloat> EncoderBlock<F> {
    fn new<R: Rng>(
        variant: BackboneVariant,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        pool_stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let residual = variant != BackboneVariant::C3d;
        let unit1 = ConvUnit::new(variant, c_in, c_out, kernel, rng);
        let (unit2, norm2, proj) = if residual {
            let unit2 = ConvUnit::new(variant, c_out, c_out, kernel, rng);
            let proj = (c_in != c_out)
                .then(|| Conv3d::new(c_in, c_out, [1, 1, 1], [1, 1, 1], [0, 0, 0], rng));
            (Some(unit2), Some(BatchNorm3d::new(c_out)), proj)
        } else {
            (None, None, None)
        };
        EncoderBlock {
            unit1,
            norm1: BatchNorm3d::new(c_out),
            unit2,
            norm2,
            proj,
            pool: MaxPool3d::new(pool_stride),
            residual,
        }
    }

    fn forward_train(&mut self, x: Array5<F>) -> (Array5<F>, BlockCache<F>) {
        let (y1, u1) = self.unit1.forward_train(&x);
        let (mut h, n1) = self.norm1.forward_train(&y1);
        let mask1 = relu_forward(&mut h);
        if !self.residual {
            let prepool = h.dim();
            let (y, arg) = self.pool.forward(&h);
            return (
                y,
                BlockCache {
                    x,
                    u1,
                    n1,
                    mask1,
                    mid: None,
                    u2: None,
                    n2: None,
                    mask2: None,
                    prepool,
                    arg,
                },
            );
        }
        let (y2, u2) = self.unit2.as_mut().unwrap().forward_train(&h);
        let (mut out, n2) = self.norm2.as_mut().unwrap().forward_train(&y2);
        let shortcut = match &self.proj {
            Some(p) => p.forward(&x),
            None => x.clone(),
        };
        out.zip_mut_with(&shortcut, |o, &s| *o = *o + s);
        let mask2 = relu_forward(&mut out);
        let prepool = out.dim();
        let (y, arg) = self.pool.forward(&out);
        (
            y,
            BlockCache {
                x,
                u1,
                n1,
                mask1,
                mid: Some(h),
                u2: Some(u2),
                n2: Some(n2),
                mask2: Some(mask2),
                prepool,
                arg,
            },
        )
    }

    fn forward_eval(&self, x: &Array5<F>) -> Array5<F> {
        let mut h = self.norm1.forward_eval(&self.unit1.forward_eval(x));
        h.mapv_inplace(|v| v.max(F::zero()));
        if self.residual {
            let y2 = self.unit2.as_ref().unwrap().forward_eval(&h);
            let mut out = self.norm2.as_ref().unwrap().forward_eval(&y2);
            match &self.proj {
                Some(p) => out.zip_mut_with(&p.forward(x), |o, &s| *o = *o + s),
                None => out.zip_mut_with(x, |o, &s| *o = *o + s),
            }
            out.mapv_inplace(|v| v.max(F::zero()));
            h = out;
        }
        self.pool.forward(&h).0
    }

    fn backward(&mut self, cache: &BlockCache<F>, gy: &Array5<F>) -> Array5<F> {
        let mut g = self.pool.backward(&cache.arg, gy, cache.prepool);
        if !self.residual {
            relu_backward(&mut g, &cache.mask1);
            let g1 = self.norm1.backward(&cache.n1, &g);
            return self.unit1.backward(&cache.x, &cache.u1, &g1);
        }
        relu_backward(&mut g, cache.mask2.as_ref().unwrap());
        // The post-sum gradient `g` flows into both the convolutional
        // branch and the shortcut.
        let g2 = self
            .norm2
            .as_mut()
            .unwrap()
            .backward(cache.n2.as_ref().unwrap(), &g);
        let mut gmid = self.unit2.as_mut().unwrap().backward(
            cache.mid.as_ref().unwrap(),
            cache.u2.as_ref().unwrap(),
            &g2,
        );
        relu_backward(&mut gmid, &cache.mask1);
        let g1 = self.norm1.backward(&cache.n1, &gmid);
        let mut gx = self.unit1.backward(&cache.x, &cache.u1, &g1);
        match &mut self.proj {
            Some(p) => {
                let gp = p.backward(&cache.x, &g);
                gx.zip_mut_with(&gp, |a, &b| *a = *a + b);
            }
            None => gx.zip_mut_with(&g, |a, &b| *a = *a + b),
        }
        gx
    }
}

impl<F: NdFloat> ParamSet<F> for EncoderBlock<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.unit1.visit(&join_path(prefix, "conv1"), f);
        self.norm1.visit(&join_path(prefix, "norm1"), f);
        if let Some(u) = &mut self.unit2 {
            u.visit(&join_path(prefix, "conv2"), f);
        }
        if let Some(n) = &mut self.norm2 {
            n.visit(&join_path(prefix, "norm2"), f);
        }
        if let Some(p) = &mut self.proj {
            p.visit(&join_path(prefix, "proj"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.unit1.visit_buffers(&join_path(prefix, "conv1"), f);
        self.norm1.visit_buffers(&join_path(prefix, "norm1"), f);
        if let Some(u) = &mut self.unit2 {
            u.visit_buffers(&join_path(prefix, "conv2"), f);
        }
        if let Some(n) = &mut self.norm2 {
            n.visit_buffers(&join_path(prefix, "norm2"), f);
        }
    }
}

/// Five-block feature encoder over `(N, C, T, H, W)` clips.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    blocks: Vec<EncoderBlock<F>>,
}

/// Opaque per-block activations retained for the backward pass.
#[derive(Debug)]
pub struct EncoderCaches<F>(Vec<BlockCache<F>>);

impl<F: NdFloat> Encoder<F> {
    fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(5);
        let mut c_in = cfg.input_shape.channels;
        for i in 0..5 {
            let pool = [
                cfg.temporal_pool_strides[i],
                cfg.spatial_pool_strides[i],
                cfg.spatial_pool_strides[i],
            ];
            blocks.push(EncoderBlock::new(
                cfg.variant,
                c_in,
                cfg.block_channels[i],
                cfg.conv_kernel,
                pool,
                rng,
            ));
            c_in = cfg.block_channels[i];
        }
        Encoder { blocks }
    }

    fn forward_train(&mut self, clip: &Array5<F>) -> (Array5<F>, EncoderCaches<F>) {
        let mut cur = clip.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cache) = block.forward_train(cur);
            cur = y;
            caches.push(cache);
        }
        (cur, EncoderCaches(caches))
    }

    fn forward_eval(&self, clip: &Array5<F>) -> Array5<F> {
        let mut cur = self.blocks[0].forward_eval(clip);
        for block in &self.blocks[1..] {
            cur = block.forward_eval(&cur);
        }
        cur
    }

    fn backward(&mut self, caches: &EncoderCaches<F>, gmap: &Array5<F>) {
        let mut g = gmap.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches.0.iter()).rev() {
            g = block.backward(cache, &g);
        }
    }
}

impl<F: NdFloat> ParamSet<F> for Encoder<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&join_path(prefix, &format!("block{}", i + 1)), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&join_path(prefix, &format!("block{}", i + 1)), f);
        }
    }
}

/// Four-block transposed-convolution decoder plus the final spatial resize.
#[derive(Debug, Clone)]
pub struct Decoder<F> {
    deconvs: Vec<Deconv3d<F>>,
    norms: Vec<BatchNorm3d<F>>,
    resize: SpatialResize,
}

#[derive(Debug)]
pub struct DecoderCache<F> {
    inputs: Vec<Array5<F>>,
    norms: Vec<BnCache<F>>,
    masks: Vec<Array5<bool>>,
    pre_hw: (usize, usize),
}

impl<F: NdFloat> Decoder<F> {
    fn new<R: Rng>(
        cfg: &DecoderConfig,
        c_in: usize,
        target_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let mut deconvs = Vec::with_capacity(4);
        let mut norms = Vec::with_capacity(3);
        let mut c = c_in;
        for (i, &c_out) in cfg.block_channels.iter().enumerate() {
            let kernel = if i == 3 {
                [cfg.recon_rate, 2, 2]
            } else {
                [2, 2, 2]
            };
            deconvs.push(Deconv3d::new(c, c_out, kernel, rng));
            if i < 3 {
                norms.push(BatchNorm3d::new(c_out));
            }
            c = c_out;
        }
        Decoder {
            deconvs,
            norms,
            resize: SpatialResize::new(target_hw),
        }
    }

    fn forward_train(&mut self, fmap: &Array5<F>) -> (Array5<F>, DecoderCache<F>) {
        let mut cur = fmap.clone();
        let mut inputs = Vec::with_capacity(4);
        let mut bn = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        for i in 0..4 {
            let mut y = self.deconvs[i].forward(&cur);
            inputs.push(cur);
            if i < 3 {
                let (yn, cache) = self.norms[i].forward_train(&y);
                y = yn;
                bn.push(cache);
                masks.push(relu_forward(&mut y));
            }
            cur = y;
        }
        let pre_hw = (cur.dim().3, cur.dim().4);
        let out = self.resize.forward(&cur);
        (
            out,
            DecoderCache {
                inputs,
                norms: bn,
                masks,
                pre_hw,
            },
        )
    }

    fn forward_eval(&self, fmap: &Array5<F>) -> Array5<F> {
        let mut cur = fmap.clone();
        for i in 0..4 {
            let mut y = self.deconvs[i].forward(&cur);
            if i < 3 {
                y = self.norms[i].forward_eval(&y);
                y.mapv_inplace(|v| v.max(F::zero()));
            }
            cur = y;
        }
        self.resize.forward(&cur)
    }

    fn backward(&mut self, cache: &DecoderCache<F>, gy: &Array5<F>) -> Array5<F> {
        let mut g = self.resize.backward(gy, cache.pre_hw);
        for i in (0..4).rev() {
            if i < 3 {
                relu_backward(&mut g, &cache.masks[i]);
                g = self.norms[i].backward(&cache.norms[i], &g);
            }
            g = self.deconvs[i].backward(&cache.inputs[i], &g);
        }
        g
    }
}

impl<F: NdFloat> ParamSet<F> for Decoder<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for i in 0..4 {
            self.deconvs[i].visit(&join_path(prefix, &format!("deconv{}", i + 1)), f);
            if i < 3 {
                self.norms[i].visit(&join_path(prefix, &format!("norm{}", i + 1)), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, norm) in self.norms.iter_mut().enumerate() {
            norm.visit_buffers(&join_path(prefix, &format!("norm{}", i + 1)), f);
        }
    }
}

/// The full model: encoder, rate-classification head, optional decoder.
#[derive(Debug, Clone)]
pub struct PrpModel<F: NdFloat> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub head: Linear<F>,
    pub decoder: Option<Decoder<F>>,
}

/// Result of a training-mode forward pass, holding everything the
/// backward pass needs.
pub struct TrainForward<F: NdFloat> {
    pub logits: Array2<F>,
    pub recon: Option<Array5<F>>,
    fvec: Array2<F>,
    fmap_shape: (usize, usize, usize, usize, usize),
    enc: EncoderCaches<F>,
    dec: Option<DecoderCache<F>>,
}

impl<F: NdFloat> PrpModel<F> {
    /// Builds a freshly initialized model; all weight draws come from a
    /// ChaCha stream seeded with `seed`, so equal seeds give equal models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.backbone, &mut rng);
        let head = Linear::new(
            config.backbone.feature_dim(),
            config.num_rate_classes,
            &mut rng,
        );
        let decoder = config.decoder.as_ref().map(|dec| {
            Decoder::new(
                dec,
                config.backbone.feature_dim(),
                config.backbone.input_shape.hw(),
                &mut rng,
            )
        });
        Ok(PrpModel {
            config,
            encoder,
            head,
            decoder,
        })
    }

    fn check_clip(&self, clip: &Array5<F>) -> Result<()> {
        let (n, c, t, h, w) = clip.dim();
        let sh = self.config.backbone.input_shape;
        if n == 0 || c != sh.channels || t != sh.len || h != sh.height || w != sh.width {
            return Err(Error::Input(format!(
                "clip batch shape ({n},{c},{t},{h},{w}) does not match configured \
                 input (N,{},{},{},{})",
                sh.channels, sh.len, sh.height, sh.width
            )));
        }
        Ok(())
    }

    /// Training-mode forward: batch-statistics normalization, with all
    /// intermediate activations cached for [`PrpModel::backward`].
    pub fn forward_train(&mut self, clip: &Array5<F>) -> Result<TrainForward<F>> {
        self.check_clip(clip)?;
        let (fmap, enc) = self.encoder.forward_train(clip);
        let fvec = global_avg_pool(&fmap);
        let logits = self.head.forward(&fvec);
        let (recon, dec) = match &mut self.decoder {
            Some(d) => {
                let (r, c) = d.forward_train(&fmap);
                (Some(r), Some(c))
            }
            None => (None, None),
        };
        Ok(TrainForward {
            logits,
            recon,
            fvec,
            fmap_shape: fmap.dim(),
            enc,
            dec,
        })
    }

    /// Accumulates parameter gradients given the loss gradients w.r.t. the
    /// logits and (when a decoder ran) the reconstruction.
    pub fn backward(
        &mut self,
        fwd: &TrainForward<F>,
        dlogits: &Array2<F>,
        drecon: Option<&Array5<F>>,
    ) {
        let dfvec = self.head.backward(&fwd.fvec, dlogits);
        let mut dmap = global_avg_pool_backward(&dfvec, fwd.fmap_shape);
        if let Some(dr) = drecon {
            let dec = self
                .decoder
                .as_mut()
                .expect("reconstruction gradient supplied but the model has no decoder");
            let cache = fwd
                .dec
                .as_ref()
                .expect("reconstruction gradient supplied but forward ran without decoder");
            let g = dec.backward(cache, dr);
            dmap.zip_mut_with(&g, |a, &b| *a = *a + b);
        }
        self.encoder.backward(&fwd.enc, &dmap);
    }

    /// Eval-mode encoding: `(conv5 feature map, pooled feature vector)`.
    pub fn encode(&self, clip: &Array5<F>) -> Result<(Array5<F>, Array2<F>)> {
        self.check_clip(clip)?;
        let fmap = self.encoder.forward_eval(clip);
        let fvec = global_avg_pool(&fmap);
        Ok((fmap, fvec))
    }

    /// Affine map from pooled features to one logit per rate class.
    pub fn classify_rate(&self, fvec: &Array2<F>) -> Array2<F> {
        self.head.forward(fvec)
    }

    /// Eval-mode reconstruction of the slowed-down clip from a conv5 map.
    pub fn decode(&self, fmap: &Array5<F>) -> Result<Array5<F>> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a decoder".into()))?;
        if fmap.dim().1 != self.config.backbone.feature_dim() {
            return Err(Error::Config(format!(
                "feature map has {} channels but the decoder expects {}",
                fmap.dim().1,
                self.config.backbone.feature_dim()
            )));
        }
        Ok(dec.forward_eval(fmap))
    }
}

impl<F: NdFloat> ParamSet<F> for PrpModel<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit(&join_path(prefix, "encoder"), f);
        self.head.visit(&join_path(prefix, "head"), f);
        if let Some(d) = &mut self.decoder {
            d.visit(&join_path(prefix, "decoder"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.encoder.visit_buffers(&join_path(prefix, "encoder"), f);
        if let Some(d) = &mut self.decoder {
            d.visit_buffers(&join_path(prefix, "decoder"), f);
        }
    }
}

/// First line of every checkpoint file.
pub const CHECKPOINT_MAGIC: &str = "prp-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    epoch: usize,
    val_loss: f64,
    entries: Vec<TensorEntry>,
}

/// A full training snapshot: model parameters and normalization buffers,
/// optimizer velocity, the config needed to rebuild identical shapes, and
/// bookkeeping scalars.
///
/// On disk this is a magic line, a little-endian `u64` header length, a
/// JSON header describing every tensor, and one contiguous little-endian
/// `f32` blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub buffers: BTreeMap<String, ArrayD<f32>>,
    pub velocity: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    /// Snapshots the model and optimizer state.
    pub fn capture(
        model: &mut PrpModel<f32>,
        optimizer: &Sgd<f32>,
        epoch: usize,
        val_loss: f64,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        model.visit("", &mut |name, p| {
            params.insert(name.to_string(), p.value.clone());
        });
        let mut buffers = BTreeMap::new();
        model.visit_buffers("", &mut |name, b| {
            buffers.insert(name.to_string(), b.clone());
        });
        let velocity = optimizer
            .state()
            .into_iter()
            .map(|(name, v)| (name, v.clone()))
            .collect();
        Checkpoint {
            config: model.config.clone(),
            epoch,
            val_loss,
            params,
            buffers,
            velocity,
        }
    }

    /// Rebuilds the model this checkpoint was captured from. Every stored
    /// parameter and buffer must be consumed exactly.
    pub fn build_model(&self) -> Result<PrpModel<f32>> {
        let mut model = PrpModel::new(self.config.clone(), 0)?;
        let mut used = 0usize;
        let mut problem: Option<String> = None;
        model.visit("", &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match self.params.get(name) {
                Some(v) if v.shape() == p.value.shape() => {
                    p.value.assign(v);
                    used += 1;
                }
                Some(v) => {
                    problem = Some(format!(
                        "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                        v.shape(),
                        p.value.shape()
                    ));
                }
                None => problem = Some(format!("checkpoint is missing parameter {name}")),
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        if used != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} parameter tensors but the model uses {used}",
                self.params.len()
            )));
        }
        let mut bused = 0usize;
        model.visit_buffers("", &mut |name, b| {
            if problem.is_some() {
                return;
            }
            match self.buffers.get(name) {
                Some(v) if v.shape() == b.shape() => {
                    b.assign(v);
                    bused += 1;
                }
                Some(v) => {
                    problem = Some(format!(
                        "buffer {name} has shape {:?} in the checkpoint but {:?} in the model",
                        v.shape(),
                        b.shape()
                    ));
                }
                None => problem = Some(format!("checkpoint is missing buffer {name}")),
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        if bused != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} buffer tensors but the model uses {bused}",
                self.buffers.len()
            )));
        }
        Ok(model)
    }

    /// Restores optimizer velocity captured alongside the parameters.
    pub fn restore_optimizer(&self, optimizer: &mut Sgd<f32>) {
        optimizer.restore(self.velocity.clone());
    }

    /// Copies only the `encoder/…` tensors into an existing model, leaving
    /// the head (and any decoder) untouched — the transfer-learning path.
    /// The target's encoder must match the checkpoint's shapes exactly.
    pub fn load_encoder_into(&self, model: &mut PrpModel<f32>) -> Result<()> {
        let mut problem: Option<String> = None;
        let mut used = 0usize;
        model.visit("", &mut |name, p| {
            if problem.is_some() || !name.starts_with("encoder/") {
                return;
            }
            match self.params.get(name) {
                Some(v) if v.shape() == p.value.shape() => {
                    p.value.assign(v);
                    used += 1;
                }
                Some(v) => {
                    problem = Some(format!(
                        "encoder parameter {name} has shape {:?} in the checkpoint \
                         but {:?} in the target model",
                        v.shape(),
                        p.value.shape()
                    ));
                }
                None => problem = Some(format!("checkpoint is missing encoder parameter {name}")),
            }
        });
        let stored = self
            .params
            .keys()
            .filter(|k| k.starts_with("encoder/"))
            .count();
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        if used != stored {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {stored} encoder parameters but the target model uses {used}"
            )));
        }
        model.visit_buffers("", &mut |name, b| {
            if problem.is_some() || !name.starts_with("encoder/") {
                return;
            }
            match self.buffers.get(name) {
                Some(v) if v.shape() == b.shape() => b.assign(v),
                _ => problem = Some(format!("checkpoint is missing encoder buffer {name}")),
            }
        });
        match problem {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let groups = [
            (TensorKind::Param, &self.params),
            (TensorKind::Buffer, &self.buffers),
            (TensorKind::Velocity, &self.velocity),
        ];
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (kind, map) in groups {
            for (name, tensor) in map {
                entries.push(TensorEntry {
                    name: name.clone(),
                    kind,
                    shape: tensor.shape().to_vec(),
                });
                for &v in tensor.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
            entries,
        })?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 9 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        fs::write(path, out)
            .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let magic_len = CHECKPOINT_MAGIC.len() + 1;
        if data.len() < magic_len + 8
            || &data[..magic_len - 1] != CHECKPOINT_MAGIC.as_bytes()
            || data[magic_len - 1] != b'\n'
        {
            return Err(Error::Checkpoint(format!(
                "{} is not a {CHECKPOINT_MAGIC} file",
                path.display()
            )));
        }
        let header_len =
            u64::from_le_bytes(data[magic_len..magic_len + 8].try_into().unwrap()) as usize;
        let header_end = magic_len + 8 + header_len;
        if data.len() < header_end {
            return Err(Error::Checkpoint("checkpoint header is truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&data[magic_len + 8..header_end])
            .map_err(|e| Error::Checkpoint(format!("invalid checkpoint header: {e}")))?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        let mut offset = header_end;
        for entry in header.entries {
            let numel: usize = entry.shape.iter().product();
            let end = offset + 4 * numel;
            if data.len() < end {
                return Err(Error::Checkpoint(format!(
                    "checkpoint blob is truncated at tensor {}",
                    entry.name
                )));
            }
            let values: Vec<f32> = data[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset = end;
            let tensor = ArrayD::from_shape_vec(entry.shape.clone(), values)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
            let map = match entry.kind {
                TensorKind::Param => &mut params,
                TensorKind::Buffer => &mut buffers,
                TensorKind::Velocity => &mut velocity,
            };
            if map.insert(entry.name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate tensor {} in checkpoint",
                    entry.name
                )));
            }
        }
        if offset != data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} trailing bytes",
                data.len() - offset
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            val_loss: header.val_loss,
            params,
            buffers,
            velocity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{
        discriminative_loss, discriminative_loss_grad, generative_loss, generative_loss_grad,
        joint_loss, LossWeights,
    };
    use crate::nn::{param_count, param_fingerprint, zero_grads};
    use ndarray::Array4;

    fn tiny_config(variant: BackboneVariant, decoder: Option<usize>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                variant,
                block_channels: [2, 2, 2, 2, 2],
                input_shape: ClipShape {
                    len: 8,
                    height: 16,
                    width: 16,
                    channels: 3,
                },
                ..BackboneConfig::default()
            },
            num_rate_classes: 4,
            decoder: decoder.map(|r| DecoderConfig {
                block_channels: [2, 2, 2, 3],
                recon_rate: r,
            }),
        }
    }

    fn randn5<F: NdFloat>(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<F> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_simple_fn(shape, || {
            let v: f64 = StandardNormal.sample(&mut rng);
            F::from(v).unwrap()
        })
    }

    #[test]
    fn default_conv5_arithmetic_and_feature_dim() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.conv5_shape(), [2, 4, 4]);
        assert_eq!(cfg.feature_dim(), 512);
        // Per-layer spatial chain with ceil-mode pooling.
        let mut h = 112;
        let sizes: Vec<usize> = (0..5)
            .map(|_| {
                h = pool_out_len_ceil(h, 2);
                h
            })
            .collect();
        assert_eq!(sizes, vec![56, 28, 14, 7, 4]);
    }

    #[test]
    fn full_size_encode_emits_documented_shapes() {
        let cfg = ModelConfig {
            decoder: None,
            ..ModelConfig::default()
        };
        let model = PrpModel::<f32>::new(cfg, 1).unwrap();
        let clip = randn5((1, 3, 16, 112, 112), 11);
        let (fmap, fvec) = model.encode(&clip).unwrap();
        assert_eq!(fmap.dim(), (1, 512, 2, 4, 4));
        assert_eq!(fvec.dim(), (1, 512));
        let logits = model.classify_rate(&fvec);
        assert_eq!(logits.dim(), (1, 4));
    }

    #[test]
    fn all_variants_agree_on_conv5_shape_and_are_deterministic() {
        for variant in [
            BackboneVariant::C3d,
            BackboneVariant::R3d,
            BackboneVariant::R2plus1d,
        ] {
            let model = PrpModel::<f32>::new(tiny_config(variant, None), 2).unwrap();
            let clip = randn5((2, 3, 8, 16, 16), 3);
            let (fmap, fvec) = model.encode(&clip).unwrap();
            assert_eq!(fmap.dim(), (2, 2, 1, 1, 1), "{variant:?}");
            assert_eq!(fvec.dim(), (2, 2));
            // Same input twice → bitwise-identical output.
            let (fmap2, _) = model.encode(&clip).unwrap();
            assert_eq!(fmap, fmap2);
            // Batch order preserved: each row matches a singleton encode.
            for i in 0..2 {
                let single = clip
                    .slice(ndarray::s![i..i + 1, .., .., .., ..])
                    .to_owned();
                let (_, fv) = model.encode(&single).unwrap();
                assert_eq!(fv.row(0), fvec.row(i));
            }
        }
    }

    #[test]
    fn zeroed_residual_blocks_pass_relu_of_input_through() {
        for variant in [BackboneVariant::R3d, BackboneVariant::R2plus1d] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut block =
                EncoderBlock::<f64>::new(variant, 2, 2, [3, 3, 3], [1, 1, 1], &mut rng);
            block.visit("", &mut |name, p| {
                if name.contains("conv") {
                    p.value.fill(0.0);
                }
            });
            let x = randn5::<f64>((1, 2, 3, 4, 4), 6);
            let y = block.forward_eval(&x);
            assert_eq!(y, x.mapv(|v| v.max(0.0)), "{variant:?}");
        }
    }

    #[test]
    fn block_parameter_counts_match_analytic_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut count = |variant| {
            let mut block = EncoderBlock::<f32>::new(variant, 2, 2, [3, 3, 3], [1, 1, 1], &mut rng);
            param_count(&mut block)
        };
        // conv 27c²+c, batchnorm 2c, at c = 2.
        let c3d = count(BackboneVariant::C3d);
        let r3d = count(BackboneVariant::R3d);
        let r2p1 = count(BackboneVariant::R2plus1d);
        assert_eq!(c3d, 114);
        assert_eq!(r3d, 228);
        // Factored conv: spatial 9c²+c, norm 2c, temporal 3c²+c → 12c²+4c.
        assert_eq!(r2p1, 120);
        assert_ne!(c3d, r2p1);

        // Channel-changing residual block gains a 1×1×1 projection.
        let mut wide = EncoderBlock::<f32>::new(BackboneVariant::R3d, 2, 4, [3, 3, 3], [1, 1, 1], &mut rng);
        assert_eq!(param_count(&mut wide), 220 + 8 + 436 + 8 + 12);
        let x = randn5::<f32>((1, 2, 5, 6, 6), 8);
        assert_eq!(wide.forward_eval(&x).dim(), (1, 4, 5, 6, 6));
    }

    #[test]
    fn decoder_emits_rate_times_len_frames_at_clip_resolution() {
        for r in [1, 2] {
            let mut model =
                PrpModel::<f32>::new(tiny_config(BackboneVariant::C3d, Some(r)), 4).unwrap();
            let clip = randn5((2, 3, 8, 16, 16), 9);
            let fwd = model.forward_train(&clip).unwrap();
            assert_eq!(fwd.logits.dim(), (2, 4));
            assert_eq!(fwd.recon.as_ref().unwrap().dim(), (2, 3, 8 * r, 16, 16));
            let (fmap, _) = model.encode(&clip).unwrap();
            assert_eq!(model.decode(&fmap).unwrap().dim(), (2, 3, 8 * r, 16, 16));
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                block_channels: [1, 1, 1, 1, 1],
                input_shape: ClipShape {
                    len: 8,
                    height: 8,
                    width: 8,
                    channels: 3,
                },
                ..BackboneConfig::default()
            },
            num_rate_classes: 3,
            decoder: Some(DecoderConfig {
                block_channels: [2, 2, 2, 3],
                recon_rate: 2,
            }),
        };
        let mut model = PrpModel::<f64>::new(cfg, 10).unwrap();
        let clip = randn5::<f64>((2, 3, 8, 8, 8), 11);
        let target = randn5::<f64>((2, 3, 16, 8, 8), 12);
        let attention = Array4::from_shape_simple_fn((2, 16, 8, 8), {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            move || rng.random_range(0.8..2.0)
        });
        let labels = [1usize, 2];
        let weights = LossWeights::default();

        let joint = |model: &mut PrpModel<f64>| -> f64 {
            let fwd = model.forward_train(&clip).unwrap();
            let l_d = discriminative_loss(&fwd.logits, &labels).unwrap();
            let l_g = generative_loss(fwd.recon.as_ref().unwrap(), &target, &attention).unwrap();
            joint_loss(l_d, l_g, &weights)
        };

        zero_grads(&mut model);
        let fwd = model.forward_train(&clip).unwrap();
        let (_, mut dlogits) = discriminative_loss_grad(&fwd.logits, &labels).unwrap();
        dlogits.mapv_inplace(|v| v * weights.lambda_d);
        let (_, mut drecon) =
            generative_loss_grad(fwd.recon.as_ref().unwrap(), &target, &attention).unwrap();
        drecon.mapv_inplace(|v| v * weights.lambda_g);
        model.backward(&fwd, &dlogits, Some(&drecon));

        // Probe a few coordinates of parameters spread across the model.
        let probes = [
            ("encoder/block1/conv1/weight", 5),
            ("encoder/block3/conv1/weight", 0),
            ("encoder/block5/norm1/gamma", 0),
            ("encoder/block2/conv1/bias", 0),
            ("head/weight", 1),
            ("head/bias", 2),
            ("decoder/deconv1/weight", 3),
            ("decoder/deconv4/weight", 7),
            ("decoder/norm2/beta", 0),
        ];
        let eps = 1e-5;
        for (pname, idx) in probes {
            let mut analytic = None;
            model.visit("", &mut |name, p| {
                if name == pname {
                    analytic = Some(p.grad.as_slice().unwrap()[idx]);
                }
            });
            let analytic = analytic.unwrap_or_else(|| panic!("no parameter named {pname}"));
            let mut eval_at = |delta: f64| -> f64 {
                model.visit("", &mut |name, p| {
                    if name == pname {
                        p.value.as_slice_mut().unwrap()[idx] += delta;
                    }
                });
                let loss = joint(&mut model);
                model.visit("", &mut |name, p| {
                    if name == pname {
                        p.value.as_slice_mut().unwrap()[idx] -= delta;
                    }
                });
                loss
            };
            let numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            // Floor the denominator near the cancellation noise of the
            // central difference so near-zero coordinates do not demand
            // more digits than the probe can deliver.
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "{pname}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut model =
            PrpModel::<f32>::new(tiny_config(BackboneVariant::R2plus1d, Some(2)), 14).unwrap();
        let mut opt = Sgd::new(0.01, 0.9, 0.0005);
        let clip = randn5::<f32>((2, 3, 8, 16, 16), 15);
        let target = randn5::<f32>((2, 3, 16, 16, 16), 16);
        let attention = Array4::from_elem((2, 16, 16, 16), 1.0f32);

        // One real training step so velocity and running stats are nontrivial.
        zero_grads(&mut model);
        let fwd = model.forward_train(&clip).unwrap();
        let (_, dlogits) = discriminative_loss_grad(&fwd.logits, &[0, 3]).unwrap();
        let (_, drecon) =
            generative_loss_grad(fwd.recon.as_ref().unwrap(), &target, &attention).unwrap();
        model.backward(&fwd, &dlogits, Some(&drecon));
        opt.step(&mut model);

        let ckpt = Checkpoint::capture(&mut model, &opt, 5, 0.625);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        let mut rebuilt = loaded.build_model().unwrap();
        assert_eq!(
            param_fingerprint(&mut model),
            param_fingerprint(&mut rebuilt)
        );
        let (fmap_a, _) = model.encode(&clip).unwrap();
        let (fmap_b, _) = rebuilt.encode(&clip).unwrap();
        assert_eq!(fmap_a, fmap_b);

        let mut opt2 = Sgd::new(0.01, 0.9, 0.0005);
        loaded.restore_optimizer(&mut opt2);
        assert_eq!(opt.state(), opt2.state());
    }

    #[test]
    fn missing_checkpoint_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no-such.ckpt");
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("no-such.ckpt"), "{msg}");
            }
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut model = PrpModel::<f32>::new(tiny_config(BackboneVariant::C3d, None), 1).unwrap();
        let opt = Sgd::new(0.01, 0.9, 0.0);
        let ckpt = Checkpoint::capture(&mut model, &opt, 0, f64::INFINITY);
        ckpt.save(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn encoder_transfer_copies_backbone_but_not_head() {
        let cfg = tiny_config(BackboneVariant::R3d, Some(2));
        let mut source = PrpModel::<f32>::new(cfg.clone(), 21).unwrap();
        let opt = Sgd::new(0.01, 0.9, 0.0);
        let ckpt = Checkpoint::capture(&mut source, &opt, 3, 1.0);

        // Fresh model, different seed, no decoder — the downstream shape.
        let mut target =
            PrpModel::<f32>::new(ModelConfig { decoder: None, ..cfg }, 22).unwrap();
        let head_before = param_fingerprint(&mut target.head);
        ckpt.load_encoder_into(&mut target).unwrap();
        assert_eq!(
            param_fingerprint(&mut source.encoder),
            param_fingerprint(&mut target.encoder)
        );
        assert_eq!(param_fingerprint(&mut target.head), head_before);

        // A target whose encoder differs in shape is rejected.
        let mut mismatched = PrpModel::<f32>::new(
            ModelConfig {
                backbone: BackboneConfig {
                    block_channels: [4, 2, 2, 2, 2],
                    ..tiny_config(BackboneVariant::R3d, None).backbone
                },
                num_rate_classes: 4,
                decoder: None,
            },
            23,
        )
        .unwrap();
        assert!(ckpt.load_encoder_into(&mut mismatched).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected_with_config_errors() {
        let even_kernel = ModelConfig {
            backbone: BackboneConfig {
                conv_kernel: [2, 3, 3],
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        };
        assert!(matches!(even_kernel.validate(), Err(Error::Config(_))));

        let zero_channel = ModelConfig {
            backbone: BackboneConfig {
                block_channels: [64, 0, 256, 512, 512],
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        };
        assert!(matches!(zero_channel.validate(), Err(Error::Config(_))));

        let wrong_decoder_out = ModelConfig {
            decoder: Some(DecoderConfig {
                block_channels: [256, 128, 64, 1],
                recon_rate: 2,
            }),
            ..ModelConfig::default()
        };
        assert!(matches!(wrong_decoder_out.validate(), Err(Error::Config(_))));

        // A clip length the pooling schedule cannot reduce to len/8 only
        // matters when a decoder must invert it exactly.
        let mut odd_len = ModelConfig::default();
        odd_len.backbone.input_shape.len = 12;
        assert!(matches!(odd_len.validate(), Err(Error::Config(_))));
        odd_len.decoder = None;
        assert!(odd_len.validate().is_ok());
    }

    #[test]
    fn zeroed_head_yields_zero_logits_and_bad_clips_are_input_errors() {
        let mut model = PrpModel::<f32>::new(tiny_config(BackboneVariant::C3d, None), 30).unwrap();
        model.head.visit("", &mut |_, p| p.value.fill(0.0));
        let fvec = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f32);
        assert!(model.classify_rate(&fvec).iter().all(|&v| v == 0.0));

        let bad = randn5::<f32>((1, 3, 8, 15, 16), 31);
        assert!(matches!(model.encode(&bad), Err(Error::Input(_))));
        assert!(matches!(model.forward_train(&bad), Err(Error::Input(_))));
    }
}
