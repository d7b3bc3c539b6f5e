//! Pretraining: SGD over sampled clip batches, a held-out validation
//! split, per-epoch logging, and lowest-validation-loss checkpointing.
//!
//! The loop is single-threaded and fully seeded: the model draws its
//! initial weights from the config seed, batch/augmentation randomness
//! comes from one sequential generator, and the validation pass uses a
//! fixed clip grid (every held-out video × every supported interval, at
//! the center start position with a center crop), so identical inputs
//! reproduce identical logs bit for bit.

use ndarray::{Array2, Array4, Array5};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attention::{motion_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::losses::{
    discriminative_loss_grad, dp_accuracy, generative_loss, generative_loss_grad, joint_loss,
    LossReport, LossWeights,
};
use crate::models::{Checkpoint, DecoderConfig, ModelConfig, PrpModel};
use crate::models::BackboneConfig;
use crate::nn::{zero_grads, Sgd};
use crate::sampling::{
    make_training_sample, sample_batch, valid_start_count, SamplingSpec, TrainingSample,
};
use crate::video::{apply_augment, center_draw, draw_augment, RawVideo, VideoSet};

/// Which objectives drive parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Playback-rate classification only.
    Dp,
    /// Slow-down reconstruction only.
    Gp,
    /// Both, combined with the loss weights.
    Dgp,
}

impl Mode {
    pub fn uses_decoder(self) -> bool {
        self != Mode::Dp
    }

    /// The scalar a training step minimizes and validation reports.
    pub fn objective(self, l_d: f64, l_g: f64, weights: &LossWeights) -> f64 {
        match self {
            Mode::Dp => l_d,
            Mode::Gp => l_g,
            Mode::Dgp => joint_loss(l_d, l_g, weights),
        }
    }
}

/// Everything a pretraining run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Videos held out for validation: a fraction of the set when < 1,
    /// an absolute count when ≥ 1.
    pub val_fraction_or_count: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub sampling: SamplingSpec,
    pub backbone: BackboneConfig,
    pub attention: AttentionParams,
    pub mode: Mode,
    /// When false the generative loss runs with unit weights (plain MSE).
    pub attention_enabled: bool,
    /// Decoder block widths; the last entry must match the clip channels.
    pub decoder_channels: [usize; 4],
    /// Frames are resized here before cropping to the model input size;
    /// `None` resizes straight to the input size (identity when the video
    /// already matches).
    pub resize_hw: Option<(usize, usize)>,
    /// Random horizontal flipping during training.
    pub flip: bool,
    /// During fine-tuning, update only the classification head and leave
    /// pretrained encoder parameters untouched. Ignored by pretraining.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 300,
            batch_size: 16,
            val_fraction_or_count: 800.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            sampling: SamplingSpec::default(),
            backbone: BackboneConfig::default(),
            attention: AttentionParams::default(),
            mode: Mode::Dgp,
            attention_enabled: true,
            decoder_channels: [256, 128, 64, 3],
            resize_hw: None,
            flip: true,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    /// The model this config trains: rate classes come from the interval
    /// set, the decoder from the mode and reconstruction rate.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            num_rate_classes: self.sampling.num_rate_classes(),
            decoder: self.mode.uses_decoder().then(|| DecoderConfig {
                block_channels: self.decoder_channels,
                recon_rate: self.sampling.recon_rate,
            }),
        }
    }

    /// `(height, width)` frames are resized to before the crop.
    pub fn effective_resize_hw(&self) -> (usize, usize) {
        self.resize_hw.unwrap_or(self.backbone.input_shape.hw())
    }

    fn validate_scalars(&self, allow_zero_epochs: bool) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.val_fraction_or_count > 0.0 && self.val_fraction_or_count.is_finite()) {
            return Err(Error::Config(
                "val_fraction_or_count must be positive".into(),
            ));
        }
        let sh = self.backbone.input_shape;
        let resize = self.effective_resize_hw();
        if resize.0 < sh.height || resize.1 < sh.width {
            return Err(Error::Config(format!(
                "resize_hw {resize:?} is smaller than the model input {:?}",
                sh.hw()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_scalars(false)?;
        self.loss_weights.validate()?;
        self.sampling.validate()?;
        self.attention.validate()?;
        self.model_config().validate()?;
        if self.sampling.clip_len != self.backbone.input_shape.len {
            return Err(Error::Config(format!(
                "sampling.clip_len ({}) must equal backbone.input_shape.len ({})",
                self.sampling.clip_len,
                self.backbone.input_shape.len
            )));
        }
        Ok(())
    }

    /// Validation for fine-tuning runs, which ignore the pretext-task
    /// fields (mode, loss weights, sampling intervals, attention) and may
    /// legitimately run zero epochs.
    pub fn validate_finetune(&self) -> Result<()> {
        self.validate_scalars(true)?;
        self.backbone.validate()
    }
}

/// Video indices of one train/validation partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Splits video indices by seeded shuffle, stratified by label: each
/// class contributes to the validation set in proportion to its size
/// (largest-remainder rounding), so class balance survives the split.
pub fn split_videos(set: &VideoSet, val_fraction_or_count: f64, seed: u64) -> Result<Split> {
    let n = set.videos.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 videos to split off a validation set, got {n}"
        )));
    }
    let requested = if val_fraction_or_count < 1.0 {
        (val_fraction_or_count * n as f64).round() as usize
    } else {
        val_fraction_or_count.round() as usize
    };
    let val_count = requested.clamp(1, n - 1);

    // Group by label (unlabeled videos form one group), shuffle each
    // group, then take a largest-remainder share from each.
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, v) in set.videos.iter().enumerate() {
        let key = v.label().map_or(-1, |l| l as i64);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shares: Vec<(usize, f64, Vec<usize>)> = Vec::new();
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let exact = members.len() as f64 * val_count as f64 / n as f64;
        shares.push((exact.floor() as usize, exact.fract(), members));
    }
    let mut assigned: usize = shares.iter().map(|(q, _, _)| *q).sum();
    // Hand out the remaining seats by descending fractional remainder,
    // then keep cycling in case some groups are already exhausted.
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.partial_cmp(&shares[a].1).unwrap());
    while assigned != val_count {
        for &gi in &order {
            let (quota, _, members) = &mut shares[gi];
            if assigned < val_count && *quota < members.len() {
                *quota += 1;
                assigned += 1;
            } else if assigned > val_count && *quota > 0 {
                *quota -= 1;
                assigned -= 1;
            }
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (quota, _, members) in shares {
        val.extend_from_slice(&members[..quota]);
        train.extend_from_slice(&members[quota..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

/// Stacks `(T, H, W, C)` clips into one `(N, C, T, H, W)` batch tensor.
pub fn clips_to_batch(clips: &[&Array4<f32>]) -> Result<Array5<f32>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("cannot batch zero clips".into()))?;
    let (t, h, w, c) = first.dim();
    if clips.iter().any(|cl| cl.dim() != (t, h, w, c)) {
        return Err(Error::Input("clips in a batch must share one shape".into()));
    }
    let mut out = Array5::zeros((clips.len(), c, t, h, w));
    for (ni, clip) in clips.iter().enumerate() {
        for ((ti, hi, wi, ci), &v) in clip.indexed_iter() {
            out[(ni, ci, ti, hi, wi)] = v;
        }
    }
    Ok(out)
}

/// Batch tensors for one list of samples: model input, rate labels, and —
/// when `with_targets` — the reconstruction target plus attention weights
/// (unit weights when attention is disabled).
fn batch_tensors(
    samples: &[TrainingSample],
    with_targets: bool,
    attention_enabled: bool,
    params: &AttentionParams,
) -> Result<(Array5<f32>, Vec<usize>, Option<(Array5<f32>, Array4<f32>)>)> {
    let inputs: Vec<&Array4<f32>> = samples.iter().map(|s| &s.input_clip).collect();
    let input = clips_to_batch(&inputs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.rate_class).collect();
    if !with_targets {
        return Ok((input, labels, None));
    }
    let targets: Vec<&Array4<f32>> = samples.iter().map(|s| &s.ground_truth).collect();
    let target = clips_to_batch(&targets)?;
    let (n, _, t, h, w) = target.dim();
    let mut att = Array4::ones((n, t, h, w));
    if attention_enabled {
        for (ni, sample) in samples.iter().enumerate() {
            let map = motion_attention(&sample.attention_frames, params)?;
            att.index_axis_mut(ndarray::Axis(0), ni).assign(&map.weights);
        }
    }
    Ok((input, labels, Some((target, att))))
}

/// Applies the training augmentation (seeded random crop and optional
/// flip, shared across the sample's three clips).
fn augment_batch<R: Rng>(
    samples: Vec<TrainingSample>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    let resize = cfg.effective_resize_hw();
    let crop = cfg.backbone.input_shape.hw();
    samples
        .into_iter()
        .map(|s| {
            let draw = draw_augment(resize, crop, cfg.flip, rng);
            Ok(TrainingSample {
                input_clip: apply_augment(&s.input_clip, resize, crop, draw)?,
                ground_truth: apply_augment(&s.ground_truth, resize, crop, draw)?,
                attention_frames: apply_augment(&s.attention_frames, resize, crop, draw)?,
                ..s
            })
        })
        .collect()
}

/// One gradient step; returns the mode objective for this batch.
fn train_step(
    model: &mut PrpModel<f32>,
    optimizer: &mut Sgd<f32>,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let with_targets = cfg.mode.uses_decoder();
    let (input, labels, targets) =
        batch_tensors(samples, with_targets, cfg.attention_enabled, &cfg.attention)?;
    zero_grads(model);
    let fwd = model.forward_train(&input)?;
    let (l_d, dlogits) = discriminative_loss_grad(&fwd.logits, &labels)?;
    let (l_g, drecon) = match (&fwd.recon, &targets) {
        (Some(recon), Some((target, att))) => {
            let (l_g, grad) = generative_loss_grad(recon, target, att)?;
            (l_g, Some(grad))
        }
        _ => (0.0, None),
    };
    let loss = cfg.mode.objective(l_d, l_g, &cfg.loss_weights);
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "training loss is not finite (l_d {l_d}, l_g {l_g})"
        )));
    }
    let (dlogits, drecon) = match cfg.mode {
        Mode::Dp => (dlogits, None),
        Mode::Gp => (Array2::zeros(dlogits.raw_dim()), drecon),
        Mode::Dgp => {
            let mut dl = dlogits;
            dl.mapv_inplace(|v| v * cfg.loss_weights.lambda_d as f32);
            let dr = drecon.map(|mut g| {
                g.mapv_inplace(|v| v * cfg.loss_weights.lambda_g as f32);
                g
            });
            (dl, dr)
        }
    };
    model.backward(&fwd, &dlogits, drecon.as_ref());
    optimizer.step(model);
    Ok(loss)
}

/// The deterministic validation clip grid: every listed video × every
/// interval it supports, one clip at the center start, center-cropped.
fn validation_samples(
    set: &VideoSet,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<TrainingSample>> {
    let resize = cfg.effective_resize_hw();
    let crop = cfg.backbone.input_shape.hw();
    let draw = center_draw(resize, crop);
    let mut out = Vec::new();
    for &vi in indices {
        let video = &set.videos[vi];
        for &s in &cfg.sampling.intervals {
            let starts = valid_start_count(video.frame_count(), s, cfg.sampling.clip_len);
            if starts == 0 {
                continue;
            }
            let sample = make_training_sample(video, &cfg.sampling, s, (starts - 1) / 2)?;
            out.push(TrainingSample {
                input_clip: apply_augment(&sample.input_clip, resize, crop, draw)?,
                ground_truth: apply_augment(&sample.ground_truth, resize, crop, draw)?,
                attention_frames: apply_augment(&sample.attention_frames, resize, crop, draw)?,
                ..sample
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(
            "validation videos support no clips at the configured intervals".into(),
        ));
    }
    Ok(out)
}

/// Eval-mode pass over the validation clip grid: mean discriminative and
/// generative losses, their weighted joint value, and rate accuracy.
pub fn validate(
    model: &PrpModel<f32>,
    set: &VideoSet,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if indices.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let samples = validation_samples(set, indices, cfg)?;
    let with_targets = model.decoder.is_some();
    let mut l_d_sum = 0.0;
    let mut l_g_sum = 0.0;
    let mut correct = 0.0;
    let total = samples.len();
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let (input, labels, targets) =
            batch_tensors(chunk, with_targets, cfg.attention_enabled, &cfg.attention)?;
        let (fmap, fvec) = model.encode(&input)?;
        let logits = model.classify_rate(&fvec);
        let l_d = crate::losses::discriminative_loss(&logits, &labels)?;
        l_d_sum += l_d * chunk.len() as f64;
        correct += dp_accuracy(&logits, &labels)? * chunk.len() as f64;
        if let Some((target, att)) = &targets {
            let recon = model.decode(&fmap)?;
            l_g_sum += generative_loss(&recon, target, att)? * chunk.len() as f64;
        }
    }
    let l_d = l_d_sum / total as f64;
    let l_g = l_g_sum / total as f64;
    Ok(LossReport {
        l_d,
        l_g,
        joint: joint_loss(l_d, l_g, &cfg.loss_weights),
        dp_accuracy: correct / total as f64,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub dp_accuracy: f64,
}

/// Result of [`pretrain`]: the lowest-validation-loss checkpoint and the
/// full per-epoch log.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Pretrains on `set` per `cfg`: SGD with momentum and decoupled weight
/// decay, `floor(train_videos / batch_size)` (at least one) sampled
/// batches per epoch, validation after every epoch, and the checkpoint
/// with the lowest validation loss returned.
pub fn pretrain(set: &VideoSet, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if set.videos.is_empty() {
        return Err(Error::Dataset("cannot pretrain on an empty video set".into()));
    }
    let split = split_videos(set, cfg.val_fraction_or_count, cfg.seed)?;
    let train_videos: Vec<RawVideo> = split.train.iter().map(|&i| set.videos[i].clone()).collect();
    let steps = (train_videos.len() / cfg.batch_size).max(1);

    let mut model = PrpModel::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut optimizer = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1); // distinct from the weight-init stream

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let samples = sample_batch(&train_videos, &cfg.sampling, cfg.batch_size, &mut rng)?;
            let samples = augment_batch(samples, cfg, &mut rng)?;
            let loss = train_step(&mut model, &mut optimizer, &samples, cfg).map_err(|e| {
                match e {
                    Error::Diverged(msg) => {
                        Error::Diverged(format!("epoch {epoch} step {step}: {msg}"))
                    }
                    other => other,
                }
            })?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / steps as f64;
        let report = validate(&model, set, &split.val, cfg)?;
        let val_loss = cfg.mode.objective(report.l_d, report.l_g, &cfg.loss_weights);
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "validation loss is not finite after epoch {epoch}"
            )));
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            dp_accuracy: report.dp_accuracy,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((
                val_loss,
                epoch,
                Checkpoint::capture(&mut model, &optimizer, epoch, val_loss),
            ));
        }
    }
    let (_, best_epoch, checkpoint) = best.expect("epochs >= 1 so at least one epoch ran");
    Ok(PretrainOutcome {
        checkpoint,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_fingerprint, ParamSet};
    use crate::video::{synthetic_corpus, SyntheticSpec};

    fn desk_corpus(num_videos: usize, frame_count: usize) -> VideoSet {
        synthetic_corpus(&SyntheticSpec {
            num_videos,
            frame_count,
            height: 16,
            width: 16,
            seed: 11,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn desk_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            val_fraction_or_count: 0.25,
            seed: 5,
            sampling: SamplingSpec {
                intervals: vec![1, 2],
                clip_len: 8,
                recon_rate: 2,
                ..SamplingSpec::default()
            },
            backbone: BackboneConfig {
                block_channels: [2, 2, 2, 2, 2],
                input_shape: crate::models::ClipShape {
                    len: 8,
                    height: 16,
                    width: 16,
                    channels: 3,
                },
                ..BackboneConfig::default()
            },
            attention: AttentionParams {
                pool_kernel: (15, 14, 14),
                pool_stride: (16, 4, 4),
                ..AttentionParams::default()
            },
            mode,
            decoder_channels: [2, 2, 2, 3],
            flip: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let set = desk_corpus(16, 24);
        let a = split_videos(&set, 0.25, 9).unwrap();
        let b = split_videos(&set, 0.25, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.val.len(), 4);
        assert_eq!(a.train.len(), 12);
        let mut all: Vec<usize> = a.train.iter().chain(a.val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        // 16 videos over 8 classes → at most one validation video per class.
        for class in 0..8 {
            let in_val = a
                .val
                .iter()
                .filter(|&&i| set.videos[i].label() == Some(class))
                .count();
            assert!(in_val <= 1);
        }
        // Absolute counts are honored too.
        let c = split_videos(&set, 6.0, 9).unwrap();
        assert_eq!(c.val.len(), 6);
    }

    #[test]
    fn clips_to_batch_transposes_layout() {
        let clip = Array4::from_shape_fn((2, 1, 2, 3), |(t, h, w, c)| {
            (t * 100 + h * 10 + w + c * 1000) as f32
        });
        let batch = clips_to_batch(&[&clip, &clip]).unwrap();
        assert_eq!(batch.dim(), (2, 3, 2, 1, 2));
        assert_eq!(batch[(0, 2, 1, 0, 1)], clip[(1, 0, 1, 2)]);
        assert_eq!(batch[(1, 0, 0, 0, 0)], clip[(0, 0, 0, 0)]);
    }

    #[test]
    fn pretrain_logs_every_epoch_and_returns_min_val_checkpoint() {
        let set = desk_corpus(12, 24);
        let cfg = desk_config(Mode::Dgp);
        let out = pretrain(&set, &cfg).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(
            out.log.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        let min_val = out
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.val_loss, min_val);
        assert_eq!(out.checkpoint.epoch, out.best_epoch);
        assert!(out.log.iter().all(|r| (0.0..=1.0).contains(&r.dp_accuracy)));
        // The checkpointed model must rebuild and accept eval input.
        let model = out.checkpoint.build_model().unwrap();
        assert!(model.decoder.is_some());
    }

    #[test]
    fn identical_runs_produce_identical_logs() {
        let set = desk_corpus(12, 24);
        let cfg = desk_config(Mode::Dp);
        let a = pretrain(&set, &cfg).unwrap();
        let b = pretrain(&set, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        let differently_seeded = TrainConfig {
            seed: 6,
            ..cfg.clone()
        };
        let c = pretrain(&set, &differently_seeded).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn dgp_overfits_a_tiny_corpus() {
        // Eight videos, tiny backbone, joint objective: the training loss
        // must at least halve from the first epoch to the last.
        let set = desk_corpus(8, 24);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.02,
            ..desk_config(Mode::Dgp)
        };
        let out = pretrain(&set, &cfg).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(
            last < 0.5 * first,
            "train loss {first} → {last} did not halve"
        );
    }

    #[test]
    fn untrained_model_sits_at_chance_accuracy() {
        let set = desk_corpus(40, 24);
        let cfg = TrainConfig {
            sampling: SamplingSpec {
                intervals: vec![1, 2, 4],
                clip_len: 4,
                recon_rate: 2,
                ..SamplingSpec::default()
            },
            backbone: BackboneConfig {
                input_shape: crate::models::ClipShape {
                    len: 4,
                    height: 16,
                    width: 16,
                    channels: 3,
                },
                temporal_pool_strides: [1, 2, 2, 1, 1],
                ..desk_config(Mode::Dp).backbone
            },
            mode: Mode::Dp,
            ..desk_config(Mode::Dp)
        };
        cfg.validate().unwrap();
        let model = PrpModel::<f32>::new(cfg.model_config(), 77).unwrap();
        let indices: Vec<usize> = (0..set.videos.len()).collect();
        let report = validate(&model, &set, &indices, &cfg).unwrap();
        // 40 videos × 3 intervals, labels perfectly balanced → a random
        // model lands near 1/3.
        assert!(
            (report.dp_accuracy - 1.0 / 3.0).abs() <= 0.12,
            "untrained accuracy {}",
            report.dp_accuracy
        );
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let set = desk_corpus(8, 24);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            epochs: 8,
            ..desk_config(Mode::Dgp)
        };
        match pretrain(&set, &cfg) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("not finite")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn optimizer_honors_zero_rate_and_pure_decay() {
        let cfg = desk_config(Mode::Dp);
        let mut model = PrpModel::<f32>::new(cfg.model_config(), 3).unwrap();

        // lr = 0: parameters do not move even with nonzero gradients.
        let before = param_fingerprint(&mut model);
        model.visit("", &mut |_, p| p.grad.fill(1.0));
        let mut frozen = Sgd::new(0.0, 0.9, 0.0005);
        frozen.step(&mut model);
        frozen.step(&mut model);
        assert_eq!(param_fingerprint(&mut model), before);

        // Zero gradients: pure geometric shrink by (1 − lr·wd) per step.
        let mut sample = None;
        model.visit("", &mut |name, p| {
            if name == "head/weight" {
                sample = Some(p.value.as_slice().unwrap().to_vec());
            }
        });
        let w0 = sample.unwrap();
        zero_grads(&mut model);
        let mut decay = Sgd::new(0.1, 0.9, 0.5);
        for _ in 0..3 {
            decay.step(&mut model);
            zero_grads(&mut model);
        }
        let factor = (1.0 - 0.1 * 0.5f64).powi(3) as f32;
        model.visit("", &mut |name, p| {
            if name == "head/weight" {
                for (a, &b) in p.value.iter().zip(w0.iter()) {
                    // Three sequential f32 multiplies vs. one f64 power:
                    // allow a few ULP of drift.
                    assert!((a - b * factor).abs() <= 1e-5 * b.abs().max(1e-3));
                }
            }
        });
    }

    #[test]
    fn invalid_configs_fail_before_training() {
        let set = desk_corpus(8, 24);
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..desk_config(Mode::Dp)
        };
        assert!(matches!(pretrain(&set, &bad_lr), Err(Error::Config(_))));

        let mismatched_len = TrainConfig {
            sampling: SamplingSpec {
                clip_len: 16,
                ..desk_config(Mode::Dp).sampling
            },
            ..desk_config(Mode::Dp)
        };
        assert!(matches!(
            pretrain(&set, &mismatched_len),
            Err(Error::Config(_))
        ));
    }
}
