//! Downstream evaluation of pretrained representations: action-recognition
//! fine-tuning, the deterministic 10-clip video protocol, and
//! nearest-neighbor video retrieval over pooled conv5 features.
//!
//! Fine-tuning rebuilds the classification head for the dataset's class
//! count, optionally initializes the encoder from a checkpoint, and trains
//! on consecutive-frame clips (interval 1). Evaluation and retrieval share
//! one featurization: ten uniformly spaced, center-cropped clips per
//! video, padded by temporal looping when the video is shorter than a
//! clip.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{discriminative_loss, discriminative_loss_grad, dp_accuracy, softmax_rows};
use crate::models::{Checkpoint, ModelConfig, PrpModel};
use crate::nn::{join_path, zero_grads, Param, ParamSet, Sgd};
use crate::training::{clips_to_batch, split_videos, Split, TrainConfig};
use crate::video::{apply_augment, center_draw, draw_augment, RawVideo, VideoSet};

/// Ten clip start positions spanning `[0, frame_count − clip_len]`
/// uniformly (all zero when the video is not longer than one clip).
pub fn ten_clip_starts(frame_count: usize, clip_len: usize) -> [usize; 10] {
    let span = frame_count.saturating_sub(clip_len) as f64;
    std::array::from_fn(|i| (i as f64 * span / 9.0).round() as usize)
}

/// Extracts `len` frames starting at `start`, looping back to frame 0
/// when the video runs out — the padding rule for short videos.
pub fn looped_clip(video: &RawVideo, start: usize, len: usize) -> Array4<f32> {
    let n = video.frame_count();
    let (h, w, c) = (video.height(), video.width(), video.channels());
    let frames = video.frames();
    Array4::from_shape_fn((len, h, w, c), |(t, hi, wi, ci)| {
        frames[((start + t) % n, hi, wi, ci)]
    })
}

/// The ten center-cropped eval clips of one video as a `(10, C, T, H, W)`
/// batch.
fn ten_center_clips(
    model: &PrpModel<f32>,
    video: &RawVideo,
    resize_hw: (usize, usize),
) -> Result<Array5<f32>> {
    let sh = model.config.backbone.input_shape;
    let draw = center_draw(resize_hw, sh.hw());
    let clips: Vec<Array4<f32>> = ten_clip_starts(video.frame_count(), sh.len)
        .iter()
        .map(|&start| apply_augment(&looped_clip(video, start, sh.len), resize_hw, sh.hw(), draw))
        .collect::<Result<_>>()?;
    clips_to_batch(&clips.iter().collect::<Vec<_>>())
}

/// Ten-clip video-level prediction: per-clip softmax probabilities are
/// averaged and the argmax returned, alongside the averaged distribution.
pub fn evaluate_10clip(
    model: &PrpModel<f32>,
    video: &RawVideo,
    resize_hw: (usize, usize),
) -> Result<(usize, Array1<f32>)> {
    let batch = ten_center_clips(model, video, resize_hw)?;
    let (_, fvec) = model.encode(&batch)?;
    let probs = softmax_rows(&model.classify_rate(&fvec));
    let mean = probs.mean_axis(ndarray::Axis(0)).unwrap();
    let mut best = 0;
    for (i, &p) in mean.iter().enumerate() {
        if p > mean[best] {
            best = i;
        }
    }
    Ok((best, mean))
}

/// Clip-level and video-level accuracy over labeled videos: the former
/// counts each of the ten clips separately, the latter uses the averaged
/// prediction.
pub fn evaluate_videos(
    model: &PrpModel<f32>,
    set: &VideoSet,
    indices: &[usize],
    resize_hw: (usize, usize),
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Input("no videos to evaluate".into()));
    }
    let mut clip_hits = 0usize;
    let mut video_hits = 0usize;
    let mut clips = 0usize;
    for &vi in indices {
        let video = &set.videos[vi];
        let label = video
            .label()
            .ok_or_else(|| Error::Dataset(format!("video {} has no label", video.source_id())))?;
        let batch = ten_center_clips(model, video, resize_hw)?;
        let (_, fvec) = model.encode(&batch)?;
        let probs = softmax_rows(&model.classify_rate(&fvec));
        for row in probs.rows() {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            clip_hits += usize::from(best == label);
            clips += 1;
        }
        let mean = probs.mean_axis(ndarray::Axis(0)).unwrap();
        let mut best = 0;
        for (i, &p) in mean.iter().enumerate() {
            if p > mean[best] {
                best = i;
            }
        }
        video_hits += usize::from(best == label);
    }
    Ok((
        clip_hits as f64 / clips as f64,
        video_hits as f64 / indices.len() as f64,
    ))
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Result of [`finetune`]: the final model state and the per-epoch log.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<FinetuneEpoch>,
    pub split: Split,
}

/// Restricts optimizer updates to the classification head, using the same
/// parameter names as the full model so velocity state stays comparable.
struct HeadOnly<'a>(&'a mut PrpModel<f32>);

impl ParamSet<f32> for HeadOnly<'_> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.0.head.visit(&join_path(prefix, "head"), f);
    }
}

fn action_label(video: &RawVideo) -> Result<usize> {
    video.label().ok_or_else(|| {
        Error::Dataset(format!(
            "fine-tuning needs labeled videos, but {} has no label",
            video.source_id()
        ))
    })
}

/// Draws a batch of `(clip, action label)` pairs: video uniform, start
/// uniform over valid positions (looped when the video is short), shared
/// random crop/flip.
fn sample_action_batch<R: Rng>(
    videos: &[RawVideo],
    clip_len: usize,
    resize_hw: (usize, usize),
    crop_hw: (usize, usize),
    flip: bool,
    batch_size: usize,
    rng: &mut R,
) -> Result<(Array5<f32>, Vec<usize>)> {
    let mut clips = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let video = &videos[rng.random_range(0..videos.len())];
        let starts = video.frame_count().saturating_sub(clip_len) + 1;
        let start = rng.random_range(0..starts.max(1));
        let draw = draw_augment(resize_hw, crop_hw, flip, rng);
        clips.push(apply_augment(
            &looped_clip(video, start, clip_len),
            resize_hw,
            crop_hw,
            draw,
        )?);
        labels.push(action_label(video)?);
    }
    Ok((clips_to_batch(&clips.iter().collect::<Vec<_>>())?, labels))
}

/// Center-clip validation pass: one deterministic clip per video.
fn validate_actions(
    model: &PrpModel<f32>,
    set: &VideoSet,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let sh = model.config.backbone.input_shape;
    let resize = cfg.effective_resize_hw();
    let draw = center_draw(resize, sh.hw());
    let mut l_sum = 0.0;
    let mut correct = 0.0;
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let mut clips = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &vi in chunk {
            let video = &set.videos[vi];
            let start = video.frame_count().saturating_sub(sh.len) / 2;
            clips.push(apply_augment(
                &looped_clip(video, start, sh.len),
                resize,
                sh.hw(),
                draw,
            )?);
            labels.push(action_label(video)?);
        }
        let batch = clips_to_batch(&clips.iter().collect::<Vec<_>>())?;
        let (_, fvec) = model.encode(&batch)?;
        let logits = model.classify_rate(&fvec);
        l_sum += discriminative_loss(&logits, &labels)? * chunk.len() as f64;
        correct += dp_accuracy(&logits, &labels)? * chunk.len() as f64;
    }
    let n = indices.len() as f64;
    Ok((l_sum / n, correct / n))
}

/// Fine-tunes an action classifier: encoder optionally initialized from a
/// pretraining checkpoint (`None` → random initialization), head freshly
/// sized for the dataset's classes, cross-entropy training on interval-1
/// clips. With `cfg.freeze_backbone` only the head is updated. Zero
/// epochs returns the initialization unchanged.
pub fn finetune(
    pretrained: Option<&Checkpoint>,
    set: &VideoSet,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate_finetune()?;
    let classes = set.num_classes();
    if classes < 2 {
        return Err(Error::Dataset(format!(
            "fine-tuning needs at least 2 classes, got {classes}"
        )));
    }
    let model_config = ModelConfig {
        backbone: cfg.backbone.clone(),
        num_rate_classes: classes,
        decoder: None,
    };
    model_config.validate()?;
    if let Some(ck) = pretrained {
        if ck.config.backbone != cfg.backbone {
            return Err(Error::Checkpoint(format!(
                "checkpoint backbone does not match the fine-tuning config:\n  checkpoint: {:?}\n  config:     {:?}",
                ck.config.backbone, cfg.backbone
            )));
        }
    }
    let mut model = PrpModel::<f32>::new(model_config, cfg.seed)?;
    if let Some(ck) = pretrained {
        ck.load_encoder_into(&mut model)?;
    }
    let split = split_videos(set, cfg.val_fraction_or_count, cfg.seed)?;
    let train_videos: Vec<RawVideo> = split.train.iter().map(|&i| set.videos[i].clone()).collect();
    let steps = (train_videos.len() / cfg.batch_size).max(1);
    let sh = cfg.backbone.input_shape;
    let resize = cfg.effective_resize_hw();

    let mut optimizer = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2); // distinct from pretraining and weight-init streams

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_val_loss = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for step in 0..steps {
            let (input, labels) = sample_action_batch(
                &train_videos,
                sh.len,
                resize,
                sh.hw(),
                cfg.flip,
                cfg.batch_size,
                &mut rng,
            )?;
            zero_grads(&mut model);
            let fwd = model.forward_train(&input)?;
            let (l_d, dlogits) = discriminative_loss_grad(&fwd.logits, &labels)?;
            if !l_d.is_finite() {
                return Err(Error::Diverged(format!(
                    "fine-tuning loss is not finite at epoch {epoch} step {step}"
                )));
            }
            acc_sum += dp_accuracy(&fwd.logits, &labels)?;
            model.backward(&fwd, &dlogits, None);
            if cfg.freeze_backbone {
                optimizer.step(&mut HeadOnly(&mut model));
            } else {
                optimizer.step(&mut model);
            }
            loss_sum += l_d;
        }
        let (val_loss, val_accuracy) = validate_actions(&model, set, &split.val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "fine-tuning validation loss is not finite after epoch {epoch}"
            )));
        }
        last_val_loss = val_loss;
        log.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_accuracy: acc_sum / steps as f64,
            val_loss,
            val_accuracy,
        });
    }
    if cfg.epochs == 0 {
        let (val_loss, _) = validate_actions(&model, set, &split.val, cfg)?;
        last_val_loss = val_loss;
    }
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint::capture(&mut model, &optimizer, cfg.epochs, last_val_loss),
        log,
        split,
    })
}

/// One indexed video: identity, class, and its unit-norm feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub video_id: String,
    pub label: usize,
    pub feature: Array1<f32>,
}

/// A searchable store of video features plus the extraction config.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub feature_dim: usize,
    pub config: ModelConfig,
    pub resize_hw: (usize, usize),
}

/// The ten-clip video feature: conv5 vectors of the ten eval clips,
/// averaged and L2-normalized (zero vectors are left at zero).
pub fn video_feature(
    model: &PrpModel<f32>,
    video: &RawVideo,
    resize_hw: (usize, usize),
) -> Result<Array1<f32>> {
    let batch = ten_center_clips(model, video, resize_hw)?;
    let (_, fvec) = model.encode(&batch)?;
    let mut mean = fvec.mean_axis(ndarray::Axis(0)).unwrap();
    let norm = mean.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    Ok(mean)
}

impl RetrievalIndex {
    /// Featurizes every listed video. IDs must be unique and labels
    /// present.
    pub fn build(
        model: &PrpModel<f32>,
        set: &VideoSet,
        indices: &[usize],
        resize_hw: (usize, usize),
    ) -> Result<RetrievalIndex> {
        if indices.is_empty() {
            return Err(Error::Dataset("cannot index zero videos".into()));
        }
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(indices.len());
        for &vi in indices {
            let video = &set.videos[vi];
            if !seen.insert(video.source_id().to_string()) {
                return Err(Error::Dataset(format!(
                    "duplicate video id {} in retrieval index",
                    video.source_id()
                )));
            }
            entries.push(IndexEntry {
                video_id: video.source_id().to_string(),
                label: action_label(video)?,
                feature: video_feature(model, video, resize_hw)?,
            });
        }
        Ok(RetrievalIndex {
            entries,
            feature_dim: model.config.backbone.feature_dim(),
            config: model.config.clone(),
            resize_hw,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices ranked by cosine similarity to `query`, descending,
    /// ties broken by ascending video id.
    pub fn rank(&self, query: &Array1<f32>) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.feature_dim {
            return Err(Error::Input(format!(
                "query feature has length {} but the index stores {}",
                query.len(),
                self.feature_dim
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let dot = e
                    .feature
                    .iter()
                    .zip(query.iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>();
                (i, dot)
            })
            .collect();
        scored.sort_by(|&(i, si), &(j, sj)| {
            sj.partial_cmp(&si)
                .unwrap()
                .then_with(|| self.entries[i].video_id.cmp(&self.entries[j].video_id))
        });
        Ok(scored)
    }

    /// Featurizes `query`, ranks the index, and reports for each `k`
    /// whether any of the top-k entries shares the query's label.
    pub fn retrieve_topk(
        &self,
        model: &PrpModel<f32>,
        query: &RawVideo,
        ks: &[usize],
    ) -> Result<(Vec<bool>, Vec<(usize, f64)>)> {
        if let Some(&k) = ks.iter().max() {
            if k > self.entries.len() {
                return Err(Error::Input(format!(
                    "k = {k} exceeds the index size {}",
                    self.entries.len()
                )));
            }
        }
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Input("each k must be at least 1".into()));
        }
        let label = action_label(query)?;
        let feature = video_feature(model, query, self.resize_hw)?;
        let ranking = self.rank(&feature)?;
        let hits = ks
            .iter()
            .map(|&k| {
                ranking[..k]
                    .iter()
                    .any(|&(i, _)| self.entries[i].label == label)
            })
            .collect();
        Ok((hits, ranking))
    }

    /// Fraction of queries with a top-k hit, for each `k`.
    pub fn topk_accuracy(
        &self,
        model: &PrpModel<f32>,
        queries: &VideoSet,
        query_indices: &[usize],
        ks: &[usize],
    ) -> Result<Vec<f64>> {
        if query_indices.is_empty() {
            return Err(Error::Input("no query videos".into()));
        }
        let mut hits = vec![0usize; ks.len()];
        for &qi in query_indices {
            let (flags, _) = self.retrieve_topk(model, &queries.videos[qi], ks)?;
            for (h, f) in hits.iter_mut().zip(flags) {
                *h += usize::from(f);
            }
        }
        Ok(hits
            .iter()
            .map(|&h| h as f64 / query_indices.len() as f64)
            .collect())
    }

    /// Writes `index.json` (metadata + entry table) and `index.bin`
    /// (little-endian `f32` features, row-major) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.entries.len() * self.feature_dim * 4);
        let mut rows = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            rows.push(IndexRow {
                video_id: e.video_id.clone(),
                label: e.label,
                offset: i * self.feature_dim,
            });
            for &v in &e.feature {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = IndexMeta {
            feature_dim: self.feature_dim,
            config: self.config.clone(),
            resize_hw: self.resize_hw,
            entries: rows,
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&meta)?)?;
        fs::write(dir.join("index.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RetrievalIndex> {
        let meta: IndexMeta = serde_json::from_slice(&fs::read(dir.join("index.json"))?)
            .map_err(|e| Error::Input(format!("invalid retrieval index metadata: {e}")))?;
        let blob = fs::read(dir.join("index.bin"))?;
        if blob.len() != meta.entries.len() * meta.feature_dim * 4 {
            return Err(Error::Input(format!(
                "retrieval index blob holds {} bytes but the metadata expects {}",
                blob.len(),
                meta.entries.len() * meta.feature_dim * 4
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let entries = meta
            .entries
            .into_iter()
            .map(|row| {
                let feature =
                    Array1::from(values[row.offset..row.offset + meta.feature_dim].to_vec());
                IndexEntry {
                    video_id: row.video_id,
                    label: row.label,
                    feature,
                }
            })
            .collect();
        Ok(RetrievalIndex {
            entries,
            feature_dim: meta.feature_dim,
            config: meta.config,
            resize_hw: meta.resize_hw,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexRow {
    video_id: String,
    label: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    feature_dim: usize,
    config: ModelConfig,
    resize_hw: (usize, usize),
    entries: Vec<IndexRow>,
}

/// The k values reported by retrieval evaluations, in report order.
pub const REPORT_KS: [usize; 5] = [1, 5, 10, 20, 50];

/// Top-k retrieval accuracies in the fixed report column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub top20: f64,
    pub top50: f64,
}

impl TopkReport {
    pub fn from_fractions(f: [f64; 5]) -> TopkReport {
        TopkReport {
            top1: f[0],
            top5: f[1],
            top10: f[2],
            top20: f[3],
            top50: f[4],
        }
    }

    pub fn as_pairs(&self) -> [(usize, f64); 5] {
        [
            (1, self.top1),
            (5, self.top5),
            (10, self.top10),
            (20, self.top20),
            (50, self.top50),
        ]
    }
}

/// A self-describing evaluation report: the config hash it was produced
/// under, whichever metrics apply, and free-form notes (e.g. whether the
/// backbone was frozen).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub clip_accuracy: Option<f64>,
    pub video_accuracy: Option<f64>,
    pub topk_accuracy: Option<TopkReport>,
    pub notes: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneConfig, ClipShape};
    use crate::nn::param_fingerprint;
    use crate::video::{synthetic_corpus, SyntheticSpec};

    fn desk_corpus(num_videos: usize) -> VideoSet {
        synthetic_corpus(&SyntheticSpec {
            num_videos,
            frame_count: 24,
            height: 16,
            width: 16,
            seed: 19,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            val_fraction_or_count: 0.25,
            seed: 3,
            backbone: BackboneConfig {
                block_channels: [2, 2, 2, 2, 2],
                input_shape: ClipShape {
                    len: 8,
                    height: 16,
                    width: 16,
                    channels: 3,
                },
                ..BackboneConfig::default()
            },
            sampling: crate::sampling::SamplingSpec {
                intervals: vec![1, 2],
                clip_len: 8,
                recon_rate: 2,
                ..crate::sampling::SamplingSpec::default()
            },
            decoder_channels: [2, 2, 2, 3],
            flip: false,
            ..TrainConfig::default()
        }
    }

    fn tiny_model(classes: usize, seed: u64) -> PrpModel<f32> {
        PrpModel::new(
            ModelConfig {
                backbone: desk_cfg().backbone,
                num_rate_classes: classes,
                decoder: None,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn ten_starts_span_the_valid_range_uniformly() {
        let starts = ten_clip_starts(64, 8);
        assert_eq!(starts[0], 0);
        assert_eq!(starts[9], 56);
        assert!(starts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(starts, [0, 6, 12, 19, 25, 31, 37, 44, 50, 56]);
        assert_eq!(ten_clip_starts(8, 8), [0; 10]);
        assert_eq!(ten_clip_starts(5, 8), [0; 10]);
    }

    #[test]
    fn short_videos_loop_bit_exactly() {
        let set = desk_corpus(2);
        let video = &set.videos[0];
        let clip = looped_clip(video, 20, 8);
        for t in 0..8 {
            assert_eq!(
                clip.index_axis(ndarray::Axis(0), t),
                video.frames().index_axis(ndarray::Axis(0), (20 + t) % 24)
            );
        }
    }

    #[test]
    fn zero_epoch_finetune_returns_initialization() {
        let set = desk_corpus(8);
        let cfg = TrainConfig {
            epochs: 0,
            ..desk_cfg()
        };
        let out = finetune(None, &set, &cfg).unwrap();
        assert!(out.log.is_empty());
        let mut produced = out.checkpoint.build_model().unwrap();
        let mut fresh = tiny_model(set.num_classes(), cfg.seed);
        assert_eq!(
            param_fingerprint(&mut produced),
            param_fingerprint(&mut fresh)
        );
    }

    #[test]
    fn frozen_finetune_moves_only_the_head() {
        let set = desk_corpus(8);
        let cfg = TrainConfig {
            freeze_backbone: true,
            ..desk_cfg()
        };
        let mut init = tiny_model(set.num_classes(), cfg.seed);
        let out = finetune(None, &set, &cfg).unwrap();
        let mut tuned = out.checkpoint.build_model().unwrap();
        assert_eq!(
            param_fingerprint(&mut init.encoder),
            param_fingerprint(&mut tuned.encoder)
        );
        assert_ne!(
            param_fingerprint(&mut init.head),
            param_fingerprint(&mut tuned.head)
        );

        // Full fine-tuning moves the encoder too.
        let full = finetune(None, &set, &desk_cfg()).unwrap();
        let mut full_model = full.checkpoint.build_model().unwrap();
        assert_ne!(
            param_fingerprint(&mut init.encoder),
            param_fingerprint(&mut full_model.encoder)
        );
    }

    #[test]
    fn incompatible_checkpoint_is_a_config_diff_error() {
        let set = desk_corpus(8);
        let mut other = PrpModel::<f32>::new(
            ModelConfig {
                backbone: BackboneConfig {
                    block_channels: [4, 4, 4, 4, 4],
                    ..desk_cfg().backbone
                },
                num_rate_classes: 2,
                decoder: None,
            },
            1,
        )
        .unwrap();
        let ckpt = Checkpoint::capture(&mut other, &Sgd::new(0.01, 0.9, 0.0), 0, 1.0);
        match finetune(Some(&ckpt), &set, &desk_cfg()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("does not match")),
            other => panic!("expected checkpoint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn hand_built_index_ranks_by_cosine_with_id_ties() {
        let e1 = Array1::from(vec![1.0f32, 0.0]);
        let e2 = Array1::from(vec![0.0f32, 1.0]);
        let mid = Array1::from(vec![1.0f32 / 2.0f64.sqrt() as f32, 1.0 / 2.0f64.sqrt() as f32]);
        let index = RetrievalIndex {
            entries: vec![
                IndexEntry { video_id: "v1".into(), label: 0, feature: e1.clone() },
                IndexEntry { video_id: "v2".into(), label: 1, feature: e2 },
                IndexEntry { video_id: "v3".into(), label: 0, feature: mid },
            ],
            feature_dim: 2,
            config: ModelConfig::default(),
            resize_hw: (16, 16),
        };
        let ranking = index.rank(&e1).unwrap();
        let order: Vec<usize> = ranking.iter().map(|&(i, _)| i).collect();
        assert_eq!(order, vec![0, 2, 1]);
        assert!((ranking[0].1 - 1.0).abs() < 1e-6);
        assert!((ranking[1].1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(ranking[2].1.abs() < 1e-6);

        // Exact ties fall back to ascending video id.
        let tied = RetrievalIndex {
            entries: vec![
                IndexEntry { video_id: "b".into(), label: 0, feature: e1.clone() },
                IndexEntry { video_id: "a".into(), label: 1, feature: e1.clone() },
            ],
            feature_dim: 2,
            config: ModelConfig::default(),
            resize_hw: (16, 16),
        };
        let order: Vec<usize> = tied.rank(&e1).unwrap().iter().map(|&(i, _)| i).collect();
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn built_index_has_unit_norms_and_duplicate_content_matches() {
        let mut set = desk_corpus(6);
        // Append a content-duplicate of video 0 under a fresh id.
        let dup = set.videos[0]
            .with_frames(set.videos[0].frames().clone(), "dup_of_0".into())
            .unwrap();
        set.videos.push(dup);
        let model = tiny_model(set.num_classes(), 7);
        let indices: Vec<usize> = (0..set.videos.len()).collect();
        let index = RetrievalIndex::build(&model, &set, &indices, (16, 16)).unwrap();
        assert_eq!(index.len(), 7);
        for e in &index.entries {
            let norm = e.feature.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
        let dot = index.entries[0]
            .feature
            .iter()
            .zip(index.entries[6].feature.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>();
        assert!((dot - 1.0).abs() < 1e-6);

        // Self-query: the duplicate pair guarantees a top-1 label hit.
        let (hits, ranking) = index
            .retrieve_topk(&model, &set.videos[0], &[1, 2])
            .unwrap();
        assert!(hits[0] && hits[1]);
        let top: &IndexEntry = &index.entries[ranking[0].0];
        assert_eq!(top.label, set.videos[0].label().unwrap());

        // Duplicate ids are rejected.
        let mut bad = set.clone();
        let twin = bad.videos[1]
            .with_frames(bad.videos[1].frames().clone(), bad.videos[0].source_id().to_string())
            .unwrap();
        bad.videos.push(twin);
        let all: Vec<usize> = (0..bad.videos.len()).collect();
        assert!(RetrievalIndex::build(&model, &bad, &all, (16, 16)).is_err());
    }

    #[test]
    fn index_roundtrips_through_disk() {
        let set = desk_corpus(5);
        let model = tiny_model(set.num_classes(), 7);
        let indices: Vec<usize> = (0..set.videos.len()).collect();
        let index = RetrievalIndex::build(&model, &set, &indices, (16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        index.save(dir.path()).unwrap();
        let loaded = RetrievalIndex::load(dir.path()).unwrap();
        assert_eq!(index, loaded);
    }

    #[test]
    fn oversized_k_is_an_input_error() {
        let set = desk_corpus(4);
        let model = tiny_model(set.num_classes(), 7);
        let indices: Vec<usize> = (0..set.videos.len()).collect();
        let index = RetrievalIndex::build(&model, &set, &indices, (16, 16)).unwrap();
        assert!(matches!(
            index.retrieve_topk(&model, &set.videos[0], &[5]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn topk_report_serializes_in_table_column_order() {
        let report = TopkReport::from_fractions([0.1, 0.2, 0.3, 0.4, 0.5]);
        let json = serde_json::to_string(&report).unwrap();
        let positions: Vec<usize> = ["top1", "top5", "top10", "top20", "top50"]
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let set = desk_corpus(6);
        let model = tiny_model(set.num_classes(), 9);
        let indices: Vec<usize> = (0..set.videos.len()).collect();
        let (clip_a, video_a) = evaluate_videos(&model, &set, &indices, (16, 16)).unwrap();
        let (clip_b, video_b) = evaluate_videos(&model, &set, &indices, (16, 16)).unwrap();
        assert_eq!((clip_a, video_a), (clip_b, video_b));
        assert!((0.0..=1.0).contains(&clip_a));
        assert!((0.0..=1.0).contains(&video_a));
        let (class, probs) = evaluate_10clip(&model, &set.videos[0], (16, 16)).unwrap();
        assert!(class < set.num_classes());
        assert!((probs.sum() - 1.0).abs() < 1e-5);
    }
}
