//! Dilated temporal sampling and training-sample assembly.
//!
//! A video sampled at interval `s` keeps every `s`-th frame; a training
//! clip is `clip_len` consecutive frames of that dilated view, which
//! plays back `s`× faster than the source. The class label of a clip is
//! the index of `s` in the candidate interval set.
//!
//! The reconstruction target slows the clip down by `recon_rate` (`r`):
//! it resamples the source at rational stride `s/r`, so every `r`-th
//! target frame coincides bit-exactly with an input frame and the frames
//! between them are convex combinations of their two temporal neighbours.
//! Positions past the last frame clamp to the last frame.

use ndarray::{Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{apply_augment, draw_augment, RawVideo};

/// Where the motion-attention weights are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Attention comes from the slow-down ground-truth clip itself.
    #[default]
    GtAligned,
    /// Attention comes from the raw consecutive-frame window under the
    /// clip, resampled to ground-truth length.
    RawWindow,
}

/// Sampling policy for pretext training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    /// Candidate dilation intervals `S`; a clip's label is its interval's
    /// index in this list.
    pub intervals: Vec<usize>,
    /// Frames per training clip (`l`).
    pub clip_len: usize,
    /// Slow-down factor of the reconstruction target (`r`).
    pub recon_rate: usize,
    pub attention_source: AttentionSource,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            intervals: vec![1, 2, 4, 8],
            clip_len: 16,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::Config("intervals must be non-empty".into()));
        }
        if let Some(&s) = self.intervals.iter().find(|&&s| !s.is_power_of_two()) {
            return Err(Error::Config(format!(
                "intervals must be powers of two, got {s}"
            )));
        }
        let mut sorted = self.intervals.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.intervals.len() {
            return Err(Error::Config("intervals must be distinct".into()));
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        if !self.recon_rate.is_power_of_two() {
            return Err(Error::Config(format!(
                "recon_rate must be a power of two, got {}",
                self.recon_rate
            )));
        }
        Ok(())
    }

    pub fn num_rate_classes(&self) -> usize {
        self.intervals.len()
    }

    /// Label of interval `s`, i.e. its index in the candidate set.
    pub fn rate_class_of(&self, s: usize) -> Result<usize> {
        self.intervals
            .iter()
            .position(|&x| x == s)
            .ok_or_else(|| Error::Input(format!("interval {s} is not in {:?}", self.intervals)))
    }

    /// Frames of the ground-truth clip: `r·l`.
    pub fn ground_truth_len(&self) -> usize {
        self.recon_rate * self.clip_len
    }
}

/// Number of start indices from which a clip of `clip_len` frames at
/// interval `s` fits inside a video of `frame_count` frames. The window
/// of start `b` covers source indices `b ..= b + s·(clip_len − 1)`.
pub fn valid_start_count(frame_count: usize, s: usize, clip_len: usize) -> usize {
    frame_count.saturating_sub(s * (clip_len - 1))
}

/// Keeps every `s`-th frame of `video`, starting at frame 0. The result
/// has `ceil(frame_count / s)` frames and plays `s`× faster.
pub fn dilated_sample(video: &RawVideo, s: usize) -> Result<RawVideo> {
    if s == 0 {
        return Err(Error::Input("sampling interval must be positive".into()));
    }
    let picked: Vec<_> = (0..video.frame_count())
        .step_by(s)
        .map(|t| video.frames().index_axis(Axis(0), t))
        .collect();
    let frames = ndarray::stack(Axis(0), &picked).expect("frames share one shape");
    video.with_frames(frames, format!("{}@x{s}", video.source_id()))
}

/// Copies `len` consecutive frames starting at `start`.
pub fn extract_clip(video: &RawVideo, start: usize, len: usize) -> Result<Array4<f32>> {
    if len == 0 {
        return Err(Error::Input("clip length must be positive".into()));
    }
    let n = video.frame_count();
    if start + len > n {
        return Err(Error::Input(format!(
            "clip [{start}, {}) exceeds video of {n} frames",
            start + len
        )));
    }
    Ok(video
        .frames()
        .slice(ndarray::s![start..start + len, .., .., ..])
        .to_owned())
}

/// One pretext training example.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `(clip_len, H, W, C)` — the dilated clip the model sees.
    pub input_clip: Array4<f32>,
    /// `(recon_rate·clip_len, H, W, C)` — the slow-down target.
    pub ground_truth: Array4<f32>,
    /// Frames the motion-attention weights are computed from; same shape
    /// as `ground_truth`.
    pub attention_frames: Array4<f32>,
    /// Index of `interval` in the candidate set.
    pub rate_class: usize,
    pub interval: usize,
    pub start: usize,
}

/// Resamples `video` at rational stride `num/den` from `start`,
/// producing `count` frames. Positions with zero remainder are bit-exact
/// frame copies; others blend the two neighbouring frames linearly.
/// Positions past the last frame clamp to it.
fn resample_rational(
    video: &RawVideo,
    start: usize,
    num_step: usize,
    den: usize,
    count: usize,
) -> Array4<f32> {
    let n = video.frame_count();
    let (_, h, w, c) = video.frames().dim();
    let mut out = Array4::zeros((count, h, w, c));
    for v in 0..count {
        let num = v * num_step;
        let base = (start + num / den).min(n - 1);
        let rem = num % den;
        let mut dst = out.index_axis_mut(Axis(0), v);
        if rem == 0 {
            dst.assign(&video.frame(base));
        } else {
            let hi = (base + 1).min(n - 1);
            let frac = rem as f32 / den as f32;
            let lo_frame = video.frame(base);
            let hi_frame = video.frame(hi);
            ndarray::Zip::from(&mut dst)
                .and(&lo_frame)
                .and(&hi_frame)
                .for_each(|d, &a, &b| *d = a + (b - a) * frac);
        }
    }
    out
}

/// Assembles the training sample for `(video, interval, start)`:
/// input clip, slow-down ground truth, attention source frames, and the
/// rate-class label.
pub fn make_training_sample(
    video: &RawVideo,
    spec: &SamplingSpec,
    interval: usize,
    start: usize,
) -> Result<TrainingSample> {
    spec.validate()?;
    let rate_class = spec.rate_class_of(interval)?;
    let (l, r) = (spec.clip_len, spec.recon_rate);
    let n = video.frame_count();
    let span = interval * (l - 1);
    if start + span >= n {
        return Err(Error::Input(format!(
            "window [{start}, {}] exceeds video of {n} frames (interval {interval})",
            start + span
        )));
    }

    // Input clip: every `interval`-th frame — stride num/den = interval/1.
    let input_clip = resample_rational(video, start, interval, 1, l);
    // Ground truth: stride interval/r, r·l frames.
    let ground_truth = resample_rational(video, start, interval, r, r * l);
    let attention_frames = match spec.attention_source {
        AttentionSource::GtAligned => ground_truth.clone(),
        AttentionSource::RawWindow => {
            // The raw window has span+1 consecutive frames; stretch them
            // linearly over the ground-truth length.
            let tg = r * l;
            if tg == 1 {
                resample_rational(video, start, 0, 1, 1)
            } else {
                resample_rational(video, start, span, tg - 1, tg)
            }
        }
    };

    Ok(TrainingSample {
        input_clip,
        ground_truth,
        attention_frames,
        rate_class,
        interval,
        start,
    })
}

/// Applies one shared spatial augmentation draw to all three clips of a
/// sample, preserving their frame-level alignment.
pub fn augment_sample<R: Rng>(
    sample: &TrainingSample,
    resize_hw: (usize, usize),
    crop_hw: (usize, usize),
    flip_enabled: bool,
    rng: &mut R,
) -> Result<TrainingSample> {
    let draw = draw_augment(resize_hw, crop_hw, flip_enabled, rng);
    Ok(TrainingSample {
        input_clip: apply_augment(&sample.input_clip, resize_hw, crop_hw, draw)?,
        ground_truth: apply_augment(&sample.ground_truth, resize_hw, crop_hw, draw)?,
        attention_frames: apply_augment(&sample.attention_frames, resize_hw, crop_hw, draw)?,
        ..sample.clone()
    })
}

/// Draws a batch of training samples: for each element, a video uniform
/// over those supporting at least one interval, then an interval uniform
/// over that video's supported set, then a start uniform over the valid
/// range.
pub fn sample_batch<R: Rng>(
    videos: &[RawVideo],
    spec: &SamplingSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    let supported: Vec<(usize, Vec<usize>)> = videos
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let ints: Vec<usize> = spec
                .intervals
                .iter()
                .copied()
                .filter(|&s| valid_start_count(v.frame_count(), s, spec.clip_len) > 0)
                .collect();
            (!ints.is_empty()).then_some((i, ints))
        })
        .collect();
    if supported.is_empty() {
        return Err(Error::Dataset(
            "no video supports any sampling interval at this clip length".into(),
        ));
    }

    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (vi, ints) = &supported[rng.random_range(0..supported.len())];
        let s = ints[rng.random_range(0..ints.len())];
        let starts = valid_start_count(videos[*vi].frame_count(), s, spec.clip_len);
        let start = rng.random_range(0..starts);
        out.push(make_training_sample(&videos[*vi], spec, s, start)?);
    }
    Ok(out)
}

/// [`sample_batch`] with a self-contained seeded generator.
pub fn sample_batch_seeded(
    videos: &[RawVideo],
    spec: &SamplingSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch(videos, spec, batch_size, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{generate_synthetic_video, SyntheticSpec};
    use proptest::prelude::*;

    fn ramp_video(n: usize) -> RawVideo {
        // Frame t is the constant value t/(n-1): temporal structure only.
        let frames = Array4::from_shape_fn((n, 2, 2, 1), |(t, _, _, _)| {
            t as f32 / (n.max(2) - 1) as f32
        });
        RawVideo::new(frames, "ramp", None).unwrap()
    }

    #[test]
    fn dilated_sample_keeps_every_sth_frame() {
        let v = ramp_video(11);
        for s in [1, 2, 3, 4, 8] {
            let d = dilated_sample(&v, s).unwrap();
            assert_eq!(d.frame_count(), 11usize.div_ceil(s));
            for t in 0..d.frame_count() {
                assert_eq!(d.frame(t), v.frame(s * t), "s={s} t={t}");
            }
        }
    }

    #[test]
    fn extract_clip_rejects_out_of_range() {
        let v = ramp_video(8);
        assert!(extract_clip(&v, 0, 8).is_ok());
        assert!(extract_clip(&v, 1, 8).is_err());
        assert!(extract_clip(&v, 8, 1).is_err());
    }

    #[test]
    fn spec_requires_power_of_two_strides() {
        let ok = SamplingSpec::default();
        assert!(ok.validate().is_ok());
        for bad in [vec![1, 3], vec![0], vec![6, 2], vec![2, 2]] {
            let spec = SamplingSpec {
                intervals: bad.clone(),
                ..SamplingSpec::default()
            };
            assert!(spec.validate().is_err(), "intervals {bad:?} must be rejected");
        }
        let spec = SamplingSpec {
            recon_rate: 3,
            ..SamplingSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn ground_truth_aligns_bit_exactly_with_input_clip() {
        let spec = SamplingSpec {
            intervals: vec![1, 2, 4, 8],
            clip_len: 4,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let v = ramp_video(40);
        for &s in &spec.intervals {
            let sample = make_training_sample(&v, &spec, s, 3).unwrap();
            assert_eq!(sample.rate_class, spec.rate_class_of(s).unwrap());
            assert_eq!(sample.ground_truth.dim().0, 8);
            for u in 0..spec.clip_len {
                let gt = sample.ground_truth.index_axis(Axis(0), u * spec.recon_rate);
                let inp = sample.input_clip.index_axis(Axis(0), u);
                assert_eq!(gt, inp, "u={u} s={s}: shared frames must be identical");
            }
        }
    }

    #[test]
    fn interpolated_frames_blend_neighbouring_sources() {
        // s=1, r=2: odd ground-truth frames are the midpoint of two
        // consecutive source frames.
        let spec = SamplingSpec {
            intervals: vec![1],
            clip_len: 3,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let v = ramp_video(10);
        let sample = make_training_sample(&v, &spec, 1, 2).unwrap();
        let g = sample.ground_truth.index_axis(Axis(0), 1);
        let a = v.frame(2);
        let b = v.frame(3);
        for ((gv, av), bv) in g.iter().zip(a.iter()).zip(b.iter()) {
            assert!((gv - 0.5 * (av + bv)).abs() < 1e-7);
        }
    }

    #[test]
    fn ground_truth_tail_clamps_to_last_frame() {
        // Minimal-length video: positions past n-1 must clamp.
        let spec = SamplingSpec {
            intervals: vec![4],
            clip_len: 4,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let v = ramp_video(13); // exactly s·(l−1)+1 frames
        let sample = make_training_sample(&v, &spec, 4, 0).unwrap();
        let last = sample.ground_truth.index_axis(Axis(0), 7);
        assert_eq!(last, v.frame(12), "position 14 must clamp to frame 12");
    }

    #[test]
    fn window_must_fit_inside_video() {
        let spec = SamplingSpec {
            intervals: vec![8],
            clip_len: 16,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let v = ramp_video(64); // needs 8·15+1 = 121 frames
        assert!(make_training_sample(&v, &spec, 8, 0).is_err());
        assert_eq!(valid_start_count(64, 8, 16), 0);
        assert_eq!(valid_start_count(121, 8, 16), 1);
    }

    #[test]
    fn unsupported_interval_is_rejected() {
        let spec = SamplingSpec::default();
        let v = ramp_video(130);
        let err = make_training_sample(&v, &spec, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn raw_window_attention_spans_the_full_window() {
        let spec = SamplingSpec {
            intervals: vec![4],
            clip_len: 4,
            recon_rate: 2,
            attention_source: AttentionSource::RawWindow,
        };
        let v = ramp_video(20);
        let sample = make_training_sample(&v, &spec, 4, 2).unwrap();
        // First and last attention frames are the window's endpoints.
        assert_eq!(sample.attention_frames.index_axis(Axis(0), 0), v.frame(2));
        assert_eq!(sample.attention_frames.index_axis(Axis(0), 7), v.frame(14));
    }

    #[test]
    fn sample_batch_is_deterministic_and_respects_support() {
        let spec = SamplingSpec {
            intervals: vec![1, 2],
            clip_len: 8,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let vspec = SyntheticSpec {
            num_videos: 4,
            frame_count: 24,
            ..SyntheticSpec::default()
        };
        let videos: Vec<_> = (0..4)
            .map(|i| generate_synthetic_video(&vspec, i).unwrap())
            .collect();
        let a = sample_batch_seeded(&videos, &spec, 6, 42).unwrap();
        let b = sample_batch_seeded(&videos, &spec, 6, 42).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.interval, y.interval);
            assert_eq!(x.start, y.start);
            assert_eq!(x.input_clip, y.input_clip);
        }
        // Too-short videos: only unsupported intervals → dataset error.
        let short = SamplingSpec {
            intervals: vec![64],
            clip_len: 8,
            recon_rate: 1,
            attention_source: AttentionSource::GtAligned,
        };
        assert!(sample_batch_seeded(&videos, &short, 2, 0).is_err());
    }

    #[test]
    fn augment_sample_preserves_alignment() {
        let spec = SamplingSpec {
            intervals: vec![2],
            clip_len: 4,
            recon_rate: 2,
            attention_source: AttentionSource::GtAligned,
        };
        let vspec = SyntheticSpec {
            num_videos: 1,
            frame_count: 16,
            ..SyntheticSpec::default()
        };
        let v = generate_synthetic_video(&vspec, 0).unwrap();
        let sample = make_training_sample(&v, &spec, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let aug = augment_sample(&sample, (32, 32), (24, 24), true, &mut rng).unwrap();
        assert_eq!(aug.input_clip.dim(), (4, 24, 24, 3));
        assert_eq!(aug.ground_truth.dim(), (8, 24, 24, 3));
        for u in 0..4 {
            assert_eq!(
                aug.ground_truth.index_axis(Axis(0), 2 * u),
                aug.input_clip.index_axis(Axis(0), u),
                "augmentation must not break input/ground-truth alignment"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Every ground-truth frame lies in the per-pixel convex hull of
        /// its two source frames, for arbitrary (s, r, l, start) over the
        /// admissible power-of-two strides.
        #[test]
        fn ground_truth_stays_in_source_hull(
            s_exp in 0u32..3,
            r_exp in 0u32..3,
            l in 2usize..6,
            start in 0usize..4,
            n in 30usize..50,
        ) {
            let (s, r) = (1usize << s_exp, 1usize << r_exp);
            let v = ramp_video(n);
            let spec = SamplingSpec {
                intervals: vec![s],
                clip_len: l,
                recon_rate: r,
                attention_source: AttentionSource::GtAligned,
            };
            prop_assume!(start + s * (l - 1) < n);
            let sample = make_training_sample(&v, &spec, s, start).unwrap();
            let (lo, hi) = v.frames().iter().fold(
                (f32::MAX, f32::MIN),
                |(lo, hi), &x| (lo.min(x), hi.max(x)),
            );
            for &g in sample.ground_truth.iter() {
                prop_assert!(g >= lo - 1e-6 && g <= hi + 1e-6);
            }
            // Alignment invariant under arbitrary parameters.
            for u in 0..l {
                let gt = sample.ground_truth.index_axis(Axis(0), u * r);
                let inp = sample.input_clip.index_axis(Axis(0), u);
                prop_assert!(gt == inp);
            }
        }

        /// Dilated sampling never fabricates frames: every output frame
        /// is one of the source frames, at index s·t.
        #[test]
        fn dilation_indexing(s in 1usize..9, n in 1usize..40) {
            let v = ramp_video(n);
            let d = dilated_sample(&v, s).unwrap();
            prop_assert_eq!(d.frame_count(), n.div_ceil(s));
            for t in 0..d.frame_count() {
                prop_assert!(d.frame(t) == v.frame(s * t));
            }
        }
    }
}
