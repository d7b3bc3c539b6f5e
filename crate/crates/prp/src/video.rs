//! Video containers, the synthetic benchmark corpus, frame-directory I/O,
//! and spatial augmentation.
//!
//! A video is a dense `(T, H, W, C)` array of `f32` pixels in `[0, 1]`.
//! The synthetic corpus renders a bright pattern translating across a
//! dark noisy background; its class is the motion (direction × speed), so
//! recognizing it requires temporal reasoning, and its geometry is
//! reproducible for use as a test oracle.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bilinear_resize_frame;

/// A decoded video: frames in `(T, H, W, C)` layout, pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RawVideo {
    frames: Array4<f32>,
    source_id: String,
    label: Option<usize>,
}

impl RawVideo {
    /// Wraps a frame tensor, validating shape and pixel range.
    pub fn new(frames: Array4<f32>, source_id: impl Into<String>, label: Option<usize>) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Input(format!(
                "video must have positive dimensions, got ({t}, {h}, {w}, {c})"
            )));
        }
        if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(RawVideo {
            frames,
            source_id: source_id.into(),
            label,
        })
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ndarray::ArrayView3<'_, f32> {
        self.frames.index_axis(ndarray::Axis(0), t)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Same video with a different frame tensor (used by subsampling).
    pub fn with_frames(&self, frames: Array4<f32>, source_id: String) -> Result<Self> {
        RawVideo::new(frames, source_id, self.label)
    }
}

/// A labeled collection of videos plus the class-name table.
#[derive(Debug, Clone)]
pub struct VideoSet {
    pub videos: Vec<RawVideo>,
    pub class_names: Vec<String>,
}

impl VideoSet {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

const DIRECTIONS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
const DIRECTION_NAMES: [&str; 4] = ["right", "down", "left", "up"];

/// Parameters of the synthetic moving-pattern corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    /// Translation speeds in pixels per frame; classes are the cross
    /// product of the four axis directions with these speeds.
    pub speeds: Vec<usize>,
    /// Standard deviation of per-pixel Gaussian noise (clamped to [0,1]).
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 80,
            frame_count: 64,
            height: 32,
            width: 32,
            speeds: vec![1, 3],
            noise_std: 0.02,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        DIRECTIONS.len() * self.speeds.len()
    }

    /// Class names in label order: direction-major within each speed.
    pub fn class_names(&self) -> Vec<String> {
        self.speeds
            .iter()
            .flat_map(|s| DIRECTION_NAMES.iter().map(move |d| format!("{d}_s{s}")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.frame_count == 0 {
            return Err(Error::Config("synthetic corpus must be non-empty".into()));
        }
        if self.height < PATTERN_SIZE || self.width < PATTERN_SIZE {
            return Err(Error::Config(format!(
                "synthetic frames must be at least {PATTERN_SIZE}×{PATTERN_SIZE}"
            )));
        }
        if self.speeds.is_empty() {
            return Err(Error::Config("speeds must be non-empty".into()));
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return Err(Error::Config("noise_std must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Side of the square pattern (and diameter of the disc pattern).
pub const PATTERN_SIZE: usize = 8;
const BACKGROUND: f32 = 0.10;
const PATTERN_VALUE: f32 = 0.90;

/// Reproducible per-video geometry, shared by the renderer and by test
/// oracles so ground truth never has to be recovered from noisy pixels.
#[derive(Debug, Clone, Copy)]
pub struct VideoGeometry {
    pub start: (i64, i64),
    pub direction: (i64, i64),
    pub speed: usize,
    /// Even video indices render a square, odd ones a disc.
    pub is_square: bool,
    pub label: usize,
}

impl VideoGeometry {
    /// Pattern centre at frame `t`, wrapped onto the frame grid.
    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (usize, usize) {
        let dy = self.start.0 + self.direction.0 * (self.speed * t) as i64;
        let dx = self.start.1 + self.direction.1 * (self.speed * t) as i64;
        (
            dy.rem_euclid(height as i64) as usize,
            dx.rem_euclid(width as i64) as usize,
        )
    }
}

fn video_rng(spec: &SyntheticSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Geometry of video `index` under `spec` (deterministic).
pub fn video_geometry(spec: &SyntheticSpec, index: usize) -> VideoGeometry {
    let mut rng = video_rng(spec, index);
    let start = (
        rng.random_range(0..spec.height as i64),
        rng.random_range(0..spec.width as i64),
    );
    let label = index % spec.num_classes();
    VideoGeometry {
        start,
        direction: DIRECTIONS[label % DIRECTIONS.len()],
        speed: spec.speeds[label / DIRECTIONS.len()],
        is_square: index % 2 == 0,
        label,
    }
}

/// Boolean mask of the pattern's pixels in frame `t` of video `index`.
pub fn pattern_mask(spec: &SyntheticSpec, index: usize, t: usize) -> Array2<bool> {
    let geo = video_geometry(spec, index);
    let (cy, cx) = geo.center_at(t, spec.height, spec.width);
    let half = (PATTERN_SIZE / 2) as i64;
    let mut mask = Array2::from_elem((spec.height, spec.width), false);
    for dy in -half..half {
        for dx in -half..half {
            if !geo.is_square {
                // Disc: keep offsets within the inscribed radius.
                let (fy, fx) = (dy as f64 + 0.5, dx as f64 + 0.5);
                if fy * fy + fx * fx > (half as f64) * (half as f64) {
                    continue;
                }
            }
            let y = (cy as i64 + dy).rem_euclid(spec.height as i64) as usize;
            let x = (cx as i64 + dx).rem_euclid(spec.width as i64) as usize;
            mask[(y, x)] = true;
        }
    }
    mask
}

/// Renders video `index` of the synthetic corpus.
///
/// Identical `(spec.seed, index)` always produces identical pixels; the
/// label is `index % num_classes`.
pub fn generate_synthetic_video(spec: &SyntheticSpec, index: usize) -> Result<RawVideo> {
    spec.validate()?;
    if index >= spec.num_videos {
        return Err(Error::Input(format!(
            "video index {index} out of range for corpus of {}",
            spec.num_videos
        )));
    }
    let geo = video_geometry(spec, index);
    let mut rng = video_rng(spec, index);
    // Skip the two geometry draws so noise continues the same stream.
    let _ = rng.random_range(0..spec.height as i64);
    let _ = rng.random_range(0..spec.width as i64);

    // Mild per-channel tint keyed to the video (not the class), so
    // appearance alone cannot reveal the motion class.
    let tint = [0.0, 0.04, 0.08];
    let tshift = index % 3;

    let noise = rand_distr::Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE)).unwrap();
    let mut frames = Array4::zeros((spec.frame_count, spec.height, spec.width, 3));
    for t in 0..spec.frame_count {
        let mask = pattern_mask(spec, index, t);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let on_pattern = mask[(y, x)];
                let base = if on_pattern { PATTERN_VALUE } else { BACKGROUND };
                for c in 0..3 {
                    let tinted = if on_pattern { base - tint[(c + tshift) % 3] } else { base };
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    frames[(t, y, x, c)] = (tinted + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    RawVideo::new(frames, format!("synthetic_{index:06}"), Some(geo.label))
}

/// Renders the full corpus described by `spec`.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<VideoSet> {
    let videos = (0..spec.num_videos)
        .map(|i| generate_synthetic_video(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSet {
        videos,
        class_names: spec.class_names(),
    })
}

// ---------------------------------------------------------------------------
// Frame-directory I/O
// ---------------------------------------------------------------------------

fn is_frame_file(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

fn decode_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = f32::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Loads the frames of one video from a directory of image files, sorted
/// by filename. Frames are optionally resized to `resize_hw`; without a
/// resize they must all share one resolution.
pub fn load_frame_sequence(dir: &Path, resize_hw: Option<(usize, usize)>) -> Result<RawVideo> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| is_frame_file(n))
        .collect();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "no frame images found in {}",
            dir.display()
        )));
    }
    names.sort();

    let mut frames: Vec<Array3<f32>> = Vec::with_capacity(names.len());
    for name in &names {
        let mut frame = decode_frame(&dir.join(name))?;
        if let Some(hw) = resize_hw {
            frame = bilinear_resize_frame(frame.view(), hw);
        }
        if let Some(first) = frames.first() {
            if first.dim() != frame.dim() {
                return Err(Error::Dataset(format!(
                    "inconsistent frame sizes in {}",
                    dir.display()
                )));
            }
        }
        frames.push(frame);
    }

    let (h, w, c) = frames[0].dim();
    let mut tensor = Array4::zeros((frames.len(), h, w, c));
    for (t, f) in frames.iter().enumerate() {
        tensor.slice_mut(s![t, .., .., ..]).assign(f);
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    RawVideo::new(tensor, id, None)
}

/// Loads a `<root>/<class>/<video>/<frames>` dataset.
///
/// Class label order comes from `<root>/classes.txt` when present (one
/// name per line), otherwise from the sorted class directory names.
pub fn load_frame_dataset(root: &Path, resize_hw: Option<(usize, usize)>) -> Result<VideoSet> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let class_names: Vec<String> = {
        let listing = root.join("classes.txt");
        if listing.is_file() {
            fs::read_to_string(&listing)?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            let mut dirs: Vec<String> = fs::read_dir(root)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            dirs.sort();
            dirs
        }
    };
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no classes found under {}",
            root.display()
        )));
    }

    let mut videos = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let class_dir = root.join(class);
        if !class_dir.is_dir() {
            // A listed class may have no videos in this split.
            continue;
        }
        let mut vids: Vec<String> = fs::read_dir(&class_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        vids.sort();
        for vid in vids {
            let video = load_frame_sequence(&class_dir.join(&vid), resize_hw)?;
            videos.push(RawVideo {
                label: Some(label),
                source_id: format!("{class}/{vid}"),
                ..video
            });
        }
    }
    if videos.is_empty() {
        return Err(Error::Dataset(format!(
            "no videos found under {}",
            root.display()
        )));
    }
    Ok(VideoSet {
        videos,
        class_names,
    })
}

/// Writes one frame as an 8-bit RGB PNG.
pub fn save_frame_png(frame: ndarray::ArrayView3<'_, f32>, path: &Path) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::Input(format!("png export needs 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ci in 0..3 {
            px.0[ci] = (frame[(y as usize, x as usize, ci)].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a scalar map as an 8-bit grayscale PNG, mapping `[lo, hi]`
/// onto `[0, 255]`.
pub fn save_gray_png(map: ndarray::ArrayView2<'_, f32>, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = ((map[(y as usize, x as usize)] - lo) / span).clamp(0.0, 1.0);
        px.0[0] = (v * 255.0).round() as u8;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Materializes the synthetic corpus as a frame directory tree:
/// `<root>/<class>/<video>/<%06d>.png` plus `classes.txt`.
///
/// Refuses to write into an existing non-empty directory unless `force`.
pub fn write_frame_dataset(root: &Path, spec: &SyntheticSpec, force: bool) -> Result<()> {
    spec.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Input(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    fs::create_dir_all(root)?;

    let class_names = spec.class_names();
    fs::write(root.join("classes.txt"), class_names.join("\n") + "\n")?;

    for index in 0..spec.num_videos {
        let video = generate_synthetic_video(spec, index)?;
        let class = &class_names[video.label().expect("synthetic videos are labeled")];
        let dir = root.join(class).join(video.source_id());
        fs::create_dir_all(&dir)?;
        for t in 0..video.frame_count() {
            save_frame_png(video.frame(t), &dir.join(format!("{t:06}.png")))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Spatial augmentation policy: resize, random crop, optional horizontal
/// flip. `seed` makes [`augment_clip`] self-contained and reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub resize_hw: (usize, usize),
    pub crop_hw: (usize, usize),
    pub flip: bool,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_hw.0 > self.resize_hw.0 || self.crop_hw.1 > self.resize_hw.1 {
            return Err(Error::Config(format!(
                "crop {:?} exceeds resize {:?}",
                self.crop_hw, self.resize_hw
            )));
        }
        if self.crop_hw.0 == 0 || self.crop_hw.1 == 0 {
            return Err(Error::Config("crop dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled augmentation: crop offset and flip decision. Applying the
/// same draw to several clips keeps them spatially aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub crop_offset: (usize, usize),
    pub flip: bool,
}

/// Samples a crop offset (row, then column) and a flip decision.
pub fn draw_augment<R: Rng>(
    resize_hw: (usize, usize),
    crop_hw: (usize, usize),
    flip_enabled: bool,
    rng: &mut R,
) -> AugmentDraw {
    let max_y = resize_hw.0 - crop_hw.0;
    let max_x = resize_hw.1 - crop_hw.1;
    AugmentDraw {
        crop_offset: (rng.random_range(0..=max_y), rng.random_range(0..=max_x)),
        flip: flip_enabled && rng.random_bool(0.5),
    }
}

/// The deterministic center draw used at evaluation time.
pub fn center_draw(resize_hw: (usize, usize), crop_hw: (usize, usize)) -> AugmentDraw {
    AugmentDraw {
        crop_offset: ((resize_hw.0 - crop_hw.0) / 2, (resize_hw.1 - crop_hw.1) / 2),
        flip: false,
    }
}

/// Resizes every frame of `clip` to `resize_hw`, crops `crop_hw` at the
/// drawn offset, and flips horizontally if drawn. `(T, H, W, C)` in and
/// out; every frame receives the identical transform.
pub fn apply_augment(
    clip: &Array4<f32>,
    resize_hw: (usize, usize),
    crop_hw: (usize, usize),
    draw: AugmentDraw,
) -> Result<Array4<f32>> {
    let (t, _, _, c) = clip.dim();
    let (cy, cx) = draw.crop_offset;
    if cy + crop_hw.0 > resize_hw.0 || cx + crop_hw.1 > resize_hw.1 {
        return Err(Error::Input(format!(
            "crop offset {:?} + size {:?} exceeds resized frame {:?}",
            draw.crop_offset, crop_hw, resize_hw
        )));
    }
    let mut out = Array4::zeros((t, crop_hw.0, crop_hw.1, c));
    for ti in 0..t {
        let resized = bilinear_resize_frame(clip.index_axis(ndarray::Axis(0), ti), resize_hw);
        let cropped = resized.slice(s![cy..cy + crop_hw.0, cx..cx + crop_hw.1, ..]);
        let mut dst = out.slice_mut(s![ti, .., .., ..]);
        if draw.flip {
            dst.assign(&cropped.slice(s![.., ..;-1, ..]));
        } else {
            dst.assign(&cropped);
        }
    }
    Ok(out)
}

/// Self-contained augmentation: seeds its own generator from
/// `spec.seed`, draws once, and applies the transform.
pub fn augment_clip(clip: &Array4<f32>, spec: &AugmentSpec) -> Result<Array4<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = draw_augment(spec.resize_hw, spec.crop_hw, spec.flip, &mut rng);
    apply_augment(clip, spec.resize_hw, spec.crop_hw, draw)
}
