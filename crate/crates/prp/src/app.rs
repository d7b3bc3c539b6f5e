//! The `prp` command-line interface: thin orchestration over the library
//! modules. Every command resolves one [`RunConfigFile`] (from `--config`
//! or a `--profile` preset), echoes it fully materialized into the output
//! directory, and writes file artifacts for post-hoc inspection.
//!
//! Exit codes: 0 success, 1 usage/config/dataset problems, 2 runtime
//! failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array5;

use crate::attention::motion_attention;
use crate::config::{profile_config, RunConfigFile};
use crate::downstream::{
    evaluate_videos, finetune, looped_clip, EvalReport, RetrievalIndex, TopkReport, REPORT_KS,
};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, PrpModel};
use crate::nn::SpatialResize;
use crate::training::{pretrain, split_videos, TrainConfig};
use crate::video::{
    apply_augment, center_draw, load_frame_sequence, save_frame_png, save_gray_png,
    write_frame_dataset,
};

#[derive(Debug, Parser)]
#[command(
    name = "prp",
    version,
    about = "Self-supervised video representation learning from playback-rate perception"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration file (JSON). When given, it replaces the
    /// profile preset entirely.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration preset used when no --config is given.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Output directory for artifacts (overrides the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the resolved configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on the pretext task; writes best.ckpt, log.jsonl, and the
    /// resolved config.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fine-tune an action classifier, from a pretraining checkpoint or
    /// from scratch; writes finetuned.ckpt, finetune_log.jsonl, report.json.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretraining checkpoint to initialize the encoder (omit for
        /// random initialization).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a classifier checkpoint with the 10-clip protocol over
    /// the configured dataset; writes report.json.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Build a retrieval index from the training split and report top-k
    /// accuracy for the validation split; writes the index and report.json.
    Retrieve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render input frames, motion-attention maps, and conv5 activation
    /// maps for one video as PNGs.
    VisualizeAttention {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Frame directory of the video to visualize.
        video: PathBuf,
    },
    /// Materialize the synthetic corpus as a frame-directory dataset.
    GenSynthetic {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

/// Resolves the configuration and output directory for a command.
fn resolve(common: &CommonArgs) -> Result<(RunConfigFile, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => profile_config(common.profile.parse()?),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(spec) = cfg.data.synthetic.as_mut() {
            spec.seed = seed;
        }
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (pass --out or set out_dir)".into()))?;
    Ok((cfg, out))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Finetune { common, ckpt } => cmd_finetune(&common, ckpt.as_deref()),
        Command::Eval { common, ckpt } => cmd_eval(&common, &ckpt),
        Command::Retrieve { common, ckpt } => cmd_retrieve(&common, &ckpt),
        Command::VisualizeAttention {
            common,
            ckpt,
            video,
        } => cmd_visualize_attention(&common, &ckpt, &video),
        Command::GenSynthetic { common, force } => cmd_gen_synthetic(&common, force),
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Resize target that can feed the model's crop even when config and
/// checkpoint disagree about the input size.
fn eval_resize(cfg: &TrainConfig, model: &PrpModel<f32>) -> (usize, usize) {
    let r = cfg.effective_resize_hw();
    let (h, w) = model.config.backbone.input_shape.hw();
    (r.0.max(h), r.1.max(w))
}

fn cmd_pretrain(common: &CommonArgs) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    cfg.validate()?;
    let set = cfg.data.load()?;
    cfg.echo_resolved(&out)?;
    let outcome = pretrain(&set, &cfg.train)?;
    outcome.checkpoint.save(&out.join("best.ckpt"))?;
    write_jsonl(&out.join("log.jsonl"), &outcome.log)?;
    println!(
        "pretrained {} epochs on {} videos; best epoch {} (val loss {:.6}) -> {}",
        cfg.train.epochs,
        set.videos.len(),
        outcome.best_epoch,
        outcome.checkpoint.val_loss,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn cmd_finetune(common: &CommonArgs, ckpt: Option<&Path>) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    cfg.train.validate_finetune()?;
    cfg.data.validate()?;
    let set = cfg.data.load()?;
    cfg.echo_resolved(&out)?;
    let pretrained = ckpt.map(Checkpoint::load).transpose()?;
    let outcome = finetune(pretrained.as_ref(), &set, &cfg.train)?;
    outcome.checkpoint.save(&out.join("finetuned.ckpt"))?;
    write_jsonl(&out.join("finetune_log.jsonl"), &outcome.log)?;

    let model = outcome.checkpoint.build_model()?;
    let (clip_accuracy, video_accuracy) =
        evaluate_videos(&model, &set, &outcome.split.val, eval_resize(&cfg.train, &model))?;
    let mut notes = BTreeMap::new();
    notes.insert("command".into(), "finetune".into());
    notes.insert(
        "backbone".into(),
        if cfg.train.freeze_backbone { "frozen" } else { "full" }.into(),
    );
    notes.insert(
        "initialization".into(),
        if ckpt.is_some() { "pretrained" } else { "random" }.into(),
    );
    let report = EvalReport {
        config_hash: cfg.hash()?,
        clip_accuracy: Some(clip_accuracy),
        video_accuracy: Some(video_accuracy),
        topk_accuracy: None,
        notes,
    };
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "finetuned {} epochs on {} classes; val clip accuracy {:.4}, video accuracy {:.4}",
        cfg.train.epochs,
        set.num_classes(),
        clip_accuracy,
        video_accuracy
    );
    Ok(())
}

fn cmd_eval(common: &CommonArgs, ckpt: &Path) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    cfg.data.validate()?;
    let set = cfg.data.load()?;
    cfg.echo_resolved(&out)?;
    let model = Checkpoint::load(ckpt)?.build_model()?;
    let all: Vec<usize> = (0..set.videos.len()).collect();
    let (clip_accuracy, video_accuracy) =
        evaluate_videos(&model, &set, &all, eval_resize(&cfg.train, &model))?;
    let mut notes = BTreeMap::new();
    notes.insert("command".into(), "eval".into());
    notes.insert("checkpoint".into(), ckpt.display().to_string());
    let report = EvalReport {
        config_hash: cfg.hash()?,
        clip_accuracy: Some(clip_accuracy),
        video_accuracy: Some(video_accuracy),
        topk_accuracy: None,
        notes,
    };
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "evaluated {} videos: clip accuracy {:.4}, video accuracy {:.4}",
        set.videos.len(),
        clip_accuracy,
        video_accuracy
    );
    Ok(())
}

fn cmd_retrieve(common: &CommonArgs, ckpt: &Path) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    cfg.data.validate()?;
    let set = cfg.data.load()?;
    cfg.echo_resolved(&out)?;
    let model = Checkpoint::load(ckpt)?.build_model()?;
    let split = split_videos(&set, cfg.train.val_fraction_or_count, cfg.train.seed)?;
    let resize = eval_resize(&cfg.train, &model);
    let index = RetrievalIndex::build(&model, &set, &split.train, resize)?;
    index.save(&out)?;
    let accs = index.topk_accuracy(&model, &set, &split.val, &REPORT_KS)?;
    let topk = TopkReport::from_fractions([accs[0], accs[1], accs[2], accs[3], accs[4]]);
    let mut notes = BTreeMap::new();
    notes.insert("command".into(), "retrieve".into());
    notes.insert("index_size".into(), index.len().to_string());
    notes.insert("queries".into(), split.val.len().to_string());
    let report = EvalReport {
        config_hash: cfg.hash()?,
        clip_accuracy: None,
        video_accuracy: None,
        topk_accuracy: Some(topk),
        notes,
    };
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "indexed {} videos, {} queries: top-k accuracy {:?}",
        index.len(),
        split.val.len(),
        topk.as_pairs()
    );
    Ok(())
}

fn cmd_visualize_attention(common: &CommonArgs, ckpt: &Path, video_dir: &Path) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let model = Checkpoint::load(ckpt)?.build_model()?;
    let video = load_frame_sequence(video_dir, None)?;
    fs::create_dir_all(&out)?;

    let sh = model.config.backbone.input_shape;
    let resize = eval_resize(&cfg.train, &model);
    let start = video.frame_count().saturating_sub(sh.len) / 2;
    let clip = apply_augment(
        &looped_clip(&video, start, sh.len),
        resize,
        sh.hw(),
        center_draw(resize, sh.hw()),
    )?;

    // Motion attention over the centered clip, rendered on the [λ1, λ2]
    // range so a static video lands on a uniform gray.
    let params = &cfg.train.attention;
    let attention = motion_attention(&clip, params)?;

    // Conv5 activation map: channel sum, upsampled spatially, min-max
    // normalized over the whole volume.
    let batch = crate::training::clips_to_batch(&[&clip])?;
    let (fmap, _) = model.encode(&batch)?;
    let (_, c5, t5, h5, w5) = fmap.dim();
    let mut summed = Array5::<f32>::zeros((1, 1, t5, h5, w5));
    for ci in 0..c5 {
        for ti in 0..t5 {
            for hi in 0..h5 {
                for wi in 0..w5 {
                    summed[(0, 0, ti, hi, wi)] += fmap[(0, ci, ti, hi, wi)];
                }
            }
        }
    }
    let upsampled = SpatialResize::new(sh.hw()).forward(&summed);
    let lo = upsampled.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = upsampled.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    for t in 0..sh.len {
        save_frame_png(
            clip.index_axis(ndarray::Axis(0), t),
            &out.join(format!("frame_{t:03}.png")),
        )?;
        save_gray_png(
            attention.weights.index_axis(ndarray::Axis(0), t),
            params.lambda1,
            params.lambda2,
            &out.join(format!("attention_{t:03}.png")),
        )?;
        let t5_idx = t * t5 / sh.len;
        save_gray_png(
            upsampled
                .index_axis(ndarray::Axis(0), 0)
                .index_axis(ndarray::Axis(0), 0)
                .index_axis(ndarray::Axis(0), t5_idx),
            lo,
            hi,
            &out.join(format!("conv5_{t:03}.png")),
        )?;
    }
    println!(
        "wrote {} images ({} frames x 3 maps) to {}",
        3 * sh.len,
        sh.len,
        out.display()
    );
    Ok(())
}

fn cmd_gen_synthetic(common: &CommonArgs, force: bool) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let spec = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::Config("config has no `data.synthetic` section".into()))?;
    write_frame_dataset(&out, &spec, force)?;
    println!(
        "wrote {} videos across {} classes to {}",
        spec.num_videos,
        spec.class_names().len(),
        out.display()
    );
    Ok(())
}
