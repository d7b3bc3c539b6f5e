//! Ablation grids: run the pretext task under several (mode, interval
//! set, reconstruction rate, attention) combinations and tabulate the
//! downstream accuracy each one reaches at desk scale.
//!
//! Published paper-scale accuracies can be attached to cells as reference
//! values; they are recorded verbatim in the output table, never
//! reproduced by these runs.

use serde::{Deserialize, Serialize};

use crate::downstream::{evaluate_videos, finetune};
use crate::error::Result;
use crate::training::{pretrain, Mode, TrainConfig};
use crate::video::VideoSet;

/// One grid cell: the pretext-task axes that vary across the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub intervals: Vec<usize>,
    pub recon_rate: usize,
    pub attention_enabled: bool,
    /// Published accuracy for this configuration, if any; copied into the
    /// report for side-by-side reading.
    pub reference_accuracy: Option<f64>,
}

/// One report row: the cell, the desk-scale accuracy it reached, and the
/// recorded reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub intervals: Vec<usize>,
    pub recon_rate: usize,
    pub attention_enabled: bool,
    /// Video-level accuracy on the fine-tuning validation split.
    pub downstream_accuracy: f64,
    pub reference_accuracy: Option<f64>,
    pub pretrain_val_loss: f64,
}

/// Table-2-style method label: the mode, qualified by attention when a
/// generative loss is in play.
pub fn method_name(mode: Mode, attention_enabled: bool) -> String {
    let stem = match mode {
        Mode::Dp => return "DP".into(),
        Mode::Gp => "GP",
        Mode::Dgp => "DGP",
    };
    format!("{stem} {}", if attention_enabled { "w/ MA" } else { "w/o MA" })
}

fn cell_config(base: &TrainConfig, cell: &AblationCell) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.mode = cell.mode;
    cfg.sampling.intervals = cell.intervals.clone();
    cfg.sampling.recon_rate = cell.recon_rate;
    cfg.attention_enabled = cell.attention_enabled;
    cfg
}

/// Pretrains once per cell, fine-tunes from each resulting checkpoint,
/// and reports the validation accuracy. Every cell is validated before
/// any training starts, so a bad cell costs nothing.
pub fn run_ablation_grid(
    set: &VideoSet,
    base: &TrainConfig,
    grid: &[AblationCell],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(crate::error::Error::Config("ablation grid is empty".into()));
    }
    let configs: Vec<TrainConfig> = grid.iter().map(|c| cell_config(base, c)).collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, cfg) in grid.iter().zip(&configs) {
        let pretrained = pretrain(set, cfg)?;
        let tuned = finetune(Some(&pretrained.checkpoint), set, cfg)?;
        let model = tuned.checkpoint.build_model()?;
        let (_, video_accuracy) =
            evaluate_videos(&model, set, &tuned.split.val, cfg.effective_resize_hw())?;
        rows.push(AblationRow {
            method: method_name(cell.mode, cell.attention_enabled),
            intervals: cell.intervals.clone(),
            recon_rate: cell.recon_rate,
            attention_enabled: cell.attention_enabled,
            downstream_accuracy: video_accuracy,
            reference_accuracy: cell.reference_accuracy,
            pretrain_val_loss: pretrained.checkpoint.val_loss,
        });
    }
    Ok(rows)
}

/// Renders rows as an aligned text table with the study's column order.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut cells: Vec<[String; 5]> = vec![[
        "method".into(),
        "intervals".into(),
        "recon rate".into(),
        "accuracy".into(),
        "reference".into(),
    ]];
    for r in rows {
        let intervals = r
            .intervals
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        cells.push([
            r.method.clone(),
            format!("{{{intervals}}}"),
            r.recon_rate.to_string(),
            format!("{:.4}", r.downstream_accuracy),
            r.reference_accuracy
                .map_or_else(|| "-".into(), |v| format!("{v}")),
        ]);
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::models::{BackboneConfig, ClipShape};
    use crate::sampling::SamplingSpec;
    use crate::video::{synthetic_corpus, SyntheticSpec};

    fn desk_base() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            val_fraction_or_count: 0.25,
            seed: 5,
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
            sampling: SamplingSpec {
                intervals: vec![1, 2],
                clip_len: 8,
                recon_rate: 2,
                ..SamplingSpec::default()
            },
            decoder_channels: [2, 2, 2, 3],
            flip: false,
            ..TrainConfig::default()
        }
    }

    fn desk_set() -> VideoSet {
        synthetic_corpus(&SyntheticSpec {
            num_videos: 8,
            frame_count: 24,
            height: 16,
            width: 16,
            seed: 23,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn two_cells_produce_two_rows_with_references_recorded() {
        let set = desk_set();
        let grid = vec![
            AblationCell {
                mode: Mode::Dp,
                intervals: vec![1, 2],
                recon_rate: 2,
                attention_enabled: false,
                reference_accuracy: None,
            },
            AblationCell {
                mode: Mode::Gp,
                intervals: vec![1, 2],
                recon_rate: 2,
                attention_enabled: true,
                reference_accuracy: Some(68.1),
            },
        ];
        let rows = run_ablation_grid(&set, &desk_base(), &grid).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "DP");
        assert_eq!(rows[1].method, "GP w/ MA");
        assert_eq!(rows[1].reference_accuracy, Some(68.1));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.downstream_accuracy)));

        let table = format_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("method"));
        assert!(lines[2].contains("68.1"));
        assert!(lines[1].contains("{1,2}"));
    }

    #[test]
    fn invalid_cell_fails_before_any_training() {
        let set = desk_set();
        let grid = vec![
            AblationCell {
                mode: Mode::Dp,
                intervals: vec![1, 2],
                recon_rate: 2,
                attention_enabled: false,
                reference_accuracy: None,
            },
            AblationCell {
                mode: Mode::Gp,
                intervals: vec![1, 2],
                recon_rate: 0, // invalid
                attention_enabled: true,
                reference_accuracy: None,
            },
        ];
        // A huge epoch budget would hang if any cell trained first.
        let base = TrainConfig {
            epochs: 1_000_000,
            ..desk_base()
        };
        match run_ablation_grid(&set, &base, &grid) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(matches!(
            run_ablation_grid(&set, &base, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn method_names_follow_the_study_convention() {
        assert_eq!(method_name(Mode::Dp, true), "DP");
        assert_eq!(method_name(Mode::Dp, false), "DP");
        assert_eq!(method_name(Mode::Gp, false), "GP w/o MA");
        assert_eq!(method_name(Mode::Gp, true), "GP w/ MA");
        assert_eq!(method_name(Mode::Dgp, true), "DGP w/ MA");
        assert_eq!(method_name(Mode::Dgp, false), "DGP w/o MA");
    }
}
