//! Training, evaluation, ablations and rendering, plus the run directory
//! layout shared by the command-line tool.
//!
//! A run directory holds `config.ini`, `folds.json`, `log.jsonl`,
//! `report.txt`, `records.jsonl`, one `fold_<k>.ckpt.json` per fold and a
//! `render/` directory with timelines and attention maps.

pub mod ablation;
pub mod config;
pub mod render;
pub mod train;

use std::fs;
use std::path::Path;

use crate::data::{load_dataset, select, synthesize, DatasetSplit};
use crate::error::{Error, Result};
use crate::geometry::SceneSequence;
use crate::metrics::{F1Report, SegmentTimeline};
use crate::scalar::Scalar;

pub use ablation::{ablate_gcn_depth, ablate_independent, AblationRow, AblationTable};
pub use config::{Precision, RunConfig, Selection};
pub use render::{render_attention, render_timeline, RenderedTimeline};
pub use train::{
    evaluate_checkpoints, evaluate_ground_truth, train_fold, train_folds, Checkpoint, EpochLog,
    FoldOutcome, TrainOutcome,
};

/// The configured dataset file, or the synthesized scenario.
pub fn load_data(cfg: &RunConfig) -> Result<Vec<SceneSequence>> {
    match &cfg.dataset {
        Some(path) => load_dataset(path),
        None => synthesize(&cfg.scenario),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Per-fold records followed by the aggregate table.
pub fn report_text(folds: &[(usize, &F1Report)], aggregate: &F1Report) -> (String, String) {
    let mut records = String::new();
    let mut table = String::new();
    for (k, r) in folds {
        for line in r.to_records(&format!("fold{k}")) {
            records.push_str(&line);
            records.push('\n');
        }
        table.push_str(&format!("fold {k}\n{}\n", r.to_table()));
    }
    table.push_str(&format!("all folds\n{}", aggregate.to_table()));
    (table, records)
}

/// Writes every artifact of a finished training run into `dir`.
pub fn write_run<T: Scalar>(
    dir: &Path,
    cfg: &RunConfig,
    data: &[SceneSequence],
    outcome: &TrainOutcome,
) -> Result<()> {
    mkdir(dir)?;
    write(&dir.join("config.ini"), &cfg.to_ini())?;
    let splits: Vec<&DatasetSplit> = outcome.folds.iter().map(|f| &f.split).collect();
    let folds_json = serde_json::json!({ "checksum": outcome.fold_checksum, "folds": splits });
    write(&dir.join("folds.json"), &format!("{folds_json:#}\n"))?;
    let mut log = String::new();
    for f in &outcome.folds {
        for e in &f.log {
            log.push_str(&serde_json::to_string(e).unwrap_or_default());
            log.push('\n');
        }
        f.checkpoint
            .save(&dir.join(format!("fold_{}.ckpt.json", f.split.fold)))?;
    }
    write(&dir.join("log.jsonl"), &log)?;
    let per_fold: Vec<(usize, &F1Report)> = outcome
        .folds
        .iter()
        .map(|f| (f.split.fold, &f.report))
        .collect();
    let (table, records) = report_text(&per_fold, &outcome.aggregate);
    write(&dir.join("report.txt"), &table)?;
    write(&dir.join("records.jsonl"), &records)?;
    for f in &outcome.folds {
        let model = f.checkpoint.to_model::<T>()?;
        render_videos(
            &dir.join("render"),
            &model,
            &select(data, &f.split.test)?,
            0.5,
        )?;
    }
    Ok(())
}

/// Timelines of every human and the attention map at the middle frame of
/// each video. Segments with best IoU below `threshold` are outlined.
pub fn render_videos<T: Scalar>(
    dir: &Path,
    model: &crate::model::Cats<T>,
    videos: &[&SceneSequence],
    threshold: f64,
) -> Result<()> {
    mkdir(dir)?;
    for seq in videos {
        let pred = model.predict(seq)?;
        let mut text = String::new();
        for (h, p) in pred.timelines.iter().enumerate() {
            let gt = SegmentTimeline::from_labels(&seq.labels[h], model.config.background);
            let r = render_timeline(&gt, p, threshold, &format!("{} human {h}", seq.video_id));
            write(&dir.join(format!("{}_h{h}.svg", seq.video_id)), &r.svg)?;
            text.push_str(&r.text);
        }
        write(&dir.join(format!("{}.txt", seq.video_id)), &text)?;
        let t = seq.frames / 2;
        let a = model.attention(seq, t)?;
        let svg = render_attention(&a, &format!("{} frame {}", seq.video_id, t + 1));
        write(&dir.join(format!("{}_attention.svg", seq.video_id)), &svg)?;
    }
    Ok(())
}

/// Loads the per-fold checkpoints and splits written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<Vec<(DatasetSplit, Checkpoint)>> {
    let path = dir.join("folds.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(serde::Deserialize)]
    struct Folds {
        folds: Vec<DatasetSplit>,
    }
    let folds: Folds = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        field: "folds".into(),
        message: e.to_string(),
    })?;
    folds
        .folds
        .into_iter()
        .map(|s| {
            let ckpt = Checkpoint::load(&dir.join(format!("fold_{}.ckpt.json", s.fold)))?;
            Ok((s, ckpt))
        })
        .collect()
}
