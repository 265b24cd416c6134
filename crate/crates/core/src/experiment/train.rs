//! Per-fold training and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fold_checksum, make_folds, select, DatasetSplit};
use crate::error::{Error, Result};
use crate::geometry::{build_geometry, GeometricFeatures, SceneSequence};
use crate::metrics::{aggregate_folds, evaluate, F1Report, SegmentTimeline, THRESHOLDS};
use crate::model::{Cats, ModelConfig};
use crate::nn::{Adam, ParamStore};
use crate::scalar::Scalar;
use crate::temporal::{argmax_labels, Sampling};
use crate::tensor::{Tape, Tensor};

use super::config::{RunConfig, Selection};

/// Mixes a base seed with small indices into a per-step seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base ^ 0x9e37_79b9_7f4a_7c15, |acc, &p| {
        let mut z = acc
            .wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .wrapping_add(0x94d0_49bb_1331_11eb);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub tau: f64,
    pub loss: f64,
    /// Frame accuracy of the training forward passes of this epoch.
    pub train_accuracy: f64,
    /// Held-out F1@10 in percent.
    pub test_f1_10: f64,
}

/// Parameters by name, stored as `f64` (exact for both precisions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "cats-checkpoint-v1";

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Cats<T>, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: model.config.clone(),
            epoch,
            params: model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; fails if the stored layout does not match the
    /// architecture its config describes.
    pub fn to_model<T: Scalar>(&self) -> Result<Cats<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointMismatch(format!(
                "unknown format `{}`",
                self.format
            )));
        }
        let mut model = Cats::new(self.config.clone(), 0)?;
        let mut store = ParamStore::new();
        for p in &self.params {
            let t = Tensor::new(p.shape.clone(), p.data.iter().map(|&v| T::of(v)).collect())
                .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", p.name)))?;
            store.add(p.name.clone(), t);
        }
        model.store.load_from(&store)?;
        Ok(model)
    }

    /// Checks that this checkpoint was produced for `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            let (a, b) = (
                serde_json::to_value(&self.config),
                serde_json::to_value(expected),
            );
            let fields: Vec<String> = match (a, b) {
                (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) => a
                    .iter()
                    .filter(|(k, v)| b.get(*k) != Some(v))
                    .map(|(k, v)| format!("{k} is {v} in the checkpoint but {} configured", b[k]))
                    .collect(),
                _ => vec!["configs differ".into()],
            };
            return Err(Error::CheckpointMismatch(fields.join("; ")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(self).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            field: "$".into(),
            message: e.to_string(),
        })
    }
}

/// Result of training one fold.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub split: DatasetSplit,
    pub log: Vec<EpochLog>,
    pub kept_epoch: usize,
    /// Held-out report of the kept checkpoint.
    pub report: F1Report,
    /// Evaluation-mode frame accuracy of the kept checkpoint on its training videos.
    pub train_accuracy: f64,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: F1Report,
    pub fold_checksum: String,
}

/// Shared shape facts of a dataset.
pub fn dataset_dims(data: &[SceneSequence], min_classes: usize) -> Result<(usize, usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::EmptyInput("dataset has no videos".into()))?;
    let visual = first
        .visual_dim()
        .ok_or_else(|| Error::MissingVisual(format!("{}: no visual features", first.video_id)))?;
    let classes = data
        .iter()
        .flat_map(|s| s.labels.iter().flatten())
        .max()
        .map_or(0, |&m| m + 1)
        .max(min_classes);
    Ok((classes, visual, first.joints))
}

/// Folds selected by the configuration, with their checksum over all folds.
pub fn config_folds(
    cfg: &RunConfig,
    data: &[SceneSequence],
) -> Result<(Vec<DatasetSplit>, String)> {
    let all = make_folds(data, cfg.train.policy)?;
    let checksum = fold_checksum(&all);
    let chosen = match &cfg.train.folds {
        None => all,
        Some(ids) => ids
            .iter()
            .map(|&i| {
                all.get(i).cloned().ok_or(Error::OutOfRange {
                    what: "fold",
                    index: i,
                    len: all.len(),
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok((chosen, checksum))
}

/// Frame labels and predictions for each video.
pub fn predict_labels<T: Scalar>(
    model: &Cats<T>,
    videos: &[&SceneSequence],
) -> Result<Vec<Vec<Vec<usize>>>> {
    videos
        .iter()
        .map(|s| model.predict(s).and_then(|p| argmax_labels(&p.logits)))
        .collect()
}

/// Segmental F1 of predicted frame labels against each video's ground truth,
/// pooled over humans.
pub fn report_from_labels(
    videos: &[&SceneSequence],
    predicted: &[Vec<Vec<usize>>],
    background: Option<usize>,
) -> Result<F1Report> {
    let mut pairs = Vec::new();
    for (seq, pred) in videos.iter().zip(predicted) {
        for (gt, p) in seq.labels.iter().zip(pred) {
            pairs.push((
                SegmentTimeline::from_labels(p, background),
                SegmentTimeline::from_labels(gt, background),
            ));
        }
    }
    evaluate(&pairs, &THRESHOLDS)
}

pub fn frame_accuracy(videos: &[&SceneSequence], predicted: &[Vec<Vec<usize>>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (seq, pred) in videos.iter().zip(predicted) {
        for (gt, p) in seq.labels.iter().zip(pred) {
            hit += gt.iter().zip(p).filter(|(a, b)| a == b).count();
            total += gt.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Evaluation-mode report of `model` on `videos`.
pub fn evaluate_model<T: Scalar>(model: &Cats<T>, videos: &[&SceneSequence]) -> Result<F1Report> {
    let labels = predict_labels(model, videos)?;
    report_from_labels(videos, &labels, model.config.background)
}

fn tau_at(cfg: &RunConfig, epoch: usize) -> f64 {
    let t = &cfg.train;
    if t.epochs <= 1 {
        return t.tau_start;
    }
    t.tau_start + (t.tau_end - t.tau_start) * epoch as f64 / (t.epochs - 1) as f64
}

/// Trains one fold from scratch; `on_epoch` sees every log line as it is produced.
pub fn train_fold<T: Scalar>(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    data: &[SceneSequence],
    split: &DatasetSplit,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    let seed = cfg.require_seed()?;
    let train = select(data, &split.train)?;
    let test = select(data, &split.test)?;
    if train.is_empty() {
        return Err(Error::EmptyInput(format!(
            "fold {} has no training videos",
            split.fold
        )));
    }
    let geos: Vec<GeometricFeatures<T>> = train
        .iter()
        .map(|s| build_geometry(s))
        .collect::<Result<_>>()?;
    let mut model: Cats<T> = Cats::new(model_cfg.clone(), seed)?;
    for s in train.iter().chain(&test) {
        model.check_scene(s)?;
    }
    let mut adam = Adam::new(cfg.train.lr, Some(cfg.train.clip));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split.fold as u64]));

    let mut best = (f64::NEG_INFINITY, 0usize, Checkpoint::from_model(&model, 0));
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let tau = tau_at(cfg, epoch);
        model.set_tau(tau);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut hit, mut frames) = (0.0, 0usize, 0usize);
        for &i in &order {
            let seq = train[i];
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let sampling = Sampling::Gumbel {
                seed: derive_seed(seed, &[split.fold as u64, epoch as u64, i as u64]),
            };
            let (loss, fwd) = model.loss(&mut tape, &p, seq, &geos[i], &sampling)?;
            let value = tape.item(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is not finite at fold {} epoch {epoch} video {} (tau {tau}, parameter norm {})",
                    split.fold,
                    seq.video_id,
                    param_norm(&model.store)
                )));
            }
            let pred = argmax_labels(&tape.to_tensor(fwd.logits))?;
            for (gt, p) in seq.labels.iter().zip(&pred) {
                hit += gt.iter().zip(p).filter(|(a, b)| a == b).count();
                frames += gt.len();
            }
            tape.backward(loss)?;
            model.store.collect_grads(&tape, &p)?;
            adam.step(&mut model.store);
            loss_sum += value;
        }
        let report = evaluate_model(&model, &test)?;
        let f1 = report.f1_percent(0.10).unwrap_or(0.0);
        let entry = EpochLog {
            fold: split.fold,
            epoch,
            tau,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hit as f64 / frames.max(1) as f64,
            test_f1_10: f1,
        };
        on_epoch(&entry);
        let stop = cfg
            .train
            .stop_accuracy
            .is_some_and(|a| entry.train_accuracy >= a);
        log.push(entry);
        let keep = match cfg.train.select {
            Selection::Best => f1 > best.0,
            Selection::Last => true,
        };
        if keep {
            best = (f1, epoch + 1, Checkpoint::from_model(&model, epoch + 1));
        }
        if stop {
            break;
        }
    }
    let model: Cats<T> = best.2.to_model()?;
    let labels = predict_labels(&model, &train)?;
    Ok(FoldOutcome {
        split: split.clone(),
        log,
        kept_epoch: best.1,
        report: evaluate_model(&model, &test)?,
        train_accuracy: frame_accuracy(&train, &labels),
        checkpoint: best.2,
    })
}

fn param_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Trains every selected fold and aggregates the held-out reports.
pub fn train_folds<T: Scalar>(
    cfg: &RunConfig,
    data: &[SceneSequence],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.require_seed()?;
    let (classes, visual, joints) = dataset_dims(data, cfg.scenario.num_classes)?;
    let model_cfg = cfg.model_config(classes, visual, joints)?;
    let (splits, checksum) = config_folds(cfg, data)?;
    let folds = splits
        .iter()
        .map(|s| train_fold::<T>(cfg, &model_cfg, data, s, on_epoch))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<F1Report> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(TrainOutcome {
        aggregate: aggregate_folds(&reports)?,
        folds,
        fold_checksum: checksum,
    })
}

/// Scores each fold's ground truth against itself, the upper bound of the
/// protocol.
pub fn evaluate_ground_truth(
    data: &[SceneSequence],
    splits: &[DatasetSplit],
    background: Option<usize>,
) -> Result<(Vec<F1Report>, F1Report)> {
    let mut reports = Vec::with_capacity(splits.len());
    for split in splits {
        let test = select(data, &split.test)?;
        let labels: Vec<Vec<Vec<usize>>> = test.iter().map(|s| s.labels.clone()).collect();
        reports.push(report_from_labels(&test, &labels, background)?);
    }
    let agg = aggregate_folds(&reports)?;
    Ok((reports, agg))
}

/// Evaluates per-fold checkpoints on their held-out videos.
pub fn evaluate_checkpoints<T: Scalar>(
    data: &[SceneSequence],
    folds: &[(DatasetSplit, Checkpoint)],
    expected: Option<&ModelConfig>,
) -> Result<(Vec<F1Report>, F1Report)> {
    let mut reports = Vec::with_capacity(folds.len());
    for (split, ckpt) in folds {
        if let Some(cfg) = expected {
            ckpt.check_config(cfg)?;
        }
        let model: Cats<T> = ckpt.to_model()?;
        reports.push(evaluate_model(&model, &select(data, &split.test)?)?);
    }
    let agg = aggregate_folds(&reports)?;
    Ok((reports, agg))
}
