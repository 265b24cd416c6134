//! GCN depth sweep and the independent-entity comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneSequence;
use crate::metrics::{threshold_name, FoldSummary, THRESHOLDS};
use crate::scalar::Scalar;

use super::config::RunConfig;
use super::train::{config_folds, train_folds, EpochLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub summary: Vec<FoldSummary>,
    pub fold_checksum: String,
}

impl AblationRow {
    pub fn f1(&self, k: f64) -> Option<FoldSummary> {
        self.summary.iter().find(|s| s.k == k).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{:<24}", self.title, "Model");
        for k in THRESHOLDS {
            let _ = write!(out, " {:<13}", threshold_name(k));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<24}", r.label);
            for k in THRESHOLDS {
                let cell = r.f1(k).map_or("-".into(), |s| s.display());
                let _ = write!(out, " {cell:<13}");
            }
            out.push('\n');
        }
        out
    }

    /// True when every row was evaluated on the same folds.
    pub fn folds_identical(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].fold_checksum == w[1].fold_checksum)
    }
}

fn row<T: Scalar>(
    label: String,
    cfg: &RunConfig,
    data: &[SceneSequence],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<AblationRow> {
    let out = train_folds::<T>(cfg, data, on_epoch)?;
    Ok(AblationRow {
        label,
        summary: out.aggregate.summary,
        fold_checksum: out.fold_checksum,
    })
}

/// One row per GCN depth, all else fixed.
pub fn ablate_gcn_depth<T: Scalar>(
    cfg: &RunConfig,
    data: &[SceneSequence],
    depths: &[usize],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<AblationTable> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("no depths to compare".into()));
    }
    config_folds(cfg, data)?;
    let mut rows = Vec::with_capacity(depths.len());
    for &d in depths {
        let mut c = cfg.clone();
        c.model.gcn_layers = d;
        rows.push(row::<T>(format!("{d}-layer GCN"), &c, data, on_epoch)?);
    }
    Ok(AblationTable {
        title: "GCN depth in category-level fusion".into(),
        rows,
    })
}

/// Identity adjacency in both category GCNs versus the full model.
pub fn ablate_independent<T: Scalar>(
    cfg: &RunConfig,
    data: &[SceneSequence],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<AblationTable> {
    let mut independent = cfg.clone();
    independent.model.independent = true;
    let mut full = cfg.clone();
    full.model.independent = false;
    Ok(AblationTable {
        title: "Independent-entity encoders versus category graphs".into(),
        rows: vec![
            row::<T>("Independent-entity".into(), &independent, data, on_epoch)?,
            row::<T>("CATS".into(), &full, data, on_epoch)?,
        ],
    })
}
