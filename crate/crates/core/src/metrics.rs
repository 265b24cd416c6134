//! Segmental F1@k.
//!
//! Frames are 1-based and segment bounds inclusive. A predicted segment is a
//! true positive when its best same-label ground-truth segment overlaps it by
//! at least `k` IoU and has not been claimed by an earlier prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation thresholds reported as F1@10, F1@25 and F1@50.
pub const THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Largest instance the exhaustive oracle accepts on either side.
pub const ORACLE_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(label: usize, start: usize, end: usize) -> Self {
        Segment { label, start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Canonical run-length timeline of one entity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct SegmentTimeline {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for SegmentTimeline {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        SegmentTimeline::new(segments)
    }
}

impl From<SegmentTimeline> for Vec<Segment> {
    fn from(t: SegmentTimeline) -> Self {
        t.segments
    }
}

impl SegmentTimeline {
    /// Validates canonical form: `1 <= start <= end`, sorted, disjoint, and
    /// no two touching segments sharing a label.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.start == 0 || s.start > s.end {
                return Err(Error::NonCanonical(format!(
                    "segment {i} has bounds ({}, {})",
                    s.start, s.end
                )));
            }
            if let Some(prev) = i.checked_sub(1).map(|j| segments[j]) {
                if s.start <= prev.end {
                    return Err(Error::NonCanonical(format!(
                        "segment {i} starts at {} inside the previous segment ending at {}",
                        s.start, prev.end
                    )));
                }
                if s.start == prev.end + 1 && s.label == prev.label {
                    return Err(Error::NonCanonical(format!(
                        "segments {} and {i} share label {} and touch",
                        i - 1,
                        s.label
                    )));
                }
            }
        }
        Ok(SegmentTimeline { segments })
    }

    pub fn empty() -> Self {
        SegmentTimeline::default()
    }

    /// Run-length encodes per-frame labels; frames labeled `background` are
    /// left out.
    pub fn from_labels(labels: &[usize], background: Option<usize>) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            let frame = i + 1;
            if Some(label) == background {
                continue;
            }
            match segments.last_mut() {
                Some(s) if s.label == label && s.end + 1 == frame => s.end = frame,
                _ => segments.push(Segment::new(label, frame, frame)),
            }
        }
        SegmentTimeline { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Same timeline moved `offset` frames later.
    pub fn shifted(&self, offset: usize) -> Self {
        SegmentTimeline {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::new(s.label, s.start + offset, s.end + offset))
                .collect(),
        }
    }
}

pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    if hi < lo {
        return 0.0;
    }
    let inter = hi + 1 - lo;
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Same-label ground-truth segment with highest IoU; ties go to the earlier one.
pub fn best_match(seg: &Segment, gt: &SegmentTimeline) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gt.segments.iter().enumerate() {
        if g.label != seg.label {
            continue;
        }
        let v = iou(seg, g);
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Outcome for one predicted segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredMatch {
    /// Best same-label ground-truth index and its IoU.
    pub target: Option<(usize, f64)>,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub counts: Counts,
    pub f1: f64,
    pub preds: Vec<PredMatch>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    /// Counts split by class label.
    pub fn per_class(
        &self,
        pred: &SegmentTimeline,
        gt: &SegmentTimeline,
    ) -> BTreeMap<usize, Counts> {
        let mut out: BTreeMap<usize, Counts> = BTreeMap::new();
        for (s, m) in pred.segments.iter().zip(&self.preds) {
            let c = out.entry(s.label).or_default();
            if m.hit {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for (g, &matched) in gt.segments.iter().zip(&self.gt_matched) {
            if !matched {
                out.entry(g.label).or_default().fn_ += 1;
            }
        }
        out
    }
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "overlap threshold {k} outside (0, 1)"
        )))
    }
}

/// Greedy segmental matching in temporal order of the predictions.
pub fn f1_at_k(pred: &SegmentTimeline, gt: &SegmentTimeline, k: f64) -> Result<MatchResult> {
    check_k(k)?;
    let mut gt_matched = vec![false; gt.len()];
    let mut preds = Vec::with_capacity(pred.len());
    let mut counts = Counts::default();
    for seg in &pred.segments {
        let target = best_match(seg, gt);
        let hit = match target {
            Some((j, v)) if v >= k && !gt_matched[j] => {
                gt_matched[j] = true;
                true
            }
            _ => false,
        };
        if hit {
            counts.tp += 1;
        } else {
            counts.fp += 1;
        }
        preds.push(PredMatch { target, hit });
    }
    counts.fn_ = gt_matched.iter().filter(|&&m| !m).count();
    Ok(MatchResult {
        counts,
        f1: counts.f1(),
        preds,
        gt_matched,
    })
}

/// Maximum one-to-one same-label matching with IoU `>= k`, found by
/// exhaustive search over subsets of ground-truth segments.
pub fn f1_oracle(pred: &SegmentTimeline, gt: &SegmentTimeline, k: f64) -> Result<Counts> {
    check_k(k)?;
    if pred.len() > ORACLE_LIMIT || gt.len() > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            pred: pred.len(),
            gt: gt.len(),
            limit: ORACLE_LIMIT,
        });
    }
    let ok: Vec<Vec<bool>> = pred
        .segments
        .iter()
        .map(|p| {
            gt.segments
                .iter()
                .map(|g| p.label == g.label && iou(p, g) >= k)
                .collect()
        })
        .collect();
    // best[mask] = largest matching of the predictions seen so far using
    // exactly the ground-truth segments in `mask`.
    let states = 1usize << gt.len();
    let mut best = vec![None::<usize>; states];
    best[0] = Some(0);
    for row in &ok {
        let prev = best.clone();
        for (mask, v) in prev.iter().enumerate() {
            let Some(v) = *v else { continue };
            for (j, _) in row.iter().enumerate().filter(|(_, &e)| e) {
                if mask & (1 << j) == 0 {
                    let next = &mut best[mask | (1 << j)];
                    *next = Some(next.map_or(v + 1, |n| n.max(v + 1)));
                }
            }
        }
    }
    let tp = best.iter().flatten().copied().max().unwrap_or(0);
    Ok(Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    })
}

/// Scores at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub k: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<usize, Counts>,
}

impl ThresholdScore {
    fn from_counts(k: f64, c: Counts, per_class: BTreeMap<usize, Counts>) -> Self {
        ThresholdScore {
            k,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            per_class,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Cross-fold statistics of F1 in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub k: f64,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

impl FoldSummary {
    /// `"71.0 ± 1.0"`.
    pub fn display(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub scores: Vec<ThresholdScore>,
    /// Filled by [`aggregate_folds`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summary: Vec<FoldSummary>,
}

impl F1Report {
    pub fn score(&self, k: f64) -> Option<&ThresholdScore> {
        self.scores.iter().find(|s| s.k == k)
    }

    /// F1 in percent at `k`.
    pub fn f1_percent(&self, k: f64) -> Option<f64> {
        self.score(k).map(|s| 100.0 * s.f1)
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.k).collect()
    }

    /// Plain-text table, one row per threshold.
    pub fn to_table(&self) -> String {
        let mut out = String::from("k      tp    fp    fn    precision  recall  F1\n");
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{:<6} {:<5} {:<5} {:<5} {:<10.4} {:<7.4} {:.1}",
                threshold_name(s.k),
                s.tp,
                s.fp,
                s.fn_,
                s.precision,
                s.recall,
                100.0 * s.f1
            );
        }
        if !self.summary.is_empty() {
            let _ = writeln!(out, "folds: {}", self.summary[0].folds);
            for s in &self.summary {
                let _ = writeln!(out, "{:<6} {}", threshold_name(s.k), s.display());
            }
        }
        out
    }

    /// Fold means as one `F1@10  F1@25  F1@50` row; pooled F1 when the
    /// report was not aggregated.
    pub fn summary_text(&self) -> String {
        let (mut head, mut row) = (String::new(), String::new());
        if self.summary.is_empty() {
            for s in &self.scores {
                let _ = write!(head, "{:<12}", threshold_name(s.k));
                let _ = write!(row, "{:<12.1}", 100.0 * s.f1);
            }
        } else {
            for s in &self.summary {
                let _ = write!(head, "{:<12}", threshold_name(s.k));
                let _ = write!(row, "{:<12}", s.display());
            }
        }
        format!("{}\n{}", head.trim_end(), row.trim_end())
    }

    /// One JSON object per threshold, tagged with the fold name.
    pub fn to_records(&self, fold: &str) -> Vec<String> {
        self.scores
            .iter()
            .map(|s| {
                serde_json::json!({
                    "fold": fold,
                    "k": s.k,
                    "tp": s.tp,
                    "fp": s.fp,
                    "fn": s.fn_,
                    "precision": s.precision,
                    "recall": s.recall,
                    "f1": s.f1,
                })
                .to_string()
            })
            .collect()
    }
}

/// `0.1 -> "F1@10"`.
pub fn threshold_name(k: f64) -> String {
    format!("F1@{}", (k * 100.0).round() as i64)
}

/// Scores `(pred, gt)` timeline pairs, pooling counts across all pairs
/// before computing precision, recall and F1.
pub fn evaluate(
    pairs: &[(SegmentTimeline, SegmentTimeline)],
    thresholds: &[f64],
) -> Result<F1Report> {
    let mut scores = Vec::with_capacity(thresholds.len());
    for &k in thresholds {
        let mut total = Counts::default();
        let mut per_class: BTreeMap<usize, Counts> = BTreeMap::new();
        for (pred, gt) in pairs {
            let m = f1_at_k(pred, gt, k)?;
            total.add(m.counts);
            for (label, c) in m.per_class(pred, gt) {
                per_class.entry(label).or_default().add(c);
            }
        }
        scores.push(ThresholdScore::from_counts(k, total, per_class));
    }
    Ok(F1Report {
        scores,
        summary: Vec::new(),
    })
}

/// Pools counts across folds and attaches mean and population standard
/// deviation of the per-fold F1 (percent).
pub fn aggregate_folds(reports: &[F1Report]) -> Result<F1Report> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptyInput("no fold reports to aggregate".into()))?;
    let ks = first.thresholds();
    if let Some(r) = reports.iter().find(|r| r.thresholds() != ks) {
        return Err(Error::InvalidArgument(format!(
            "fold thresholds {:?} differ from {:?}",
            r.thresholds(),
            ks
        )));
    }
    let n = reports.len() as f64;
    let mut scores = Vec::with_capacity(ks.len());
    let mut summary = Vec::with_capacity(ks.len());
    for (i, &k) in ks.iter().enumerate() {
        let mut total = Counts::default();
        let mut per_class: BTreeMap<usize, Counts> = BTreeMap::new();
        for r in reports {
            total.add(r.scores[i].counts());
            for (&label, &c) in &r.scores[i].per_class {
                per_class.entry(label).or_default().add(c);
            }
        }
        scores.push(ThresholdScore::from_counts(k, total, per_class));
        let f1s: Vec<f64> = reports.iter().map(|r| 100.0 * r.scores[i].f1).collect();
        let mean = f1s.iter().sum::<f64>() / n;
        let var = f1s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        summary.push(FoldSummary {
            k,
            mean,
            std: var.sqrt(),
            folds: reports.len(),
        });
    }
    Ok(F1Report { scores, summary })
}
