//! SVG timelines, plain-text diffs and attention heat maps.

use std::fmt::Write as _;

use crate::metrics::{iou, Segment, SegmentTimeline};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed palette indexed by class id (wraps around).
pub const PALETTE: [&str; 13] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#86bcb6", "#d37295", "#8cd17d",
];

pub fn class_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// Best IoU of `seg` against same-label segments of `other`; 0 if none.
fn best_iou(seg: &Segment, other: &SegmentTimeline) -> f64 {
    other
        .segments()
        .iter()
        .filter(|o| o.label == seg.label)
        .map(|o| iou(seg, o))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedTimeline {
    pub svg: String,
    pub text: String,
    /// Indices of predicted segments whose best IoU is below the threshold.
    pub flagged_pred: Vec<usize>,
    /// Indices of ground-truth segments no prediction covers well enough.
    pub flagged_gt: Vec<usize>,
}

/// Ground truth above prediction as colored bands; segments whose best
/// same-label IoU falls below `threshold` get a red dashed outline.
pub fn render_timeline(
    gt: &SegmentTimeline,
    pred: &SegmentTimeline,
    threshold: f64,
    title: &str,
) -> RenderedTimeline {
    let flagged_pred: Vec<usize> = (0..pred.len())
        .filter(|&i| best_iou(&pred.segments()[i], gt) < threshold)
        .collect();
    let flagged_gt: Vec<usize> = (0..gt.len())
        .filter(|&i| best_iou(&gt.segments()[i], pred) < threshold)
        .collect();
    let frames = gt
        .segments()
        .iter()
        .chain(pred.segments())
        .map(|s| s.end)
        .max()
        .unwrap_or(1);
    let (width, left, bar, gap) = (800.0, 60.0, 24.0, 12.0);
    let scale = (width - left - 10.0) / frames as f64;
    let mut svg = String::new();
    let height = 30.0 + 2.0 * (bar + gap);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="14">{}</text>"#, escape(title));
    let rows = [("truth", gt, &flagged_gt), ("pred", pred, &flagged_pred)];
    for (r, (name, timeline, flagged)) in rows.iter().enumerate() {
        let y = 24.0 + r as f64 * (bar + gap);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{name}</text>"#, y + bar * 0.7);
        for (i, s) in timeline.segments().iter().enumerate() {
            let x = left + (s.start - 1) as f64 * scale;
            let w = s.len() as f64 * scale;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{bar}" fill="{}"><title>class {} frames {}-{}</title></rect>"#,
                class_color(s.label),
                s.label,
                s.start,
                s.end
            );
            if flagged.contains(&i) {
                let _ = writeln!(
                    svg,
                    r#"<rect class="error" x="{:.2}" y="{:.2}" width="{:.2}" height="{}" fill="none" stroke="red" stroke-width="2" stroke-dasharray="4 2"/>"#,
                    x,
                    y - 2.0,
                    w,
                    bar + 4.0
                );
            }
        }
    }
    svg.push_str("</svg>\n");

    let mut text = format!("{title}\n");
    for (name, timeline, flagged) in rows {
        let _ = writeln!(text, "{name}:");
        for (i, s) in timeline.segments().iter().enumerate() {
            let mark = if flagged.contains(&i) {
                "  <-- error"
            } else {
                ""
            };
            let _ = writeln!(
                text,
                "  {:>4}-{:<4} class {}{mark}",
                s.start, s.end, s.label
            );
        }
    }
    RenderedTimeline {
        svg,
        text,
        flagged_pred,
        flagged_gt,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grayscale `(N, N)` attention matrix, darker for larger weights.
pub fn render_attention<T: Scalar>(attention: &Tensor<T>, title: &str) -> String {
    let n = attention.shape().first().copied().unwrap_or(0);
    let cell = (480.0 / n.max(1) as f64).clamp(4.0, 24.0);
    let size = cell * n as f64;
    let max = attention
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n<text x=\"4\" y=\"14\">{}</text>\n",
        size + 8.0,
        size + 28.0,
        escape(title)
    );
    for i in 0..n {
        for j in 0..n {
            let v = attention.data()[i * n + j].as_f64() / max;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="#{shade:02x}{shade:02x}{shade:02x}"/>"##,
                4.0 + j as f64 * cell,
                22.0 + i as f64 * cell
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
