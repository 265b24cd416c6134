//! Scene tracks and their geometric feature channels.
//!
//! Each human joint and each object bounding-box corner becomes one node
//! with four channels `(pos_x, pos_y, vel_x, vel_y)`. Positions are divided
//! by the frame size; velocity is the backward difference, zero on the
//! first frame and wherever either frame's point is occluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Coordinate written for a joint that is not visible in a frame.
pub const OCCLUDED: f64 = -1.0;

fn default_frame_size() -> [f64; 2] {
    [1.0, 1.0]
}

/// One video: keypoint tracks, box tracks, labels and optional visual
/// vectors. Field order and nesting match the on-disk record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub video_id: String,
    pub subject_ids: Vec<u32>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub humans: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    #[serde(rename = "O")]
    pub objects: usize,
    /// Frame width and height in pixels.
    #[serde(default = "default_frame_size")]
    pub frame_size: [f64; 2],
    /// `[T][H][J]` pixel positions; occluded joints hold [`OCCLUDED`].
    #[serde(rename = "joints")]
    pub joint_tracks: Vec<Vec<Vec<[f64; 2]>>>,
    /// `[T][O]` boxes `(x1, y1, x2, y2)` in pixels.
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// `[H][T]` sub-activity ids.
    pub labels: Vec<Vec<usize>>,
    /// `[T][H][D]` per-human appearance vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_human: Option<Vec<Vec<Vec<f64>>>>,
    /// `[T][O][D]` per-object appearance vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_object: Option<Vec<Vec<Vec<f64>>>>,
}

impl SceneSequence {
    /// Checks every structural invariant; `num_classes` bounds the labels.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(format!("{}: {m}", self.video_id)));
        let (t, h, j, o) = (self.frames, self.humans, self.joints, self.objects);
        if self.joint_tracks.len() != t || self.boxes.len() != t {
            return bad(format!(
                "tracks span {} / {} frames, expected {t}",
                self.joint_tracks.len(),
                self.boxes.len()
            ));
        }
        for (f, people) in self.joint_tracks.iter().enumerate() {
            if people.len() != h || people.iter().any(|p| p.len() != j) {
                return bad(format!("frame {f}: expected {h} humans of {j} joints"));
            }
        }
        for (f, boxes) in self.boxes.iter().enumerate() {
            if boxes.len() != o {
                return bad(format!(
                    "frame {f}: expected {o} boxes, found {}",
                    boxes.len()
                ));
            }
            if let Some(b) = boxes.iter().find(|b| !(b[0] <= b[2] && b[1] <= b[3])) {
                return bad(format!("frame {f}: box {b:?} has x1 > x2 or y1 > y2"));
            }
        }
        if self.labels.len() != h || self.labels.iter().any(|l| l.len() != t) {
            return bad(format!("labels must be {h} tracks of {t} frames"));
        }
        if let Some(c) = num_classes {
            if let Some(&l) = self.labels.iter().flatten().find(|&&l| l >= c) {
                return bad(format!("label {l} outside 0..{c}"));
            }
        }
        if !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return bad(format!("frame size {:?} must be positive", self.frame_size));
        }
        let check_visual = |v: &Option<Vec<Vec<Vec<f64>>>>, n: usize, what: &str| -> Result<()> {
            if let Some(v) = v {
                let d = self.visual_dim().unwrap_or(0);
                if v.len() != t
                    || v.iter()
                        .any(|f| f.len() != n || f.iter().any(|e| e.len() != d))
                {
                    return Err(Error::InvalidScene(format!(
                        "{}: {what} visual features must be [{t}][{n}][{d}]",
                        self.video_id
                    )));
                }
            }
            Ok(())
        };
        check_visual(&self.visual_human, h, "human")?;
        check_visual(&self.visual_object, o, "object")?;
        Ok(())
    }

    /// Dimension of the visual vectors, if any are present.
    pub fn visual_dim(&self) -> Option<usize> {
        let first = |v: &Option<Vec<Vec<Vec<f64>>>>| {
            v.as_ref()
                .and_then(|v| v.first())
                .and_then(|f| f.first())
                .map(Vec::len)
        };
        first(&self.visual_human).or_else(|| first(&self.visual_object))
    }

    /// Number of graph nodes: `H·J` joints plus two corners per object.
    pub fn node_count(&self) -> usize {
        self.humans * self.joints + 2 * self.objects
    }
}

/// Position/velocity channels for every node of both categories.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricFeatures<T> {
    /// `(T, H·J, 4)`
    pub human: Tensor<T>,
    /// `(T, 2·O, 4)`
    pub object: Tensor<T>,
    /// `T·H·J` flags, false where the joint was occluded.
    pub human_valid: Vec<bool>,
}

pub fn build_geometry<T: Scalar>(seq: &SceneSequence) -> Result<GeometricFeatures<T>> {
    let (human, human_valid) = human_geometry_with_validity(seq)?;
    Ok(GeometricFeatures {
        human,
        object: build_object_geometry(seq)?,
        human_valid,
    })
}

fn joint_visible(p: [f64; 2]) -> bool {
    p[0].is_finite() && p[1].is_finite() && p[0] >= 0.0 && p[1] >= 0.0
}

/// Fills `(T, N, 4)` from normalized points; `None` marks a missing point.
fn differenced<T: Scalar>(
    frames: usize,
    nodes: usize,
    point: impl Fn(usize, usize) -> Option<[f64; 2]>,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[frames, nodes, 4]);
    let data = out.data_mut();
    for t in 0..frames {
        for n in 0..nodes {
            let Some(p) = point(t, n) else { continue };
            let row = &mut data[(t * nodes + n) * 4..(t * nodes + n + 1) * 4];
            row[0] = T::of(p[0]);
            row[1] = T::of(p[1]);
            if t > 0 {
                if let Some(q) = point(t - 1, n) {
                    row[2] = T::of(p[0] - q[0]);
                    row[3] = T::of(p[1] - q[1]);
                }
            }
        }
    }
    out
}

fn check_nonempty(seq: &SceneSequence, entities: usize, what: &str) -> Result<()> {
    if seq.frames == 0 {
        return Err(Error::EmptyInput(format!("{}: zero frames", seq.video_id)));
    }
    if entities == 0 {
        return Err(Error::EmptyInput(format!("{}: zero {what}", seq.video_id)));
    }
    seq.validate(None)
}

fn human_geometry_with_validity<T: Scalar>(seq: &SceneSequence) -> Result<(Tensor<T>, Vec<bool>)> {
    check_nonempty(seq, seq.humans * seq.joints, "human joints")?;
    let [w, h] = seq.frame_size;
    let j = seq.joints;
    let point = |t: usize, n: usize| {
        let p = seq.joint_tracks[t][n / j][n % j];
        joint_visible(p).then(|| [p[0] / w, p[1] / h])
    };
    let nodes = seq.humans * j;
    let valid = (0..seq.frames * nodes)
        .map(|i| point(i / nodes, i % nodes).is_some())
        .collect();
    Ok((differenced(seq.frames, nodes, point), valid))
}

/// `(T, H·J, 4)` human joint channels, human-major then joint order.
pub fn build_human_geometry<T: Scalar>(seq: &SceneSequence) -> Result<Tensor<T>> {
    human_geometry_with_validity(seq).map(|(t, _)| t)
}

/// `(T, 2·O, 4)` object corner channels: `(x1, y1)` then `(x2, y2)` per object.
pub fn build_object_geometry<T: Scalar>(seq: &SceneSequence) -> Result<Tensor<T>> {
    check_nonempty(seq, seq.objects, "objects")?;
    let [w, h] = seq.frame_size;
    let point = |t: usize, n: usize| {
        let b = seq.boxes[t][n / 2];
        Some(if n % 2 == 0 {
            [b[0] / w, b[1] / h]
        } else {
            [b[2] / w, b[3] / h]
        })
    };
    Ok(differenced(seq.frames, 2 * seq.objects, point))
}
