//! Synthetic scene generation, dataset files and cross-validation folds.
//!
//! Every sub-activity class owns a pose offset and a constant velocity per
//! joint. A segment of class `c` places each joint at its rest position
//! plus the class offset and moves it at the class velocity, centered on the
//! segment midpoint. Each human holds one object per class, which follows
//! that human's hand. Visual vectors are a class prototype plus noise.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{SceneSequence, OCCLUDED};

/// Current dataset record version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub class: usize,
    pub min_len: usize,
    pub max_len: usize,
}

/// Ordered sub-activities making up one activity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityScript {
    pub name: String,
    pub steps: Vec<ScriptStep>,
}

impl ActivityScript {
    pub fn uniform(name: &str, classes: &[usize], min_len: usize, max_len: usize) -> Self {
        ActivityScript {
            name: name.into(),
            steps: classes
                .iter()
                .map(|&class| ScriptStep {
                    class,
                    min_len,
                    max_len,
                })
                .collect(),
        }
    }

    fn min_frames(&self) -> usize {
        self.steps.iter().map(|s| s.min_len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub num_subjects: usize,
    /// Humans per video; subjects are grouped in fixed groups of this size.
    pub humans: usize,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    pub joints: usize,
    /// Inclusive frame count range.
    pub frames: [usize; 2],
    pub num_classes: usize,
    pub scripts: Vec<ActivityScript>,
    /// Videos per (subject group, script).
    pub repeats: usize,
    /// Position noise std, in frame-size units.
    pub noise: f64,
    /// Largest per-frame joint speed along each axis, in frame-size units.
    pub speed: f64,
    pub occlusion: f64,
    pub visual_dim: usize,
    pub visual_noise: f64,
    pub frame_size: [f64; 2],
    pub seed: u64,
}

impl Default for ScenarioSpec {
    /// Eight subject pairs, two humans, two to four objects, four classes.
    fn default() -> Self {
        ScenarioSpec {
            num_subjects: 16,
            humans: 2,
            objects: [2, 4],
            joints: 15,
            frames: [80, 120],
            num_classes: 4,
            scripts: vec![
                ActivityScript::uniform("assemble", &[0, 1, 2, 3], 12, 30),
                ActivityScript::uniform("exchange", &[1, 0, 3, 2], 12, 30),
                ActivityScript::uniform("tidy", &[2, 3, 1, 0], 12, 30),
            ],
            repeats: 1,
            noise: 0.002,
            speed: 0.004,
            occlusion: 0.02,
            visual_dim: 16,
            visual_noise: 1.0,
            frame_size: [640.0, 480.0],
            seed: 42,
        }
    }
}

impl ScenarioSpec {
    /// Many short segments over thirteen classes with heavy noise.
    pub fn hard() -> Self {
        let classes: Vec<usize> = (0..13).collect();
        let mut rotated = classes.clone();
        rotated.rotate_left(5);
        let mut reversed = classes.clone();
        reversed.reverse();
        ScenarioSpec {
            num_classes: 13,
            scripts: vec![
                ActivityScript::uniform("rush", &classes, 3, 8),
                ActivityScript::uniform("shuffle", &rotated, 3, 8),
                ActivityScript::uniform("undo", &reversed, 3, 8),
            ],
            noise: 0.01,
            occlusion: 0.1,
            visual_noise: 2.5,
            ..ScenarioSpec::default()
        }
    }

    /// One human per video, four subjects, ten classes.
    pub fn cad() -> Self {
        ScenarioSpec {
            num_subjects: 4,
            humans: 1,
            objects: [1, 5],
            num_classes: 10,
            scripts: vec![
                ActivityScript::uniform("cereal", &[0, 1, 2, 3, 4], 8, 25),
                ActivityScript::uniform("microwave", &[5, 6, 7, 0], 8, 25),
                ActivityScript::uniform("stack", &[1, 8, 9, 2], 8, 25),
            ],
            repeats: 2,
            ..ScenarioSpec::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(ScenarioSpec::default()),
            "hard" => Ok(ScenarioSpec::hard()),
            "cad" => Ok(ScenarioSpec::cad()),
            other => Err(Error::Config(format!(
                "unknown scenario preset `{other}` (expected default, hard or cad)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_subjects", self.num_subjects),
            ("humans", self.humans),
            ("joints", self.joints),
            ("num_classes", self.num_classes),
            ("repeats", self.repeats),
            ("visual_dim", self.visual_dim),
            ("objects", self.objects[0]),
            ("frames", self.frames[0]),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("scenario.{name} must be positive")));
        }
        if self.objects[0] > self.objects[1] || self.frames[0] > self.frames[1] {
            return Err(Error::Config("scenario ranges must have min <= max".into()));
        }
        if self.num_subjects % self.humans != 0 {
            return Err(Error::Config(format!(
                "{} subjects cannot be grouped into videos of {} humans",
                self.num_subjects, self.humans
            )));
        }
        if self.scripts.is_empty() {
            return Err(Error::Config(
                "scenario needs at least one activity script".into(),
            ));
        }
        let rates = [
            ("noise", self.noise),
            ("speed", self.speed),
            ("visual_noise", self.visual_noise),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "scenario.{name} = {v} must be finite and >= 0"
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::Config(format!(
                "scenario.occlusion = {} outside [0, 1]",
                self.occlusion
            )));
        }
        if !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return Err(Error::Config("scenario.frame_size must be positive".into()));
        }
        for script in &self.scripts {
            if script.steps.is_empty() {
                return Err(Error::Config(format!(
                    "script `{}` has no steps",
                    script.name
                )));
            }
            for s in &script.steps {
                if s.min_len == 0 || s.min_len > s.max_len {
                    return Err(Error::Config(format!(
                        "script `{}`: duration range [{}, {}] is invalid",
                        script.name, s.min_len, s.max_len
                    )));
                }
                if s.class >= self.num_classes {
                    return Err(Error::Config(format!(
                        "script `{}` uses class {} but only {} exist",
                        script.name, s.class, self.num_classes
                    )));
                }
            }
            if script.min_frames() > self.frames[1] {
                return Err(Error::Infeasible(format!(
                    "script `{}` needs at least {} frames but videos have at most {}",
                    script.name,
                    script.min_frames(),
                    self.frames[1]
                )));
            }
        }
        Ok(())
    }
}

/// Per-class motion and appearance drawn once from the seed.
struct World {
    rest: Vec<[f64; 2]>,
    offset: Vec<Vec<[f64; 2]>>,
    velocity: Vec<Vec<[f64; 2]>>,
    human_proto: Vec<Vec<f64>>,
    /// One per class plus a final idle prototype.
    object_proto: Vec<Vec<f64>>,
    /// Per subject, per joint.
    style: Vec<Vec<[f64; 2]>>,
}

fn point(rng: &mut ChaCha8Rng, r: f64) -> [f64; 2] {
    if r == 0.0 {
        return [0.0, 0.0];
    }
    [rng.gen_range(-r..=r), rng.gen_range(-r..=r)]
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).map_or(0.0, |n| n.sample(rng))
}

impl World {
    fn new(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Self {
        let j = spec.joints;
        let classes = spec.num_classes;
        let rest = (0..j).map(|_| point(rng, 0.1)).collect();
        let offset = (0..classes)
            .map(|_| (0..j).map(|_| point(rng, 0.05)).collect())
            .collect();
        let velocity = (0..classes)
            .map(|_| (0..j).map(|_| point(rng, spec.speed)).collect())
            .collect();
        let proto = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..spec.visual_dim).map(|_| gaussian(rng, 1.0)).collect())
                .collect()
        };
        let human_proto = proto(classes, rng);
        let object_proto = proto(classes + 1, rng);
        let style = (0..spec.num_subjects)
            .map(|_| (0..j).map(|_| point(rng, 0.01)).collect())
            .collect();
        World {
            rest,
            offset,
            velocity,
            human_proto,
            object_proto,
            style,
        }
    }
}

/// Hand joint that carries objects: the right hand of the 15-joint layout,
/// otherwise the last joint.
fn hand_joint(joints: usize) -> usize {
    if joints == 15 {
        8
    } else {
        joints - 1
    }
}

/// `(class, length)` runs covering exactly `frames` frames, following the
/// script from step `rotate` and repeating it when one pass is too short.
fn schedule(
    script: &ActivityScript,
    rotate: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = script.steps.len();
    let pass_max: usize = script.steps.iter().map(|s| s.max_len).sum();
    let passes = frames.div_ceil(pass_max).max(1);
    let steps: Vec<ScriptStep> = (0..passes * n)
        .map(|i| script.steps[(i + rotate) % n])
        .collect();
    let mut lens: Vec<usize> = steps.iter().map(|s| s.min_len).collect();
    let mut total: usize = lens.iter().sum();
    while total > frames {
        let i = lens.len() - 1;
        let cut = (total - frames).min(lens[i]);
        lens[i] -= cut;
        total -= cut;
        if lens[i] == 0 {
            lens.pop();
        }
    }
    while total < frames {
        let open: Vec<usize> = (0..lens.len())
            .filter(|&i| lens[i] < steps[i].max_len)
            .collect();
        let i = if open.is_empty() {
            rng.gen_range(0..lens.len())
        } else {
            open[rng.gen_range(0..open.len())]
        };
        lens[i] += 1;
        total += 1;
    }
    lens.iter()
        .enumerate()
        .map(|(i, &l)| (steps[i].class, l))
        .collect()
}

/// Deterministic dataset for `spec`.
pub fn synthesize(spec: &ScenarioSpec) -> Result<Vec<SceneSequence>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut master);
    let groups = spec.num_subjects / spec.humans;
    let mut out = Vec::new();
    for g in 0..groups {
        for (a, script) in spec.scripts.iter().enumerate() {
            for r in 0..spec.repeats {
                let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
                let subjects: Vec<u32> = (0..spec.humans)
                    .map(|h| (g * spec.humans + h) as u32)
                    .collect();
                out.push(video(
                    spec,
                    &world,
                    script,
                    &subjects,
                    format!("g{g:02}_a{a}_r{r}"),
                    &mut rng,
                ));
            }
        }
    }
    Ok(out)
}

fn video(
    spec: &ScenarioSpec,
    world: &World,
    script: &ActivityScript,
    subjects: &[u32],
    video_id: String,
    rng: &mut ChaCha8Rng,
) -> SceneSequence {
    let (h_count, j_count) = (spec.humans, spec.joints);
    let lo = spec.frames[0].max(script.min_frames());
    let frames = rng.gen_range(lo..=spec.frames[1]);
    let objects = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let [fw, fh] = spec.frame_size;
    let hand = hand_joint(j_count);

    let mut labels = vec![Vec::with_capacity(frames); h_count];
    // Noiseless joint positions in frame-size units, [t][h][j].
    let mut clean = vec![vec![vec![[0.0; 2]; j_count]; h_count]; frames];
    for h in 0..h_count {
        let base = [(h + 1) as f64 / (h_count + 1) as f64, 0.45];
        let style = &world.style[subjects[h] as usize];
        let mut t0 = 0;
        for (class, len) in schedule(script, h, frames, rng) {
            let mid = (len - 1) as f64 / 2.0;
            for k in 0..len {
                let t = t0 + k;
                labels[h].push(class);
                for j in 0..j_count {
                    let (r, o, v, s) = (
                        world.rest[j],
                        world.offset[class][j],
                        world.velocity[class][j],
                        style[j],
                    );
                    let d = k as f64 - mid;
                    clean[t][h][j] = [
                        base[0] + r[0] + o[0] + s[0] + d * v[0],
                        base[1] + r[1] + o[1] + s[1] + d * v[1],
                    ];
                }
            }
            t0 += len;
        }
    }

    // Object o rests until the lowest-index human whose class maps to it
    // picks it up, then follows that hand.
    let mut centers: Vec<[f64; 2]> = (0..objects)
        .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.7..0.9)])
        .collect();
    let sizes: Vec<[f64; 2]> = (0..objects)
        .map(|_| [rng.gen_range(0.04..0.12), rng.gen_range(0.04..0.12)])
        .collect();
    let mut holder = vec![vec![None::<usize>; objects]; frames];
    let mut box_centers = Vec::with_capacity(frames);
    for t in 0..frames {
        for h in (0..h_count).rev() {
            holder[t][(labels[h][t] + h) % objects] = Some(h);
        }
        for (o, c) in centers.iter_mut().enumerate() {
            if let Some(h) = holder[t][o] {
                let p = clean[t][h][hand];
                *c = [p[0], p[1] + 0.03];
            }
        }
        box_centers.push(centers.clone());
    }

    let joint_tracks = clean
        .iter()
        .map(|people| {
            people
                .iter()
                .map(|joints| {
                    joints
                        .iter()
                        .map(|p| {
                            if spec.occlusion > 0.0 && rng.gen_bool(spec.occlusion) {
                                return [OCCLUDED, OCCLUDED];
                            }
                            let x = (p[0] + gaussian(rng, spec.noise)).max(0.0);
                            let y = (p[1] + gaussian(rng, spec.noise)).max(0.0);
                            [x * fw, y * fh]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let boxes = box_centers
        .iter()
        .map(|row| {
            row.iter()
                .zip(&sizes)
                .map(|(c, s)| {
                    let x = c[0] + gaussian(rng, spec.noise);
                    let y = c[1] + gaussian(rng, spec.noise);
                    [
                        (x - s[0] / 2.0).max(0.0) * fw,
                        (y - s[1] / 2.0).max(0.0) * fh,
                        (x + s[0] / 2.0).max(0.0) * fw,
                        (y + s[1] / 2.0).max(0.0) * fh,
                    ]
                })
                .collect()
        })
        .collect();
    let noisy = |proto: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        proto
            .iter()
            .map(|&v| v + gaussian(rng, spec.visual_noise))
            .collect()
    };
    let visual_human = (0..frames)
        .map(|t| {
            (0..h_count)
                .map(|h| noisy(&world.human_proto[labels[h][t]], rng))
                .collect()
        })
        .collect();
    let visual_object = (0..frames)
        .map(|t| {
            (0..objects)
                .map(|o| {
                    let k = holder[t][o].map_or(spec.num_classes, |h| labels[h][t]);
                    noisy(&world.object_proto[k], rng)
                })
                .collect()
        })
        .collect();
    SceneSequence {
        video_id,
        subject_ids: subjects.to_vec(),
        frames,
        humans: h_count,
        joints: j_count,
        objects,
        frame_size: spec.frame_size,
        joint_tracks,
        boxes,
        labels,
        visual_human: Some(visual_human),
        visual_object: Some(visual_object),
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    version: u32,
    #[serde(flatten)]
    scene: &'a SceneSequence,
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, data: &[SceneSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for scene in data {
        let record = RecordOut {
            version: SCHEMA_VERSION,
            scene,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            field: scene.video_id.clone(),
            message: e.to_string(),
        })?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneSequence>> {
    let mut text = String::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_dataset(path, &text)
}

fn parse_dataset(path: &Path, text: &str) -> Result<Vec<SceneSequence>> {
    let err = |line: usize, field: &str, message: String| Error::Parse {
        path: path.into(),
        line,
        field: field.into(),
        message,
    };
    let lines: Vec<&str> = text.lines().collect();
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(err(
            lines.len(),
            "$",
            "truncated file: last record has no line end".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in text.as_bytes().lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| err(n, "$", e.to_string()))?;
        let Some(map) = value.as_object_mut() else {
            return Err(err(n, "$", "record is not an object".into()));
        };
        match map.remove("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(err(n, "version", format!("unsupported version {v}"))),
            None => return Err(err(n, "version", "missing or not an integer".into())),
        }
        let scene: SceneSequence = serde_path_to_error::deserialize(value)
            .map_err(|e| err(n, &e.path().to_string(), e.inner().to_string()))?;
        scene
            .validate(None)
            .map_err(|e| err(n, "$", e.to_string()))?;
        out.push(scene);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldPolicy {
    LeaveOneSubjectOut,
    LeaveTwoSubjectsOut,
}

impl std::str::FromStr for FoldPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_one_subject_out" | "loso" => Ok(FoldPolicy::LeaveOneSubjectOut),
            "leave_two_subjects_out" | "l2so" => Ok(FoldPolicy::LeaveTwoSubjectsOut),
            other => Err(Error::Config(format!(
                "unknown fold policy `{other}` (expected leave_one_subject_out or leave_two_subjects_out)"
            ))),
        }
    }
}

/// Train and test video ids of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub held_out: Vec<u32>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// One fold per held-out subject or subject pair, in subject id order.
///
/// Pairs are the two-subject groups found in the data; data without such
/// groups is paired by consecutive subject ids.
pub fn make_folds(data: &[SceneSequence], policy: FoldPolicy) -> Result<Vec<DatasetSplit>> {
    let subjects: BTreeSet<u32> = data
        .iter()
        .flat_map(|s| s.subject_ids.iter().copied())
        .collect();
    let groups: Vec<Vec<u32>> = match policy {
        FoldPolicy::LeaveOneSubjectOut => {
            if subjects.len() < 2 {
                return Err(Error::TooFewSubjects {
                    need: 2,
                    have: subjects.len(),
                });
            }
            subjects.iter().map(|&s| vec![s]).collect()
        }
        FoldPolicy::LeaveTwoSubjectsOut => {
            let mut pairs: BTreeSet<Vec<u32>> = data
                .iter()
                .filter(|s| s.subject_ids.len() == 2)
                .map(|s| {
                    let mut p = s.subject_ids.clone();
                    p.sort_unstable();
                    p
                })
                .collect();
            if pairs.is_empty() {
                let all: Vec<u32> = subjects.iter().copied().collect();
                pairs = all.chunks(2).map(<[u32]>::to_vec).collect();
            }
            if subjects.len() < 4 || pairs.len() < 2 {
                return Err(Error::TooFewSubjects {
                    need: 4,
                    have: subjects.len(),
                });
            }
            pairs.into_iter().collect()
        }
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(fold, held_out)| {
            let (test, train): (Vec<&SceneSequence>, Vec<&SceneSequence>) = data
                .iter()
                .partition(|s| s.subject_ids.iter().any(|id| held_out.contains(id)));
            DatasetSplit {
                fold,
                held_out,
                train: train.iter().map(|s| s.video_id.clone()).collect(),
                test: test.iter().map(|s| s.video_id.clone()).collect(),
            }
        })
        .collect())
}

/// SHA-256 over the serialized folds.
pub fn fold_checksum(splits: &[DatasetSplit]) -> String {
    let bytes = serde_json::to_vec(splits).unwrap_or_default();
    hex::encode(Sha256::digest(bytes))
}

/// Videos named in `ids`, in the order given.
pub fn select<'a>(data: &'a [SceneSequence], ids: &[String]) -> Result<Vec<&'a SceneSequence>> {
    ids.iter()
        .map(|id| {
            data.iter()
                .find(|s| &s.video_id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("video `{id}` not in dataset")))
        })
        .collect()
}
