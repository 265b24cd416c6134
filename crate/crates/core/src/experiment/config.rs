//! Run configuration: an INI file with `[data]`, `[scenario]`, `[model]`,
//! `[train]` and `[output]` sections. Every key can also be set as
//! `section.key = value`, which is what command-line overrides use.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::data::{FoldPolicy, ScenarioSpec};
use crate::error::{Error, Result};
use crate::fusion::SkeletonSpec;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Which epoch's weights a fold keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Highest held-out F1@10 seen during training.
    Best,
    /// Weights after the final epoch.
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub gcn_layers: usize,
    /// `C1`.
    pub visual_width: usize,
    /// `C2`.
    pub geo_width: usize,
    pub hidden: usize,
    pub gat_layers: usize,
    pub independent: bool,
    pub background: Option<usize>,
    /// Edge list `"0-1,1-2"`; empty picks the built-in skeleton.
    pub skeleton: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: Option<u64>,
    pub policy: FoldPolicy,
    /// Restrict the run to these fold indices.
    pub folds: Option<Vec<usize>>,
    /// Stop a fold once an epoch's training accuracy reaches this value.
    pub stop_accuracy: Option<f64>,
    pub select: Selection,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset file; synthesized from `scenario` when absent.
    pub dataset: Option<PathBuf>,
    pub preset: String,
    pub scenario: ScenarioSpec,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            preset: "default".into(),
            scenario: ScenarioSpec::default(),
            model: ModelSettings {
                gcn_layers: 4,
                visual_width: 512,
                geo_width: 256,
                hidden: 256,
                gat_layers: 1,
                independent: false,
                background: None,
                skeleton: String::new(),
            },
            train: TrainSettings {
                epochs: 200,
                lr: 1e-3,
                clip: 5.0,
                tau_start: 1.0,
                tau_end: 0.5,
                seed: None,
                policy: FoldPolicy::LeaveTwoSubjectsOut,
                folds: None,
                stop_accuracy: None,
                select: Selection::Best,
                precision: Precision::F64,
            },
            output: PathBuf::from("runs/latest"),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>>
where
    V::Err: std::fmt::Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list(key: &str, value: &str) -> Result<Option<Vec<usize>>> {
    match value.trim() {
        "" | "all" => Ok(None),
        v => v
            .split(',')
            .map(|s| parse(key, s))
            .collect::<Result<_>>()
            .map(Some),
    }
}

fn show<V: std::fmt::Display>(v: &Option<V>) -> String {
    v.as_ref().map_or(String::new(), ToString::to_string)
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        // The preset replaces the whole scenario, so it goes first.
        if let Some(p) = ini.section(Some("scenario")).and_then(|s| s.get("preset")) {
            cfg.set("scenario.preset", p)?;
        }
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                if full != "scenario.preset" {
                    cfg.set(&full, value)?;
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_ini_str(&text)
    }

    /// Sets one `section.key`. `seed` alone means `train.seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scenario;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.path" => self.dataset = optional::<PathBuf>(key, v)?,
            "scenario.preset" => {
                *s = ScenarioSpec::preset(v)?;
                self.preset = v.into();
            }
            "scenario.seed" => s.seed = parse(key, v)?,
            "scenario.subjects" => s.num_subjects = parse(key, v)?,
            "scenario.repeats" => s.repeats = parse(key, v)?,
            "scenario.noise" => s.noise = parse(key, v)?,
            "scenario.speed" => s.speed = parse(key, v)?,
            "scenario.occlusion" => s.occlusion = parse(key, v)?,
            "scenario.visual_dim" => s.visual_dim = parse(key, v)?,
            "scenario.visual_noise" => s.visual_noise = parse(key, v)?,
            "scenario.frames_min" => s.frames[0] = parse(key, v)?,
            "scenario.frames_max" => s.frames[1] = parse(key, v)?,
            "model.gcn_layers" => m.gcn_layers = parse(key, v)?,
            "model.c1" | "model.visual_width" => m.visual_width = parse(key, v)?,
            "model.c2" | "model.geo_width" => m.geo_width = parse(key, v)?,
            "model.c3" | "model.node_width" => {
                return Err(Error::Config(
                    "model.c3 is derived as c1 + c2 and cannot be set".into(),
                ))
            }
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.gat_layers" | "model.heads" => m.gat_layers = parse(key, v)?,
            "model.independent" => m.independent = parse(key, v)?,
            "model.background" => m.background = optional(key, v)?,
            "model.skeleton" => m.skeleton = v.into(),
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.clip" => t.clip = parse(key, v)?,
            "train.tau_start" => t.tau_start = parse(key, v)?,
            "train.tau_end" => t.tau_end = parse(key, v)?,
            "seed" | "train.seed" => t.seed = optional(key, v)?,
            "train.policy" => t.policy = v.parse()?,
            "train.folds" => t.folds = list(key, v)?,
            "train.stop_accuracy" => t.stop_accuracy = optional(key, v)?,
            "train.select" => {
                t.select = match v {
                    "best" => Selection::Best,
                    "last" => Selection::Last,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key} = {v:?}: expected best or last"
                        )))
                    }
                }
            }
            "train.precision" => {
                t.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("{key} = {v:?}: expected f64 or f32"))),
                }
            }
            "output.dir" => self.output = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `--section.key=value` style arguments (leading dashes optional).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for arg in args {
            let arg = arg.as_ref().trim_start_matches('-');
            let (k, v) = arg
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `C3 = C1 + C2`.
    pub fn node_width(&self) -> usize {
        self.model.visual_width + self.model.geo_width
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.train
            .seed
            .ok_or_else(|| Error::Config("a seed is required: pass --seed=<n>".into()))
    }

    pub fn model_config(
        &self,
        num_classes: usize,
        visual_dim: usize,
        joints: usize,
    ) -> Result<ModelConfig> {
        let skeleton = if self.model.skeleton.is_empty() {
            SkeletonSpec::for_joints(joints)
        } else {
            SkeletonSpec::parse_edges(joints, &self.model.skeleton)?
        };
        let m = &self.model;
        let cfg = ModelConfig {
            gcn_layers: m.gcn_layers,
            visual_width: m.visual_width,
            geo_width: m.geo_width,
            hidden: m.hidden,
            gat_layers: m.gat_layers,
            num_classes,
            visual_dim,
            skeleton,
            independent: m.independent,
            background: m.background,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.clip > 0.0) {
            return Err(Error::Config(
                "train.lr and train.clip must be positive".into(),
            ));
        }
        if !(t.tau_start > 0.0 && t.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "dataset {} does not exist",
                    p.display()
                )));
            }
        }
        self.scenario.validate()
    }

    /// Full configuration as INI text, every key explicit.
    pub fn to_ini(&self) -> String {
        let (s, m, t) = (&self.scenario, &self.model, &self.train);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "[data]\npath = {}\n",
            show(&self.dataset.as_ref().map(|p| p.display()))
        );
        let _ = writeln!(
            out,
            "[scenario]\npreset = {}\nseed = {}\nsubjects = {}\nrepeats = {}\nnoise = {}\nspeed = {}\nocclusion = {}\nvisual_dim = {}\nvisual_noise = {}\nframes_min = {}\nframes_max = {}\n",
            self.preset, s.seed, s.num_subjects, s.repeats, s.noise, s.speed, s.occlusion, s.visual_dim,
            s.visual_noise, s.frames[0], s.frames[1]
        );
        let _ = writeln!(
            out,
            "[model]\ngcn_layers = {}\nc1 = {}\nc2 = {}\n# c3 = {} (derived)\nhidden = {}\ngat_layers = {}\nindependent = {}\nbackground = {}\nskeleton = {}\n",
            m.gcn_layers, m.visual_width, m.geo_width, self.node_width(), m.hidden, m.gat_layers,
            m.independent, show(&m.background), m.skeleton
        );
        let folds = t.folds.as_ref().map(|f| {
            f.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        });
        let _ = writeln!(
            out,
            "[train]\nepochs = {}\nlr = {}\nclip = {}\ntau_start = {}\ntau_end = {}\nseed = {}\npolicy = {}\nfolds = {}\nstop_accuracy = {}\nselect = {}\nprecision = {}\n",
            t.epochs, t.lr, t.clip, t.tau_start, t.tau_end, show(&t.seed),
            match t.policy {
                FoldPolicy::LeaveOneSubjectOut => "leave_one_subject_out",
                FoldPolicy::LeaveTwoSubjectsOut => "leave_two_subjects_out",
            },
            show(&folds), show(&t.stop_accuracy),
            match t.select {
                Selection::Best => "best",
                Selection::Last => "last",
            },
            match t.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
        );
        let _ = writeln!(out, "[output]\ndir = {}", self.output.display());
        out
    }
}
