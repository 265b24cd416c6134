//! The assembled network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CategoryFusion, FusionDims, SkeletonSpec};
use crate::geometry::{build_geometry, GeometricFeatures, SceneSequence};
use crate::metrics::SegmentTimeline;
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::scenery::{scene_nodes, EdgeSet, SceneryGat};
use crate::temporal::{
    decode_timeline, frame_loss, pool_scene, Boundaries, Sampling, TemporalDims, TemporalSegmenter,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub gcn_layers: usize,
    /// Visual embedding width `C1`.
    pub visual_width: usize,
    /// Geometric embedding width `C2`.
    pub geo_width: usize,
    /// State width of each GRU direction.
    pub hidden: usize,
    pub gat_layers: usize,
    pub num_classes: usize,
    pub visual_dim: usize,
    pub skeleton: SkeletonSpec,
    /// Identity adjacency in both GCN stacks.
    pub independent: bool,
    /// Label excluded from segment extraction.
    pub background: Option<usize>,
}

impl ModelConfig {
    pub fn new(num_classes: usize, visual_dim: usize, skeleton: SkeletonSpec) -> Self {
        ModelConfig {
            gcn_layers: 4,
            visual_width: 512,
            geo_width: 256,
            hidden: 256,
            gat_layers: 1,
            num_classes,
            visual_dim,
            skeleton,
            independent: false,
            background: None,
        }
    }

    /// Fused node width `C3 = C1 + C2`.
    pub fn node_width(&self) -> usize {
        self.visual_width + self.geo_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("gcn_layers", self.gcn_layers),
            ("visual_width", self.visual_width),
            ("geo_width", self.geo_width),
            ("hidden", self.hidden),
            ("gat_layers", self.gat_layers),
            ("num_classes", self.num_classes),
            ("visual_dim", self.visual_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        self.skeleton.validate()
    }
}

/// Fusion, scenery graph and temporal head over one parameter store.
#[derive(Clone, Debug)]
pub struct Cats<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub fusion: CategoryFusion,
    pub scenery: SceneryGat,
    pub temporal: TemporalSegmenter,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `(T, H, num_classes)`.
    pub logits: Var,
    /// `(T, N, N)` attention of the last scenery layer.
    pub attention: Var,
    /// `(T, N, C3)` scenery graph input.
    pub nodes: Var,
    pub boundaries: Boundaries,
}

/// Everything needed to report on one sequence without a tape.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub timelines: Vec<SegmentTimeline>,
}

impl<T: Scalar> Cats<T> {
    /// Parameters are drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = FusionDims {
            gcn_layers: config.gcn_layers,
            geo_width: config.geo_width,
            vis_width: config.visual_width,
            visual_dim: config.visual_dim,
        };
        let mut fusion = CategoryFusion::new(&mut store, &dims, config.skeleton.clone(), &mut rng)?;
        fusion.set_isolated(config.independent);
        let c3 = config.node_width();
        let scenery = SceneryGat::new(&mut store, c3, config.gat_layers, &mut rng)?;
        let temporal = TemporalSegmenter::new(
            &mut store,
            &TemporalDims {
                human: 2 * c3,
                global: 2 * c3,
                hidden: config.hidden,
                num_classes: config.num_classes,
            },
            &mut rng,
        );
        Ok(Cats {
            config,
            store,
            fusion,
            scenery,
            temporal,
        })
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.temporal.boundary.tau = tau;
    }

    pub fn check_scene(&self, seq: &SceneSequence) -> Result<()> {
        seq.validate(Some(self.config.num_classes))?;
        match seq.visual_dim() {
            Some(d) if d != self.config.visual_dim => Err(Error::MissingVisual(format!(
                "{}: visual vectors have {d} channels, model expects {}",
                seq.video_id, self.config.visual_dim
            ))),
            _ => Ok(()),
        }
    }

    /// Full forward pass with parameters bound as `p`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: &SceneSequence,
        geo: &GeometricFeatures<T>,
        sampling: &Sampling,
    ) -> Result<Forward> {
        self.check_scene(seq)?;
        let fused = self.fusion.forward(tape, p, seq, &geo.human, &geo.object)?;
        let nodes = scene_nodes(tape, fused.human, fused.object)?;
        let edges = EdgeSet::full(seq.node_count());
        let gat = self.scenery.forward(tape, p, nodes, &edges)?;
        // GAT outputs alone do not say which person a node belongs to, so
        // the summaries keep the fused inputs alongside them.
        let both = tape.concat_last(nodes, gat.nodes)?;
        let (human, global) = pool_scene(tape, both, seq.humans, seq.joints)?;
        let out = self.temporal.forward(tape, p, human, global, sampling)?;
        Ok(Forward {
            logits: out.logits,
            attention: gat.attention,
            nodes,
            boundaries: out.boundaries,
        })
    }

    /// Mean frame cross-entropy on `seq`'s labels.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: &SceneSequence,
        geo: &GeometricFeatures<T>,
        sampling: &Sampling,
    ) -> Result<(Var, Forward)> {
        let f = self.forward(tape, p, seq, geo, sampling)?;
        let loss = frame_loss(tape, f.logits, &seq.labels)?;
        Ok((loss, f))
    }

    /// Deterministic evaluation-mode prediction.
    pub fn predict(&self, seq: &SceneSequence) -> Result<Prediction<T>> {
        let geo = build_geometry(seq)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let f = self.forward(&mut tape, &p, seq, &geo, &Sampling::Argmax)?;
        let logits = tape.to_tensor(f.logits);
        let timelines = decode_timeline(&logits, self.config.background)?;
        Ok(Prediction { logits, timelines })
    }

    /// Scenery attention `(N, N)` at 0-based frame `t` in evaluation mode.
    pub fn attention(&self, seq: &SceneSequence, t: usize) -> Result<Tensor<T>> {
        if t >= seq.frames {
            return Err(Error::OutOfRange {
                what: "frame",
                index: t,
                len: seq.frames,
            });
        }
        let geo = build_geometry(seq)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        self.check_scene(seq)?;
        let fused = self
            .fusion
            .forward(&mut tape, &p, seq, &geo.human, &geo.object)?;
        let nodes = scene_nodes(&mut tape, fused.human, fused.object)?;
        let nodes = tape.to_tensor(nodes);
        self.scenery
            .attention_rows(&self.store, &nodes, &EdgeSet::full(seq.node_count()), t)
    }
}
