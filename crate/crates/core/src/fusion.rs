//! Category-level processing: one graph convolution stack per entity
//! category over the geometric channels, an MLP over the visual vectors,
//! and their concatenation into fused node features.
//!
//! Every GCN layer computes `H' = tanh(A H W)` with a fixed, row-normalized
//! adjacency `A`. Adjacency only connects nodes of the same entity: skeleton
//! edges within one person, the two corners of one box. Interaction across
//! entities is left to the scenery graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneSequence;
use crate::nn::{glorot, Bound, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Joint count and bone list of one person's skeleton.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    /// 15-joint layout: head, neck, pelvis, then shoulder/elbow/hand for
    /// left and right arms and hip/knee/foot for left and right legs.
    pub fn default_15() -> Self {
        SkeletonSpec {
            joints: 15,
            edges: vec![
                (0, 1),
                (1, 2),
                (1, 3),
                (3, 4),
                (4, 5),
                (1, 6),
                (6, 7),
                (7, 8),
                (2, 9),
                (9, 10),
                (10, 11),
                (2, 12),
                (12, 13),
                (13, 14),
            ],
        }
    }

    /// Joints linked in index order.
    pub fn chain(joints: usize) -> Self {
        SkeletonSpec {
            joints,
            edges: (1..joints).map(|j| (j - 1, j)).collect(),
        }
    }

    /// The 15-joint layout when `joints == 15`, a chain otherwise.
    pub fn for_joints(joints: usize) -> Self {
        if joints == 15 {
            Self::default_15()
        } else {
            Self::chain(joints)
        }
    }

    /// Parses `"0-1,1-2,..."`.
    pub fn parse_edges(joints: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (a, b) = item
                .split_once('-')
                .ok_or_else(|| Error::Skeleton(format!("edge {item:?} is not of the form a-b")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Skeleton(format!("edge {item:?}: {e}")))
            };
            edges.push((parse(a)?, parse(b)?));
        }
        let spec = SkeletonSpec { joints, edges };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::Skeleton("skeleton has no joints".into()));
        }
        if let Some(&(a, b)) = self
            .edges
            .iter()
            .find(|&&(a, b)| a >= self.joints || b >= self.joints)
        {
            return Err(Error::Skeleton(format!(
                "edge ({a}, {b}) out of range for {} joints",
                self.joints
            )));
        }
        Ok(())
    }

    pub fn format_edges(&self) -> String {
        self.edges
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Graph structure within one entity category.
#[derive(Clone, Debug, PartialEq)]
pub enum Category<'a> {
    Human {
        skeleton: &'a SkeletonSpec,
        persons: usize,
    },
    Object {
        count: usize,
    },
}

/// Row-normalized adjacency with self-loops. Humans get one skeleton block
/// per person; objects get a two-corner clique per box.
pub fn build_adjacency<T: Scalar>(category: Category<'_>) -> Result<Tensor<T>> {
    let (n, edges): (usize, Vec<(usize, usize)>) = match category {
        Category::Human { skeleton, persons } => {
            skeleton.validate()?;
            let j = skeleton.joints;
            let edges = (0..persons)
                .flat_map(|p| {
                    skeleton
                        .edges
                        .iter()
                        .map(move |&(a, b)| (p * j + a, p * j + b))
                })
                .collect();
            (persons * j, edges)
        }
        Category::Object { count } => (2 * count, (0..count).map(|o| (2 * o, 2 * o + 1)).collect()),
    };
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for (u, v) in edges {
        a[u * n + v] = 1.0;
        a[v * n + u] = 1.0;
    }
    for row in a.chunks_mut(n.max(1)) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(vec![n, n], a.into_iter().map(T::of).collect())
}

/// `n` graph convolution layers mapping 4 input channels to `width`.
#[derive(Clone, Debug)]
pub struct GcnStack {
    pub weights: Vec<ParamId>,
    pub width: usize,
    /// Replace the adjacency with the identity: each node is encoded on its
    /// own, without message passing.
    pub isolated: bool,
}

impl GcnStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument(
                "a GCN stack needs at least one layer".into(),
            ));
        }
        let weights = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { 4 } else { width };
                store.add(format!("{name}.gcn{l}"), glorot(rng, d_in, width))
            })
            .collect();
        Ok(GcnStack {
            weights,
            width,
            isolated: false,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Applies every layer frame-wise: `x: (T, N, 4) -> (T, N, width)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        adjacency: &Tensor<T>,
        x: Var,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        let n = adjacency.shape()[0];
        if xs.len() != 3 || xs[1] != n || adjacency.shape() != [n, n] {
            return Err(Error::shape("gcn_forward", &xs, adjacency.shape()));
        }
        let a = if self.isolated {
            None
        } else {
            Some(tape.constant(adjacency))
        };
        let mut h = x;
        for &w in &self.weights {
            let hw = tape.matmul(h, p.var(w))?;
            let mixed = match a {
                Some(a) => tape.matmul(a, hw)?,
                None => hw,
            };
            h = tape.tanh(mixed);
        }
        Ok(h)
    }
}

/// Two-layer perceptron `D_vis -> C1 -> C1` with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct VisualEmbedder {
    pub hidden: Linear,
    pub out: Linear,
}

impl VisualEmbedder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_vis: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        VisualEmbedder {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_vis, width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.tanh(h);
        self.out.forward(tape, p, h)
    }
}

/// `(rows, entities)` 0/1 matrix copying each entity to `per` consecutive rows.
pub fn replication_matrix<T: Scalar>(entities: usize, per: usize) -> Tensor<T> {
    let rows = entities * per;
    Tensor::from_fn(&[rows, entities], |i| {
        let (r, e) = (i / entities, i % entities);
        if r / per == e {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn visual_input<T: Scalar>(
    v: &Option<Vec<Vec<Vec<f64>>>>,
    seq: &SceneSequence,
    entities: usize,
    what: &str,
) -> Result<Tensor<T>> {
    let v = v
        .as_ref()
        .ok_or_else(|| Error::MissingVisual(format!("{} {what}", seq.video_id)))?;
    let d = seq
        .visual_dim()
        .ok_or_else(|| Error::MissingVisual(format!("{} {what}", seq.video_id)))?;
    let data = v.iter().flatten().flatten().map(|&x| T::of(x)).collect();
    Tensor::new(vec![seq.frames, entities, d], data)
}

/// Embeds each entity's visual vector once per frame, then repeats it over
/// the entity's node rows (`J` per human, 2 per object).
pub fn embed_visual<T: Scalar>(
    human_emb: &VisualEmbedder,
    object_emb: &VisualEmbedder,
    tape: &mut Tape<T>,
    p: &Bound,
    seq: &SceneSequence,
) -> Result<(Var, Var)> {
    let hv = visual_input::<T>(&seq.visual_human, seq, seq.humans, "humans")?;
    let ov = visual_input::<T>(&seq.visual_object, seq, seq.objects, "objects")?;
    let hv = tape.constant(&hv);
    let ov = tape.constant(&ov);
    let he = human_emb.forward(tape, p, hv)?;
    let oe = object_emb.forward(tape, p, ov)?;
    let rh = tape.constant(&replication_matrix(seq.humans, seq.joints));
    let ro = tape.constant(&replication_matrix(seq.objects, 2));
    Ok((tape.matmul(rh, he)?, tape.matmul(ro, oe)?))
}

/// Concatenates geometric (first) and visual channels.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, geo: Var, vis: Var) -> Result<Var> {
    let (gs, vs) = (tape.shape(geo), tape.shape(vis));
    if gs.len() != vs.len() || gs.is_empty() || gs[..gs.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::shape("fuse", gs, vs));
    }
    tape.concat_last(geo, vis)
}

/// Per-category encoders producing the fused human and object node features.
#[derive(Clone, Debug)]
pub struct CategoryFusion {
    pub human_gcn: GcnStack,
    pub object_gcn: GcnStack,
    pub human_visual: VisualEmbedder,
    pub object_visual: VisualEmbedder,
    pub skeleton: SkeletonSpec,
}

/// Tape handles of the fused features of one scene.
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    /// `(T, H·J, C3)`
    pub human: Var,
    /// `(T, 2·O, C3)`
    pub object: Var,
}

/// Dimensions of [`CategoryFusion`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusionDims {
    pub gcn_layers: usize,
    pub geo_width: usize,
    pub vis_width: usize,
    pub visual_dim: usize,
}

impl CategoryFusion {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dims: &FusionDims,
        skeleton: SkeletonSpec,
        rng: &mut R,
    ) -> Result<Self> {
        skeleton.validate()?;
        Ok(CategoryFusion {
            human_gcn: GcnStack::new(store, "human", dims.gcn_layers, dims.geo_width, rng)?,
            object_gcn: GcnStack::new(store, "object", dims.gcn_layers, dims.geo_width, rng)?,
            human_visual: VisualEmbedder::new(
                store,
                "human_visual",
                dims.visual_dim,
                dims.vis_width,
                rng,
            ),
            object_visual: VisualEmbedder::new(
                store,
                "object_visual",
                dims.visual_dim,
                dims.vis_width,
                rng,
            ),
            skeleton,
        })
    }

    pub fn set_isolated(&mut self, isolated: bool) {
        self.human_gcn.isolated = isolated;
        self.object_gcn.isolated = isolated;
    }

    /// The adjacency matrices the forward pass multiplies by, after the
    /// isolation switch is applied.
    pub fn effective_adjacency<T: Scalar>(
        &self,
        seq: &SceneSequence,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, o) = self.adjacency(seq)?;
        let pick = |stack: &GcnStack, a: Tensor<T>| {
            if stack.isolated {
                Tensor::identity(a.shape()[0])
            } else {
                a
            }
        };
        Ok((pick(&self.human_gcn, h), pick(&self.object_gcn, o)))
    }

    fn adjacency<T: Scalar>(&self, seq: &SceneSequence) -> Result<(Tensor<T>, Tensor<T>)> {
        if seq.joints != self.skeleton.joints {
            return Err(Error::Skeleton(format!(
                "scene has {} joints per human, skeleton has {}",
                seq.joints, self.skeleton.joints
            )));
        }
        Ok((
            build_adjacency(Category::Human {
                skeleton: &self.skeleton,
                persons: seq.humans,
            })?,
            build_adjacency(Category::Object { count: seq.objects })?,
        ))
    }

    /// Embedded geometry `HG'`, `OG'` of `(T, ·, C2)`.
    pub fn geometric<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: &SceneSequence,
        human_geo: &Tensor<T>,
        object_geo: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let (ah, ao) = self.adjacency(seq)?;
        let hx = tape.constant(human_geo);
        let ox = tape.constant(object_geo);
        Ok((
            self.human_gcn.forward(tape, p, &ah, hx)?,
            self.object_gcn.forward(tape, p, &ao, ox)?,
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: &SceneSequence,
        human_geo: &Tensor<T>,
        object_geo: &Tensor<T>,
    ) -> Result<FusedNodes> {
        let (hg, og) = self.geometric(tape, p, seq, human_geo, object_geo)?;
        let (hv, ov) = embed_visual(&self.human_visual, &self.object_visual, tape, p, seq)?;
        Ok(FusedNodes {
            human: fuse(tape, hg, hv)?,
            object: fuse(tape, og, ov)?,
        })
    }
}
