//! Scenery interaction graph: attention over every human-joint and
//! object-corner node of a frame.
//!
//! For node `i` at frame `t`, with transform `Θ` and attention vector
//! `w = [w_src ‖ w_dst]`:
//!
//! ```text
//! e_ij = LeakyReLU(w_src · Θv_i + w_dst · Θv_j)
//! α_ij = softmax_j(e_ij) over the edge set of i (self included)
//! v'_i = tanh(Σ_j α_ij Θv_j)
//! ```
//!
//! The edge set is the same for all frames; `α` is recomputed per frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};

/// Edge set of the scenery graph, a row-major `n x n` boolean matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    pub nodes: usize,
    pub mask: Vec<bool>,
}

impl EdgeSet {
    /// All pairs connected, self-edges included.
    pub fn full(nodes: usize) -> Self {
        EdgeSet {
            nodes,
            mask: vec![true; nodes * nodes],
        }
    }

    /// Only self-edges.
    pub fn self_only(nodes: usize) -> Self {
        EdgeSet {
            nodes,
            mask: (0..nodes * nodes).map(|i| i / nodes == i % nodes).collect(),
        }
    }

    /// Node indices reordered by `perm` (new index `k` is old `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.nodes;
        EdgeSet {
            nodes: n,
            mask: (0..n * n)
                .map(|i| self.mask[perm[i / n] * n + perm[i % n]])
                .collect(),
        }
    }
}

/// One attention layer: transform `Θ: C -> C` and attention vector of `2C`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub theta: ParamId,
    pub attn: ParamId,
    pub width: usize,
}

/// Stack of [`GatLayer`]s (one by default).
#[derive(Clone, Debug)]
pub struct SceneryGat {
    pub layers: Vec<GatLayer>,
    pub slope: f64,
}

/// Outputs of one layer for inspection.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    /// `(T, N, C)` updated node features.
    pub nodes: Var,
    /// `(T, N, N)` attention coefficients.
    pub attention: Var,
}

impl GatLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Self {
        GatLayer {
            theta: store.add(format!("{name}.theta"), glorot(rng, width, width)),
            attn: store.add(format!("{name}.attn"), glorot(rng, 2 * width, 1)),
            width,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        nodes: Var,
        edges: &EdgeSet,
        slope: f64,
    ) -> Result<GatOutput> {
        let shape = tape.shape(nodes).to_vec();
        if shape.len() != 3 || shape[2] != self.width || shape[1] != edges.nodes {
            return Err(Error::shape(
                "gat_forward",
                &shape,
                &[edges.nodes, edges.nodes, self.width],
            ));
        }
        let (frames, n) = (shape[0], shape[1]);
        if let Some(i) = (0..n).find(|&i| !edges.mask[i * n..(i + 1) * n].iter().any(|&e| e)) {
            return Err(Error::InvalidArgument(format!(
                "degenerate neighborhood: node {i} has no edges"
            )));
        }
        let h = tape.matmul(nodes, p.var(self.theta))?;
        let w = p.var(self.attn);
        let w_src = tape.narrow(w, 0, 0, self.width)?;
        let w_dst = tape.narrow(w, 0, self.width, self.width)?;
        let s_src = tape.matmul(h, w_src)?;
        let s_dst = tape.matmul(h, w_dst)?;
        let s_src = tape.reshape(s_src, &[frames, n])?;
        let s_dst = tape.reshape(s_dst, &[frames, n])?;
        let logits = tape.pairwise_sum(s_src, s_dst)?;
        let logits = tape.leaky_relu(logits, slope)?;
        let attention = tape.softmax(logits, Some(&edges.mask))?;
        let mixed = tape.matmul(attention, h)?;
        Ok(GatOutput {
            nodes: tape.tanh(mixed),
            attention,
        })
    }
}

impl SceneryGat {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument(
                "scenery graph needs at least one layer".into(),
            ));
        }
        Ok(SceneryGat {
            layers: (0..layers)
                .map(|l| GatLayer::new(store, &format!("scenery{l}"), width, rng))
                .collect(),
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// `(T, N, C) -> (T, N, C)`, plus the last layer's attention.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        nodes: Var,
        edges: &EdgeSet,
    ) -> Result<GatOutput> {
        let mut out = GatOutput {
            nodes,
            attention: nodes,
        };
        for layer in &self.layers {
            out = layer.forward(tape, p, out.nodes, edges, self.slope)?;
        }
        Ok(out)
    }

    /// Attention matrix `(N, N)` of the last layer at frame `t` (0-based).
    pub fn attention_rows<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        nodes: &Tensor<T>,
        edges: &EdgeSet,
        t: usize,
    ) -> Result<Tensor<T>> {
        let frames = nodes.shape().first().copied().unwrap_or(0);
        if t >= frames {
            return Err(Error::OutOfRange {
                what: "frame",
                index: t,
                len: frames,
            });
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let v = tape.constant(nodes);
        let frame = tape.narrow(v, 0, t, 1)?;
        let out = self.forward(&mut tape, &p, frame, edges)?;
        let n = edges.nodes;
        tape.to_tensor(out.attention).reshape(&[n, n])
    }
}

/// Concatenates human nodes `(T, H·J, C)` before object nodes `(T, 2·O, C)`.
pub fn scene_nodes<T: Scalar>(tape: &mut Tape<T>, human: Var, object: Var) -> Result<Var> {
    tape.concat(&[human, object], 1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::finite_difference_check_params;

    fn gat(width: usize, seed: u64) -> (ParamStore<f64>, SceneryGat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = SceneryGat::new(&mut store, width, 1, &mut rng).unwrap();
        (store, g)
    }

    fn random_nodes(t: usize, n: usize, c: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, n, c], |_| rng.gen_range(-2.0..2.0))
    }

    fn run(
        store: &ParamStore<f64>,
        g: &SceneryGat,
        x: &Tensor<f64>,
        edges: &EdgeSet,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let v = tape.constant(x);
        let out = g.forward(&mut tape, &p, v, edges).unwrap();
        (tape.to_tensor(out.nodes), tape.to_tensor(out.attention))
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        let (store, g) = gat(6, 1);
        let n = 7;
        let x = Tensor::from_fn(&[3, n, 6], |i| ((i % 6) as f64 * 0.4).sin());
        let (_, a) = run(&store, &g, &x, &EdgeSet::full(n));
        for &v in a.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn default_scene_node_axis() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(&Tensor::zeros(&[2, 30, 768]));
        let o = tape.constant(&Tensor::zeros(&[2, 6, 768]));
        let v = scene_nodes(&mut tape, h, o).unwrap();
        assert_eq!(tape.shape(v), &[2, 36, 768]);
    }

    #[test]
    fn single_node_graph() {
        let (store, g) = gat(3, 2);
        let x = random_nodes(2, 1, 3, 3);
        let (out, a) = run(&store, &g, &x, &EdgeSet::full(1));
        assert_eq!(a.data(), &[1.0, 1.0]);
        let theta = store.get(g.layers[0].theta);
        for t in 0..2 {
            for c in 0..3 {
                let lin: f64 = (0..3).map(|k| x.at(&[t, 0, k]) * theta.at(&[k, c])).sum();
                assert!((out.at(&[t, 0, c]) - lin.tanh()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hand_two_node_case() {
        let mut store = ParamStore::new();
        let layer = GatLayer {
            theta: store.add("theta", Tensor::identity(2)),
            attn: store.add("attn", Tensor::ones(&[4, 1])),
            width: 2,
        };
        let g = SceneryGat {
            layers: vec![layer],
            slope: DEFAULT_LEAKY_SLOPE,
        };
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = g.attention_rows(&store, &x, &EdgeSet::full(2), 0).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(g.attention_rows(&store, &x, &EdgeSet::full(2), 1).is_err());
    }

    #[test]
    fn duplicate_keys_get_equal_weight() {
        let (store, g) = gat(4, 5);
        let mut x = random_nodes(2, 5, 4, 6);
        for t in 0..2 {
            for c in 0..4 {
                let v = x.at(&[t, 1, c]);
                x.data_mut()[(t * 5 + 3) * 4 + c] = v;
            }
        }
        let (_, a) = run(&store, &g, &x, &EdgeSet::full(5));
        for t in 0..2 {
            for i in 0..5 {
                assert_eq!(a.at(&[t, i, 1]), a.at(&[t, i, 3]));
            }
        }
    }

    #[test]
    fn self_edges_only_reduce_to_pointwise_transform() {
        let (store, g) = gat(4, 7);
        let x = random_nodes(2, 5, 4, 8);
        let (out, a) = run(&store, &g, &x, &EdgeSet::self_only(5));
        let theta = store.get(g.layers[0].theta);
        for t in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(a.at(&[t, i, j]), if i == j { 1.0 } else { 0.0 });
                }
                for c in 0..4 {
                    let lin: f64 = (0..4).map(|k| x.at(&[t, i, k]) * theta.at(&[k, c])).sum();
                    assert!((out.at(&[t, i, c]) - lin.tanh()).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn empty_neighborhood_is_rejected() {
        let (store, g) = gat(2, 9);
        let mut edges = EdgeSet::full(2);
        edges.mask[0] = false;
        edges.mask[1] = false;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let v = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        assert!(g.forward(&mut tape, &p, v, &edges).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, g) = gat(3, 10);
        let x = random_nodes(2, 4, 3, 11);
        let mut params = vec![x.clone()];
        params.extend(store.tensors().iter().cloned());
        let err = finite_difference_check_params(
            &mut params,
            |tape, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let out = g.forward(tape, &p, vars[0], &EdgeSet::full(4))?;
                let sq = tape.mul(out.nodes, out.nodes)?;
                let s = tape.sum(sq);
                Ok(s)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..200, n in 1usize..9, t in 1usize..4) {
            let (store, g) = gat(4, seed);
            let x = random_nodes(t, n, 4, seed + 1);
            let (_, a) = run(&store, &g, &x, &EdgeSet::full(n));
            for row in a.data().chunks(n) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn node_permutation_is_equivariant(seed in 0u64..100) {
            let (store, g) = gat(3, seed);
            let n = 6;
            let x = random_nodes(2, n, 3, seed + 7);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let xp = Tensor::from_fn(&[2, n, 3], |i| {
                let (t, k, c) = (i / (n * 3), (i / 3) % n, i % 3);
                x.at(&[t, perm[k], c])
            });
            let mut edges = EdgeSet::full(n);
            edges.mask[1] = false;
            edges.mask[2 * n + 4] = false;
            let (out, _) = run(&store, &g, &x, &edges);
            let (outp, _) = run(&store, &g, &xp, &edges.permuted(&perm));
            for t in 0..2 {
                for k in 0..n {
                    for c in 0..3 {
                        prop_assert!((outp.at(&[t, k, c]) - out.at(&[t, perm[k], c])).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
