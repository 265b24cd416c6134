//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; exits nonzero on any FAIL.

use std::fs;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cats::experiment::{ablate_gcn_depth, ablate_independent, train_folds, write_run, RunConfig};
use cats::fusion::{build_adjacency, embed_visual, Category, GcnStack, SkeletonSpec};
use cats::geometry::{build_geometry, SceneSequence};
use cats::metrics::{f1_at_k, f1_oracle, Segment, SegmentTimeline};
use cats::model::{Cats, ModelConfig};
use cats::nn::{Bound, ParamStore};
use cats::scenery::{EdgeSet, SceneryGat};
use cats::temporal::{gumbel_noise, Sampling};
use cats::tensor::{finite_difference_check, finite_difference_check_params};
use cats::{Result, Tape, Tensor, Var};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const ROW_SUM_TOL: f64 = 1e-10;
const UNIFORM_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_REQUIRED: usize = 990;
const TRAIN_ACCURACY: f64 = 0.95;
const MAX_EPOCHS: usize = 200;
const HELD_OUT_F1_10: f64 = 70.0;
const HARD_UNTRAINED_F1_10: f64 = 15.0;
const LEARN_BUDGET_S: f64 = 30.0 * 60.0;
const DEFAULT_C3: usize = 768;

/// Narrow model used for every training-based criterion.
const SMALL: [&str; 3] = ["--model.c1=16", "--model.c2=16", "--model.hidden=16"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn failed(e: cats::Error) -> Verdict {
    verdict(false, format!("error[{}]: {e}", e.code()))
}

fn small_config(extra: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&SMALL).unwrap();
    cfg.apply_overrides(extra).unwrap();
    cfg
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output coordinate gets a
/// distinct upstream gradient.
fn weighted(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(&random_tensor(&mut rng, &shape));
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Objective)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, 1)
            }),
        ),
        (
            "matmul batched",
            vec![vec![2, 3, 4], vec![4, 2]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, 2)
            }),
        ),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y, 3)
            }),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted(t, y, 4)
            }),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y, 5)
            }),
        ),
        (
            "add_bias",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted(t, y, 6)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                weighted(t, y, 7)
            }),
        ),
        (
            "tanh",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.tanh(v[0]);
                weighted(t, y, 8)
            }),
        ),
        (
            "sigmoid",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                weighted(t, y, 9)
            }),
        ),
        (
            "leaky_relu",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                weighted(t, y, 10)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let y = t.softmax(v[0], None)?;
                weighted(t, y, 11)
            }),
        ),
        (
            "softmax masked",
            vec![vec![2, 3, 3]],
            Box::new(|t, v| {
                let mask = [true, false, true, true, true, false, false, true, true];
                let y = t.softmax(v[0], Some(&mask))?;
                weighted(t, y, 12)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                weighted(t, y, 13)
            }),
        ),
        (
            "narrow",
            vec![vec![3, 5]],
            Box::new(|t, v| {
                let y = t.narrow(v[0], 1, 1, 3)?;
                weighted(t, y, 14)
            }),
        ),
        (
            "transpose",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                weighted(t, y, 15)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                weighted(t, y, 16)
            }),
        ),
        (
            "pairwise_sum",
            vec![vec![2, 3], vec![2, 4]],
            Box::new(|t, v| {
                let y = t.pairwise_sum(v[0], v[1])?;
                weighted(t, y, 17)
            }),
        ),
        (
            "mean",
            vec![vec![7]],
            Box::new(|t, v| {
                let y = t.tanh(v[0]);
                Ok(t.mean(y))
            }),
        ),
        (
            "cross_entropy",
            vec![vec![4, 3]],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
    ]
}

/// Two frames, one human with a three-joint chain, one object.
fn toy_scene() -> SceneSequence {
    SceneSequence {
        video_id: "toy".into(),
        subject_ids: vec![1],
        frames: 2,
        humans: 1,
        joints: 3,
        objects: 1,
        frame_size: [1.0, 1.0],
        joint_tracks: vec![
            vec![vec![[0.2, 0.3], [0.4, 0.5], [0.2, 0.8]]],
            vec![vec![[0.25, 0.3], [0.6, 0.45], [0.3, 0.7]]],
        ],
        boxes: vec![vec![[0.5, 0.5, 0.7, 0.8]], vec![[0.1, 0.2, 0.7, 0.9]]],
        labels: vec![vec![1, 2]],
        visual_human: Some(vec![vec![vec![0.3, -0.2]], vec![vec![0.1, 0.5]]]),
        visual_object: Some(vec![vec![vec![-0.4, 0.2]], vec![vec![0.6, 0.0]]]),
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        gcn_layers: 2,
        visual_width: 3,
        geo_width: 2,
        hidden: 3,
        gat_layers: 1,
        num_classes: 3,
        visual_dim: 2,
        skeleton: SkeletonSpec::chain(3),
        independent: false,
        background: None,
    }
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: (f64, &str) = (0.0, "");
    let note = |err: f64, name: &'static str, worst: &mut (f64, &str)| {
        if err > worst.0 {
            *worst = (err, name);
        }
    };

    for (name, shapes, f) in primitive_cases() {
        let mut params: Vec<Tensor<f64>> =
            shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        match finite_difference_check_params(&mut params, |t, v| f(t, v), 1e-6) {
            Ok(e) => note(e, name, &mut worst),
            Err(e) => return verdict(false, format!("{name}: {e}")),
        }
    }

    // GCN: weights and input together
    let mut store = ParamStore::<f64>::new();
    let gcn = GcnStack::new(&mut store, "h", 3, 4, &mut rng).unwrap();
    let sk = SkeletonSpec::chain(3);
    let adj: Tensor<f64> = build_adjacency(Category::Human {
        skeleton: &sk,
        persons: 2,
    })
    .unwrap();
    let mut params = store.tensors().to_vec();
    params.push(random_tensor(&mut rng, &[2, 6, 4]));
    let n = store.len();
    let gcn_err = finite_difference_check_params(
        &mut params,
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = gcn.forward(t, &p, &adj, v[n])?;
            weighted(t, y, 21)
        },
        1e-6,
    );
    match gcn_err {
        Ok(e) => note(e, "gcn_forward", &mut worst),
        Err(e) => return verdict(false, format!("gcn_forward: {e}")),
    }

    // GAT: parameters and node features, sparse edges
    let mut store = ParamStore::<f64>::new();
    let gat = SceneryGat::new(&mut store, 3, 2, &mut rng).unwrap();
    let mut edges = EdgeSet::full(5);
    for (i, e) in edges.mask.iter_mut().enumerate() {
        if i / 5 != i % 5 && i % 3 == 0 {
            *e = false;
        }
    }
    let mut params = store.tensors().to_vec();
    params.push(random_tensor(&mut rng, &[2, 5, 3]));
    let n = store.len();
    let gat_err = finite_difference_check_params(
        &mut params,
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let out = gat.forward(t, &p, v[n], &edges)?;
            let a = weighted(t, out.nodes, 22)?;
            let b = weighted(t, out.attention, 23)?;
            t.add(a, b)
        },
        1e-6,
    );
    match gat_err {
        Ok(e) => note(e, "gat_forward", &mut worst),
        Err(e) => return verdict(false, format!("gat_forward: {e}")),
    }

    // Full pipeline; the soft relaxation is what carries gradient
    let mut model = Cats::<f64>::new(toy_config(), 3).unwrap();
    model.temporal.boundary.straight_through = false;
    let seq = toy_scene();
    let geo = build_geometry(&seq).unwrap();
    let noise = gumbel_noise(1, 2 * 2);
    let mut params = model.store.tensors().to_vec();
    let full = finite_difference_check_params(
        &mut params,
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            model
                .loss(tape, &p, &seq, &geo, &Sampling::Fixed(noise.clone()))
                .map(|(l, _)| l)
        },
        1e-5,
    );
    match full {
        Ok(e) => note(e, "full pipeline", &mut worst),
        Err(e) => return verdict(false, format!("full pipeline: {e}")),
    }

    // a single-input primitive through the convenience wrapper as well
    let x = random_tensor(&mut rng, &[4]);
    match finite_difference_check(
        |t, v| {
            let y = t.sigmoid(v);
            weighted(t, y, 24)
        },
        &x,
        1e-6,
    ) {
        Ok(e) => note(e, "sigmoid (single input)", &mut worst),
        Err(e) => return verdict(false, e.to_string()),
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "max relative error {:.2e} (worst: {}), tolerance {GRAD_TOL:.0e}; {secs:.1}s of {GRAD_BUDGET_S}s",
            worst.0, worst.1
        ),
    )
}

fn attention_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_sum, mut worst_uniform, mut worst_masked) = (0.0f64, 0.0f64, 0.0f64);
    for g in 0..100 {
        let n = rng.gen_range(1..=12);
        let c = rng.gen_range(1..=6);
        let mut store = ParamStore::<f64>::new();
        let gat = SceneryGat::new(&mut store, c, 1, &mut rng).unwrap();
        let mut edges = EdgeSet::full(n);
        if g % 2 == 1 {
            for (i, e) in edges.mask.iter_mut().enumerate() {
                *e = i / n == i % n || rng.gen_bool(0.5);
            }
        }
        let nodes = Tensor::from_fn(&[1, n, c], |_| rng.gen_range(-3.0..3.0));
        let a = match gat.attention_rows(&store, &nodes, &edges, 0) {
            Ok(a) => a,
            Err(e) => return failed(e),
        };
        for i in 0..n {
            let row: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
            worst_sum = worst_sum.max((row - 1.0).abs());
            for j in 0..n {
                if !edges.mask[i * n + j] {
                    worst_masked = worst_masked.max(a.at(&[i, j]).abs());
                }
            }
        }
        let feature: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let same = Tensor::from_fn(&[1, n, c], |k| feature[k % c]);
        let a = match gat.attention_rows(&store, &same, &edges, 0) {
            Ok(a) => a,
            Err(e) => return failed(e),
        };
        for i in 0..n {
            let deg = (0..n).filter(|&j| edges.mask[i * n + j]).count() as f64;
            for j in (0..n).filter(|&j| edges.mask[i * n + j]) {
                worst_uniform = worst_uniform.max((a.at(&[i, j]) - 1.0 / deg).abs());
            }
        }
    }
    verdict(
        worst_sum <= ROW_SUM_TOL && worst_uniform <= UNIFORM_TOL && worst_masked == 0.0,
        format!(
            "100 graphs: max |row sum - 1| {worst_sum:.1e} (tol {ROW_SUM_TOL:.0e}), max uniform deviation {worst_uniform:.1e} (tol {UNIFORM_TOL:.0e}), max masked weight {worst_masked:.1e}"
        ),
    )
}

fn random_timeline(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> SegmentTimeline {
    let mut labels = Vec::with_capacity(frames);
    while labels.len() < frames {
        let label = rng.gen_range(0..classes);
        let run = rng.gen_range(1..=frames / 3 + 1);
        labels.extend(std::iter::repeat(label).take(run));
    }
    labels.truncate(frames);
    SegmentTimeline::from_labels(&labels, None)
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut agree, mut greedy_behind, mut other) = (0, 0, 0);
    let mut done = 0;
    while done < ORACLE_INSTANCES {
        let frames = rng.gen_range(4..=30);
        let gt = random_timeline(&mut rng, frames, 3);
        let pred = random_timeline(&mut rng, frames, 3);
        if gt.len() > 12 || pred.len() > 12 {
            continue;
        }
        done += 1;
        let k = [0.1, 0.25, 0.5, rng.gen_range(0.05..0.95)][done % 4];
        let (greedy, best) = match (f1_at_k(&pred, &gt, k), f1_oracle(&pred, &gt, k)) {
            (Ok(g), Ok(b)) => (g.counts, b),
            (Err(e), _) | (_, Err(e)) => return failed(e),
        };
        if greedy == best {
            agree += 1;
        } else if greedy.tp < best.tp {
            greedy_behind += 1;
        } else {
            other += 1;
        }
    }

    let seg = |l, s, e| Segment::new(l, s, e);
    let gt = SegmentTimeline::new(vec![seg(0, 1, 50), seg(1, 51, 100)]).unwrap();
    let pred = SegmentTimeline::new(vec![seg(0, 1, 60), seg(1, 61, 100)]).unwrap();
    let at = |k| f1_at_k(&pred, &gt, k).map(|m| m.f1);
    let hand = matches!((at(0.5), at(0.9)), (Ok(a), Ok(b)) if a == 1.0 && b == 0.0);

    verdict(
        agree >= ORACLE_REQUIRED && other == 0 && hand,
        format!(
            "{agree}/{ORACLE_INSTANCES} agree (need {ORACLE_REQUIRED}), {greedy_behind} greedy-below-optimal, {other} unexplained; hand case F1@50 = 1.0 and F1@90 = 0.0: {hand}"
        ),
    )
}

fn learnability() -> Verdict {
    let start = Instant::now();
    let cfg = small_config(&[
        "--seed=1",
        "--train.stop_accuracy=0.95",
        "--train.select=last",
        &format!("--train.epochs={MAX_EPOCHS}"),
    ]);
    let data = match cats::experiment::load_data(&cfg) {
        Ok(d) => d,
        Err(e) => return failed(e),
    };
    let out = match train_folds::<f64>(&cfg, &data, &mut |_| {}) {
        Ok(o) => o,
        Err(e) => return failed(e),
    };
    let min_acc = out
        .folds
        .iter()
        .map(|f| f.train_accuracy)
        .fold(f64::INFINITY, f64::min);
    let max_epochs = out.folds.iter().map(|f| f.log.len()).max().unwrap_or(0);
    let f1 = out.aggregate.summary.iter().find(|s| s.k == 0.10).copied();
    let Some(f1) = f1 else {
        return verdict(false, "no F1@10 in the aggregate report");
    };

    let hard = small_config(&["--seed=1", "--scenario.preset=hard", "--train.epochs=0"]);
    let hard_out = match cats::experiment::load_data(&hard)
        .and_then(|d| train_folds::<f64>(&hard, &d, &mut |_| {}))
    {
        Ok(o) => o,
        Err(e) => return failed(e),
    };
    let Some(untrained) = hard_out
        .aggregate
        .summary
        .iter()
        .find(|s| s.k == 0.10)
        .copied()
    else {
        return verdict(false, "no F1@10 in the hard-preset report");
    };

    let secs = start.elapsed().as_secs_f64();
    verdict(
        min_acc >= TRAIN_ACCURACY
            && max_epochs <= MAX_EPOCHS
            && f1.mean >= HELD_OUT_F1_10
            && untrained.mean <= HARD_UNTRAINED_F1_10
            && secs < LEARN_BUDGET_S,
        format!(
            "{} folds: lowest training accuracy {min_acc:.3} (need {TRAIN_ACCURACY}) after at most {max_epochs} epochs; held-out F1@10 {} (need {HELD_OUT_F1_10}); hard preset untrained F1@10 {} (need <= {HARD_UNTRAINED_F1_10}); {secs:.0}s",
            out.folds.len(),
            f1.display(),
            untrained.display()
        ),
    )
}

fn ablation_structure() -> Verdict {
    let cfg = small_config(&["--seed=2", "--train.epochs=2", "--train.folds=0,1"]);
    let data = match cats::experiment::load_data(&cfg) {
        Ok(d) => d,
        Err(e) => return failed(e),
    };
    let depth = match ablate_gcn_depth::<f64>(&cfg, &data, &[1, 2, 3, 4, 5], &mut |_| {}) {
        Ok(t) => t,
        Err(e) => return failed(e),
    };
    let labels_ok = depth
        .rows
        .iter()
        .enumerate()
        .all(|(i, r)| r.label == format!("{}-layer GCN", i + 1) && r.summary.len() == 3);
    let depth_ok = depth.rows.len() == 5 && labels_ok && depth.folds_identical();

    let table = match ablate_independent::<f64>(&cfg, &data, &mut |_| {}) {
        Ok(t) => t,
        Err(e) => return failed(e),
    };
    let indep_ok = table.rows.len() == 2 && table.folds_identical();

    let hard = small_config(&[
        "--seed=2",
        "--scenario.preset=hard",
        "--train.epochs=30",
        "--train.select=last",
    ]);
    let hard_data = match cats::experiment::load_data(&hard) {
        Ok(d) => d,
        Err(e) => return failed(e),
    };
    let hard_table = match ablate_independent::<f64>(&hard, &hard_data, &mut |_| {}) {
        Ok(t) => t,
        Err(e) => return failed(e),
    };
    let (ind, full) = match (hard_table.rows[0].f1(0.10), hard_table.rows[1].f1(0.10)) {
        (Some(a), Some(b)) => (a, b),
        _ => return verdict(false, "hard-preset table lacks F1@10"),
    };
    let direction_ok = hard_table.folds_identical() && ind.mean <= full.mean + full.std;
    verdict(
        depth_ok && indep_ok && direction_ok,
        format!(
            "depth table {} rows, identical folds {}; independent table {} rows; hard preset F1@10 independent {} vs CATS {} over {} folds",
            depth.rows.len(),
            depth.folds_identical(),
            table.rows.len(),
            ind.display(),
            full.display(),
            full.folds
        ),
    )
}

fn determinism() -> Verdict {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let cfg = small_config(&["--seed=8", "--train.epochs=3", "--train.folds=2,5"]);
        let run = dir.path().join(name);
        let res = cats::experiment::load_data(&cfg).and_then(|d| {
            let out = train_folds::<f64>(&cfg, &d, &mut |_| {})?;
            write_run::<f64>(&run, &cfg, &d, &out)
        });
        if let Err(e) = res {
            return failed(e);
        }
        let read = |f: &str| fs::read(run.join(f)).unwrap_or_default();
        bytes.push((read("report.txt"), read("log.jsonl"), read("records.jsonl")));
    }
    let same = bytes[0] == bytes[1] && !bytes[0].0.is_empty() && !bytes[0].1.is_empty();
    verdict(
        same,
        format!(
            "two seeded runs: report {} bytes, loss log {} bytes, identical {same}",
            bytes[0].0.len(),
            bytes[0].1.len()
        ),
    )
}

fn random_scene(
    rng: &mut ChaCha8Rng,
    frames: usize,
    humans: usize,
    joints: usize,
    objects: usize,
    dim: usize,
) -> SceneSequence {
    let mut v = |n: usize| -> Vec<Vec<Vec<f64>>> {
        (0..frames)
            .map(|_| {
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect()
    };
    let (vh, vo) = (v(humans), v(objects));
    SceneSequence {
        video_id: "shape".into(),
        subject_ids: (0..humans as u32).collect(),
        frames,
        humans,
        joints,
        objects,
        frame_size: [100.0, 100.0],
        joint_tracks: (0..frames)
            .map(|t| {
                (0..humans)
                    .map(|h| {
                        (0..joints)
                            .map(|j| [(t + h) as f64, j as f64 * 3.0])
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        boxes: (0..frames)
            .map(|t| {
                (0..objects)
                    .map(|o| [t as f64, o as f64, 50.0, 60.0])
                    .collect()
            })
            .collect(),
        labels: vec![vec![0; frames]; humans],
        visual_human: Some(vh),
        visual_object: Some(vo),
    }
}

/// `(HG', OG', HV', V)` shapes for one scene and configuration.
fn fused_shapes(model: &Cats<f64>, seq: &SceneSequence) -> Result<[Vec<usize>; 4]> {
    let geo = build_geometry::<f64>(seq)?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let f = &model.fusion;
    let (hg, og) = f.geometric(&mut tape, &p, seq, &geo.human, &geo.object)?;
    let (hv, _) = embed_visual(&f.human_visual, &f.object_visual, &mut tape, &p, seq)?;
    let fused = f.forward(&mut tape, &p, seq, &geo.human, &geo.object)?;
    let nodes = tape.concat(&[fused.human, fused.object], 1)?;
    Ok([hg, og, hv, nodes].map(|v| tape.shape(v).to_vec()))
}

fn shape_contracts() -> Verdict {
    let mut runner = TestRunner::new(PropConfig {
        cases: 48,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        1usize..5,
        1usize..4,
        1usize..9,
        1usize..4,
        1usize..6,
        1usize..7,
        1usize..7,
        1usize..4,
    );
    let result = runner.run(&strategy, |(t, h, j, o, d, c1, c2, layers)| {
        let mut rng = ChaCha8Rng::seed_from_u64((t * 1000 + h * 100 + j * 10 + o) as u64);
        let seq = random_scene(&mut rng, t, h, j, o, d);
        let cfg = ModelConfig {
            gcn_layers: layers,
            visual_width: c1,
            geo_width: c2,
            hidden: 3,
            gat_layers: 1,
            num_classes: 2,
            visual_dim: d,
            skeleton: SkeletonSpec::chain(j),
            independent: false,
            background: None,
        };
        let model = Cats::<f64>::new(cfg, 1).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let [hg, og, hv, v] =
            fused_shapes(&model, &seq).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(hg, vec![t, h * j, c2]);
        prop_assert_eq!(og, vec![t, 2 * o, c2]);
        prop_assert_eq!(hv, vec![t, h * j, c1]);
        prop_assert_eq!(v, vec![t, h * j + 2 * o, c1 + c2]);
        Ok(())
    });
    if let Err(e) = result {
        return verdict(false, format!("randomized shapes: {e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random_scene(&mut rng, 2, 2, 15, 3, 16);
    let cfg = ModelConfig::new(4, 16, SkeletonSpec::default_15());
    let defaults = Cats::<f64>::new(cfg, 1).and_then(|m| fused_shapes(&m, &seq));
    match defaults {
        Ok([hg, og, hv, v]) => verdict(
            hg == [2, 30, 256] && og == [2, 6, 256] && hv == [2, 30, 512] && v == [2, 36, DEFAULT_C3],
            format!(
                "48 randomized configurations hold; defaults give HG' {hg:?}, OG' {og:?}, HV' {hv:?}, V {v:?} (C3 = {})",
                v[2]
            ),
        ),
        Err(e) => failed(e),
    }
}

fn main() {
    // `cargo test -- --list` passes through here; nothing to list.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // bare numbers select criteria, e.g. `cargo test --test acceptance -- 2 7`
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Verdict); 7] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 attention invariants", attention_invariants),
        ("3 metric oracle equivalence", metric_oracle),
        ("4 learnability", learnability),
        ("5 ablation structure", ablation_structure),
        ("6 determinism", determinism),
        ("7 shape contracts", shape_contracts),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let v = check();
        if !v.pass {
            failures += 1;
        }
        println!(
            "{} criterion {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
