//! Temporal head: frame Bi-GRU, Gumbel-Softmax boundaries, segment Bi-GRU
//! and the per-human classifier.
//!
//! Each human is one sequence. Its frame input is its own node summary
//! followed by the scene-wide summary. Boundary channel 0 means "a new
//! segment starts here"; frame 1 always starts one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::SegmentTimeline;
use crate::nn::{BiGru, Bound, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Means over each human's `joints` node rows and over all nodes.
///
/// `nodes: (T, N, C)` with humans first gives `(T, H, C)` and `(T, C)`.
pub fn pool_scene<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    humans: usize,
    joints: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(nodes).to_vec();
    if shape.len() != 3 || shape[1] < humans * joints || humans == 0 || joints == 0 {
        return Err(Error::shape("pool_scene", &shape, &[humans, joints]));
    }
    let (frames, n, c) = (shape[0], shape[1], shape[2]);
    let w = T::of(1.0 / joints as f64);
    let per_human = Tensor::from_fn(&[humans, n], |i| {
        let (h, j) = (i / n, i % n);
        if j / joints == h && j < humans * joints {
            w
        } else {
            T::zero()
        }
    });
    let m = tape.constant(&per_human);
    let human = tape.matmul(m, nodes)?;
    let all = tape.constant(&Tensor::full(&[1, n], T::of(1.0 / n as f64)));
    let global = tape.matmul(all, nodes)?;
    let global = tape.reshape(global, &[frames, c])?;
    Ok((human, global))
}

/// How boundary indicators are drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampling {
    /// Gumbel noise from a seeded generator.
    Gumbel { seed: u64 },
    /// Deterministic argmax of the logits, no noise.
    Argmax,
    /// Caller-supplied noise, one value per logit.
    Fixed(Vec<f64>),
}

/// Frame states to boundary / no-boundary logits, sampled at temperature `tau`.
#[derive(Clone, Debug)]
pub struct BoundaryModule {
    pub linear: Linear,
    pub tau: f64,
    pub straight_through: bool,
}

/// Sampled indicators `(.., 2)` and the resulting per-sequence start flags.
#[derive(Clone, Debug)]
pub struct Boundaries {
    pub indicators: Var,
    pub starts: Vec<Vec<bool>>,
}

impl BoundaryModule {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        rng: &mut R,
    ) -> Self {
        BoundaryModule {
            linear: Linear::new(store, name, d_in, 2, true, rng),
            tau: 1.0,
            straight_through: true,
        }
    }
}

/// Standard Gumbel samples `-ln(-ln u)`.
pub fn gumbel_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| -(-rng.gen_range(f64::MIN_POSITIVE..1.0).ln()).ln())
        .collect()
}

/// `states: (T, D)` or `(T, B, D)`. Indicator rows are `[boundary, inside]`.
pub fn gumbel_boundaries<T: Scalar>(
    b: &BoundaryModule,
    tape: &mut Tape<T>,
    p: &Bound,
    states: Var,
    sampling: &Sampling,
) -> Result<Boundaries> {
    if !(b.tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {} must be positive",
            b.tau
        )));
    }
    let logits = b.linear.forward(tape, p, states)?;
    let shape = tape.shape(logits).to_vec();
    let frames = shape[0];
    let rows = tape.value(logits).len() / 2;
    let batch = rows / frames.max(1);
    let noisy = match sampling {
        Sampling::Argmax => logits,
        Sampling::Gumbel { seed } => {
            let g = gumbel_noise(*seed, rows * 2)
                .into_iter()
                .map(T::of)
                .collect();
            let g = tape.constant_raw(shape.clone(), g)?;
            tape.add(logits, g)?
        }
        Sampling::Fixed(noise) => {
            let g = tape.constant_raw(shape.clone(), noise.iter().map(|&v| T::of(v)).collect())?;
            tape.add(logits, g)?
        }
    };
    let scaled = tape.scale(noisy, T::of(1.0 / b.tau));
    let soft = tape.softmax(scaled, None)?;
    let mut hard = vec![T::zero(); rows * 2];
    let mut starts = vec![vec![false; frames]; batch];
    {
        let sv = tape.value(soft);
        for r in 0..rows {
            let (t, s) = (r / batch, r % batch);
            let start = t == 0 || sv[2 * r] >= sv[2 * r + 1];
            hard[2 * r + usize::from(!start)] = T::one();
            starts[s][t] = start;
        }
    }
    let indicators = if b.straight_through || *sampling == Sampling::Argmax {
        tape.straight_through(soft, hard)?
    } else {
        soft
    };
    Ok(Boundaries { indicators, starts })
}

/// `(start, end)` frame ranges, 0-based and end-exclusive, implied by start flags.
pub fn segment_ranges(starts: &[bool]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (t, &s) in starts.iter().enumerate() {
        match out.last_mut() {
            Some(last) if !s => last.1 = t + 1,
            _ => out.push((t, t + 1)),
        }
    }
    out
}

/// Linear map to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d_in: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            linear: Linear::new(store, "classifier", d_in, num_classes, true, rng),
            num_classes,
        }
    }

    /// Human summaries `(T, H, a)` and segment context `(T, H, b)` to
    /// logits `(T, H, num_classes)`.
    pub fn classify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        human: Var,
        context: Var,
    ) -> Result<Var> {
        let x = tape.concat_last(human, context)?;
        self.linear.forward(tape, p, x)
    }
}

/// Mean cross-entropy of `(T, H, C)` logits against `labels[h][t]`.
pub fn frame_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[Vec<usize>],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || labels.len() != shape[1] || labels.iter().any(|l| l.len() != shape[0]) {
        return Err(Error::shape(
            "frame_loss",
            &shape,
            &[labels.first().map_or(0, Vec::len), labels.len()],
        ));
    }
    let targets: Vec<usize> = (0..shape[0] * shape[1])
        .map(|i| labels[i % shape[1]][i / shape[1]])
        .collect();
    tape.cross_entropy(logits, &targets)
}

/// Argmax labels per human, `[h][t]`; ties go to the lower class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let s = logits.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(Error::shape("decode_timeline", s, &[0, 0, 1]));
    }
    let (frames, humans, classes) = (s[0], s[1], s[2]);
    let mut out = vec![vec![0; frames]; humans];
    for (r, row) in logits.data().chunks(classes).enumerate() {
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out[r % humans][r / humans] = best;
    }
    Ok(out)
}

/// Run-length decoding of `(T, H, C)` logits into one timeline per human.
pub fn decode_timeline<T: Scalar>(
    logits: &Tensor<T>,
    background: Option<usize>,
) -> Result<Vec<SegmentTimeline>> {
    Ok(argmax_labels(logits)?
        .iter()
        .map(|l| SegmentTimeline::from_labels(l, background))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalDims {
    /// Width of one human summary.
    pub human: usize,
    /// Width of the scene-wide summary.
    pub global: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct TemporalSegmenter {
    pub frame_gru: BiGru,
    pub boundary: BoundaryModule,
    pub segment_gru: BiGru,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// `(T, H, num_classes)`.
    pub logits: Var,
    pub boundaries: Boundaries,
}

impl TemporalSegmenter {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dims: &TemporalDims,
        rng: &mut R,
    ) -> Self {
        let frame_gru = BiGru::new(
            store,
            "frame_gru",
            dims.human + dims.global,
            dims.hidden,
            rng,
        );
        let state = frame_gru.out_dim();
        let boundary = BoundaryModule::new(store, "boundary", state, rng);
        let segment_gru = BiGru::new(store, "segment_gru", state + 2, dims.hidden, rng);
        let head = ClassifierHead::new(
            store,
            dims.human + segment_gru.out_dim(),
            dims.num_classes,
            rng,
        );
        TemporalSegmenter {
            frame_gru,
            boundary,
            segment_gru,
            head,
        }
    }

    /// `human: (T, H, a)`, `global: (T, b)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        human: Var,
        global: Var,
        sampling: &Sampling,
    ) -> Result<TemporalOutput> {
        let hs = tape.shape(human).to_vec();
        let gs = tape.shape(global).to_vec();
        if hs.len() != 3 || gs.len() != 2 || hs[0] != gs[0] {
            return Err(Error::shape("temporal", &hs, &gs));
        }
        let (frames, humans) = (hs[0], hs[1]);
        let g = tape.reshape(global, &[frames, 1, gs[1]])?;
        let g = if humans == 1 {
            g
        } else {
            tape.concat(&vec![g; humans], 1)?
        };
        let x = tape.concat_last(human, g)?;
        let states = self.frame_gru.forward(tape, p, x)?;
        let boundaries = gumbel_boundaries(&self.boundary, tape, p, states, sampling)?;
        let feats = tape.concat_last(states, boundaries.indicators)?;
        let width = tape.shape(feats)[2];
        let mut contexts = Vec::with_capacity(humans);
        for (h, starts) in boundaries.starts.iter().enumerate() {
            let f = tape.narrow(feats, 1, h, 1)?;
            let f = tape.reshape(f, &[frames, width])?;
            contexts.push(self.segment_context(tape, p, f, starts)?);
        }
        let context = tape.concat(&contexts, 1)?;
        let logits = self.head.classify(tape, p, human, context)?;
        Ok(TemporalOutput { logits, boundaries })
    }

    /// Mean-pools `feats: (T, D)` per segment, runs the segment Bi-GRU in
    /// segment order and broadcasts each output back over its frames.
    fn segment_context<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: Var,
        starts: &[bool],
    ) -> Result<Var> {
        let frames = starts.len();
        let ranges = segment_ranges(starts);
        let segs = ranges.len();
        let mut pool = vec![T::zero(); segs * frames];
        let mut spread = vec![T::zero(); frames * segs];
        for (s, &(a, b)) in ranges.iter().enumerate() {
            let w = T::of(1.0 / (b - a) as f64);
            for t in a..b {
                pool[s * frames + t] = w;
                spread[t * segs + s] = T::one();
            }
        }
        let pool = tape.constant_raw(vec![segs, frames], pool)?;
        let spread = tape.constant_raw(vec![frames, segs], spread)?;
        let pooled = tape.matmul(pool, feats)?;
        let ctx = self.segment_gru.forward(tape, p, pooled)?;
        let out = tape.matmul(spread, ctx)?;
        let width = tape.shape(out)[1];
        tape.reshape(out, &[frames, 1, width])
    }
}
