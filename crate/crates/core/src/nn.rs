//! Trainable building blocks: a named parameter store, linear layers, GRU
//! cells and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.tracked());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds the gradients of the last backward pass into each parameter.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            tape.write_grad(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm(&self) -> T {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters {:?}, found {} {:?}",
                self.names.len(),
                self.names.iter().take(4).collect::<Vec<_>>(),
                other.names.len(),
                other.names.iter().take(4).collect::<Vec<_>>()
            )));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Uniform Glorot initialization for a `fan_in x fan_out` weight.
pub fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-limit..=limit)))
}

/// Affine map over the last axis: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), glorot(rng, d_in, 3 * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), glorot(rng, hidden, 3 * hidden));
        let b_ih = store.add(format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden]));
        let b_hh = store.add(format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden]));
        GruCell {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            d_in,
            hidden,
        }
    }

    /// Input projections `x W_ih + b_ih` for a whole `(T, d_in)` sequence.
    fn project<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w_ih))?;
        tape.add_bias(y, p.var(self.b_ih))
    }

    /// One recurrence step from a projected input row `(1, 3H)` and state `(1, H)`.
    fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x_proj: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let hp = tape.matmul(h, p.var(self.w_hh))?;
        let hp = tape.add_bias(hp, p.var(self.b_hh))?;
        let x_rz = tape.narrow(x_proj, 1, 0, 2 * hd)?;
        let h_rz = tape.narrow(hp, 1, 0, 2 * hd)?;
        let rz = tape.add(x_rz, h_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.narrow(rz, 1, 0, hd)?;
        let z = tape.narrow(rz, 1, hd, hd)?;
        let x_n = tape.narrow(x_proj, 1, 2 * hd, hd)?;
        let h_n = tape.narrow(hp, 1, 2 * hd, hd)?;
        let gated = tape.mul(r, h_n)?;
        let n = tape.add(x_n, gated)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        tape.add(n, keep)
    }

    /// Runs the cell over `x: (T, d_in)`, or a batch `x: (T, B, d_in)` of
    /// equal-length sequences, from a zero state, left to right or right to
    /// left. Output row `t` is the state after consuming frame `t`.
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        reverse: bool,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let batch = match shape.len() {
            2 => 1,
            3 => shape[1],
            _ => 0,
        };
        if batch == 0 || shape[shape.len() - 1] != self.d_in {
            return Err(Error::shape(
                "gru",
                &shape,
                &[shape.first().copied().unwrap_or(0), self.d_in],
            ));
        }
        let steps = shape[0];
        if steps == 0 {
            return Err(Error::EmptyInput("gru over zero frames".into()));
        }
        let proj = self.project(tape, p, x)?;
        let mut h = tape.constant(&Tensor::zeros(&[batch, self.hidden]));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let row = tape.narrow(proj, 0, t, 1)?;
            let row = tape.reshape(row, &[batch, 3 * self.hidden])?;
            h = self.step(tape, p, row, h)?;
            states[t] = h;
        }
        let out = tape.concat(&states, 0)?;
        if shape.len() == 3 {
            tape.reshape(out, &[steps, batch, self.hidden])
        } else {
            Ok(out)
        }
    }
}

/// Left-to-right and right-to-left GRU pair whose per-frame states are
/// concatenated, forward half first.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiGru {
            forward: GruCell::new(store, &format!("{name}.fwd"), d_in, hidden, rng),
            backward: GruCell::new(store, &format!("{name}.bwd"), d_in, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `(T, d_in) -> (T, 2 * hidden)`, or batched `(T, B, d_in) -> (T, B, 2 * hidden)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.forward.run(tape, p, x, false)?;
        let b = self.backward.run(tape, p, x, true)?;
        tape.concat_last(f, b)
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> T {
        if self.m.len() != store.len() {
            self.m = store
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect();
            self.v = self.m.clone();
        }
        let norm = store.grad_norm();
        let scale = match self.clip_norm {
            Some(c) if norm.as_f64() > c => T::of(c) / norm,
            _ => T::one(),
        };
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((t, m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((w, &gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * scale;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        norm
    }
}
