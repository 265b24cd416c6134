use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Negative-side slope used by graph attention logits.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Piecewise linear with the given slope for negative inputs. The
    /// derivative at exactly 0 takes the positive branch.
    LeakyRelu(f64),
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::InvalidArgument(
                format!("leaky_relu slope must lie in (0,1), got {s}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Activation::LeakyRelu(s) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(s)
                }
            }
        }
    }

    // Derivative from input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::LeakyRelu(s) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(s)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Act(Var, Activation),
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        len: usize,
    },
    TransposeLast {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    PairwiseSum {
        a: Var,
        b: Var,
        n: usize,
        m: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    StraightThrough {
        soft: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse and visits each recorded adjoint exactly once.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as an input. Its `requires_grad` flag decides
    /// whether gradients are computed for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Records raw data as a constant.
    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Gradient computed by the most recent [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. Returns whether anything
    /// was written.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<T>) -> Result<bool> {
        match self.grad(v) {
            Some(g) => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes. Leading batch axes must agree,
    /// or one operand may be a plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (lead, a_batched, b_batched) = match (ba.is_empty(), bb.is_empty()) {
            (true, true) => (Vec::new(), false, false),
            (false, true) => (ba.to_vec(), true, false),
            (true, false) => (bb.to_vec(), false, true),
            (false, false) if ba == bb => (ba.to_vec(), true, true),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a vector of width `n` to every row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out: Vec<T> = if n == 0 {
            Vec::new()
        } else {
            self.value(x)
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv[i % n])
                .collect()
        };
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Act(x, kind), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
            .expect("tanh is always valid")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
            .expect("sigmoid is always valid")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    /// Normalized exponential over the last axis, stabilized by subtracting
    /// each slice's maximum. `mask` must match a suffix of `x`'s shape and is
    /// broadcast over the remaining leading axes; `false` entries are
    /// excluded and come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&width) = shape.last() else {
            return Err(Error::InvalidArgument("softmax of a rank-0 tensor".into()));
        };
        if let Some(m) = mask {
            let suffix_ok = (1..=shape.len())
                .any(|r| shape[shape.len() - r..].iter().product::<usize>() == m.len());
            if m.is_empty() || !suffix_ok || m.len() % width.max(1) != 0 {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        if width > 0 {
            for (s, (src, dst)) in xv.chunks(width).zip(out.chunks_mut(width)).enumerate() {
                let keep = |j: usize| mask.map_or(true, |m| m[(s * width + j) % m.len()]);
                let mut hi = T::neg_infinity();
                for (j, &v) in src.iter().enumerate() {
                    if keep(j) && v > hi {
                        hi = v;
                    }
                }
                if hi == T::neg_infinity() {
                    return Err(Error::DegenerateSlice { slice: s });
                }
                let mut total = T::zero();
                for (j, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                    if keep(j) {
                        *d = (v - hi).exp();
                        total += *d;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut extent = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
            chunks.push(s[axis] * inner);
        }
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last_axis", sa, sb));
        }
        let axis = sa.len() - 1;
        self.concat(&[a, b], axis)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src_chunk = s[axis] * inner;
        let offset = start * inner;
        let l = len * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * l);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * src_chunk + offset..o * src_chunk + offset + l]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Narrow {
                x,
                outer,
                src_chunk,
                offset,
                len: l,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!("transpose of shape {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let o = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = xv[o + i * cols + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::TransposeLast {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// `out[.., i, j] = a[.., i] + b[.., j]` for `a: [.., n]`, `b: [.., m]`.
    pub fn pairwise_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("pairwise_sum", &sa, sb));
        }
        let n = sa[sa.len() - 1];
        let m = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 1].iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(batch * n * m);
        for t in 0..batch {
            for i in 0..n {
                let ai = av[t * n + i];
                out.extend(bv[t * m..(t + 1) * m].iter().map(|&bj| ai + bj));
            }
        }
        let mut shape = sa;
        shape.push(m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::PairwiseSum { a, b, n, m }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total: T = v.iter().copied().sum();
        let mean = if v.is_empty() {
            T::zero()
        } else {
            total / T::of(v.len() as f64)
        };
        let rg = self.rg(x);
        self.push(Vec::new(), vec![mean], Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits: [..., C]`; one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let Some(&classes) = s.last() else {
            return Err(Error::InvalidArgument(
                "cross_entropy of a rank-0 tensor".into(),
            ));
        };
        let rows = self.value(logits).len() / classes.max(1);
        if classes == 0 || rows != targets.len() || rows == 0 {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= classes) {
            return Err(Error::OutOfRange {
                what: "class target",
                index: bad,
                len: classes,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (&target, (row, p)) in targets
            .iter()
            .zip(lv.chunks(classes).zip(probs.chunks_mut(classes)))
        {
            let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (d, &v) in p.iter_mut().zip(row) {
                *d = (v - hi).exp();
                z += *d;
            }
            for d in p.iter_mut() {
                *d /= z;
            }
            loss += z.ln() + hi - row[target];
        }
        let value = loss / T::of(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<T>) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::shape(
                "straight_through",
                self.shape(soft),
                &[hard.len()],
            ));
        }
        let rg = self.rg(soft);
        Ok(self.push(
            self.shape(soft).to_vec(),
            hard,
            Op::StraightThrough { soft },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Computes gradients of the scalar `loss` with respect to every node
    /// that requires one. Calling it again on the same tape recomputes the
    /// same gradients from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    let $buf: &mut Vec<T> = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                with_grad!(*a, |ga| {
                    for t in 0..*batch {
                        let ao = if *a_batched { t * m * k } else { 0 };
                        let bo = if *b_batched { t * k * n } else { 0 };
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for t in 0..*batch {
                        let ao = if *a_batched { t * m * k } else { 0 };
                        let bo = if *b_batched { t * k * n } else { 0 };
                        gemm_tn(
                            &av[ao..ao + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { axpy(ga, g, T::one()) });
                with_grad!(*b, |gb| { axpy(gb, g, T::one()) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { axpy(ga, g, T::one()) });
                with_grad!(*b, |gb| { axpy(gb, g, -T::one()) });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                with_grad!(*a, |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                with_grad!(*x, |gx| { axpy(gx, g, T::one()) });
                with_grad!(*bias, |gb| {
                    let n = gb.len();
                    for (j, &gi) in g.iter().enumerate() {
                        gb[j % n] += gi;
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| { axpy(gx, g, *c) });
            }
            Op::Act(x, kind) => {
                let xv = &nodes[x.0].value;
                let yv = &node.value;
                with_grad!(*x, |gx| {
                    for (((d, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(yv) {
                        *d += gi * kind.derivative(xi, yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let width = *node.shape.last().unwrap_or(&0);
                let yv = &node.value;
                with_grad!(*x, |gx| {
                    if width > 0 {
                        for ((y, gy), d) in yv
                            .chunks(width)
                            .zip(g.chunks(width))
                            .zip(gx.chunks_mut(width))
                        {
                            let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                            for ((dj, &yj), &gj) in d.iter_mut().zip(y).zip(gy) {
                                *dj += yj * (gj - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    with_grad!(p, |gp| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            axpy(&mut gp[o * c..(o + 1) * c], src, T::one());
                        }
                    });
                    offset += c;
                }
            }
            Op::Narrow {
                x,
                outer,
                src_chunk,
                offset,
                len,
            } => {
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        let dst = &mut gx[o * src_chunk + offset..o * src_chunk + offset + len];
                        axpy(dst, &g[o * len..(o + 1) * len], T::one());
                    }
                });
            }
            Op::TransposeLast {
                x,
                batch,
                rows,
                cols,
            } => {
                with_grad!(*x, |gx| {
                    for b in 0..*batch {
                        let o = b * rows * cols;
                        for i in 0..*rows {
                            for j in 0..*cols {
                                gx[o + i * cols + j] += g[o + j * rows + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) | Op::StraightThrough { soft: x } => {
                with_grad!(*x, |gx| { axpy(gx, g, T::one()) });
            }
            Op::PairwiseSum { a, b, n, m } => {
                let batch = g.len() / (n * m).max(1);
                with_grad!(*a, |ga| {
                    for t in 0..batch {
                        for i in 0..*n {
                            let row = &g[(t * n + i) * m..(t * n + i + 1) * m];
                            ga[t * n + i] += row.iter().copied().sum();
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for t in 0..batch {
                        for i in 0..*n {
                            let row = &g[(t * n + i) * m..(t * n + i + 1) * m];
                            axpy(&mut gb[t * m..(t + 1) * m], row, T::one());
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                with_grad!(*x, |gx| {
                    let c = g[0] / T::of(gx.len().max(1) as f64);
                    for d in gx.iter_mut() {
                        *d += c;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                with_grad!(*logits, |gl| {
                    let classes = probs.len() / targets.len();
                    let c = g[0] / T::of(targets.len() as f64);
                    for (r, &target) in targets.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == target { T::one() } else { T::zero() };
                            gl[r * classes + j] += c * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
