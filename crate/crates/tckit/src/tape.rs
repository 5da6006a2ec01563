//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass; calling
//! [`Tape::backward`] on a scalar node propagates vector-Jacobian
//! products back through the recording. Parameters enter the tape as
//! borrowed leaves, so registering a large model costs nothing.
//!
//! The op set is exactly what the encoder and the loss functions need;
//! each op carries a hand-written VJP checked against central finite
//! differences in the tests below.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Slot<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Slot<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Slot::Owned(t) => t,
            Slot::Borrowed(t) => t,
        }
    }
}

type BackFn<'p> = Box<dyn Fn(&Tape<'p>, &Tensor, &mut [Option<Tensor>]) + 'p>;

pub struct Tape<'p> {
    values: Vec<Slot<'p>>,
    backs: Vec<Option<BackFn<'p>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Takes the gradient for `v`, or zeros shaped like its value when
    /// the loss never touched it.
    pub fn take_or_zeros(&mut self, v: Var, tape: &Tape<'_>) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros_like(tape.value(v)))
    }
}

fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_in_place(&delta),
        slot @ None => *slot = Some(delta),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.values[v.0].get()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn<'p>>) -> Var {
        self.values.push(Slot::Owned(value));
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Registers an owned tensor. Gradients are tracked but usually
    /// ignored (constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Registers a borrowed tensor, typically a model parameter.
    pub fn leaf_ref(&mut self, value: &'p Tensor) -> Var {
        self.values.push(Slot::Borrowed(value));
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.clone());
            })),
        )
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accum(grads, a.0, g.scale(c));
            })),
        )
    }

    /// Broadcast-adds a single-row bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, &b) in row.iter_mut().zip(bv.row(0)) {
                *x += b;
            }
        }
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accum(grads, a.0, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accum(grads, bias.0, db);
            })),
        )
    }

    /// Broadcast-multiplies every row by a single-row scale.
    pub fn mul_row(&mut self, a: Var, scale: Var) -> Var {
        let av = self.value(a);
        let sv = self.value(scale);
        assert_eq!(sv.rows(), 1, "scale must be a single row");
        assert_eq!(av.cols(), sv.cols(), "scale width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, &s) in row.iter_mut().zip(sv.row(0)) {
                *x *= s;
            }
        }
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let av = t.value(a);
                let sv = t.value(scale);
                let mut da = Tensor::zeros_like(g);
                let mut ds = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, c, g.at(r, c) * sv.at(0, c));
                        ds.set(0, c, ds.at(0, c) + g.at(r, c) * av.at(r, c));
                    }
                }
                accum(grads, a.0, da);
                accum(grads, scale.0, ds);
            })),
        )
    }

    /// `a (n,k) @ b (k,m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                accum(grads, a.0, g.matmul_nt(t.value(b)));
                accum(grads, b.0, t.value(a).matmul_tn(g));
            })),
        )
    }

    /// `a (n,k) @ b (m,k)ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                accum(grads, a.0, g.matmul(t.value(b)));
                accum(grads, b.0, g.matmul_tn(t.value(a)));
            })),
        )
    }

    /// Picks rows of `a` by index; repeated indices accumulate on the
    /// way back. Used for embedding lookup and for selecting masked
    /// positions out of the hidden states.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros(indices.len(), av.cols());
        for (out_r, &src_r) in indices.iter().enumerate() {
            value.row_mut(out_r).copy_from_slice(av.row(src_r));
        }
        let (rows, cols) = av.shape();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let mut da = Tensor::zeros(rows, cols);
                for (out_r, &src_r) in indices.iter().enumerate() {
                    for (d, &x) in da.row_mut(src_r).iter_mut().zip(g.row(out_r)) {
                        *d += x;
                    }
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// Picks scalar entries `(row, col)` into a single-row vector.
    pub fn gather_entries(&mut self, a: Var, coords: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros(1, coords.len());
        for (i, &(r, c)) in coords.iter().enumerate() {
            value.set(0, i, av.at(r, c));
        }
        let (rows, cols) = av.shape();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let mut da = Tensor::zeros(rows, cols);
                for (i, &(r, c)) in coords.iter().enumerate() {
                    da.set(r, c, da.at(r, c) + g.at(0, i));
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// Columns `[start, start+len)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "column slice out of range");
        let mut value = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let (rows, cols) = av.shape();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let mut da = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    da.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// Concatenates same-height nodes side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    accum(grads, p.0, dp);
                    off += w;
                }
            })),
        )
    }

    /// Stacks single-row nodes into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let cols = self.value(rows[0]).cols();
        let mut value = Tensor::zeros(rows.len(), cols);
        for (r, &v) in rows.iter().enumerate() {
            let rv = self.value(v);
            assert_eq!(rv.shape(), (1, cols), "stack_rows expects 1-row nodes");
            value.row_mut(r).copy_from_slice(rv.row(0));
        }
        let rows: Vec<Var> = rows.to_vec();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                for (r, &v) in rows.iter().enumerate() {
                    let mut dv = Tensor::zeros(1, g.cols());
                    dv.row_mut(0).copy_from_slice(g.row(r));
                    accum(grads, v.0, dv);
                }
            })),
        )
    }

    /// Row-wise normalization to zero mean and unit variance
    /// (population variance, eps inside the square root). Scale and
    /// shift are separate `mul_row`/`add_row` ops.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut value = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
        }
        let out_id = self.values.len();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let y = t.value(Var(out_id));
                let mut da = Tensor::zeros_like(y);
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let cols = y.cols();
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy =
                        gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum::<f64>() / cols as f64;
                    let s = inv_std[r];
                    for c in 0..cols {
                        da.set(r, c, s * (gr[c] - mean_g - yr[c] * mean_gy));
                    }
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let da = t.value(a).zip_map(g, |x, gi| gelu_grad_scalar(x) * gi);
                accum(grads, a.0, da);
            })),
        )
    }

    /// Row-wise softmax with the max-subtraction trick.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(self.value(a));
        let out_id = self.values.len();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let y = t.value(Var(out_id));
                let mut da = Tensor::zeros_like(y);
                for r in 0..y.rows() {
                    let dot: f64 =
                        g.row(r).iter().zip(y.row(r)).map(|(&gi, &yi)| gi * yi).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                    }
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros_like(av);
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let out_id = self.values.len();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let y = t.value(Var(out_id));
                let mut da = Tensor::zeros_like(y);
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        da.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                    }
                }
                accum(grads, a.0, da);
            })),
        )
    }

    /// Normalizes each row to unit L2 norm. Errors on a zero row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut value = Tensor::zeros_like(av);
        let mut norms = vec![0.0; av.rows()];
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|&x| x * x).sum::<f64>().sqrt();
            if n < 1e-30 {
                return Err(Error::ZeroVector);
            }
            norms[r] = n;
            for (o, &x) in value.row_mut(r).iter_mut().zip(av.row(r)) {
                *o = x / n;
            }
        }
        let out_id = self.values.len();
        Ok(self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let y = t.value(Var(out_id));
                let mut da = Tensor::zeros_like(y);
                for r in 0..y.rows() {
                    let dot: f64 =
                        g.row(r).iter().zip(y.row(r)).map(|(&gi, &yi)| gi * yi).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, (g.at(r, c) - y.at(r, c) * dot) / norms[r]);
                    }
                }
                accum(grads, a.0, da);
            })),
        ))
    }

    /// Mean of the listed rows, as a single-row vector.
    pub fn mean_rows_subset(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::AllPadded);
        }
        let av = self.value(a);
        let mut value = Tensor::zeros(1, av.cols());
        for &r in &rows {
            for (o, &x) in value.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        value.scale_in_place(inv);
        let (nrows, ncols) = av.shape();
        Ok(self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let mut da = Tensor::zeros(nrows, ncols);
                for &r in &rows {
                    for (d, &x) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d += x * inv;
                    }
                }
                accum(grads, a.0, da);
            })),
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let gv = g.item();
                let da = t.value(a).map(|_| gv);
                accum(grads, a.0, da);
            })),
        )
    }

    /// Inverted dropout: keeps entries with probability `1 - rate` and
    /// rescales them by `1/(1 - rate)`. The mask is drawn from `rng`,
    /// so it is deterministic given the caller's seed. `rate == 0` is
    /// the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let av = self.value(a);
        let mut mask = Tensor::zeros_like(av);
        for m in mask.data_mut() {
            *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
        }
        let value = av.zip_map(&mask, |x, m| x * m);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accum(grads, a.0, g.zip_map(&mask, |x, m| x * m));
            })),
        )
    }

    /// Backpropagates from a 1x1 node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                back(self, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows_value(a: &Tensor) -> Tensor {
    let mut value = Tensor::zeros_like(a);
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in value.row_mut(r) {
            *o /= sum;
        }
    }
    value
}
