//! Training-free classification by cosine similarity to labeled
//! support sentences, with optional embedding whitening.
//!
//! Support sentences are embedded with their labels written into the
//! prompt; query sentences carry MASK tokens in the label slot. A
//! query takes the label of its most similar support row. Whitening
//! maps the embedding set to zero mean and identity covariance via an
//! eigendecomposition of the covariance matrix.

use crate::checkpoint::Checkpoint;
use crate::corpus::{ExpandedExample, LabelSet};
use crate::encoder::{self, EncodedBatch};
use crate::error::{Error, Result};
use crate::prompt::{self, PromptTemplate, RenderedInput};
use crate::tensor::Tensor;

/// Eigenvalues below this are clamped before the inverse square root,
/// so rank-deficient sets whiten without blowing up.
pub const EIGENVALUE_CLAMP: f64 = 1e-10;

/// Pooled representations of label-filled support sentences.
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub reps: Tensor,
    pub labels: Vec<String>,
}

impl SupportSet {
    pub fn new(reps: Tensor, labels: Vec<String>) -> Result<Self> {
        if reps.rows() == 0 {
            return Err(Error::config("support set is empty"));
        }
        if reps.rows() != labels.len() {
            return Err(Error::LengthMismatch { left: reps.rows(), right: labels.len() });
        }
        Ok(SupportSet { reps, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Affine map `x -> (x - mu) W` fitted so the transformed data has
/// identity covariance (up to rank).
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mu: Tensor,
    pub w: Tensor,
    /// Directions whose eigenvalue hit the clamp; nonzero means the
    /// fitted set was rank-deficient.
    pub clamped_dims: usize,
}

/// Jacobi eigendecomposition of a symmetric matrix:
/// `a = v * diag(vals) * v^T` with eigenvectors in the columns of `v`.
fn sym_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    assert_eq!(a.rows(), a.cols(), "sym_eigen needs a square matrix");
    let d = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::zeros(d, d);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    let scale = (0..d).map(|i| m.at(i, i).abs()).fold(1e-300, f64::max);
    let tol = 1e-15 * scale;
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off = off.max(m.at(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m.at(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..d {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..d {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..d).map(|i| m.at(i, i)).collect();
    (vals, v)
}

/// Fits mean and whitening matrix on rows of `reps` (population
/// covariance). Zero-variance directions are clamped, not rejected.
pub fn whiten_fit(reps: &Tensor) -> Result<WhiteningTransform> {
    let (n, d) = reps.shape();
    if n < 2 {
        return Err(Error::config(format!("whitening needs at least 2 vectors, got {n}")));
    }
    let mut mu = Tensor::zeros(1, d);
    for r in 0..n {
        for (m, &x) in mu.row_mut(0).iter_mut().zip(reps.row(r)) {
            *m += x;
        }
    }
    mu.scale_in_place(1.0 / n as f64);

    let mut cov = Tensor::zeros(d, d);
    for r in 0..n {
        let row = reps.row(r);
        for i in 0..d {
            let xi = row[i] - mu.at(0, i);
            for j in i..d {
                let xj = row[j] - mu.at(0, j);
                let c = cov.at(i, j) + xi * xj;
                cov.set(i, j, c);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov.at(i, j) / n as f64;
            cov.set(i, j, c);
            cov.set(j, i, c);
        }
    }

    let (vals, vecs) = sym_eigen(&cov);
    let clamped_dims = vals.iter().filter(|&&l| l < EIGENVALUE_CLAMP).count();
    let mut w = vecs;
    for c in 0..d {
        let scale = 1.0 / vals[c].max(EIGENVALUE_CLAMP).sqrt();
        for r in 0..d {
            let x = w.at(r, c) * scale;
            w.set(r, c, x);
        }
    }
    Ok(WhiteningTransform { mu, w, clamped_dims })
}

/// Applies the fitted transform to a single-row vector.
pub fn whiten_apply(t: &WhiteningTransform, x: &Tensor) -> Tensor {
    assert_eq!(x.shape(), (1, t.mu.cols()), "whiten_apply expects a 1 x d vector");
    let mut centered = x.clone();
    for (c, &m) in centered.row_mut(0).iter_mut().zip(t.mu.row(0)) {
        *c -= m;
    }
    centered.matmul(&t.w)
}

/// Applies the fitted transform to every row.
pub fn whiten_apply_rows(t: &WhiteningTransform, xs: &Tensor) -> Tensor {
    let mut centered = xs.clone();
    for r in 0..centered.rows() {
        for (c, &m) in centered.row_mut(r).iter_mut().zip(t.mu.row(0)) {
            *c -= m;
        }
    }
    centered.matmul(&t.w)
}

/// Cosine similarity of two equal-length vectors. Errors on zero
/// vectors, whose direction is undefined.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na < 1e-30 || nb < 1e-30 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// Label of the support row most cosine-similar to the query; ties
/// break toward the lowest support index.
pub fn classify_nn(support: &SupportSet, query: &[f64]) -> Result<String> {
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for r in 0..support.reps.rows() {
        let score = cosine(support.reps.row(r), query)?;
        if score > best_score {
            best_score = score;
            best_idx = r;
        }
    }
    Ok(support.labels[best_idx].clone())
}

/// How a sentence enters the prompt for embedding extraction.
#[derive(Clone, Debug)]
pub enum EmbedMode {
    /// Write this label into the prompt (support sentences).
    Filled(String),
    /// Replace the label slot with a MASK span of this width
    /// (query sentences).
    Masked(usize),
}

/// Pooled representation of one prompted sentence.
pub fn embed(
    ckpt: &Checkpoint,
    template: &PromptTemplate,
    text: &str,
    mode: &EmbedMode,
) -> Result<Vec<f64>> {
    let rendered = render_for_embedding(ckpt, template, text, mode)?;
    Ok(embed_rendered(ckpt, &[rendered])?.remove(0))
}

fn render_for_embedding(
    ckpt: &Checkpoint,
    template: &PromptTemplate,
    text: &str,
    mode: &EmbedMode,
) -> Result<RenderedInput> {
    match mode {
        EmbedMode::Filled(label) => {
            let ex = ExpandedExample { text: text.to_string(), label: label.clone() };
            prompt::render_filled(template, &ckpt.vocab, &ex, ckpt.config.max_seq_len)
        }
        EmbedMode::Masked(span) => {
            prompt::render_inference(template, &ckpt.vocab, text, *span, ckpt.config.max_seq_len)
        }
    }
}

/// Worker-thread cap: the TCKIT_THREADS environment variable when
/// set, otherwise the machine's available parallelism.
fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("TCKIT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Embeds many rendered inputs, splitting the work across worker
/// threads. Output order always matches input order.
fn embed_rendered(ckpt: &Checkpoint, inputs: &[RenderedInput]) -> Result<Vec<Vec<f64>>> {
    let one = |r: &RenderedInput| -> Result<Vec<f64>> {
        let batch = EncodedBatch::from_rendered(std::slice::from_ref(r), None);
        let out = encoder::forward_batch(&ckpt.encoder, &ckpt.config, &batch, false, 0)?;
        Ok(out[0].pooled.row(0).to_vec())
    };
    let workers = thread_cap().min(inputs.len()).max(1);
    if workers <= 1 {
        return inputs.iter().map(one).collect();
    }
    let chunk = inputs.len().div_ceil(workers);
    let mut results: Vec<Result<Vec<Vec<f64>>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        results = handles.into_iter().map(|h| h.join().expect("embed worker panicked")).collect();
    });
    let mut out = Vec::with_capacity(inputs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Outcome of a similarity evaluation run.
#[derive(Clone, Debug)]
pub struct SimilarityEval {
    pub predictions: Vec<String>,
    pub gold: Vec<String>,
    pub accuracy: f64,
    /// Clamped whitening directions, when whitening ran.
    pub clamped_dims: Option<usize>,
}

/// Embeds support sentences (labels filled) and query sentences (MASK
/// span), optionally whitens both with statistics fitted on their
/// union, classifies each query by nearest support cosine, and
/// reports accuracy against the query labels.
pub fn evaluate_similarity(
    ckpt: &Checkpoint,
    support: &[ExpandedExample],
    queries: &[ExpandedExample],
    labels: &LabelSet,
    template: &PromptTemplate,
    use_whitening: bool,
) -> Result<SimilarityEval> {
    if support.is_empty() || queries.is_empty() {
        return Err(Error::config("similarity evaluation needs support and query sentences"));
    }
    for ex in support.iter().chain(queries) {
        labels.index_of(&ex.label)?;
    }
    let span = labels.mask_span();

    let mut rendered = Vec::with_capacity(support.len() + queries.len());
    for ex in support {
        rendered.push(render_for_embedding(
            ckpt,
            template,
            &ex.text,
            &EmbedMode::Filled(ex.label.clone()),
        )?);
    }
    for ex in queries {
        rendered.push(render_for_embedding(ckpt, template, &ex.text, &EmbedMode::Masked(span))?);
    }
    let reps = embed_rendered(ckpt, &rendered)?;
    let d = reps[0].len();
    let mut all = Tensor::zeros(reps.len(), d);
    for (r, rep) in reps.iter().enumerate() {
        all.row_mut(r).copy_from_slice(rep);
    }

    let mut clamped_dims = None;
    let all = if use_whitening {
        let t = whiten_fit(&all)?;
        clamped_dims = Some(t.clamped_dims);
        whiten_apply_rows(&t, &all)
    } else {
        all
    };

    let mut support_reps = Tensor::zeros(support.len(), d);
    for r in 0..support.len() {
        support_reps.row_mut(r).copy_from_slice(all.row(r));
    }
    let support_set =
        SupportSet::new(support_reps, support.iter().map(|e| e.label.clone()).collect())?;

    let mut predictions = Vec::with_capacity(queries.len());
    let mut correct = 0usize;
    for (q, ex) in queries.iter().enumerate() {
        let label = classify_nn(&support_set, all.row(support.len() + q))?;
        if label == ex.label {
            correct += 1;
        }
        predictions.push(label);
    }
    Ok(SimilarityEval {
        accuracy: correct as f64 / queries.len() as f64,
        predictions,
        gold: queries.iter().map(|e| e.label.clone()).collect(),
        clamped_dims,
    })
}
