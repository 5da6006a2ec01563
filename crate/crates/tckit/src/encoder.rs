//! A small bidirectional transformer encoder with a tied-embedding
//! MLM head, mean pooling, and reverse-mode gradients for every
//! parameter.
//!
//! Structure per layer (post-layer-norm, original BERT ordering):
//! multi-head self-attention, residual, layer norm, then a GELU FFN,
//! residual, layer norm. Token and position embeddings are summed and
//! layer-normed before the first layer. The MLM head projects hidden
//! states onto the transposed token embedding plus a bias.
//!
//! PAD positions are masked out of attention keys and excluded from
//! mean pooling, so padded and unpadded renderings of the same
//! sentence produce bit-identical pooled vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::RenderedInput;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8192,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 64,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Per-layer parameter block, generic over the leaf type so the same
/// structure serves tensors on the heap and vars on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln_attn_gamma: T,
    pub ln_attn_beta: T,
    pub w_ff_in: T,
    pub b_ff_in: T,
    pub w_ff_out: T,
    pub b_ff_out: T,
    pub ln_ffn_gamma: T,
    pub ln_ffn_beta: T,
}

/// All trainable tensors of one encoder. The MLM output projection is
/// the transpose of `tok_emb` (weight tying), so only its bias
/// appears here.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub emb_ln_gamma: T,
    pub emb_ln_beta: T,
    pub layers: Vec<LayerParams<T>>,
    pub mlm_bias: T,
}

pub type EncoderParams = Params<Tensor>;

impl<T> LayerParams<T> {
    fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> LayerParams<U> {
        LayerParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln_attn_gamma: f(&self.ln_attn_gamma),
            ln_attn_beta: f(&self.ln_attn_beta),
            w_ff_in: f(&self.w_ff_in),
            b_ff_in: f(&self.b_ff_in),
            w_ff_out: f(&self.w_ff_out),
            b_ff_out: f(&self.b_ff_out),
            ln_ffn_gamma: f(&self.ln_ffn_gamma),
            ln_ffn_beta: f(&self.ln_ffn_beta),
        }
    }

    fn entries(&self) -> [(&'static str, &T); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln_attn_gamma", &self.ln_attn_gamma),
            ("ln_attn_beta", &self.ln_attn_beta),
            ("w_ff_in", &self.w_ff_in),
            ("b_ff_in", &self.b_ff_in),
            ("w_ff_out", &self.w_ff_out),
            ("b_ff_out", &self.b_ff_out),
            ("ln_ffn_gamma", &self.ln_ffn_gamma),
            ("ln_ffn_beta", &self.ln_ffn_beta),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut T); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln_attn_gamma", &mut self.ln_attn_gamma),
            ("ln_attn_beta", &mut self.ln_attn_beta),
            ("w_ff_in", &mut self.w_ff_in),
            ("b_ff_in", &mut self.b_ff_in),
            ("w_ff_out", &mut self.w_ff_out),
            ("b_ff_out", &mut self.b_ff_out),
            ("ln_ffn_gamma", &mut self.ln_ffn_gamma),
            ("ln_ffn_beta", &mut self.ln_ffn_beta),
        ]
    }
}

impl<T> Params<T> {
    /// Applies `f` to every leaf, preserving structure. Traversal
    /// order equals `entries` order.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&'a T) -> U) -> Params<U> {
        Params {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            emb_ln_gamma: f(&self.emb_ln_gamma),
            emb_ln_beta: f(&self.emb_ln_beta),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            mlm_bias: f(&self.mlm_bias),
        }
    }

    /// Named leaves in canonical order. This order defines optimizer
    /// state alignment and the checkpoint tensor directory.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("emb_ln_gamma".into(), &self.emb_ln_gamma),
            ("emb_ln_beta".into(), &self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.entries() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("mlm_bias".into(), &self.mlm_bias));
        out
    }

    /// Mutable variant of [`Params::entries`], same order.
    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("emb_ln_gamma".into(), &mut self.emb_ln_gamma),
            ("emb_ln_beta".into(), &mut self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.entries_mut() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("mlm_bias".into(), &mut self.mlm_bias));
        out
    }
}

impl EncoderParams {
    pub fn zeros_like(&self) -> EncoderParams {
        self.map(Tensor::zeros_like)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.all_finite())
    }

    /// Largest absolute difference against another parameter set of
    /// the same shape.
    pub fn max_abs_diff(&self, other: &EncoderParams) -> f64 {
        let a = self.entries();
        let b = other.entries();
        let mut m = 0.0f64;
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            for (xa, ya) in x.data().iter().zip(y.data()) {
                m = m.max((xa - ya).abs());
            }
        }
        m
    }
}

/// Deterministic initialization: weights from a truncated
/// normal(0, 0.02), biases and layer-norm shifts zero, layer-norm
/// scales one.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut r = rng::stream(seed, "encoder-init", 0);
    let d = cfg.d_model;
    let w = |rows: usize, cols: usize, r: &mut ChaCha8Rng| rng::truncated_normal(r, rows, cols, 0.02);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            wq: w(d, d, &mut r),
            bq: Tensor::zeros(1, d),
            wk: w(d, d, &mut r),
            bk: Tensor::zeros(1, d),
            wv: w(d, d, &mut r),
            bv: Tensor::zeros(1, d),
            wo: w(d, d, &mut r),
            bo: Tensor::zeros(1, d),
            ln_attn_gamma: Tensor::filled(1, d, 1.0),
            ln_attn_beta: Tensor::zeros(1, d),
            w_ff_in: w(d, cfg.d_ff, &mut r),
            b_ff_in: Tensor::zeros(1, cfg.d_ff),
            w_ff_out: w(cfg.d_ff, d, &mut r),
            b_ff_out: Tensor::zeros(1, d),
            ln_ffn_gamma: Tensor::filled(1, d, 1.0),
            ln_ffn_beta: Tensor::zeros(1, d),
        })
        .collect();
    EncoderParams {
        tok_emb: w(cfg.vocab_size, d, &mut r),
        pos_emb: w(cfg.max_seq_len, d, &mut r),
        emb_ln_gamma: Tensor::filled(1, d, 1.0),
        emb_ln_beta: Tensor::zeros(1, d),
        layers,
        mlm_bias: Tensor::zeros(1, cfg.vocab_size),
    }
}

/// One sequence of a padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub token_ids: Vec<TokenId>,
    /// True at real-token positions, false at padding.
    pub attn_mask: Vec<bool>,
    pub mask_positions: Vec<usize>,
    /// Aligned with `mask_positions`; PAD entries mark positions a
    /// short label does not reach, which the MLM loss skips.
    pub mask_targets: Vec<TokenId>,
    pub label_index: Option<usize>,
}

impl BatchItem {
    /// Row indices (into the mask-position gather) paired with target
    /// ids, PAD targets excluded.
    pub fn mlm_pairs(&self) -> Vec<(usize, TokenId)> {
        self.mask_positions
            .iter()
            .enumerate()
            .filter_map(|(row, _)| {
                let tgt = *self.mask_targets.get(row)?;
                (tgt != PAD).then_some((row, tgt))
            })
            .collect()
    }

    pub fn real_positions(&self) -> Vec<usize> {
        self.attn_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// A rectangular batch of rendered inputs, padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    pub items: Vec<BatchItem>,
}

impl EncodedBatch {
    pub fn from_rendered(inputs: &[RenderedInput], label_indices: Option<&[usize]>) -> EncodedBatch {
        let max_len = inputs.iter().map(|i| i.token_ids.len()).max().unwrap_or(0);
        let items = inputs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let real = r.token_ids.len();
                let mut token_ids = r.token_ids.clone();
                token_ids.resize(max_len, PAD);
                let mut attn_mask = vec![true; real];
                attn_mask.resize(max_len, false);
                BatchItem {
                    token_ids,
                    attn_mask,
                    mask_positions: r.mask_positions.clone(),
                    mask_targets: r.mask_targets.clone(),
                    label_index: label_indices.map(|ls| ls[i]),
                }
            })
            .collect();
        EncodedBatch { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of masked tokens with real (non-PAD) targets.
    pub fn total_mlm_targets(&self) -> usize {
        self.items.iter().map(|i| i.mlm_pairs().len()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    pub train_mode: bool,
    pub dropout_seed: u64,
    pub capture_attention: bool,
}

/// Tape handles for one item's forward pass.
pub struct ItemVars {
    pub hidden: Var,
    pub pooled: Var,
    /// Logit rows for the item's mask positions, `[n_masks x vocab]`.
    pub mlm_logits: Option<Var>,
    /// Post-softmax attention maps (layer-major, then head), captured
    /// only on request.
    pub attention: Vec<Tensor>,
}

/// Registers every parameter tensor as a borrowed leaf.
pub fn register_params<'p>(tape: &mut Tape<'p>, params: &'p EncoderParams) -> Params<Var> {
    params.map(|t| tape.leaf_ref(t))
}

/// Runs the encoder over one batch item on the given tape.
pub fn forward_item<'p>(
    tape: &mut Tape<'p>,
    vars: &Params<Var>,
    cfg: &EncoderConfig,
    item: &BatchItem,
    opts: &ForwardOpts,
) -> Result<ItemVars> {
    let len = item.token_ids.len();
    if len == 0 {
        return Err(Error::Vocab { reason: "empty token sequence".into() });
    }
    if len > cfg.max_seq_len {
        return Err(Error::Vocab {
            reason: format!("sequence length {len} exceeds max_seq_len {}", cfg.max_seq_len),
        });
    }
    for &id in &item.token_ids {
        if id >= cfg.vocab_size {
            return Err(Error::Vocab {
                reason: format!("token id {id} out of range for vocab size {}", cfg.vocab_size),
            });
        }
    }

    let mut drop_rng = rng::stream(opts.dropout_seed, "dropout", 0);
    let rate = if opts.train_mode { cfg.dropout_rate } else { 0.0 };
    let dropout = |tape: &mut Tape<'p>, x: Var, rng: &mut ChaCha8Rng| {
        if rate > 0.0 {
            tape.dropout(x, rate, rng)
        } else {
            x
        }
    };

    // Additive attention bias: 0 over real keys, -1e30 over PAD keys.
    let mut key_bias = Tensor::zeros(len, len);
    for q in 0..len {
        for k in 0..len {
            if !item.attn_mask[k] {
                key_bias.set(q, k, -1e30);
            }
        }
    }
    let key_bias = tape.leaf(key_bias);

    let tok = tape.gather_rows(vars.tok_emb, item.token_ids.clone());
    let pos = tape.gather_rows(vars.pos_emb, (0..len).collect());
    let mut x = tape.add(tok, pos);
    x = tape.layer_norm_rows(x, cfg.layer_norm_eps);
    x = tape.mul_row(x, vars.emb_ln_gamma);
    x = tape.add_row(x, vars.emb_ln_beta);
    x = dropout(tape, x, &mut drop_rng);

    let d_head = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut attention = Vec::new();

    for layer in &vars.layers {
        let q = tape.matmul(x, layer.wq);
        let q = tape.add_row(q, layer.bq);
        let k = tape.matmul(x, layer.wk);
        let k = tape.add_row(k, layer.bk);
        let v = tape.matmul(x, layer.wv);
        let v = tape.add_row(v, layer.bv);

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * d_head, d_head);
            let kh = tape.slice_cols(k, h * d_head, d_head);
            let vh = tape.slice_cols(v, h * d_head, d_head);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, key_bias);
            let mut probs = tape.softmax_rows(scores);
            if opts.capture_attention {
                attention.push(tape.value(probs).clone());
            }
            probs = dropout(tape, probs, &mut drop_rng);
            head_outs.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&head_outs);
        let attn_out = tape.matmul(ctx, layer.wo);
        let attn_out = tape.add_row(attn_out, layer.bo);
        let attn_out = dropout(tape, attn_out, &mut drop_rng);

        let res = tape.add(x, attn_out);
        let normed = tape.layer_norm_rows(res, cfg.layer_norm_eps);
        let normed = tape.mul_row(normed, layer.ln_attn_gamma);
        x = tape.add_row(normed, layer.ln_attn_beta);

        let ff = tape.matmul(x, layer.w_ff_in);
        let ff = tape.add_row(ff, layer.b_ff_in);
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, layer.w_ff_out);
        let ff = tape.add_row(ff, layer.b_ff_out);
        let ff = dropout(tape, ff, &mut drop_rng);

        let res = tape.add(x, ff);
        let normed = tape.layer_norm_rows(res, cfg.layer_norm_eps);
        let normed = tape.mul_row(normed, layer.ln_ffn_gamma);
        x = tape.add_row(normed, layer.ln_ffn_beta);
    }

    let pooled = tape.mean_rows_subset(x, item.real_positions())?;

    let mlm_logits = if item.mask_positions.is_empty() {
        None
    } else {
        let rows = tape.gather_rows(x, item.mask_positions.clone());
        let logits = tape.matmul_nt(rows, vars.tok_emb);
        Some(tape.add_row(logits, vars.mlm_bias))
    };

    Ok(ItemVars { hidden: x, pooled, mlm_logits, attention })
}

/// Value-level output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub pooled: Tensor,
    pub mlm_logits: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

/// Runs the encoder over a whole batch without gradient tracking.
/// Dropout is active only in train mode and is keyed by
/// `(seed, item index)`.
pub fn forward_batch(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
    train_mode: bool,
    seed: u64,
) -> Result<Vec<ForwardOutput>> {
    batch
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, params);
            let opts = ForwardOpts {
                train_mode,
                dropout_seed: rng::derive_seed(seed, "forward-item", i as u64),
                capture_attention: !train_mode,
            };
            let out = forward_item(&mut tape, &vars, cfg, item, &opts)?;
            Ok(ForwardOutput {
                hidden: tape.value(out.hidden).clone(),
                pooled: tape.value(out.pooled).clone(),
                mlm_logits: out.mlm_logits.map(|v| tape.value(v).clone()),
                attention: out.attention,
            })
        })
        .collect()
}

/// Arithmetic mean over non-PAD rows of the final hidden states.
pub fn pool_mean(hidden: &Tensor, attn_mask: &[bool]) -> Result<Tensor> {
    assert_eq!(hidden.rows(), attn_mask.len(), "mask length mismatch");
    let rows: Vec<usize> =
        attn_mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if rows.is_empty() {
        return Err(Error::AllPadded);
    }
    let mut out = Tensor::zeros(1, hidden.cols());
    for &r in &rows {
        for (o, &x) in out.row_mut(0).iter_mut().zip(hidden.row(r)) {
            *o += x;
        }
    }
    out.scale_in_place(1.0 / rows.len() as f64);
    Ok(out)
}

/// Computes the loss built by `loss_fn` over the batch and its exact
/// reverse-mode gradients with respect to every parameter.
///
/// The forward runs in eval mode; `loss_fn` receives the tape, the
/// registered parameter vars, and one [`ItemVars`] per batch item.
pub fn grad<F>(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
    loss_fn: F,
) -> Result<(f64, EncoderParams)>
where
    F: FnOnce(&mut Tape<'_>, &Params<Var>, &[ItemVars]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let mut items = Vec::with_capacity(batch.len());
    for item in &batch.items {
        items.push(forward_item(&mut tape, &vars, cfg, item, &ForwardOpts::default())?);
    }
    let loss = loss_fn(&mut tape, &vars, &items)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "loss".into() });
    }
    let mut grads = tape.backward(loss);
    let grad_params = vars.map(|&v| grads.take_or_zeros(v, &tape));
    Ok((value, grad_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::CLS;

    pub(crate) fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 50,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 12,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    fn bare_item(ids: &[TokenId], pad_to: usize) -> BatchItem {
        let mut token_ids = ids.to_vec();
        let real = token_ids.len();
        token_ids.resize(pad_to, PAD);
        let mut attn_mask = vec![true; real];
        attn_mask.resize(pad_to, false);
        BatchItem { token_ids, attn_mask, mask_positions: vec![], mask_targets: vec![], label_index: None }
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 7);
        let b = init_params(&cfg, 7);
        assert_eq!(a, b);
        let c = init_params(&cfg, 8);
        assert!(a.max_abs_diff(&c) > 0.0);
        // Layer-norm scales are exactly one, biases exactly zero.
        assert!(a.layers[0].ln_attn_gamma.data().iter().all(|&x| x == 1.0));
        assert!(a.emb_ln_gamma.data().iter().all(|&x| x == 1.0));
        assert!(a.layers[1].bq.data().iter().all(|&x| x == 0.0));
        assert!(a.mlm_bias.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_weight_mean_is_small() {
        // 10k-entry tensor: std 0.02 / sqrt(10^4) = 2e-4, so a 5-sigma
        // bound on the sample mean is 1e-3.
        let cfg = EncoderConfig { vocab_size: 500, d_model: 20, ..tiny_cfg() };
        let p = init_params(&cfg, 41);
        assert_eq!(p.tok_emb.len(), 10_000);
        let mean = p.tok_emb.sum() / p.tok_emb.len() as f64;
        assert!(mean.abs() < 1e-3, "sample mean {mean}");
    }

    #[test]
    fn entries_orders_agree() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, 1);
        let names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.entries_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        // map() must traverse in entries() order: number the leaves and
        // read the numbering back through entries().
        let mut i = 0usize;
        let numbered: Params<usize> = p.map(|_| {
            i += 1;
            i - 1
        });
        let order: Vec<usize> = numbered.entries().into_iter().map(|(_, &k)| k).collect();
        assert_eq!(order, (0..names.len()).collect::<Vec<_>>());
    }

    #[test]
    fn pooled_of_single_token_is_its_hidden_row() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 3);
        let batch = EncodedBatch { items: vec![bare_item(&[CLS], 1)] };
        let out = &forward_batch(&p, &cfg, &batch, false, 0).unwrap()[0];
        assert_eq!(out.pooled.row(0), out.hidden.row(0));
    }

    #[test]
    fn padding_does_not_change_pooled_or_real_hidden() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 3);
        let ids = [CLS, 7, 9, 11];
        let unpadded = EncodedBatch { items: vec![bare_item(&ids, 4)] };
        let padded = EncodedBatch { items: vec![bare_item(&ids, 9)] };
        let a = &forward_batch(&p, &cfg, &unpadded, false, 0).unwrap()[0];
        let b = &forward_batch(&p, &cfg, &padded, false, 0).unwrap()[0];
        assert_eq!(a.pooled, b.pooled);
        for r in 0..4 {
            assert_eq!(a.hidden.row(r), b.hidden.row(r));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_dropout_is_seeded() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 5);
        let batch = EncodedBatch { items: vec![bare_item(&[CLS, 6, 8], 3)] };
        let a = &forward_batch(&p, &cfg, &batch, false, 1).unwrap()[0];
        let b = &forward_batch(&p, &cfg, &batch, false, 2).unwrap()[0];
        assert_eq!(a.hidden, b.hidden); // eval ignores the seed
        let c = &forward_batch(&p, &cfg, &batch, true, 1).unwrap()[0];
        let d = &forward_batch(&p, &cfg, &batch, true, 1).unwrap()[0];
        assert_eq!(c.hidden, d.hidden); // same seed, same masks
        let e = &forward_batch(&p, &cfg, &batch, true, 2).unwrap()[0];
        assert!(c.hidden != e.hidden); // different seed, different masks
    }

    #[test]
    fn attention_rows_sum_to_one_over_real_keys() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 9);
        let mut item = bare_item(&[CLS, 5, 6, 7], 7); // 3 PAD columns
        item.mask_positions = vec![];
        let batch = EncodedBatch { items: vec![item] };
        let out = &forward_batch(&p, &cfg, &batch, false, 0).unwrap()[0];
        assert_eq!(out.attention.len(), cfg.n_layers * cfg.n_heads);
        for probs in &out.attention {
            for q in 0..probs.rows() {
                let real_sum: f64 = probs.row(q)[..4].iter().sum();
                let pad_sum: f64 = probs.row(q)[4..].iter().sum();
                assert!((real_sum - 1.0).abs() < 1e-12, "row sum {real_sum}");
                assert!(pad_sum == 0.0 || pad_sum < 1e-200);
            }
        }
    }

    #[test]
    fn out_of_range_token_errors() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 1);
        let batch = EncodedBatch { items: vec![bare_item(&[CLS, 49, 50], 3)] };
        assert!(matches!(
            forward_batch(&p, &cfg, &batch, false, 0),
            Err(Error::Vocab { .. })
        ));
    }

    #[test]
    fn pool_mean_examples() {
        let h = Tensor::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(pool_mean(&h, &[true, true]).unwrap(), Tensor::from_rows(&[&[2.0, 2.0]]));
        let same = Tensor::from_rows(&[&[4.0, 5.0], &[4.0, 5.0]]);
        assert_eq!(pool_mean(&same, &[true, true]).unwrap(), Tensor::from_rows(&[&[4.0, 5.0]]));
        let masked = Tensor::from_rows(&[&[1.0, 1.0], &[9.0, 9.0]]);
        assert_eq!(pool_mean(&masked, &[true, false]).unwrap(), Tensor::from_rows(&[&[1.0, 1.0]]));
        assert!(matches!(pool_mean(&masked, &[false, false]), Err(Error::AllPadded)));
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 2);
        let batch = EncodedBatch { items: vec![bare_item(&[CLS, 3], 2)] };
        let (value, grads) = grad(&p, &cfg, &batch, |tape, _, _| {
            Ok(tape.leaf(Tensor::scalar(0.0)))
        })
        .unwrap();
        assert_eq!(value, 0.0);
        for (_, t) in grads.entries() {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_loss_hits_one_embedding_row() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 2);
        let batch = EncodedBatch { items: vec![bare_item(&[CLS, 3], 2)] };
        let (_, grads) = grad(&p, &cfg, &batch, |tape, vars, _| {
            let row = tape.gather_rows(vars.tok_emb, vec![17]);
            Ok(tape.sum_all(row))
        })
        .unwrap();
        for r in 0..cfg.vocab_size {
            let expect = if r == 17 { 1.0 } else { 0.0 };
            assert!(grads.tok_emb.row(r).iter().all(|&x| x == expect), "row {r}");
        }
    }

    #[test]
    fn mlm_logits_depend_on_every_real_position() {
        // Bidirectionality: perturbing any non-PAD input token changes
        // the logits at a masked position.
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 13);
        let make = |third: TokenId| {
            let mut item = bare_item(&[CLS, 8, third, crate::tokenizer::MASK, 9], 5);
            item.mask_positions = vec![3];
            item.mask_targets = vec![8];
            EncodedBatch { items: vec![item] }
        };
        let base = forward_batch(&p, &cfg, &make(10), false, 0).unwrap()[0]
            .mlm_logits
            .clone()
            .unwrap();
        for other in [11, 12, 13] {
            let out = forward_batch(&p, &cfg, &make(other), false, 0).unwrap()[0]
                .mlm_logits
                .clone()
                .unwrap();
            assert!(out != base, "changing token to {other} left mask logits unchanged");
        }
    }
}
