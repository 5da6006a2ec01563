//! Training objectives as scalar tape nodes.
//!
//! Five losses: masked-label prediction (MLM restricted to the prompt
//! label slot), the in-batch contrastive loss over prompted/bare
//! sentence pairs, their equally-weighted sum for pre-training, the
//! topic-classification cross-entropy, and its equally-weighted sum
//! with MLM for fine-tuning.

use serde::{Deserialize, Serialize};

use crate::encoder::EncodedBatch;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

/// What the masked-label loss divides by: the batch sentence count
/// (the literal reading) or the masked-token count (the per-mask
/// mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlmDivisor {
    #[default]
    Batch,
    Masks,
}

/// Masked-position targets for one batch: per item, rows into that
/// item's mask-logit matrix paired with target token ids. PAD-target
/// rows (short labels inside a longer span) are excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MlmTargets {
    pub per_item: Vec<Vec<(usize, TokenId)>>,
}

impl MlmTargets {
    pub fn from_batch(batch: &EncodedBatch) -> MlmTargets {
        MlmTargets { per_item: batch.items.iter().map(|i| i.mlm_pairs()).collect() }
    }

    pub fn total(&self) -> usize {
        self.per_item.iter().map(Vec::len).sum()
    }
}

/// Mean negative log-probability of the masked tokens, divided by the
/// batch sentence count `n_sentences` (or by the mask count, per
/// `divisor`). Returns a constant zero when nothing is masked.
///
/// `logits_per_item[i]` holds the `[n_masks x vocab]` logit rows of
/// item `i`; items without masks pass `None`.
pub fn mlm_loss(
    tape: &mut Tape<'_>,
    logits_per_item: &[Option<Var>],
    targets: &MlmTargets,
    n_sentences: usize,
    divisor: MlmDivisor,
) -> Var {
    assert_eq!(logits_per_item.len(), targets.per_item.len(), "items/targets mismatch");
    assert!(n_sentences > 0, "empty batch");
    let total = targets.total();
    if total == 0 {
        return tape.leaf(Tensor::scalar(0.0));
    }
    let mut parts = Vec::new();
    for (logits, pairs) in logits_per_item.iter().zip(&targets.per_item) {
        if pairs.is_empty() {
            continue;
        }
        let logits = logits.expect("item with mask targets must provide logits");
        let log_probs = tape.log_softmax_rows(logits);
        let picked = tape.gather_entries(log_probs, pairs.clone());
        parts.push(tape.sum_all(picked));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    let denom = match divisor {
        MlmDivisor::Batch => n_sentences as f64,
        MlmDivisor::Masks => total as f64,
    };
    tape.scale(acc, -1.0 / denom)
}

/// In-batch contrastive loss over aligned rows of `h` (prompted
/// representations) and `h_hat` (bare-text representations):
/// cosine similarities over temperature, softmax cross-entropy
/// against the diagonal. Only `h_hat` rows serve as negatives.
pub fn contrastive_loss(tape: &mut Tape<'_>, h: Var, h_hat: Var, tau: f64) -> Result<Var> {
    let n = tape.value(h).rows();
    if tape.value(h_hat).rows() != n {
        return Err(Error::LengthMismatch { left: n, right: tape.value(h_hat).rows() });
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let hn = tape.l2_normalize_rows(h)?;
    let hhn = tape.l2_normalize_rows(h_hat)?;
    let sims = tape.matmul_nt(hn, hhn);
    let logits = tape.scale(sims, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let diag = tape.gather_entries(log_probs, (0..n).map(|i| (i, i)).collect());
    let total = tape.sum_all(diag);
    Ok(tape.scale(total, -1.0))
}

/// Convenience evaluation of [`contrastive_loss`] on plain matrices.
pub fn contrastive_loss_value(h: &Tensor, h_hat: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let hhv = tape.leaf(h_hat.clone());
    let loss = contrastive_loss(&mut tape, hv, hhv, tau)?;
    Ok(tape.value(loss).item())
}

/// Pre-training loss: the two terms, equally weighted.
pub fn pcl_loss(tape: &mut Tape<'_>, l_mlm: Var, l_cl: Var) -> Var {
    tape.add(l_mlm, l_cl)
}

/// Topic-classification cross-entropy over `[n x n_classes]` logits.
pub fn tc_loss(tape: &mut Tape<'_>, class_logits: Var, gold: &[usize]) -> Var {
    let (n, n_classes) = tape.value(class_logits).shape();
    assert_eq!(n, gold.len(), "logits/gold mismatch");
    assert!(n > 0, "empty batch");
    assert!(gold.iter().all(|&g| g < n_classes), "gold class out of range");
    let log_probs = tape.log_softmax_rows(class_logits);
    let picked =
        tape.gather_entries(log_probs, gold.iter().enumerate().map(|(i, &g)| (i, g)).collect());
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / n as f64)
}

/// Fine-tuning loss: the two terms, equally weighted.
pub fn ptc_loss(tape: &mut Tape<'_>, l_mlm: Var, l_tc: Var) -> Var {
    tape.add(l_mlm, l_tc)
}

/// Scores each label by the summed log-probability of its characters
/// at the mask positions, from `[span x vocab]` MLM logit rows.
/// Positions past a label's length are ignored. Returns label scores
/// in label-set order; the argmax is the MLM-head prediction.
pub fn mlm_label_scores(mask_logits: &Tensor, label_token_ids: &[Vec<TokenId>]) -> Vec<f64> {
    let span = mask_logits.rows();
    let log_probs = {
        let mut tape = Tape::new();
        let v = tape.leaf(mask_logits.clone());
        let lp = tape.log_softmax_rows(v);
        tape.value(lp).clone()
    };
    label_token_ids
        .iter()
        .map(|ids| {
            ids.iter()
                .take(span)
                .enumerate()
                .map(|(pos, &id)| log_probs.at(pos, id))
                .sum()
        })
        .collect()
}
