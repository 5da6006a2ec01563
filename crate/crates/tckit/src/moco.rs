//! Momentum dual-encoder contrastive training.
//!
//! A slow copy of the encoder embeds the bare sentences; only the
//! trained encoder receives gradients. After every optimizer step the
//! slow copy moves toward the trained weights by an exponential
//! moving average with coefficient `lambda_m`.

use crate::encoder::{self, EncodedBatch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The trained encoder, its momentum copy, and the coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoState {
    pub theta_e1: EncoderParams,
    pub theta_e2: EncoderParams,
    pub lambda_m: f64,
}

pub fn init_moco(params: EncoderParams, lambda_m: f64) -> Result<MocoState> {
    if !(0.0..1.0).contains(&lambda_m) {
        return Err(Error::MomentumRange { value: lambda_m });
    }
    Ok(MocoState { theta_e2: params.clone(), theta_e1: params, lambda_m })
}

/// Elementwise exponential moving average:
/// `target <- lambda * target + (1 - lambda) * source`.
pub fn ema_update(target: &mut EncoderParams, source: &EncoderParams, lambda: f64) {
    let src = source.entries();
    for ((_, t), (_, s)) in target.entries_mut().into_iter().zip(src) {
        for (b, &a) in t.data_mut().iter_mut().zip(s.data()) {
            *b = lambda * *b + (1.0 - lambda) * a;
        }
    }
}

/// One momentum update:
/// `theta_e2 <- lambda_m * theta_e2 + (1 - lambda_m) * theta_e1`,
/// elementwise. The trained encoder is untouched.
pub fn momentum_update(state: &mut MocoState) {
    ema_update(&mut state.theta_e2, &state.theta_e1, state.lambda_m);
}

/// Embeds the bare sentences with the momentum encoder, outside any
/// gradient tape. Dropout stays off: the key encoder provides stable
/// targets.
pub fn key_embeddings(
    momentum_encoder: &EncoderParams,
    cfg: &EncoderConfig,
    bare: &EncodedBatch,
) -> Result<Tensor> {
    let outputs = encoder::forward_batch(momentum_encoder, cfg, bare, false, 0)?;
    let d = outputs.first().map_or(0, |o| o.pooled.cols());
    let mut keys = Tensor::zeros(outputs.len(), d);
    for (r, out) in outputs.iter().enumerate() {
        keys.row_mut(r).copy_from_slice(out.pooled.row(0));
    }
    Ok(keys)
}

/// One contrastive step: prompted sentences through the trained
/// encoder (with gradients), bare sentences through the momentum
/// encoder (without), in-batch negatives only. Returns the loss and
/// gradients for the trained encoder alone.
pub fn moco_contrastive_step(
    state: &MocoState,
    cfg: &EncoderConfig,
    prompted: &EncodedBatch,
    bare: &EncodedBatch,
    tau: f64,
) -> Result<(f64, EncoderParams)> {
    if prompted.len() < 2 {
        return Err(Error::BatchTooSmall { n: prompted.len() });
    }
    if prompted.len() != bare.len() {
        return Err(Error::LengthMismatch { left: prompted.len(), right: bare.len() });
    }
    let keys = key_embeddings(&state.theta_e2, cfg, bare)?;
    encoder::grad(&state.theta_e1, cfg, prompted, |tape: &mut Tape<'_>, _vars, items| {
        let pooled: Vec<_> = items.iter().map(|i| i.pooled).collect();
        let h = tape.stack_rows(&pooled);
        let h_hat = tape.leaf(keys);
        objectives::contrastive_loss(tape, h, h_hat, tau)
    })
}
