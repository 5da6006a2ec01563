//! AdamW optimization, the warmup/decay schedule, and the training
//! loops for pre-training (three objective modes) and fine-tuning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{ExpandedExample, LabelSet};
use crate::encoder::{
    self, EncodedBatch, EncoderConfig, ForwardOpts, ItemVars,
};
use crate::error::{Error, Result};
use crate::moco;
use crate::objectives::{self, MlmDivisor, MlmTargets};
use crate::prompt::{self, PromptTemplate};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

/// Pre-training objective: masked-label prediction alone, joint with
/// single-encoder contrastive learning, or joint with the momentum
/// dual-encoder variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Mlm,
    Simcse,
    Moco,
}

impl Objective {
    pub fn uses_contrastive(self) -> bool {
        !matches!(self, Objective::Mlm)
    }

    pub fn uses_moco(self) -> bool {
        matches!(self, Objective::Moco)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "simcse" => Ok(Objective::Simcse),
            "moco" => Ok(Objective::Moco),
            other => Err(Error::config(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Mlm => "mlm",
            Objective::Simcse => "simcse",
            Objective::Moco => "moco",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    pub momentum: f64,
    pub temperature: f64,
    pub mlm_divisor: MlmDivisor,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            learning_rate: 1e-5,
            weight_decay: 0.1,
            warmup_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 4,
            batch_size: 16,
            seed: 0,
            objective: Objective::Mlm,
            momentum: 0.999,
            temperature: 0.05,
            mlm_divisor: MlmDivisor::Batch,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_rate) {
            return Err(Error::config("warmup_rate must lie in [0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.objective.uses_contrastive() && self.batch_size < 2 {
            return Err(Error::config("contrastive objectives need batch_size >= 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::MomentumRange { value: self.momentum });
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::config("grad_clip must be positive when set"));
            }
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter tensor, plus
/// the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|t| Tensor::zeros_like(t)).collect(),
            v: params.iter().map(|t| Tensor::zeros_like(t)).collect(),
            t: 0,
        }
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam step:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected,
/// then `theta <- theta - lr_t * m_hat / (sqrt(v_hat) + eps) - lr_t * wd * theta`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr_t: f64,
    hp: &AdamHyper,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "params/grads mismatch");
    assert_eq!(params.len(), state.m.len(), "params/state mismatch");
    for g in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite { what: "gradient".into() });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape(), g.shape(), "grad shape mismatch");
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta = p.data()[i];
            p.data_mut()[i] =
                theta - lr_t * (m_hat / (v_hat.sqrt() + hp.eps)) - lr_t * hp.weight_decay * theta;
        }
    }
    Ok(())
}

/// Linear warmup from zero over `ceil(warmup_rate * total_steps)`
/// steps to the peak learning rate, then linear decay to zero at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    assert!(step <= total_steps, "step past the schedule");
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (cfg.warmup_rate * total_steps as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        cfg.learning_rate * step as f64 / warmup as f64
    } else {
        cfg.learning_rate * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Scales all gradients so their joint L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// The fresh linear classifier used by fine-tuning: pooled
/// representation to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn init(d_model: usize, n_classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "head-init", 0);
        HeadParams {
            w: rng::truncated_normal(&mut r, d_model, n_classes, 0.02),
            b: Tensor::zeros(1, n_classes),
        }
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_mlm: f64,
    pub loss_cl_or_tc: f64,
    pub lr_last: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    /// Equality on everything except the wall-clock field; used by
    /// determinism checks.
    pub fn same_numbers(&self, other: &EpochMetrics) -> bool {
        self.epoch == other.epoch
            && self.loss_total.to_bits() == other.loss_total.to_bits()
            && self.loss_mlm.to_bits() == other.loss_mlm.to_bits()
            && self.loss_cl_or_tc.to_bits() == other.loss_cl_or_tc.to_bits()
            && self.lr_last.to_bits() == other.lr_last.to_bits()
    }
}

/// Batch index plan: fixed chunk sizes, so the schedule length is the
/// same every epoch. A trailing chunk smaller than the objective's
/// minimum (two sentences for contrastive modes, one otherwise) is
/// dropped.
fn batch_sizes(n: usize, batch_size: usize, min_size: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = n;
    while left >= batch_size {
        out.push(batch_size);
        left -= batch_size;
    }
    if left >= min_size {
        out.push(left);
    }
    out
}

struct RenderedPair {
    prompted: prompt::RenderedInput,
    bare: prompt::RenderedInput,
}

/// Pre-trains an encoder on expanded examples. Returns the checkpoint
/// and per-epoch metrics; everything is deterministic given the seed.
pub fn pretrain(
    examples: &[ExpandedExample],
    labels: &LabelSet,
    template: &PromptTemplate,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::config("cannot pre-train on an empty corpus"));
    }
    let vocab = Vocab::build(examples, &[template], labels);
    if vocab.size() > cfg.encoder.vocab_size {
        return Err(Error::Vocab {
            reason: format!(
                "corpus needs {} tokens but the configured maximum is {}",
                vocab.size(),
                cfg.encoder.vocab_size
            ),
        });
    }
    let enc_cfg = EncoderConfig { vocab_size: vocab.size(), ..cfg.encoder.clone() };
    let span = labels.mask_span();

    let rendered: Vec<RenderedPair> = examples
        .iter()
        .map(|ex| {
            labels.index_of(&ex.label)?;
            Ok(RenderedPair {
                prompted: prompt::render_masked(template, &vocab, ex, span, enc_cfg.max_seq_len)?,
                bare: prompt::render_bare(&vocab, &ex.text, enc_cfg.max_seq_len),
            })
        })
        .collect::<Result<_>>()?;

    let mut e1 = encoder::init_params(&enc_cfg, cfg.seed);
    let mut e2 = cfg.objective.uses_moco().then(|| e1.clone());

    let min_batch = if cfg.objective.uses_contrastive() { 2 } else { 1 };
    let plan = batch_sizes(examples.len(), cfg.batch_size, min_batch);
    if plan.is_empty() {
        return Err(Error::config(format!(
            "{} examples cannot fill a batch of minimum size {min_batch}",
            examples.len()
        )));
    }
    let total_steps = cfg.epochs * plan.len();

    let mut opt = OptimizerState::new(&e1.entries().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let hp = AdamHyper::from(cfg);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng::shuffle(&mut rng::stream(cfg.seed, "epoch-shuffle", epoch as u64), &mut order);

        let (mut sum_total, mut sum_mlm, mut sum_cl) = (0.0, 0.0, 0.0);
        let mut lr_last = 0.0;
        let mut cursor = 0usize;

        for &size in &plan {
            let ids = &order[cursor..cursor + size];
            cursor += size;
            let prompted_inputs: Vec<_> = ids.iter().map(|&i| rendered[i].prompted.clone()).collect();
            let bare_inputs: Vec<_> = ids.iter().map(|&i| rendered[i].bare.clone()).collect();
            let prompted = EncodedBatch::from_rendered(&prompted_inputs, None);
            let bare = EncodedBatch::from_rendered(&bare_inputs, None);

            let keys = match cfg.objective {
                Objective::Moco => {
                    Some(moco::key_embeddings(e2.as_ref().expect("moco state"), &enc_cfg, &bare)?)
                }
                _ => None,
            };

            let mut tape = Tape::new();
            let vars = encoder::register_params(&mut tape, &e1);
            let mut item_vars = Vec::with_capacity(size);
            for (j, item) in prompted.items.iter().enumerate() {
                let opts = ForwardOpts {
                    train_mode: true,
                    dropout_seed: rng::derive_seed(
                        cfg.seed,
                        "dropout-prompted",
                        ((global_step as u64) << 20) | j as u64,
                    ),
                    capture_attention: false,
                };
                item_vars.push(encoder::forward_item(&mut tape, &vars, &enc_cfg, item, &opts)?);
            }

            let logits: Vec<Option<Var>> = item_vars.iter().map(|iv| iv.mlm_logits).collect();
            let targets = MlmTargets::from_batch(&prompted);
            let l_mlm =
                objectives::mlm_loss(&mut tape, &logits, &targets, size, cfg.mlm_divisor);

            let l_cl = match cfg.objective {
                Objective::Mlm => None,
                Objective::Simcse => {
                    let pooled: Vec<Var> = item_vars.iter().map(|iv| iv.pooled).collect();
                    let h = tape.stack_rows(&pooled);
                    let mut bare_pooled = Vec::with_capacity(size);
                    for (j, item) in bare.items.iter().enumerate() {
                        let opts = ForwardOpts {
                            train_mode: true,
                            dropout_seed: rng::derive_seed(
                                cfg.seed,
                                "dropout-bare",
                                ((global_step as u64) << 20) | j as u64,
                            ),
                            capture_attention: false,
                        };
                        let out = encoder::forward_item(&mut tape, &vars, &enc_cfg, item, &opts)?;
                        bare_pooled.push(out.pooled);
                    }
                    let h_hat = tape.stack_rows(&bare_pooled);
                    Some(objectives::contrastive_loss(&mut tape, h, h_hat, cfg.temperature)?)
                }
                Objective::Moco => {
                    let pooled: Vec<Var> = item_vars.iter().map(|iv| iv.pooled).collect();
                    let h = tape.stack_rows(&pooled);
                    let h_hat = tape.leaf(keys.expect("moco keys"));
                    Some(objectives::contrastive_loss(&mut tape, h, h_hat, cfg.temperature)?)
                }
            };

            let total = match l_cl {
                Some(cl) => objectives::pcl_loss(&mut tape, l_mlm, cl),
                None => l_mlm,
            };

            let total_value = tape.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::NonFinite { what: "training loss".into() });
            }
            sum_total += total_value;
            sum_mlm += tape.value(l_mlm).item();
            if let Some(cl) = l_cl {
                sum_cl += tape.value(cl).item();
            }

            let mut grads = tape.backward(total);
            let mut grad_params = vars.map(|&v| grads.take_or_zeros(v, &tape));
            drop(tape);
            if let Some(max_norm) = cfg.grad_clip {
                let mut list: Vec<&mut Tensor> =
                    grad_params.entries_mut().into_iter().map(|(_, t)| t).collect();
                clip_global_norm(&mut list, max_norm);
            }

            lr_last = lr_schedule(global_step, total_steps, cfg);
            {
                let mut plist: Vec<&mut Tensor> =
                    e1.entries_mut().into_iter().map(|(_, t)| t).collect();
                let gentries = grad_params.entries();
                let glist: Vec<&Tensor> = gentries.iter().map(|(_, t)| *t).collect();
                adamw_step(&mut plist, &glist, &mut opt, lr_last, &hp)?;
            }
            if let Some(e2) = e2.as_mut() {
                moco::ema_update(e2, &e1, cfg.momentum);
            }
            global_step += 1;
        }

        let n_batches = plan.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss_total: sum_total / n_batches,
            loss_mlm: sum_mlm / n_batches,
            loss_cl_or_tc: sum_cl / n_batches,
            lr_last,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let ckpt = Checkpoint {
        config: enc_cfg,
        vocab,
        objective: cfg.objective,
        momentum: cfg.objective.uses_moco().then_some(cfg.momentum),
        encoder: e1,
        momentum_encoder: e2,
        head: None,
        labels: None,
    };
    Ok((ckpt, metrics))
}

/// Fine-tunes a checkpoint on labeled examples with the joint
/// masked-label + classification loss. The classification head is
/// initialized fresh and reads the pooled representation of the
/// masked prompt, so it cannot see the answer.
pub fn finetune(
    mut ckpt: Checkpoint,
    train: &[ExpandedExample],
    labels: &LabelSet,
    template: &PromptTemplate,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("cannot fine-tune on an empty split"));
    }
    let missing: String = labels
        .labels()
        .iter()
        .flat_map(|l| l.chars())
        .filter(|&c| !ckpt.vocab.covers(&c.to_string()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnseenLabelChars { chars: missing });
    }
    let enc_cfg = ckpt.config.clone();
    let span = labels.mask_span();

    let rendered: Vec<(prompt::RenderedInput, usize)> = train
        .iter()
        .map(|ex| {
            Ok((
                prompt::render_masked(template, &ckpt.vocab, ex, span, enc_cfg.max_seq_len)?,
                labels.index_of(&ex.label)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut head = HeadParams::init(
        enc_cfg.d_model,
        labels.len(),
        rng::derive_seed(cfg.seed, "finetune-head", 0),
    );

    let plan = batch_sizes(train.len(), cfg.batch_size, 1);
    let total_steps = cfg.epochs * plan.len();
    let mut opt = {
        let entries = ckpt.encoder.entries();
        let mut list: Vec<&Tensor> = entries.iter().map(|(_, t)| *t).collect();
        list.push(&head.w);
        list.push(&head.b);
        OptimizerState::new(&list)
    };
    let hp = AdamHyper::from(cfg);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(
            &mut rng::stream(cfg.seed, "finetune-shuffle", epoch as u64),
            &mut order,
        );

        let (mut sum_total, mut sum_mlm, mut sum_tc) = (0.0, 0.0, 0.0);
        let mut lr_last = 0.0;
        let mut cursor = 0usize;

        for &size in &plan {
            let ids = &order[cursor..cursor + size];
            cursor += size;
            let inputs: Vec<_> = ids.iter().map(|&i| rendered[i].0.clone()).collect();
            let gold_in: Vec<usize> = ids.iter().map(|&i| rendered[i].1).collect();
            let batch = EncodedBatch::from_rendered(&inputs, Some(&gold_in));
            let gold: Vec<usize> =
                batch.items.iter().map(|i| i.label_index.expect("gold class")).collect();

            let mut tape = Tape::new();
            let vars = encoder::register_params(&mut tape, &ckpt.encoder);
            let head_w = tape.leaf_ref(&head.w);
            let head_b = tape.leaf_ref(&head.b);

            let mut item_vars: Vec<ItemVars> = Vec::with_capacity(size);
            for (j, item) in batch.items.iter().enumerate() {
                let opts = ForwardOpts {
                    train_mode: true,
                    dropout_seed: rng::derive_seed(
                        cfg.seed,
                        "dropout-finetune",
                        ((global_step as u64) << 20) | j as u64,
                    ),
                    capture_attention: false,
                };
                item_vars.push(encoder::forward_item(&mut tape, &vars, &enc_cfg, item, &opts)?);
            }

            let logits: Vec<Option<Var>> = item_vars.iter().map(|iv| iv.mlm_logits).collect();
            let targets = MlmTargets::from_batch(&batch);
            let l_mlm =
                objectives::mlm_loss(&mut tape, &logits, &targets, size, cfg.mlm_divisor);

            let pooled: Vec<Var> = item_vars.iter().map(|iv| iv.pooled).collect();
            let stacked = tape.stack_rows(&pooled);
            let class_logits = tape.matmul(stacked, head_w);
            let class_logits = tape.add_row(class_logits, head_b);
            let l_tc = objectives::tc_loss(&mut tape, class_logits, &gold);

            let total = objectives::ptc_loss(&mut tape, l_mlm, l_tc);
            let total_value = tape.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::NonFinite { what: "fine-tuning loss".into() });
            }
            sum_total += total_value;
            sum_mlm += tape.value(l_mlm).item();
            sum_tc += tape.value(l_tc).item();

            let mut grads = tape.backward(total);
            let mut grad_params = vars.map(|&v| grads.take_or_zeros(v, &tape));
            let mut grad_w = grads.take_or_zeros(head_w, &tape);
            let mut grad_b = grads.take_or_zeros(head_b, &tape);
            drop(tape);

            if let Some(max_norm) = cfg.grad_clip {
                let mut list: Vec<&mut Tensor> =
                    grad_params.entries_mut().into_iter().map(|(_, t)| t).collect();
                list.push(&mut grad_w);
                list.push(&mut grad_b);
                clip_global_norm(&mut list, max_norm);
            }

            lr_last = lr_schedule(global_step, total_steps, cfg);
            {
                let mut plist: Vec<&mut Tensor> =
                    ckpt.encoder.entries_mut().into_iter().map(|(_, t)| t).collect();
                plist.push(&mut head.w);
                plist.push(&mut head.b);
                let gentries = grad_params.entries();
                let mut glist: Vec<&Tensor> = gentries.iter().map(|(_, t)| *t).collect();
                glist.push(&grad_w);
                glist.push(&grad_b);
                adamw_step(&mut plist, &glist, &mut opt, lr_last, &hp)?;
            }
            global_step += 1;
        }

        let n_batches = plan.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss_total: sum_total / n_batches,
            loss_mlm: sum_mlm / n_batches,
            loss_cl_or_tc: sum_tc / n_batches,
            lr_last,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    ckpt.head = Some(head);
    ckpt.labels = Some(labels.labels().to_vec());
    Ok((ckpt, metrics))
}

/// Classifies texts with a fine-tuned head: masked prompt in, argmax
/// over class logits out. Ties break toward the lower class index.
pub fn predict_with_head(
    ckpt: &Checkpoint,
    texts: &[&str],
    template: &PromptTemplate,
) -> Result<Vec<String>> {
    let head = ckpt
        .head
        .as_ref()
        .ok_or_else(|| Error::Checkpoint { reason: "checkpoint has no classification head".into() })?;
    let labels = ckpt
        .labels
        .as_ref()
        .ok_or_else(|| Error::Checkpoint { reason: "checkpoint has no label list".into() })?;
    let label_set = LabelSet::new(labels.clone())?;
    let span = label_set.mask_span();
    let mut out = Vec::with_capacity(texts.len());
    for text in texts {
        let r = prompt::render_inference(template, &ckpt.vocab, text, span, ckpt.config.max_seq_len)?;
        let batch = EncodedBatch::from_rendered(std::slice::from_ref(&r), None);
        let fwd = encoder::forward_batch(&ckpt.encoder, &ckpt.config, &batch, false, 0)?;
        let logits = fwd[0].pooled.matmul(&head.w).add(&head.b);
        let mut best = 0usize;
        for c in 1..logits.cols() {
            if logits.at(0, c) > logits.at(0, best) {
                best = c;
            }
        }
        out.push(labels[best].clone());
    }
    Ok(out)
}

/// Classifies texts by scoring each label's characters at the mask
/// positions with the MLM head.
pub fn predict_with_mlm_head(
    ckpt: &Checkpoint,
    texts: &[&str],
    labels: &LabelSet,
    template: &PromptTemplate,
) -> Result<Vec<String>> {
    let span = labels.mask_span();
    let label_ids: Vec<Vec<usize>> =
        labels.labels().iter().map(|l| ckpt.vocab.encode(l)).collect();
    let mut out = Vec::with_capacity(texts.len());
    for text in texts {
        let r = prompt::render_inference(template, &ckpt.vocab, text, span, ckpt.config.max_seq_len)?;
        let batch = EncodedBatch::from_rendered(std::slice::from_ref(&r), None);
        let fwd = encoder::forward_batch(&ckpt.encoder, &ckpt.config, &batch, false, 0)?;
        let logits = fwd[0]
            .mlm_logits
            .as_ref()
            .ok_or_else(|| Error::Checkpoint { reason: "inference render produced no masks".into() })?;
        let scores = objectives::mlm_label_scores(logits, &label_ids);
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        out.push(labels.labels()[best].clone());
    }
    Ok(out)
}

/// Serializes per-epoch metrics as one JSON record per line.
pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}
