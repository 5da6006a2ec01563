//! Checkpoint persistence.
//!
//! A checkpoint directory holds `manifest.json` — format version,
//! encoder config, the ordered vocabulary, optional labels, and a
//! tensor directory mapping names to shapes and byte offsets — plus
//! `tensors.bin`, one blob of little-endian 32-bit floats, row-major,
//! in directory order. Trained-encoder tensors are prefixed `e1.`,
//! momentum-encoder tensors `e2.`, classifier tensors `head.`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, LayerParams, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::trainer::{HeadParams, Objective};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Everything a trained model needs to run again.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub objective: Objective,
    pub momentum: Option<f64>,
    pub encoder: EncoderParams,
    pub momentum_encoder: Option<EncoderParams>,
    pub head: Option<HeadParams>,
    pub labels: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: EncoderConfig,
    objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

fn push_tensor(blob: &mut Vec<u8>, dir: &mut Vec<TensorEntry>, name: String, t: &Tensor) {
    dir.push(TensorEntry { name, shape: [t.rows(), t.cols()], offset: blob.len() as u64 });
    for &x in t.data() {
        blob.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

impl Checkpoint {
    /// Writes `manifest.json` and `tensors.bin` into `dir`, creating
    /// it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.encoder.entries() {
            push_tensor(&mut blob, &mut tensors, format!("e1.{name}"), t);
        }
        if let Some(e2) = &self.momentum_encoder {
            for (name, t) in e2.entries() {
                push_tensor(&mut blob, &mut tensors, format!("e2.{name}"), t);
            }
        }
        if let Some(head) = &self.head {
            push_tensor(&mut blob, &mut tensors, "head.w".into(), &head.w);
            push_tensor(&mut blob, &mut tensors, "head.b".into(), &head.b);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            objective: self.objective,
            momentum: self.momentum,
            vocab: self.vocab.token_list().to_vec(),
            labels: self.labels.clone(),
            tensors,
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint { reason: e.to_string() })?;
        fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        let blob_path = dir.join(TENSORS_FILE);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint { reason: format!("bad manifest: {e}") })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        manifest.config.validate()?;
        let blob_path = dir.join(TENSORS_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let mut directory: HashMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut read_tensor = |name: &str| -> Result<Tensor> {
            let entry = directory.remove(name).ok_or_else(|| Error::Checkpoint {
                reason: format!("tensor {name:?} missing from directory"),
            })?;
            let n = entry.shape[0] * entry.shape[1];
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(Error::Checkpoint {
                    reason: format!("tensor {name:?} overruns the blob"),
                });
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(Tensor::from_vec(entry.shape[0], entry.shape[1], data))
        };

        let load_params = |prefix: &str,
                               read: &mut dyn FnMut(&str) -> Result<Tensor>|
         -> Result<EncoderParams> {
            let template = zero_params(&manifest.config);
            let mut loaded = Vec::new();
            for (name, t) in template.entries() {
                let got = read(&format!("{prefix}.{name}"))?;
                if got.shape() != t.shape() {
                    return Err(Error::Checkpoint {
                        reason: format!(
                            "tensor {prefix}.{name} has shape {:?}, expected {:?}",
                            got.shape(),
                            t.shape()
                        ),
                    });
                }
                loaded.push(got);
            }
            let mut it = loaded.into_iter();
            Ok(template.map(|_| it.next().expect("entry count matches")))
        };

        let encoder = load_params("e1", &mut read_tensor)?;
        let momentum_encoder = if manifest.tensors.iter().any(|t| t.name.starts_with("e2.")) {
            Some(load_params("e2", &mut read_tensor)?)
        } else {
            None
        };
        let head = if manifest.tensors.iter().any(|t| t.name == "head.w") {
            Some(HeadParams { w: read_tensor("head.w")?, b: read_tensor("head.b")? })
        } else {
            None
        };
        if !directory.is_empty() {
            let mut extra: Vec<&str> = directory.keys().copied().collect();
            extra.sort_unstable();
            return Err(Error::Checkpoint {
                reason: format!("unexpected tensors in directory: {}", extra.join(", ")),
            });
        }

        let vocab = Vocab::from_token_list(manifest.vocab)?;
        if vocab.size() != manifest.config.vocab_size {
            return Err(Error::Checkpoint {
                reason: format!(
                    "vocab has {} tokens but config says {}",
                    vocab.size(),
                    manifest.config.vocab_size
                ),
            });
        }
        Ok(Checkpoint {
            config: manifest.config,
            vocab,
            objective: manifest.objective,
            momentum: manifest.momentum,
            encoder,
            momentum_encoder,
            head,
            labels: manifest.labels,
        })
    }
}

/// Zero-valued parameters shaped for a config; the load path fills
/// them tensor by tensor.
fn zero_params(cfg: &EncoderConfig) -> EncoderParams {
    let d = cfg.d_model;
    Params {
        tok_emb: Tensor::zeros(cfg.vocab_size, d),
        pos_emb: Tensor::zeros(cfg.max_seq_len, d),
        emb_ln_gamma: Tensor::zeros(1, d),
        emb_ln_beta: Tensor::zeros(1, d),
        layers: (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: Tensor::zeros(d, d),
                bq: Tensor::zeros(1, d),
                wk: Tensor::zeros(d, d),
                bk: Tensor::zeros(1, d),
                wv: Tensor::zeros(d, d),
                bv: Tensor::zeros(1, d),
                wo: Tensor::zeros(d, d),
                bo: Tensor::zeros(1, d),
                ln_attn_gamma: Tensor::zeros(1, d),
                ln_attn_beta: Tensor::zeros(1, d),
                w_ff_in: Tensor::zeros(d, cfg.d_ff),
                b_ff_in: Tensor::zeros(1, cfg.d_ff),
                w_ff_out: Tensor::zeros(cfg.d_ff, d),
                b_ff_out: Tensor::zeros(1, d),
                ln_ffn_gamma: Tensor::zeros(1, d),
                ln_ffn_beta: Tensor::zeros(1, d),
            })
            .collect(),
        mlm_bias: Tensor::zeros(1, cfg.vocab_size),
    }
}

/// Rounds every parameter through f32, matching what a save/load
/// cycle produces. Keeps in-memory continuations bit-compatible with
/// on-disk ones.
pub fn round_trip_f32(params: &EncoderParams) -> EncoderParams {
    params.map(|t| t.map(|x| x as f32 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ExpandedExample, LabelSet};
    use crate::encoder::init_params;
    use crate::prompt::PromptTemplate;

    fn small_checkpoint(with_e2: bool, with_head: bool) -> Checkpoint {
        let exs = vec![ExpandedExample { text: "abc".into(), label: "A".into() }];
        let tpl = PromptTemplate::new("t", "{label}:{text}").unwrap();
        let labels = LabelSet::new(vec!["A".into(), "B".into()]).unwrap();
        let vocab = Vocab::build(&exs, &[&tpl], &labels);
        let config = EncoderConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_seq_len: 10,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-12,
        };
        let encoder = init_params(&config, 3);
        Checkpoint {
            config: config.clone(),
            vocab,
            objective: if with_e2 { Objective::Moco } else { Objective::Mlm },
            momentum: with_e2.then_some(0.999),
            momentum_encoder: with_e2.then(|| init_params(&config, 4)),
            head: with_head.then(|| HeadParams::init(config.d_model, 2, 9)),
            labels: with_head.then(|| vec!["A".into(), "B".into()]),
            encoder,
        }
    }

    #[test]
    fn save_load_round_trips_to_f32_precision() {
        for (with_e2, with_head) in [(false, false), (true, false), (false, true), (true, true)] {
            let ckpt = small_checkpoint(with_e2, with_head);
            let dir = tempfile::tempdir().unwrap();
            ckpt.save(dir.path()).unwrap();
            let loaded = Checkpoint::load(dir.path()).unwrap();
            assert_eq!(loaded.config, ckpt.config);
            assert_eq!(loaded.vocab, ckpt.vocab);
            assert_eq!(loaded.objective, ckpt.objective);
            assert_eq!(loaded.momentum, ckpt.momentum);
            assert_eq!(loaded.labels, ckpt.labels);
            assert_eq!(loaded.encoder, round_trip_f32(&ckpt.encoder));
            assert_eq!(
                loaded.momentum_encoder.is_some(),
                ckpt.momentum_encoder.is_some()
            );
            assert_eq!(loaded.head.is_some(), ckpt.head.is_some());
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let ckpt = small_checkpoint(true, true);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        ckpt.save(d1.path()).unwrap();
        ckpt.save(d2.path()).unwrap();
        for f in [MANIFEST_FILE, TENSORS_FILE] {
            let a = fs::read(d1.path().join(f)).unwrap();
            let b = fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn load_rejects_missing_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
        let ckpt = small_checkpoint(false, false);
        ckpt.save(dir.path()).unwrap();
        // Truncate the blob: every tensor read past the end must fail.
        let blob_path = dir.path().join(TENSORS_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
