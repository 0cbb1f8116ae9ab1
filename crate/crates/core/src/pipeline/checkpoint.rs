//! Stage checkpoints: the tensor container plus a meta header carrying the
//! encoder config, adapter config, label inventory, vocabulary fingerprint,
//! stage tag, and rng state. Save -> load -> save is byte-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biaffine::BiaffineHead;
use crate::encoder::{AdapterConfig, Encoder, EncoderConfig};
use crate::tensor::{load_container, save_container, ContainerError, NamedTensor, Tensor};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint meta is malformed: {0}")]
    BadMeta(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    /// One of `base`, `ipt`, `ilmt`, `downstream`.
    pub stage: String,
    pub encoder: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    /// Known relation labels, for parser checkpoints.
    pub labels: Option<Vec<String>>,
    /// Fingerprint of the vocabulary JSON the model was built with.
    pub vocab_fingerprint: String,
    pub seed: u64,
    /// Serialized rng state at save time.
    pub rng: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(
        stage: &str,
        encoder: &Encoder,
        labels: Option<Vec<String>>,
        vocab_fingerprint: String,
        seed: u64,
        rng: &ChaCha8Rng,
    ) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            encoder: encoder.config.clone(),
            adapter: encoder.adapter,
            labels,
            vocab_fingerprint,
            seed,
            rng: serde_json::to_value(rng).expect("rng serializes"),
        }
    }

    pub fn restore_rng(&self) -> Result<ChaCha8Rng, CheckpointError> {
        serde_json::from_value(self.rng.clone())
            .map_err(|e| CheckpointError::BadMeta(format!("rng state: {e}")))
    }
}

/// Writes encoder parameters plus any head parameters under `path`.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    encoder: &Encoder,
    head_params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut tensors = encoder.params.snapshot();
    for (name, t) in head_params {
        tensors.push((name.clone(), t.shape(), t.data()));
    }
    let meta_value =
        serde_json::to_value(meta).map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    save_container(path, &meta_value, &tensors)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let container = load_container(path)?;
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(meta.version));
    }
    Ok(LoadedCheckpoint {
        meta,
        tensors: container.tensors,
    })
}

/// A model rebuilt from a checkpoint: the encoder (with adapters when the
/// checkpoint carries them) and the parse head when present.
pub struct RestoredModel {
    pub encoder: Encoder,
    pub parse_head: Option<BiaffineHead>,
    pub meta: CheckpointMeta,
}

/// Reconstructs the architecture from meta and fills every parameter from
/// the container. Fails if any named encoder parameter is absent.
pub fn restore_model(loaded: LoadedCheckpoint) -> Result<RestoredModel, CheckpointError> {
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::new(loaded.meta.encoder.clone(), &mut scratch);
    if let Some(adapter) = loaded.meta.adapter {
        encoder
            .inject_adapters(adapter, &mut scratch)
            .expect("fresh encoder accepts adapters");
    }
    let find = |name: &str| -> Option<&NamedTensor> {
        loaded.tensors.iter().find(|t| t.name == name)
    };
    for name in encoder.params.names() {
        let stored = find(&name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        let target = encoder.params.get(&name).expect("name from registry");
        if stored.shape != target.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: stored.shape.clone(),
                expected: target.shape(),
            });
        }
        target
            .assign(stored.data.clone())
            .expect("shape checked above");
    }

    let parse_head = match (find("parse/W_arc"), find("parse/b_arc"), find("parse/W_rel"), find("parse/b_rel")) {
        (Some(w_arc), Some(b_arc), Some(w_rel), Some(b_rel)) => {
            let hidden = loaded.meta.encoder.hidden;
            if w_rel.shape.len() != 3 {
                return Err(CheckpointError::ShapeMismatch {
                    name: "parse/W_rel".into(),
                    found: w_rel.shape.clone(),
                    expected: vec![0, hidden, hidden],
                });
            }
            let n_rels = w_rel.shape[0];
            let tensor = |nt: &NamedTensor| {
                Tensor::from_vec(nt.shape.clone(), nt.data.clone())
                    .expect("shape matches data")
                    .with_grad()
            };
            Some(BiaffineHead {
                w_arc: tensor(w_arc),
                b_arc: tensor(b_arc),
                w_rel: tensor(w_rel),
                b_rel: tensor(b_rel),
                hidden,
                n_rels,
            })
        }
        _ => None,
    };

    Ok(RestoredModel {
        encoder,
        parse_head,
        meta: loaded.meta,
    })
}

/// FNV-1a 64 over raw bytes, hex-encoded: the vocabulary fingerprint.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::MIN_VOCAB;

    fn tiny_encoder(seed: u64, adapters: bool) -> Encoder {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_len: 12,
            dropout: 0.1,
            vocab_size: MIN_VOCAB,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Encoder::new(cfg, &mut rng);
        if adapters {
            enc.inject_adapters(AdapterConfig { size: 4 }, &mut rng).unwrap();
        }
        enc
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(1, true);
        let rng = ChaCha8Rng::seed_from_u64(99);
        let meta = CheckpointMeta::new("ipt", &enc, Some(vec!["root".into()]), "f00d".into(), 7, &rng);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &meta, &enc, &[]).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        let restored = restore_model(loaded).unwrap();
        save_checkpoint(&p2, &restored.meta, &restored.encoder, &[]).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rng_state_round_trips_exactly() {
        use rand::Rng;
        let enc = tiny_encoder(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.gen(); // advance off the seed point
        let meta = CheckpointMeta::new("base", &enc, None, "".into(), 5, &rng);
        let mut back = meta.restore_rng().unwrap();
        let mut original = rng;
        for _ in 0..8 {
            assert_eq!(back.gen::<u64>(), original.gen::<u64>());
        }
    }

    #[test]
    fn restored_model_reproduces_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(3, true);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let meta = CheckpointMeta::new("ipt", &enc, None, "".into(), 3, &rng);
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &meta, &enc, &[]).unwrap();
        let restored = restore_model(load_checkpoint(&path).unwrap()).unwrap();
        let ids = [1u32, 200, 230, 2];
        let tape = crate::tensor::Tape::eval();
        let a = enc.encode_single(&tape, &ids, None).unwrap();
        let b = restored.encoder.encode_single(&tape, &ids, None).unwrap();
        for (x, y) in a.states.iter().zip(b.states.iter()) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn parse_head_round_trips_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = BiaffineHead::new(8, 3, &mut rng);
        let meta = CheckpointMeta::new(
            "ipt",
            &enc,
            Some(vec!["a".into(), "b".into()]),
            "beef".into(),
            4,
            &rng,
        );
        let path = dir.path().join("p.ckpt");
        let head_params = vec![
            ("parse/W_arc".to_string(), head.w_arc.clone()),
            ("parse/W_rel".to_string(), head.w_rel.clone()),
            ("parse/b_arc".to_string(), head.b_arc.clone()),
            ("parse/b_rel".to_string(), head.b_rel.clone()),
        ];
        save_checkpoint(&path, &meta, &enc, &head_params).unwrap();
        let restored = restore_model(load_checkpoint(&path).unwrap()).unwrap();
        let got = restored.parse_head.expect("head present");
        assert_eq!(got.n_rels, 3);
        assert!(got.w_arc.bits_eq(&head.w_arc));
        assert!(got.w_rel.bits_eq(&head.w_rel));
    }

    #[test]
    fn missing_parameter_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let enc = tiny_encoder(5, false);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let meta = CheckpointMeta::new("base", &enc, None, "".into(), 0, &rng);
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &meta, &enc, &[]).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        loaded.tensors.retain(|t| t.name != "base/embed/token");
        assert!(matches!(
            restore_model(loaded),
            Err(CheckpointError::MissingParam(_))
        ));
    }

    #[test]
    fn fingerprint_is_stable_and_content_sensitive() {
        assert_eq!(fingerprint_bytes(b"abc"), fingerprint_bytes(b"abc"));
        assert_ne!(fingerprint_bytes(b"abc"), fingerprint_bytes(b"abd"));
        assert_eq!(fingerprint_bytes(b""), "cbf29ce484222325");
    }
}
