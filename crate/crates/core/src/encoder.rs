//! Miniature transformer encoder.
//!
//! Pre-norm blocks with learned absolute position and segment embeddings.
//! Each layer can carry two zero-initialized bottleneck adapters (one after
//! the attention sublayer, one after the feed-forward sublayer); until their
//! up-projections train away from zero the adapted model computes exactly
//! the base model's function.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{init_param, InitScheme, ParamRegistry, Tape, Tensor, TensorError};
use crate::tokenizer::Encoded;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence of {len} subwords exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("adapters are already injected")]
    AdaptersAlreadyInjected,
    #[error("word span [{start}, {end}) is outside the {len}-subword sequence")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 512,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 8000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) {
        assert!(self.hidden % self.heads == 0, "hidden must divide by heads");
        assert!((0.0..1.0).contains(&self.dropout), "dropout must be in [0,1)");
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdapterConfig {
    pub size: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { size: 64 }
    }
}

/// Per-layer representations: index 0 is the embedding sum, index `L` the
/// final block output (with the closing layer norm applied).
pub struct LayerStates {
    pub states: Vec<Tensor>,
}

impl LayerStates {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("at least the embedding layer")
    }
}

const LN_EPS: f64 = 1e-5;

pub struct Encoder {
    pub config: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    pub params: ParamRegistry,
}

fn p<'a>(reg: &'a ParamRegistry, name: &str) -> &'a Tensor {
    reg.get(name)
        .unwrap_or_else(|| panic!("missing parameter `{name}`"))
}

impl Encoder {
    /// Fresh encoder with Xavier weight matrices, zero biases, unit layer
    /// norm gains, and N(0, 0.02) embeddings.
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Encoder {
        config.validate();
        let mut params = ParamRegistry::new();
        let h = config.hidden;
        let xavier = InitScheme::XavierUniform;
        let add = |reg: &mut ParamRegistry, name: String, shape: Vec<usize>, scheme: InitScheme, rng: &mut ChaCha8Rng| {
            reg.insert(name, init_param(shape, scheme, rng).expect("valid init"));
        };
        add(&mut params, "base/embed/token".into(), vec![config.vocab_size, h], InitScheme::Normal(0.02), rng);
        add(&mut params, "base/embed/pos".into(), vec![config.max_len, h], InitScheme::Normal(0.02), rng);
        add(&mut params, "base/embed/seg".into(), vec![2, h], InitScheme::Normal(0.02), rng);
        for l in 0..config.layers {
            let pre = format!("base/layer{l}");
            add(&mut params, format!("{pre}/ln1/gamma"), vec![h], InitScheme::Ones, rng);
            add(&mut params, format!("{pre}/ln1/beta"), vec![h], InitScheme::Zeros, rng);
            for w in ["wq", "wk", "wv", "wo"] {
                add(&mut params, format!("{pre}/attn/{w}"), vec![h, h], xavier, rng);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                add(&mut params, format!("{pre}/attn/{b}"), vec![h], InitScheme::Zeros, rng);
            }
            add(&mut params, format!("{pre}/ln2/gamma"), vec![h], InitScheme::Ones, rng);
            add(&mut params, format!("{pre}/ln2/beta"), vec![h], InitScheme::Zeros, rng);
            add(&mut params, format!("{pre}/ffn/w1"), vec![h, config.ffn], xavier, rng);
            add(&mut params, format!("{pre}/ffn/b1"), vec![config.ffn], InitScheme::Zeros, rng);
            add(&mut params, format!("{pre}/ffn/w2"), vec![config.ffn, h], xavier, rng);
            add(&mut params, format!("{pre}/ffn/b2"), vec![h], InitScheme::Zeros, rng);
        }
        add(&mut params, "base/ln_f/gamma".into(), vec![h], InitScheme::Ones, rng);
        add(&mut params, "base/ln_f/beta".into(), vec![h], InitScheme::Zeros, rng);
        Encoder {
            config,
            adapter: None,
            params,
        }
    }

    /// Registers two bottleneck adapters per layer. Down-projections are
    /// Xavier, up-projections zero, so outputs are bit-identical to the base
    /// model until training moves them.
    pub fn inject_adapters(
        &mut self,
        cfg: AdapterConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), EncoderError> {
        if self.adapter.is_some() {
            return Err(EncoderError::AdaptersAlreadyInjected);
        }
        assert!(cfg.size < self.config.hidden, "adapter size must be below hidden");
        let h = self.config.hidden;
        for l in 0..self.config.layers {
            for site in ["attn", "ffn"] {
                let pre = format!("adapter/layer{l}/{site}");
                self.params.insert(
                    format!("{pre}/down_w"),
                    init_param(vec![h, cfg.size], InitScheme::XavierUniform, rng)
                        .expect("valid init"),
                );
                self.params.insert(
                    format!("{pre}/down_b"),
                    init_param(vec![cfg.size], InitScheme::Zeros, rng).expect("valid init"),
                );
                self.params.insert(
                    format!("{pre}/up_w"),
                    init_param(vec![cfg.size, h], InitScheme::Zeros, rng).expect("valid init"),
                );
                self.params.insert(
                    format!("{pre}/up_b"),
                    init_param(vec![h], InitScheme::Zeros, rng).expect("valid init"),
                );
            }
        }
        self.adapter = Some(cfg);
        Ok(())
    }

    /// Parameter count added by adapter injection.
    pub fn adapter_param_count(&self) -> usize {
        self.params
            .select(|n| n.starts_with("adapter/"))
            .iter()
            .map(|(_, t)| t.len())
            .sum()
    }

    fn adapter_block(
        &self,
        tape: &Tape,
        x: &Tensor,
        layer: usize,
        site: &str,
    ) -> Result<Tensor, EncoderError> {
        let pre = format!("adapter/layer{layer}/{site}");
        let down = tape.add(
            &tape.matmul(x, p(&self.params, &format!("{pre}/down_w")))?,
            p(&self.params, &format!("{pre}/down_b")),
        )?;
        let mid = tape.gelu(&down)?;
        let up = tape.add(
            &tape.matmul(&mid, p(&self.params, &format!("{pre}/up_w")))?,
            p(&self.params, &format!("{pre}/up_b")),
        )?;
        Ok(tape.add(x, &up)?)
    }

    /// Runs the encoder over one id sequence. `rng` carries train-mode
    /// dropout; pass `None` for deterministic eval behavior.
    pub fn encode(
        &self,
        tape: &Tape,
        ids: &[u32],
        segments: &[u8],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LayerStates, EncoderError> {
        let t_len = ids.len();
        if t_len > self.config.max_len {
            return Err(EncoderError::SequenceTooLong {
                len: t_len,
                max_len: self.config.max_len,
            });
        }
        debug_assert_eq!(ids.len(), segments.len());
        let h = self.config.hidden;
        let n_heads = self.config.heads;
        let head_dim = h / n_heads;
        let reg = &self.params;

        let id_idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_idx: Vec<usize> = (0..t_len).collect();
        let seg_idx: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let tok = tape.gather_rows(p(reg, "base/embed/token"), &id_idx)?;
        let pos = tape.gather_rows(p(reg, "base/embed/pos"), &pos_idx)?;
        let seg = tape.gather_rows(p(reg, "base/embed/seg"), &seg_idx)?;
        let emb = tape.add(&tape.add(&tok, &pos)?, &seg)?;

        let mut states = Vec::with_capacity(self.config.layers + 1);
        states.push(emb.clone());

        let drop = |tape: &Tape, x: &Tensor, rng: &mut Option<&mut ChaCha8Rng>| -> Result<Tensor, TensorError> {
            match rng.as_deref_mut() {
                Some(r) => tape.dropout(x, self.config.dropout, true, r),
                None => Ok(x.clone()),
            }
        };

        let mut x = drop(tape, &emb, &mut rng)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for l in 0..self.config.layers {
            let pre = format!("base/layer{l}");
            let xn = tape.layer_norm(
                &x,
                p(reg, &format!("{pre}/ln1/gamma")),
                p(reg, &format!("{pre}/ln1/beta")),
                LN_EPS,
            )?;
            let q = tape.add(&tape.matmul(&xn, p(reg, &format!("{pre}/attn/wq")))?, p(reg, &format!("{pre}/attn/bq")))?;
            let k = tape.add(&tape.matmul(&xn, p(reg, &format!("{pre}/attn/wk")))?, p(reg, &format!("{pre}/attn/bk")))?;
            let v = tape.add(&tape.matmul(&xn, p(reg, &format!("{pre}/attn/wv")))?, p(reg, &format!("{pre}/attn/bv")))?;
            let mut head_outs = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let (a, b) = (hd * head_dim, (hd + 1) * head_dim);
                let qh = tape.slice_cols(&q, a, b)?;
                let kh = tape.slice_cols(&k, a, b)?;
                let vh = tape.slice_cols(&v, a, b)?;
                let logits = tape.mul_scalar(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
                let probs = tape.softmax_rows(&logits)?;
                head_outs.push(tape.matmul(&probs, &vh)?);
            }
            let attn = tape.concat_cols(&head_outs)?;
            let attn = tape.add(&tape.matmul(&attn, p(reg, &format!("{pre}/attn/wo")))?, p(reg, &format!("{pre}/attn/bo")))?;
            let attn = drop(tape, &attn, &mut rng)?;
            x = tape.add(&x, &attn)?;
            if self.adapter.is_some() {
                x = self.adapter_block(tape, &x, l, "attn")?;
            }

            let xn2 = tape.layer_norm(
                &x,
                p(reg, &format!("{pre}/ln2/gamma")),
                p(reg, &format!("{pre}/ln2/beta")),
                LN_EPS,
            )?;
            let ff = tape.add(&tape.matmul(&xn2, p(reg, &format!("{pre}/ffn/w1")))?, p(reg, &format!("{pre}/ffn/b1")))?;
            let ff = tape.gelu(&ff)?;
            let ff = tape.add(&tape.matmul(&ff, p(reg, &format!("{pre}/ffn/w2")))?, p(reg, &format!("{pre}/ffn/b2")))?;
            let ff = drop(tape, &ff, &mut rng)?;
            x = tape.add(&x, &ff)?;
            if self.adapter.is_some() {
                x = self.adapter_block(tape, &x, l, "ffn")?;
            }

            if l + 1 == self.config.layers {
                x = tape.layer_norm(
                    &x,
                    p(reg, "base/ln_f/gamma"),
                    p(reg, "base/ln_f/beta"),
                    LN_EPS,
                )?;
            }
            states.push(x.clone());
        }
        Ok(LayerStates { states })
    }

    /// Convenience for single-segment sequences.
    pub fn encode_single(
        &self,
        tape: &Tape,
        ids: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LayerStates, EncoderError> {
        let segments = vec![0u8; ids.len()];
        self.encode(tape, ids, &segments, rng)
    }
}

/// Word vectors by averaging each word's subword rows: `(N x H)`.
pub fn pool_words(
    tape: &Tape,
    layer_state: &Tensor,
    encoded: &Encoded,
) -> Result<Tensor, EncoderError> {
    let t_len = layer_state.rows();
    let mut rows = Vec::with_capacity(encoded.alignment.spans.len());
    for &(start, end) in &encoded.alignment.spans {
        if start >= end || end > t_len {
            return Err(EncoderError::SpanOutOfRange {
                start,
                end,
                len: t_len,
            });
        }
        let span = tape.slice_rows(layer_state, start, end)?;
        rows.push(tape.mean_rows(&span)?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Head-candidate matrix `X' = [x_cls ; X]` of shape `((N+1) x H)`: the
/// sequence-start vector represents the root node; dependents stay in `X`.
pub fn parser_inputs(
    tape: &Tape,
    layer_state: &Tensor,
    pooled: &Tensor,
) -> Result<Tensor, EncoderError> {
    let cls = tape.slice_rows(layer_state, 0, 1)?;
    Ok(tape.concat_rows(&[cls, pooled.clone()])?)
}

/// Dropout on representations flowing into task heads (p = 0.1 site).
pub fn head_dropout(
    tape: &Tape,
    x: &Tensor,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, EncoderError> {
    match rng {
        Some(r) => Ok(tape.dropout(x, p, true, r)?),
        None => Ok(x.clone()),
    }
}
