//! Downstream task heads: sequence classification, multiple-choice
//! classification with a shared scalar scorer, and the masked-LM head with
//! its masking procedure.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{init_param, InitScheme, ParamRegistry, Tape, Tensor, TensorError};
use crate::tokenizer::{Vocab, CLS, MASK, SEP};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("sentence has no maskable (non-special) positions")]
    NothingToMask,
    #[error("masking rate {0} must lie in (0, 1]")]
    BadMaskRate(f64),
    #[error("no mask positions supplied")]
    EmptyMaskSet,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Softmax classifier over `C` labels from the sequence-start vector.
pub struct SeqcHead {
    pub w: Tensor,
    pub b: Tensor,
    pub n_classes: usize,
}

impl SeqcHead {
    pub fn new(hidden: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> SeqcHead {
        assert!(n_classes >= 2);
        SeqcHead {
            w: init_param(vec![hidden, n_classes], InitScheme::XavierUniform, rng)
                .expect("valid shape"),
            b: init_param(vec![n_classes], InitScheme::Zeros, rng).expect("valid shape"),
            n_classes,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        reg.insert("seqc/W_sc", self.w.clone());
        reg.insert("seqc/b_sc", self.b.clone());
    }

    /// `y = softmax(x_cls W + b)`, a `(1, C)` distribution.
    pub fn forward(&self, tape: &Tape, x_cls: &Tensor) -> Result<Tensor, HeadError> {
        let logits = tape.add(&tape.matmul(x_cls, &self.w)?, &self.b)?;
        Ok(tape.softmax_rows(&logits)?)
    }

    /// Cross-entropy against a gold label, from logits (not probabilities).
    pub fn loss(&self, tape: &Tape, x_cls: &Tensor, gold: usize) -> Result<Tensor, HeadError> {
        let logits = tape.add(&tape.matmul(x_cls, &self.w)?, &self.b)?;
        let logp = tape.log_softmax_rows(&logits)?;
        Ok(tape.negative_pick_mean(&logp, &[gold])?)
    }
}

/// Multiple-choice scorer: one scalar per answer from a shared feed-forward
/// net, then softmax over the K answers. Parameter count does not depend on
/// K, so the head transfers between tasks with different answer counts.
pub struct MccHead {
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_o: Tensor,
}

impl MccHead {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> MccHead {
        MccHead {
            w_h: init_param(vec![hidden, hidden], InitScheme::XavierUniform, rng)
                .expect("valid shape"),
            b_h: init_param(vec![hidden], InitScheme::Zeros, rng).expect("valid shape"),
            w_o: init_param(vec![hidden, 1], InitScheme::XavierUniform, rng)
                .expect("valid shape"),
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        reg.insert("mcc/W_h", self.w_h.clone());
        reg.insert("mcc/b_h", self.b_h.clone());
        reg.insert("mcc/W_o", self.w_o.clone());
    }

    pub fn param_count(&self) -> usize {
        self.w_h.len() + self.b_h.len() + self.w_o.len()
    }

    /// `y_i = W_o tanh(W_h x_i + b_h)` per answer, in one stacked pass.
    fn answer_scores(&self, tape: &Tape, x_cls_per_answer: &[Tensor]) -> Result<Tensor, HeadError> {
        assert!(x_cls_per_answer.len() >= 2, "need at least two answers");
        let stacked = tape.concat_rows(x_cls_per_answer)?; // (K, H)
        let hidden = tape.tanh(&tape.add(&tape.matmul(&stacked, &self.w_h)?, &self.b_h)?)?;
        let scores = tape.matmul(&hidden, &self.w_o)?; // (K, 1)
        tape.reshape(&scores, vec![1, x_cls_per_answer.len()])
            .map_err(Into::into)
    }

    /// Softmax over the per-answer scalar scores: a `(1, K)` distribution.
    pub fn forward(&self, tape: &Tape, x_cls_per_answer: &[Tensor]) -> Result<Tensor, HeadError> {
        let scores = self.answer_scores(tape, x_cls_per_answer)?;
        Ok(tape.softmax_rows(&scores)?)
    }

    /// Cross-entropy against the correct answer index.
    pub fn loss(
        &self,
        tape: &Tape,
        x_cls_per_answer: &[Tensor],
        correct: usize,
    ) -> Result<Tensor, HeadError> {
        let scores = self.answer_scores(tape, x_cls_per_answer)?;
        let logp = tape.log_softmax_rows(&scores)?;
        Ok(tape.negative_pick_mean(&logp, &[correct])?)
    }
}

/// Linear vocabulary projection applied at masked positions.
pub struct MlmHead {
    pub w: Tensor,
    pub b: Tensor,
    pub vocab_size: usize,
}

impl MlmHead {
    pub fn new(hidden: usize, vocab_size: usize, rng: &mut ChaCha8Rng) -> MlmHead {
        MlmHead {
            w: init_param(vec![hidden, vocab_size], InitScheme::XavierUniform, rng)
                .expect("valid shape"),
            b: init_param(vec![vocab_size], InitScheme::Zeros, rng).expect("valid shape"),
            vocab_size,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        reg.insert("mlm/W", self.w.clone());
        reg.insert("mlm/b", self.b.clone());
    }

    /// Logits `(k, V)` for the final-layer states at the masked positions.
    pub fn forward(&self, tape: &Tape, masked_states: &Tensor) -> Result<Tensor, HeadError> {
        Ok(tape.add(&tape.matmul(masked_states, &self.w)?, &self.b)?)
    }

    /// Mean cross-entropy over masked positions.
    pub fn loss(
        &self,
        tape: &Tape,
        masked_states: &Tensor,
        targets: &[u32],
    ) -> Result<Tensor, HeadError> {
        if targets.is_empty() {
            return Err(HeadError::EmptyMaskSet);
        }
        let logits = self.forward(tape, masked_states)?;
        let logp = tape.log_softmax_rows(&logits)?;
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(tape.negative_pick_mean(&logp, &idx)?)
    }
}

/// A masked copy of one sentence's ids: inputs with MASK substituted,
/// original ids at those positions, and where they are.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub input_ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Replaces `max(1, round(rate * maskable))` non-special positions with
/// MASK, sampled without replacement. Every selected position becomes MASK
/// outright.
pub fn mlm_mask(ids: &[u32], rate: f64, rng: &mut ChaCha8Rng) -> Result<MlmBatch, HeadError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(HeadError::BadMaskRate(rate));
    }
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !Vocab::is_special(id))
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(HeadError::NothingToMask);
    }
    let k = ((rate * maskable.len() as f64).round() as usize).max(1);
    let mut chosen = maskable;
    chosen.shuffle(rng);
    chosen.truncate(k);
    chosen.sort_unstable();
    let mut input_ids = ids.to_vec();
    let targets: Vec<u32> = chosen.iter().map(|&p| ids[p]).collect();
    for &p in &chosen {
        input_ids[p] = MASK;
    }
    Ok(MlmBatch {
        input_ids,
        positions: chosen,
        targets,
    })
}

/// `[CLS] a [SEP] b [SEP]` with segment ids 0 through the first SEP and 1
/// after. On overflow the second text loses subwords from the right first;
/// the structural tokens and as much of the first text as fits survive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEncoded {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

pub fn pair_encode(
    vocab: &Vocab,
    text_a: &[String],
    text_b: &[String],
    max_len: usize,
) -> PairEncoded {
    assert!(max_len >= 4, "need room for CLS, two SEPs, and a subword");
    let mut a_ids: Vec<u32> = text_a.iter().flat_map(|w| vocab.encode_word(w)).collect();
    let mut b_ids: Vec<u32> = text_b.iter().flat_map(|w| vocab.encode_word(w)).collect();
    let budget = max_len - 3; // CLS + SEP + SEP
    if a_ids.len() + b_ids.len() > budget {
        let keep_b = budget.saturating_sub(a_ids.len()).min(b_ids.len());
        b_ids.truncate(keep_b);
        if a_ids.len() + b_ids.len() > budget {
            a_ids.truncate(budget);
        }
    }
    let mut ids = Vec::with_capacity(a_ids.len() + b_ids.len() + 3);
    let mut segments = Vec::with_capacity(ids.capacity());
    ids.push(CLS);
    ids.extend(&a_ids);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    ids.extend(&b_ids);
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    PairEncoded { ids, segments }
}
