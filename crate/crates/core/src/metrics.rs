//! Evaluation metrics: attachment scores, classification accuracy, greedy
//! tree-rate, and masked-token prediction accuracy.
//!
//! Every token counts — punctuation included, following the CoNLL 2018
//! shared-task convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::PredictedTree;
use crate::tensor::Tensor;
use crate::treebank::{LabelInventory, Sentence};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpora are misaligned: {0}")]
    Misaligned(String),
    #[error("prediction/gold length mismatch: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("no masked positions to score")]
    EmptyMasks,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParseEval {
    pub uas: f64,
    pub las: f64,
    /// Percent of sentences whose decoded heads form a valid tree.
    pub tree_rate: f64,
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub correct_heads: usize,
    pub correct_labeled: usize,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// UAS = % tokens with the correct head; LAS additionally requires the
/// correct relation label. Label comparison happens on strings so unseen
/// gold labels can never be "predicted" via the reserved index.
pub fn uas_las(
    predictions: &[PredictedTree],
    gold: &[Sentence],
    inventory: &LabelInventory,
) -> Result<ParseEval, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::Misaligned(format!(
            "{} predictions vs {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    let mut n_tokens = 0;
    let mut correct_heads = 0;
    let mut correct_labeled = 0;
    let mut trees = 0;
    for (k, (pred, sent)) in predictions.iter().zip(gold.iter()).enumerate() {
        if pred.heads.len() != sent.len() {
            return Err(MetricsError::Misaligned(format!(
                "sentence {k}: {} predicted heads vs {} tokens",
                pred.heads.len(),
                sent.len()
            )));
        }
        if pred.is_tree {
            trees += 1;
        }
        for (i, tok) in sent.tokens.iter().enumerate() {
            n_tokens += 1;
            if pred.heads[i] == tok.head {
                correct_heads += 1;
                let pred_label = pred
                    .rels
                    .get(i)
                    .map(|&r| inventory.label_of(r))
                    .unwrap_or("");
                if pred_label == tok.deprel {
                    correct_labeled += 1;
                }
            }
        }
    }
    Ok(ParseEval {
        uas: pct(correct_heads, n_tokens),
        las: pct(correct_labeled, n_tokens),
        tree_rate: pct(trees, predictions.len()),
        n_sentences: predictions.len(),
        n_tokens,
        correct_heads,
        correct_labeled,
    })
}

/// Fraction of matching labels, as a percentage.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let correct = pred.iter().zip(gold.iter()).filter(|(a, b)| a == b).count();
    Ok(pct(correct, pred.len()))
}

/// Percent of masked positions where the argmax logit (ties toward the
/// smaller id) hits the target.
pub fn mlm_accuracy(logits: &Tensor, targets: &[u32]) -> Result<f64, MetricsError> {
    if targets.is_empty() {
        return Err(MetricsError::EmptyMasks);
    }
    debug_assert_eq!(logits.rows(), targets.len());
    let v = logits.cols();
    let data = logits.data_ref();
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &data[i * v..(i + 1) * v];
        let mut best = 0usize;
        for (j, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = j;
            }
        }
        if best == t as usize {
            correct += 1;
        }
    }
    Ok(pct(correct, targets.len()))
}

/// One decimal place, the reporting convention for attachment scores.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}
