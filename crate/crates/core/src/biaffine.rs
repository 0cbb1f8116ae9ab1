//! Biaffine arc and relation scoring applied directly to encoder outputs,
//! plus the combined parsing loss.
//!
//! With `X` the dependent matrix `(N x H)` and `X'` the head-candidate
//! matrix `((N+1) x H)`, column 0 the root:
//!
//! ```text
//! Y_arc[i, j]    = x_i W_arc x'_j + b_arc . x'_j
//! Y_rel[i, j, r] = x_i W_rel[r]  x'_j + b_rel[:, r] . x'_j
//! ```
//!
//! The bias terms condition on the head candidate only, which keeps their
//! shape independent of sentence length. There are no dependent- or
//! head-specific MLPs in front of the products.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{init_param, InitScheme, ParamRegistry, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BiaffineError {
    #[error("gold head {head} out of range for sentence of {n} words")]
    GoldHeadOutOfRange { head: usize, n: usize },
    #[error("gold relation {rel} out of range for {r} relations")]
    GoldRelOutOfRange { rel: usize, r: usize },
    #[error("{what} count {got} does not match {n} dependents")]
    GoldCount {
        what: &'static str,
        got: usize,
        n: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Arc/relation scores for one sentence. `rel` is laid out with one row per
/// (dependent, head) pair — row `i * (N+1) + j` scores all relations for
/// attaching dependent `i` to head `j`.
pub struct ParseScores {
    pub arc: Tensor,
    pub rel: Tensor,
    pub n_words: usize,
    pub n_rels: usize,
}

impl ParseScores {
    /// `Y_rel[i, j, r]`
    pub fn rel_score(&self, dep: usize, head: usize, rel: usize) -> f64 {
        let row = dep * (self.n_words + 1) + head;
        self.rel.data_ref()[row * self.n_rels + rel]
    }
}

pub struct BiaffineHead {
    pub w_arc: Tensor,
    pub b_arc: Tensor,
    /// `(R, H, H)`: slice `r` is the relation-`r` bilinear form.
    pub w_rel: Tensor,
    /// `(H, R)` head-conditioned relation bias.
    pub b_rel: Tensor,
    pub hidden: usize,
    pub n_rels: usize,
}

impl BiaffineHead {
    pub fn new(hidden: usize, n_rels: usize, rng: &mut ChaCha8Rng) -> BiaffineHead {
        assert!(n_rels >= 1);
        // encoder outputs are layer-normed (row norm ~ sqrt(H)), so a 1/H
        // weight scale keeps initial arc logits near unit variance
        let scale = InitScheme::Normal(1.0 / hidden as f64);
        BiaffineHead {
            w_arc: init_param(vec![hidden, hidden], scale, rng).expect("valid shape"),
            b_arc: init_param(vec![hidden], InitScheme::Zeros, rng).expect("valid shape"),
            w_rel: init_param(vec![n_rels, hidden, hidden], scale, rng).expect("valid shape"),
            b_rel: init_param(vec![hidden, n_rels], InitScheme::Zeros, rng).expect("valid shape"),
            hidden,
            n_rels,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        reg.insert("parse/W_arc", self.w_arc.clone());
        reg.insert("parse/b_arc", self.b_arc.clone());
        reg.insert("parse/W_rel", self.w_rel.clone());
        reg.insert("parse/b_rel", self.b_rel.clone());
    }

    /// `Y_arc = X W_arc X'^T + (X' b_arc)^T` of shape `(N, N+1)`.
    pub fn score_arcs(
        &self,
        tape: &Tape,
        x: &Tensor,
        xp: &Tensor,
    ) -> Result<Tensor, BiaffineError> {
        let xpt = tape.transpose(xp)?;
        let bilinear = tape.matmul(&tape.matmul(x, &self.w_arc)?, &xpt)?;
        let b_col = tape.reshape(&self.b_arc, vec![self.hidden, 1])?;
        let head_bias = tape.transpose(&tape.matmul(xp, &b_col)?)?; // (1, N+1)
        let bias_vec = tape.reshape(&head_bias, vec![xp.rows()])?;
        Ok(tape.add(&bilinear, &bias_vec)?)
    }

    /// Relation scores `(N*(N+1), R)`; see [`ParseScores`] for the layout.
    pub fn score_rels(
        &self,
        tape: &Tape,
        x: &Tensor,
        xp: &Tensor,
    ) -> Result<Tensor, BiaffineError> {
        let n = x.rows();
        let n_heads = xp.rows();
        let xpt = tape.transpose(xp)?;
        let w_flat = tape.reshape(&self.w_rel, vec![self.n_rels * self.hidden, self.hidden])?;
        let mut cols = Vec::with_capacity(self.n_rels);
        for r in 0..self.n_rels {
            let w_r = tape.slice_rows(&w_flat, r * self.hidden, (r + 1) * self.hidden)?;
            let s_r = tape.matmul(&tape.matmul(x, &w_r)?, &xpt)?; // (N, N+1)
            cols.push(tape.reshape(&s_r, vec![n * n_heads, 1])?);
        }
        let bilinear = tape.concat_cols(&cols)?;
        let head_bias = tape.matmul(xp, &self.b_rel)?; // (N+1, R)
        let tiled = tape.concat_rows(&vec![head_bias; n])?; // (N*(N+1), R)
        Ok(tape.add(&bilinear, &tiled)?)
    }

    pub fn score(
        &self,
        tape: &Tape,
        x: &Tensor,
        xp: &Tensor,
    ) -> Result<ParseScores, BiaffineError> {
        Ok(ParseScores {
            arc: self.score_arcs(tape, x, xp)?,
            rel: self.score_rels(tape, x, xp)?,
            n_words: x.rows(),
            n_rels: self.n_rels,
        })
    }
}

/// Sum of the two cross-entropies, each averaged over dependents: the arc
/// loss over the N+1 head candidates, and the relation loss over relations
/// at the *gold* head column.
pub fn parsing_loss(
    tape: &Tape,
    scores: &ParseScores,
    gold_heads: &[usize],
    gold_rels: &[usize],
) -> Result<Tensor, BiaffineError> {
    let n = scores.n_words;
    if gold_heads.len() != n {
        return Err(BiaffineError::GoldCount {
            what: "gold head",
            got: gold_heads.len(),
            n,
        });
    }
    if gold_rels.len() != n {
        return Err(BiaffineError::GoldCount {
            what: "gold relation",
            got: gold_rels.len(),
            n,
        });
    }
    for &h in gold_heads {
        if h > n {
            return Err(BiaffineError::GoldHeadOutOfRange { head: h, n });
        }
    }
    for &r in gold_rels {
        if r >= scores.n_rels {
            return Err(BiaffineError::GoldRelOutOfRange {
                rel: r,
                r: scores.n_rels,
            });
        }
    }
    let arc_logp = tape.log_softmax_rows(&scores.arc)?;
    let arc_loss = tape.negative_pick_mean(&arc_logp, gold_heads)?;

    let gold_rows: Vec<usize> = gold_heads
        .iter()
        .enumerate()
        .map(|(i, &h)| i * (n + 1) + h)
        .collect();
    let rel_at_gold = tape.gather_rows(&scores.rel, &gold_rows)?; // (N, R)
    let rel_logp = tape.log_softmax_rows(&rel_at_gold)?;
    let rel_loss = tape.negative_pick_mean(&rel_logp, gold_rels)?;

    Ok(tape.add(&arc_loss, &rel_loss)?)
}
