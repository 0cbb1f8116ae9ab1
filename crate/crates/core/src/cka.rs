//! Layer-wise linear centered kernel alignment between model variants.
//!
//! Each sentence is represented by the average of its subword vectors at a
//! given layer (sequence start/end tokens excluded). For two representation
//! matrices with matching rows,
//!
//! ```text
//! l-CKA(X1, X2) = ||X2^T X1||_F^2 / (||X1^T X1||_F * ||X2^T X2||_F)
//! ```
//!
//! computed after column-wise mean-centering. The score is invariant to
//! orthogonal transforms and isotropic scaling of either side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::Vocab;
use crate::treebank::Sentence;

#[derive(Debug, Error)]
pub enum CkaError {
    #[error("need at least 2 sentences, got {0}")]
    TooFewRows(usize),
    #[error("representation matrices disagree: {0}")]
    ShapeMismatch(String),
    #[error("zero-variance representations make the score undefined")]
    ZeroVariance,
    #[error("sentence has no content subwords")]
    EmptySentence,
    #[error("models disagree on architecture: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Mean of the non-special subword vectors at `layer` for one sentence.
pub fn sentence_repr(
    encoder: &Encoder,
    vocab: &Vocab,
    sentence: &Sentence,
    layer: usize,
) -> Result<Vec<f64>, CkaError> {
    let encoded = vocab.encode_words(&sentence.forms());
    if encoded.ids.len() <= 2 {
        return Err(CkaError::EmptySentence);
    }
    let tape = Tape::eval();
    let states = encoder.encode_single(&tape, &encoded.ids, None)?;
    let state = &states.states[layer];
    let content = tape
        .slice_rows(state, 1, encoded.ids.len() - 1)
        .map_err(EncoderError::from)?;
    let mean = tape.mean_rows(&content).map_err(EncoderError::from)?;
    Ok(mean.data())
}

/// Representation matrix `(|S| x H)` for a sentence set at one layer.
pub fn representation_matrix(
    encoder: &Encoder,
    vocab: &Vocab,
    sentences: &[Sentence],
    layer: usize,
) -> Result<Tensor, CkaError> {
    if sentences.len() < 2 {
        return Err(CkaError::TooFewRows(sentences.len()));
    }
    let h = encoder.config.hidden;
    let mut data = Vec::with_capacity(sentences.len() * h);
    for s in sentences {
        data.extend(sentence_repr(encoder, vocab, s, layer)?);
    }
    Ok(Tensor::from_vec(vec![sentences.len(), h], data).expect("consistent shape"))
}

/// Subtracts each column's mean; centered columns sum to zero.
pub fn center_columns(x: &Tensor) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let data = x.data();
    let mut means = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            means[j] += data[i * m + j];
        }
    }
    for mu in means.iter_mut() {
        *mu /= n as f64;
    }
    let centered: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(idx, v)| v - means[idx % m])
        .collect();
    Tensor::from_vec(vec![n, m], centered).expect("same shape")
}

fn cross_frobenius_sq(a: &Tensor, b: &Tensor) -> f64 {
    // ||B^T A||_F^2 without materializing the product transpose
    let (n, ma) = (a.rows(), a.cols());
    let mb = b.cols();
    let ad = a.data_ref();
    let bd = b.data_ref();
    let mut total = 0.0;
    for p in 0..mb {
        for q in 0..ma {
            let mut entry = 0.0;
            for i in 0..n {
                entry += bd[i * mb + p] * ad[i * ma + q];
            }
            total += entry * entry;
        }
    }
    total
}

/// The l-CKA score in `[0, 1]`. Inputs are centered here regardless of any
/// centering the caller already did (idempotent).
pub fn linear_cka(x1: &Tensor, x2: &Tensor) -> Result<f64, CkaError> {
    if x1.rank() != 2 || x2.rank() != 2 || x1.rows() != x2.rows() {
        return Err(CkaError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    if x1.rows() < 2 {
        return Err(CkaError::TooFewRows(x1.rows()));
    }
    let c1 = center_columns(x1);
    let c2 = center_columns(x2);
    let denom1 = cross_frobenius_sq(&c1, &c1).sqrt();
    let denom2 = cross_frobenius_sq(&c2, &c2).sqrt();
    if denom1 == 0.0 || denom2 == 0.0 {
        return Err(CkaError::ZeroVariance);
    }
    Ok(cross_frobenius_sq(&c1, &c2) / (denom1 * denom2))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CkaReport {
    /// Tag of each compared pair, e.g. `("B", "P")`.
    pub pairs: Vec<(String, String)>,
    /// `scores[layer][pair]`, layers 0 (embeddings) through L.
    pub scores: Vec<Vec<f64>>,
    pub n_sentences: usize,
    pub sentence_set: String,
}

impl CkaReport {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// CSV with one row per layer and one column per pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for (a, b) in &self.pairs {
            out.push_str(&format!(",{a}-{b}"));
        }
        out.push('\n');
        for (layer, row) in self.scores.iter().enumerate() {
            out.push_str(&layer.to_string());
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every layer of two encoders over a shared sentence set. The
/// models must agree on depth and width and tokenize identically (enforced
/// upstream via the vocabulary fingerprint).
pub fn layer_report(
    tagged: &[(&str, &Encoder)],
    vocab: &Vocab,
    sentences: &[Sentence],
    sentence_set: &str,
) -> Result<CkaReport, CkaError> {
    let (l0, h0) = (
        tagged[0].1.config.layers,
        tagged[0].1.config.hidden,
    );
    for (tag, enc) in tagged {
        if enc.config.layers != l0 || enc.config.hidden != h0 {
            return Err(CkaError::ModelMismatch(format!(
                "variant {tag}: layers/hidden {} x {} vs {l0} x {h0}",
                enc.config.layers, enc.config.hidden
            )));
        }
    }
    let mut pairs = Vec::new();
    for i in 0..tagged.len() {
        for j in i + 1..tagged.len() {
            pairs.push((tagged[i].0.to_string(), tagged[j].0.to_string()));
        }
    }
    let mut scores = Vec::with_capacity(l0 + 1);
    for layer in 0..=l0 {
        let mats: Vec<Tensor> = tagged
            .iter()
            .map(|(_, enc)| representation_matrix(enc, vocab, sentences, layer))
            .collect::<Result<_, _>>()?;
        let mut row = Vec::with_capacity(pairs.len());
        for i in 0..tagged.len() {
            for j in i + 1..tagged.len() {
                row.push(linear_cka(&mats[i], &mats[j])?);
            }
        }
        scores.push(row);
    }
    Ok(CkaReport {
        pairs,
        scores,
        n_sentences: sentences.len(),
        sentence_set: sentence_set.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        Tensor::from_vec(
            vec![n, m],
            (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_matrix_centers_to_zero() {
        let x = Tensor::from_vec(vec![3, 2], vec![5.0; 6]).unwrap();
        let c = center_columns(&x);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_input_is_unchanged() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        let c = center_columns(&x);
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn column_sums_vanish_after_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 7, 5);
            let c = center_columns(&x).data();
            for j in 0..5 {
                let s: f64 = (0..7).map(|i| c[i * 5 + j]).sum();
                assert!(s.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 20, 8);
        let score = linear_cka(&x, &x).unwrap();
        assert!((score - 1.0).abs() < 1e-10);
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        // Gram-Schmidt on a random square matrix
        let mut cols: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for i in 0..m {
            for j in 0..i {
                let dot: f64 = (0..m).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..m {
                    cols[i][k] -= dot * cols[j][k];
                }
            }
            let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..m {
                cols[i][k] /= norm;
            }
        }
        let mut q = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                q[i * m + j] = cols[j][i];
            }
        }
        q
    }

    #[test]
    fn invariant_to_orthogonal_transform_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (30, 6);
        let x = random_matrix(&mut rng, n, m);
        let q = random_orthogonal(&mut rng, m);
        let xd = x.data();
        let mut rotated = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                rotated[i * m + j] = (0..m).map(|k| xd[i * m + k] * q[k * m + j]).sum();
            }
        }
        let xq = Tensor::from_vec(vec![n, m], rotated).unwrap();
        assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-10);
        let xc = Tensor::from_vec(vec![n, m], xd.iter().map(|v| v * -3.7).collect::<Vec<_>>()).unwrap();
        assert!((linear_cka(&x, &xc).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_and_bounded_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 15, 7);
            let y = random_matrix(&mut rng, 15, 7);
            let ab = linear_cka(&x, &y).unwrap();
            let ba = linear_cka(&y, &x).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&ab), "score {ab}");
        }
    }

    #[test]
    fn matches_gram_matrix_double_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (200, 64);
        let x1 = random_matrix(&mut rng, n, m);
        let x2 = random_matrix(&mut rng, n, m);
        let got = linear_cka(&x1, &x2).unwrap();

        // reference: explicit centered matrices and naive norms
        let (c1, c2) = (center_columns(&x1).data(), center_columns(&x2).data());
        let frob = |a: &[f64], b: &[f64]| -> f64 {
            let mut total = 0.0;
            for p in 0..m {
                for q in 0..m {
                    let mut e = 0.0;
                    for i in 0..n {
                        e += a[i * m + p] * b[i * m + q];
                    }
                    total += e * e;
                }
            }
            total
        };
        let want = frob(&c2, &c1) / (frob(&c1, &c1).sqrt() * frob(&c2, &c2).sqrt());
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn zero_variance_is_an_error() {
        let x = Tensor::from_vec(vec![3, 2], vec![1.0; 6]).unwrap();
        let y = Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(matches!(linear_cka(&x, &y), Err(CkaError::ZeroVariance)));
    }

    #[test]
    fn row_count_mismatch_is_an_error() {
        let x = Tensor::zeros(vec![3, 2]);
        let y = Tensor::zeros(vec![4, 2]);
        assert!(matches!(linear_cka(&x, &y), Err(CkaError::ShapeMismatch(_))));
    }
}
