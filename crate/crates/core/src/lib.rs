//! Biaffine dependency parsing on a miniature transformer encoder, with the
//! machinery around it: CoNLL-U treebank IO, an f64 autodiff substrate, a
//! byte-level BPE tokenizer, tree decoding, sequential fine-tuning pipelines
//! (parsing-first, masked-LM-first, or direct), UD evaluation, and
//! layer-wise representation similarity analysis.

pub mod biaffine;
pub mod cka;
pub mod decode;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod treebank;
