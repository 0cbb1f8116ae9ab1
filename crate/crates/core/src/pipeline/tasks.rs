//! Stage tasks: each owns its pre-encoded data and head parameters and
//! exposes per-example training losses plus a deterministic dev loss.

use rand_chacha::ChaCha8Rng;

use crate::biaffine::BiaffineHead;
use crate::encoder::{head_dropout, parser_inputs, pool_words, Encoder};
use crate::heads::{mlm_mask, MccHead, MlmBatch, MlmHead, SeqcHead};
use crate::metrics::{accuracy, mlm_accuracy, uas_las, ParseEval};
use crate::synth::{MccInstance, SeqcInstance};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{Encoded, Vocab};
use crate::treebank::{LabelInventory, Sentence};

use super::PipelineError;

/// A trainable stage: parsing, masked LM, or a downstream classifier.
pub trait StageTask {
    fn name(&self) -> &'static str;
    /// Head parameters in sorted-name order, `(checkpoint name, tensor)`.
    fn head_params(&self) -> Vec<(String, Tensor)>;
    fn num_train(&self) -> usize;
    fn num_dev(&self) -> usize;
    /// Loss for one training example. `rng` carries dropout and any
    /// task-internal randomness (train-time masking).
    fn example_loss(
        &mut self,
        tape: &Tape,
        encoder: &Encoder,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PipelineError>;
    /// Mean dev loss in eval mode; deterministic.
    fn dev_loss(&mut self, encoder: &Encoder) -> Result<f64, PipelineError>;
    /// Example length, for length-bucketed batching.
    fn example_len(&self, index: usize) -> usize;
}

struct ParseExample {
    encoded: Encoded,
    gold_heads: Vec<usize>,
    gold_rels: Vec<usize>,
}

fn parse_example(s: &Sentence, vocab: &Vocab, inventory: &LabelInventory) -> ParseExample {
    ParseExample {
        encoded: vocab.encode_words(&s.forms()),
        gold_heads: s.gold_heads(),
        gold_rels: s
            .tokens
            .iter()
            .map(|t| inventory.index_of(&t.deprel))
            .collect(),
    }
}

/// Dependency parsing with the biaffine head.
pub struct ParseTask {
    pub head: BiaffineHead,
    pub inventory: LabelInventory,
    pub dropout: f64,
    train: Vec<ParseExample>,
    dev: Vec<ParseExample>,
}

impl ParseTask {
    pub fn new(
        train: &[Sentence],
        dev: &[Sentence],
        vocab: &Vocab,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParseTask, PipelineError> {
        if train.is_empty() || dev.is_empty() {
            return Err(PipelineError::EmptySplit("parse train/dev"));
        }
        let inventory = LabelInventory::from_sentences(train)?;
        let head = BiaffineHead::new(hidden, inventory.num_labels(), rng);
        Ok(ParseTask {
            train: train
                .iter()
                .map(|s| parse_example(s, vocab, &inventory))
                .collect(),
            dev: dev
                .iter()
                .map(|s| parse_example(s, vocab, &inventory))
                .collect(),
            head,
            inventory,
            dropout,
        })
    }

    fn loss_for(
        &self,
        tape: &Tape,
        encoder: &Encoder,
        ex: &ParseExample,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, PipelineError> {
        let states = encoder.encode_single(tape, &ex.encoded.ids, rng.as_deref_mut())?;
        let dropped = head_dropout(tape, states.final_state(), self.dropout, rng)?;
        let x = pool_words(tape, &dropped, &ex.encoded)?;
        let xp = parser_inputs(tape, &dropped, &x)?;
        let scores = self.head.score(tape, &x, &xp)?;
        Ok(crate::biaffine::parsing_loss(
            tape,
            &scores,
            &ex.gold_heads,
            &ex.gold_rels,
        )?)
    }

    /// Decodes a sentence set and scores it. Greedy by default, Edmonds on
    /// request; tree rate reflects the decoder actually used.
    pub fn evaluate(
        &self,
        encoder: &Encoder,
        sentences: &[Sentence],
        vocab: &Vocab,
        use_mst: bool,
    ) -> Result<ParseEval, PipelineError> {
        let mut preds = Vec::with_capacity(sentences.len());
        for s in sentences {
            let ex = parse_example(s, vocab, &self.inventory);
            let tape = Tape::eval();
            let states = encoder.encode_single(&tape, &ex.encoded.ids, None)?;
            let x = pool_words(&tape, states.final_state(), &ex.encoded)?;
            let xp = parser_inputs(&tape, states.final_state(), &x)?;
            let scores = self.head.score(&tape, &x, &xp)?;
            let mut tree = if use_mst {
                crate::decode::mst_decode(&scores.arc)
            } else {
                crate::decode::greedy_decode(&scores.arc)
            };
            tree.rels = crate::decode::assign_labels(&scores, &tree.heads);
            preds.push(tree);
        }
        Ok(uas_las(&preds, sentences, &self.inventory)?)
    }
}

impl StageTask for ParseTask {
    fn name(&self) -> &'static str {
        "parse"
    }

    fn head_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("parse/W_arc".into(), self.head.w_arc.clone()),
            ("parse/W_rel".into(), self.head.w_rel.clone()),
            ("parse/b_arc".into(), self.head.b_arc.clone()),
            ("parse/b_rel".into(), self.head.b_rel.clone()),
        ]
    }

    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn num_dev(&self) -> usize {
        self.dev.len()
    }

    fn example_loss(
        &mut self,
        tape: &Tape,
        encoder: &Encoder,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PipelineError> {
        let ex = &self.train[index];
        let states = encoder.encode_single(tape, &ex.encoded.ids, Some(rng))?;
        let dropped = head_dropout(tape, states.final_state(), self.dropout, Some(rng))?;
        let x = pool_words(tape, &dropped, &ex.encoded)?;
        let xp = parser_inputs(tape, &dropped, &x)?;
        let scores = self.head.score(tape, &x, &xp)?;
        Ok(crate::biaffine::parsing_loss(
            tape,
            &scores,
            &ex.gold_heads,
            &ex.gold_rels,
        )?)
    }

    fn dev_loss(&mut self, encoder: &Encoder) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        for ex in &self.dev {
            let tape = Tape::eval();
            total += self.loss_for(&tape, encoder, ex, None)?.item();
        }
        Ok(total / self.dev.len() as f64)
    }

    fn example_len(&self, index: usize) -> usize {
        self.train[index].encoded.ids.len()
    }
}

/// Masked language modeling on treebank sentences: dynamic masks for
/// training, per-sentence frozen masks for the dev split.
pub struct MlmTask {
    pub head: MlmHead,
    pub mask_rate: f64,
    pub dropout: f64,
    train_ids: Vec<Vec<u32>>,
    dev_batches: Vec<MlmBatch>,
    /// Masked positions drawn for each training visit; lets callers verify
    /// dynamic masking without replaying rng streams.
    pub train_mask_log: Vec<Vec<usize>>,
}

impl MlmTask {
    pub fn new(
        train: &[Sentence],
        dev: &[Sentence],
        vocab: &Vocab,
        hidden: usize,
        dropout: f64,
        mask_rate: f64,
        dev_mask_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlmTask, PipelineError> {
        if train.is_empty() || dev.is_empty() {
            return Err(PipelineError::EmptySplit("mlm train/dev"));
        }
        let head = MlmHead::new(hidden, vocab.size(), rng);
        let train_ids: Vec<Vec<u32>> = train
            .iter()
            .map(|s| vocab.encode_words(&s.forms()).ids)
            .collect();
        // fixed dev masking: one rng stream per sentence index
        let dev_batches = dev
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ids = vocab.encode_words(&s.forms()).ids;
                let mut mask_rng = super::stream_rng(dev_mask_seed, i as u64);
                mlm_mask(&ids, mask_rate, &mut mask_rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MlmTask {
            head,
            mask_rate,
            dropout,
            train_ids,
            dev_batches,
            train_mask_log: Vec::new(),
        })
    }

    pub fn dev_masks(&self) -> &[MlmBatch] {
        &self.dev_batches
    }

    fn batch_loss(
        &self,
        tape: &Tape,
        encoder: &Encoder,
        batch: &MlmBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, PipelineError> {
        let states = encoder.encode_single(tape, &batch.input_ids, rng.as_deref_mut())?;
        let dropped = head_dropout(tape, states.final_state(), self.dropout, rng)?;
        let masked = tape.gather_rows(&dropped, &batch.positions)?;
        Ok(self.head.loss(tape, &masked, &batch.targets)?)
    }

    /// Masked-token prediction accuracy over a sentence set with frozen
    /// per-sentence masks (stream `mask_seed`).
    pub fn masked_accuracy(
        &self,
        encoder: &Encoder,
        ids_per_sentence: &[Vec<u32>],
        mask_seed: u64,
    ) -> Result<f64, PipelineError> {
        let mut correct_weighted = 0.0;
        let mut total = 0usize;
        for (i, ids) in ids_per_sentence.iter().enumerate() {
            let mut mask_rng = super::stream_rng(mask_seed, i as u64);
            let batch = mlm_mask(ids, self.mask_rate, &mut mask_rng)?;
            let tape = Tape::eval();
            let states = encoder.encode_single(&tape, &batch.input_ids, None)?;
            let masked = tape.gather_rows(states.final_state(), &batch.positions)?;
            let logits = self.head.forward(&tape, &masked)?;
            let acc = mlm_accuracy(&logits, &batch.targets)?;
            correct_weighted += acc / 100.0 * batch.targets.len() as f64;
            total += batch.targets.len();
        }
        Ok(100.0 * correct_weighted / total as f64)
    }

    pub fn train_ids(&self) -> &[Vec<u32>] {
        &self.train_ids
    }
}

impl StageTask for MlmTask {
    fn name(&self) -> &'static str {
        "mlm"
    }

    fn head_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("mlm/W".into(), self.head.w.clone()),
            ("mlm/b".into(), self.head.b.clone()),
        ]
    }

    fn num_train(&self) -> usize {
        self.train_ids.len()
    }

    fn num_dev(&self) -> usize {
        self.dev_batches.len()
    }

    fn example_loss(
        &mut self,
        tape: &Tape,
        encoder: &Encoder,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PipelineError> {
        // dynamic masking: a fresh draw every visit
        let batch = mlm_mask(&self.train_ids[index], self.mask_rate, rng)?;
        if index == 0 {
            self.train_mask_log.push(batch.positions.clone());
        }
        self.batch_loss(tape, encoder, &batch, Some(rng))
    }

    fn dev_loss(&mut self, encoder: &Encoder) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        for batch in &self.dev_batches {
            let tape = Tape::eval();
            total += self.batch_loss(&tape, encoder, batch, None)?.item();
        }
        Ok(total / self.dev_batches.len() as f64)
    }

    fn example_len(&self, index: usize) -> usize {
        self.train_ids[index].len()
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

struct SeqcExample {
    ids: Vec<u32>,
    segments: Vec<u8>,
    label: usize,
}

/// Sequence classification over `[CLS]`.
pub struct SeqcTask {
    pub head: SeqcHead,
    pub labels: Vec<String>,
    pub dropout: f64,
    train: Vec<SeqcExample>,
    dev: Vec<SeqcExample>,
}

fn seqc_example(
    inst: &SeqcInstance,
    vocab: &Vocab,
    labels: &[String],
    max_len: usize,
) -> SeqcExample {
    let (ids, segments) = match &inst.text_b {
        Some(b) => {
            let pe = crate::heads::pair_encode(vocab, &split_words(&inst.text_a), &split_words(b), max_len);
            (pe.ids, pe.segments)
        }
        None => {
            let enc = vocab.encode_words(&split_words(&inst.text_a));
            let segs = vec![0u8; enc.ids.len()];
            (enc.ids, segs)
        }
    };
    let label = labels
        .iter()
        .position(|l| l == &inst.label)
        .unwrap_or(labels.len());
    SeqcExample {
        ids,
        segments,
        label,
    }
}

impl SeqcTask {
    pub fn new(
        train: &[SeqcInstance],
        dev: &[SeqcInstance],
        vocab: &Vocab,
        hidden: usize,
        max_len: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SeqcTask, PipelineError> {
        if train.is_empty() || dev.is_empty() {
            return Err(PipelineError::EmptySplit("seqc train/dev"));
        }
        let mut labels: Vec<String> = train.iter().map(|i| i.label.clone()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(PipelineError::DegenerateLabels(labels.len()));
        }
        let head = SeqcHead::new(hidden, labels.len(), rng);
        Ok(SeqcTask {
            train: train
                .iter()
                .map(|i| seqc_example(i, vocab, &labels, max_len))
                .collect(),
            dev: dev
                .iter()
                .map(|i| seqc_example(i, vocab, &labels, max_len))
                .collect(),
            head,
            labels,
            dropout,
        })
    }

    fn x_cls(
        &self,
        tape: &Tape,
        encoder: &Encoder,
        ex: &SeqcExample,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, PipelineError> {
        let states = encoder.encode(tape, &ex.ids, &ex.segments, rng.as_deref_mut())?;
        let cls = tape.slice_rows(states.final_state(), 0, 1)?;
        Ok(head_dropout(tape, &cls, self.dropout, rng)?)
    }

    /// Argmax-prediction accuracy on arbitrary instances.
    pub fn evaluate(
        &self,
        encoder: &Encoder,
        instances: &[SeqcInstance],
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<f64, PipelineError> {
        let mut pred = Vec::with_capacity(instances.len());
        let mut gold = Vec::with_capacity(instances.len());
        for inst in instances {
            let ex = seqc_example(inst, vocab, &self.labels, max_len);
            let tape = Tape::eval();
            let x = self.x_cls(&tape, encoder, &ex, None)?;
            let probs = self.head.forward(&tape, &x)?.data();
            let best = (0..probs.len())
                .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite"))
                .expect("non-empty");
            pred.push(best);
            gold.push(ex.label);
        }
        Ok(accuracy(&pred, &gold)?)
    }
}

impl StageTask for SeqcTask {
    fn name(&self) -> &'static str {
        "seqc"
    }

    fn head_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("seqc/W_sc".into(), self.head.w.clone()),
            ("seqc/b_sc".into(), self.head.b.clone()),
        ]
    }

    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn num_dev(&self) -> usize {
        self.dev.len()
    }

    fn example_loss(
        &mut self,
        tape: &Tape,
        encoder: &Encoder,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PipelineError> {
        let ex = &self.train[index];
        let states = encoder.encode(tape, &ex.ids, &ex.segments, Some(rng))?;
        let cls = tape.slice_rows(states.final_state(), 0, 1)?;
        let x = head_dropout(tape, &cls, self.dropout, Some(rng))?;
        Ok(self.head.loss(tape, &x, ex.label)?)
    }

    fn dev_loss(&mut self, encoder: &Encoder) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        for i in 0..self.dev.len() {
            let ex = &self.dev[i];
            let tape = Tape::eval();
            let x = self.x_cls(&tape, encoder, ex, None)?;
            total += self.head.loss(&tape, &x, ex.label)?.item();
        }
        Ok(total / self.dev.len() as f64)
    }

    fn example_len(&self, index: usize) -> usize {
        self.train[index].ids.len()
    }
}

struct MccExample {
    answers: Vec<(Vec<u32>, Vec<u8>)>,
    correct: usize,
}

/// Multiple choice: premise (+ question) paired with each answer.
pub struct MccTask {
    pub head: MccHead,
    pub dropout: f64,
    train: Vec<MccExample>,
    dev: Vec<MccExample>,
}

fn mcc_example(inst: &MccInstance, vocab: &Vocab, max_len: usize) -> MccExample {
    let mut premise = split_words(&inst.premise);
    if let Some(q) = &inst.question {
        premise.extend(split_words(q));
    }
    let answers = inst
        .answers
        .iter()
        .map(|a| {
            let pe = crate::heads::pair_encode(vocab, &premise, &split_words(a), max_len);
            (pe.ids, pe.segments)
        })
        .collect();
    MccExample {
        answers,
        correct: inst.correct,
    }
}

impl MccTask {
    pub fn new(
        train: &[MccInstance],
        dev: &[MccInstance],
        vocab: &Vocab,
        hidden: usize,
        max_len: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<MccTask, PipelineError> {
        if train.is_empty() || dev.is_empty() {
            return Err(PipelineError::EmptySplit("mcc train/dev"));
        }
        let head = MccHead::new(hidden, rng);
        Ok(MccTask {
            train: train.iter().map(|i| mcc_example(i, vocab, max_len)).collect(),
            dev: dev.iter().map(|i| mcc_example(i, vocab, max_len)).collect(),
            head,
            dropout,
        })
    }

    fn answer_vectors(
        &self,
        tape: &Tape,
        encoder: &Encoder,
        ex: &MccExample,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Tensor>, PipelineError> {
        let mut xs = Vec::with_capacity(ex.answers.len());
        for (ids, segs) in &ex.answers {
            let states = encoder.encode(tape, ids, segs, rng.as_deref_mut())?;
            let cls = tape.slice_rows(states.final_state(), 0, 1)?;
            xs.push(head_dropout(tape, &cls, self.dropout, rng.as_deref_mut())?);
        }
        Ok(xs)
    }

    pub fn evaluate(
        &self,
        encoder: &Encoder,
        instances: &[MccInstance],
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<f64, PipelineError> {
        let mut pred = Vec::with_capacity(instances.len());
        let mut gold = Vec::with_capacity(instances.len());
        for inst in instances {
            let ex = mcc_example(inst, vocab, max_len);
            let tape = Tape::eval();
            let xs = self.answer_vectors(&tape, encoder, &ex, None)?;
            let probs = self.head.forward(&tape, &xs)?.data();
            let best = (0..probs.len())
                .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite"))
                .expect("non-empty");
            pred.push(best);
            gold.push(ex.correct);
        }
        Ok(accuracy(&pred, &gold)?)
    }
}

impl StageTask for MccTask {
    fn name(&self) -> &'static str {
        "mcc"
    }

    fn head_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("mcc/W_h".into(), self.head.w_h.clone()),
            ("mcc/W_o".into(), self.head.w_o.clone()),
            ("mcc/b_h".into(), self.head.b_h.clone()),
        ]
    }

    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn num_dev(&self) -> usize {
        self.dev.len()
    }

    fn example_loss(
        &mut self,
        tape: &Tape,
        encoder: &Encoder,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, PipelineError> {
        let ex = &self.train[index];
        let mut xs = Vec::with_capacity(ex.answers.len());
        for (ids, segs) in &ex.answers {
            let states = encoder.encode(tape, ids, segs, Some(&mut *rng))?;
            let cls = tape.slice_rows(states.final_state(), 0, 1)?;
            xs.push(head_dropout(tape, &cls, self.dropout, Some(&mut *rng))?);
        }
        Ok(self.head.loss(tape, &xs, ex.correct)?)
    }

    fn dev_loss(&mut self, encoder: &Encoder) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        for ex in &self.dev {
            let tape = Tape::eval();
            let xs = self.answer_vectors(&tape, encoder, ex, None)?;
            total += self.head.loss(&tape, &xs, ex.correct)?.item();
        }
        Ok(total / self.dev.len() as f64)
    }

    fn example_len(&self, index: usize) -> usize {
        self.train[index]
            .answers
            .iter()
            .map(|(ids, _)| ids.len())
            .max()
            .unwrap_or(0)
    }
}
