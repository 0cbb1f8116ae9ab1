//! Synthetic data generators for the toy-scale experiments and tests.
//!
//! The toy treebank follows a deterministic right-branching head grammar:
//! word 1 is the root and every later word attaches to its left neighbor.
//! Relations cycle through three dependent labels by position, and each
//! label draws forms from its own small word pool, so both position and
//! lexical identity carry the signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::treebank::{Sentence, Token};

pub const TOY_RELATIONS: [&str; 4] = ["root", "dep_a", "dep_b", "dep_c"];

const POOLS: [(&str, &[&str]); 4] = [
    ("VERB", &["runs", "sees", "holds", "makes", "finds", "keeps", "takes", "gives"]),
    ("NOUN", &["cat", "dog", "bird", "tree", "rock", "fish", "star", "leaf"]),
    ("ADJ", &["red", "big", "old", "new", "dry", "low", "few", "odd"]),
    ("ADV", &["now", "soon", "here", "there", "often", "fast", "well", "late"]),
];

fn toy_token(id: usize, head: usize, deprel: &str, form: &str, upos: &str) -> Token {
    Token {
        id,
        form: form.to_string(),
        lemma: form.to_string(),
        upos: upos.to_string(),
        xpos: "_".to_string(),
        feats: "_".to_string(),
        head,
        deprel: deprel.to_string(),
        deps: "_".to_string(),
        misc: "_".to_string(),
    }
}

/// One right-branching sentence of `len` words.
pub fn toy_sentence(len: usize, rng: &mut ChaCha8Rng) -> Sentence {
    assert!(len >= 1);
    let mut tokens = Vec::with_capacity(len);
    for i in 1..=len {
        let (head, deprel) = if i == 1 {
            (0, TOY_RELATIONS[0])
        } else {
            (i - 1, TOY_RELATIONS[1 + (i - 2) % 3])
        };
        let pool_idx = if i == 1 { 0 } else { 1 + (i - 2) % 3 };
        let (upos, forms) = POOLS[pool_idx];
        let form = forms[rng.gen_range(0..forms.len())];
        tokens.push(toy_token(i, head, deprel, form, upos));
    }
    Sentence {
        comments: Vec::new(),
        tokens,
        extras: Vec::new(),
        start_line: 0,
    }
}

/// A treebank of `n` sentences with lengths in `[min_len, max_len]`.
pub fn toy_treebank(n: usize, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
    (0..n)
        .map(|_| toy_sentence(rng.gen_range(min_len..=max_len), rng))
        .collect()
}

/// Expected unlabeled attachment score of uniform random head assignment:
/// each token in an n-word sentence picks among the n+1 scored candidates,
/// so it is correct with probability 1/(n+1). Token-weighted, in percent.
pub fn random_attachment_baseline(sentences: &[Sentence]) -> f64 {
    let mut expected_correct = 0.0;
    let mut tokens = 0usize;
    for s in sentences {
        let n = s.len() as f64;
        expected_correct += n / (n + 1.0);
        tokens += s.len();
    }
    100.0 * expected_correct / tokens as f64
}

/// Valid random trees with varied surface content, comments, and the
/// occasional multiword range line: the round-trip fuzz corpus.
pub fn fuzz_treebank(n: usize, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
    let forms = [
        "word", "été", "naïve", "猫", "x1", "co-op", "don't", "...", "«quote»", "42",
    ];
    let deprels = ["root", "nsubj", "obj", "amod", "advmod", "det", "punct"];
    (0..n)
        .map(|k| {
            let len = rng.gen_range(1..=8);
            let mut tokens = Vec::with_capacity(len);
            for i in 1..=len {
                let head = if i == 1 { 0 } else { rng.gen_range(1..i) };
                let deprel = if i == 1 {
                    "root"
                } else {
                    deprels[rng.gen_range(1..deprels.len())]
                };
                let form = forms[rng.gen_range(0..forms.len())];
                let mut t = toy_token(i, head, deprel, form, "X");
                if rng.gen_bool(0.3) {
                    t.misc = format!("Extra={}", rng.gen_range(0..100));
                }
                tokens.push(t);
            }
            let mut comments = Vec::new();
            if rng.gen_bool(0.5) {
                comments.push(format!("# sent_id = fuzz-{k}"));
            }
            if rng.gen_bool(0.3) {
                let text: Vec<&str> = tokens.iter().map(|t| t.form.as_str()).collect();
                comments.push(format!("# text = {}", text.join(" ")));
            }
            let mut extras = Vec::new();
            if len >= 3 && rng.gen_bool(0.2) {
                let at = rng.gen_range(0..len - 1);
                extras.push(crate::treebank::ExtraLine {
                    before_token: at,
                    raw: format!("{}-{}\tfused\t_\t_\t_\t_\t_\t_\t_\t_", at + 1, at + 2),
                });
            }
            Sentence {
                comments,
                tokens,
                extras,
                start_line: 0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeqcInstance {
    pub text_a: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MccInstance {
    pub premise: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub answers: Vec<String>,
    pub correct: usize,
}

const MARKERS: [&str; 6] = ["sun", "moon", "rain", "snow", "wind", "fog"];
const FILLER: [&str; 8] = ["it", "is", "very", "much", "so", "then", "again", "still"];

fn filler_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n)
        .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
        .collect()
}

/// Paired texts labeled `match` when they share a marker word.
pub fn toy_seqc(n: usize, rng: &mut ChaCha8Rng) -> Vec<SeqcInstance> {
    (0..n)
        .map(|_| {
            let m1 = MARKERS[rng.gen_range(0..MARKERS.len())];
            let matched = rng.gen_bool(0.5);
            let m2 = if matched {
                m1.to_string()
            } else {
                loop {
                    let cand = MARKERS[rng.gen_range(0..MARKERS.len())];
                    if cand != m1 {
                        break cand.to_string();
                    }
                }
            };
            let mut a = filler_words(rng.gen_range(1..4), rng);
            a.push(m1.to_string());
            a.extend(filler_words(rng.gen_range(0..3), rng));
            let mut b = filler_words(rng.gen_range(1..4), rng);
            b.push(m2);
            SeqcInstance {
                text_a: a.join(" "),
                text_b: Some(b.join(" ")),
                label: if matched { "match" } else { "differ" }.to_string(),
            }
        })
        .collect()
}

/// Multiple choice: the correct answer repeats the premise's marker word.
pub fn toy_mcc(n: usize, n_answers: usize, rng: &mut ChaCha8Rng) -> Vec<MccInstance> {
    assert!(n_answers >= 2 && n_answers <= MARKERS.len());
    (0..n)
        .map(|_| {
            let mut picks: Vec<&str> = Vec::new();
            while picks.len() < n_answers {
                let m = MARKERS[rng.gen_range(0..MARKERS.len())];
                if !picks.contains(&m) {
                    picks.push(m);
                }
            }
            let correct = rng.gen_range(0..n_answers);
            let mut premise = filler_words(rng.gen_range(1..3), rng);
            premise.push(picks[correct].to_string());
            let answers: Vec<String> = picks
                .iter()
                .map(|m| {
                    let mut w = filler_words(1, rng);
                    w.push(m.to_string());
                    w.join(" ")
                })
                .collect();
            MccInstance {
                premise: premise.join(" "),
                question: Some("which matches".to_string()),
                answers,
                correct,
            }
        })
        .collect()
}

/// Serializes task instances as JSON lines.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn seqc_from_jsonl(text: &str) -> Result<Vec<SeqcInstance>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn mcc_from_jsonl(text: &str) -> Result<Vec<MccInstance>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
