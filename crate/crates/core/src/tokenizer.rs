//! Byte-level BPE with per-word segmentation.
//!
//! Words are tokenized independently of their neighbors, so no subword ever
//! crosses a word boundary — the alignment needed for subword-to-word pooling
//! holds by construction. Pieces are strings over a bijective byte-to-char
//! alphabet (printable bytes map to themselves, the rest to U+0100 +  k), so
//! vocabulary files stay readable JSON while round-tripping arbitrary bytes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
const NUM_BYTE_UNITS: usize = 256;
/// Specials + one unit per byte.
pub const MIN_VOCAB: usize = NUM_SPECIALS + NUM_BYTE_UNITS;

pub const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<pad>", "<cls>", "<sep>", "<unk>", "<mask>"];

const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab_size {0} is below the minimum of {MIN_VOCAB} (specials + byte units)")]
    VocabTooSmall(usize),
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("unknown piece id {0}")]
    UnknownId(u32),
    #[error("vocabulary file is not valid: {0}")]
    BadVocabFile(String),
    #[error("unsupported vocabulary version {0}")]
    Version(u32),
}

// GPT-style bijection between bytes and printable chars.
fn byte_unit_tables() -> (Vec<char>, HashMap<char, u8>) {
    let mut byte_to_char = vec!['\0'; 256];
    let mut char_to_byte = HashMap::new();
    let printable = (b'!'..=b'~')
        .chain(0xA1..=0xAC_u8)
        .chain(0xAE..=0xFF_u8);
    let mut taken = [false; 256];
    for b in printable {
        let c = char::from_u32(b as u32).expect("latin-1 printable");
        byte_to_char[b as usize] = c;
        char_to_byte.insert(c, b);
        taken[b as usize] = true;
    }
    let mut next = 0u32;
    for b in 0..256 {
        if !taken[b] {
            let c = char::from_u32(0x100 + next).expect("BMP char");
            byte_to_char[b] = c;
            char_to_byte.insert(c, b as u8);
            next += 1;
        }
    }
    (byte_to_char, char_to_byte)
}

fn word_to_units(word: &str, byte_to_char: &[char]) -> Vec<String> {
    word.bytes()
        .map(|b| byte_to_char[b as usize].to_string())
        .collect()
}

fn units_to_bytes(units: &str, char_to_byte: &HashMap<char, u8>) -> Vec<u8> {
    units
        .chars()
        .map(|c| *char_to_byte.get(&c).expect("piece uses the unit alphabet"))
        .collect()
}

/// Per-word spans over an encoded sequence: word `w` owns subword positions
/// `[spans[w].0, spans[w].1)`. Spans are contiguous, non-overlapping, and
/// jointly cover every non-special position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    /// `[CLS] pieces... [SEP]`
    pub ids: Vec<u32>,
    pub alignment: Alignment,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Trained subword vocabulary: special pieces, byte units, and merge rules.
pub struct Vocab {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    piece_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
    byte_to_char: Vec<char>,
    char_to_byte: HashMap<char, u8>,
}

impl Vocab {
    fn assemble(merges: Vec<(String, String)>) -> Vocab {
        let (byte_to_char, char_to_byte) = byte_unit_tables();
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.extend((0..256).map(|b| byte_to_char[b].to_string()));
        for (l, r) in &merges {
            pieces.push(format!("{l}{r}"));
        }
        let piece_to_id = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Vocab {
            pieces,
            merges,
            piece_to_id,
            merge_rank,
            byte_to_char,
            char_to_byte,
        }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Splits one word into merge-rank-greedy BPE pieces.
    fn word_pieces(&self, word: &str) -> Vec<String> {
        let mut units = word_to_units(word, &self.byte_to_char);
        if units.is_empty() {
            return units;
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..units.len() - 1 {
                let key = (units[i].clone(), units[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    let merged = format!("{}{}", units[i], units[i + 1]);
                    units[i] = merged;
                    units.remove(i + 1);
                }
                None => break,
            }
        }
        units
    }

    /// Encodes words into `[CLS] ... [SEP]` ids plus the word alignment.
    /// Byte fallback guarantees coverage: no word ever maps to UNK.
    pub fn encode_words(&self, words: &[String]) -> Encoded {
        let mut ids = vec![CLS];
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            for p in self.word_pieces(w) {
                ids.push(*self.piece_to_id.get(&p).expect("pieces come from the vocab"));
            }
            spans.push((start, ids.len()));
        }
        ids.push(SEP);
        Encoded {
            ids,
            alignment: Alignment { spans },
        }
    }

    /// Piece ids for a single word, without specials.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        self.word_pieces(word)
            .iter()
            .map(|p| *self.piece_to_id.get(p).expect("pieces come from the vocab"))
            .collect()
    }

    /// Inverse of [`Vocab::encode_words`]: one string per aligned word,
    /// specials dropped.
    pub fn decode(&self, encoded: &Encoded) -> Result<Vec<String>, TokenizerError> {
        let mut words = Vec::with_capacity(encoded.alignment.spans.len());
        for &(start, end) in &encoded.alignment.spans {
            let mut bytes = Vec::new();
            for &id in &encoded.ids[start..end] {
                let piece = self
                    .pieces
                    .get(id as usize)
                    .ok_or(TokenizerError::UnknownId(id))?;
                bytes.extend(units_to_bytes(piece, &self.char_to_byte));
            }
            words.push(String::from_utf8_lossy(&bytes).into_owned());
        }
        Ok(words)
    }

    /// Decoded text of arbitrary ids; specials skipped. Used for MLM
    /// reporting, not round-tripping.
    pub fn decode_pieces(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if Vocab::is_special(id) {
                continue;
            }
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or(TokenizerError::UnknownId(id))?;
            bytes.extend(units_to_bytes(piece, &self.char_to_byte));
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: SPECIAL_PIECES.iter().map(|s| s.to_string()).collect(),
            pieces: self.pieces.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocab, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::BadVocabFile(e.to_string()))?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(TokenizerError::Version(file.version));
        }
        let vocab = Vocab::assemble(file.merges);
        if vocab.pieces != file.pieces {
            return Err(TokenizerError::BadVocabFile(
                "piece list does not match merges".into(),
            ));
        }
        Ok(vocab)
    }
}

/// Learns BPE merges from word sequences until `vocab_size` pieces exist or
/// no adjacent pair occurs at least twice. Frequency ties break toward the
/// lexicographically smallest (left, right) pair over the unit alphabet.
pub fn train_bpe(corpus: &[Vec<String>], vocab_size: usize) -> Result<Vocab, TokenizerError> {
    if vocab_size < MIN_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let (byte_to_char, _) = byte_unit_tables();

    // word type -> (current unit split, frequency); BTreeMap keeps the pair
    // counting loop deterministic
    let mut words: BTreeMap<String, (Vec<String>, u64)> = BTreeMap::new();
    for sent in corpus {
        for w in sent {
            let entry = words
                .entry(w.clone())
                .or_insert_with(|| (word_to_units(w, &byte_to_char), 0));
            entry.1 += 1;
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut taken: std::collections::BTreeSet<String> = SPECIAL_PIECES
        .iter()
        .map(|s| s.to_string())
        .chain((0..256).map(|b| byte_to_char[b].to_string()))
        .collect();

    while MIN_VOCAB + merges.len() < vocab_size {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (units, freq) in words.values() {
            for pair in units.windows(2) {
                *counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // max count, ties to the lexicographically smallest pair; the
        // ascending BTreeMap walk with a strict `>` does exactly that
        let mut best: Option<((String, String), u64)> = None;
        for (pair, count) in counts {
            if count >= 2 && taken.contains(&format!("{}{}", pair.0, pair.1)) {
                continue; // would duplicate an existing piece string
            }
            if count >= 2 && best.as_ref().map_or(true, |(_, c)| count > *c) {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };
        let merged = format!("{}{}", pair.0, pair.1);
        for (units, _) in words.values_mut() {
            let mut i = 0;
            while i + 1 < units.len() {
                if units[i] == pair.0 && units[i + 1] == pair.1 {
                    units[i] = merged.clone();
                    units.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        taken.insert(merged);
        merges.push(pair);
    }
    Ok(Vocab::assemble(merges))
}
