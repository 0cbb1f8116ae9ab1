//! CoNLL-U treebank ingestion, validation, and serialization.
//!
//! Token lines carry the standard 10 tab-separated columns. Multiword-token
//! range lines (`3-4`) and empty nodes (`5.1`) are kept verbatim in a side
//! list anchored to their position, so a parse -> serialize round trip
//! reproduces the document byte for byte (modulo normalized line endings).

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: {column} is not an integer: `{value}`")]
    BadInteger {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: token ids are not consecutive (expected {expected}, found {found})")]
    NonConsecutiveIds {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("sentence starting at line {line} rejected in strict mode: {reason}")]
    InvalidTree { line: usize, reason: String },
    #[error("cannot build a label inventory from an empty corpus")]
    EmptyCorpus,
}

/// One syntactic word. `head` is a 1-based index into the sentence with 0
/// denoting the artificial root. Columns our models never interpret (xpos,
/// feats, deps, misc) are preserved verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    pub head: usize,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
}

/// A non-token line (multiword range or empty node) kept for round-tripping,
/// anchored before the token at index `before_token` (== tokens.len() means
/// after the last token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtraLine {
    pub before_token: usize,
    pub raw: String,
}

#[derive(Debug, Clone, Eq, Default)]
pub struct Sentence {
    pub comments: Vec<String>,
    pub tokens: Vec<Token>,
    pub extras: Vec<ExtraLine>,
    /// 1-based line number of the first line of this sentence in its source
    /// document; 0 for synthesized sentences. Provenance only — excluded
    /// from equality.
    pub start_line: usize,
}

impl PartialEq for Sentence {
    fn eq(&self, other: &Self) -> bool {
        self.comments == other.comments
            && self.tokens == other.tokens
            && self.extras == other.extras
    }
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The raw sentence text, when a `# text = ...` comment is present.
    pub fn text(&self) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            c.strip_prefix("# text = ")
                .or_else(|| c.strip_prefix("#text = "))
        })
    }

    pub fn forms(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.form.clone()).collect()
    }

    pub fn gold_heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn gold_deprels(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.deprel.as_str()).collect()
    }
}

/// Tree-validity flags for a head vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeCheck {
    pub is_single_root: bool,
    pub is_acyclic: bool,
    pub is_connected: bool,
}

impl TreeCheck {
    pub fn is_valid_tree(&self) -> bool {
        self.is_single_root && self.is_acyclic && self.is_connected
    }
}

/// Flags for a bare head vector (`heads[i]` = head of word `i+1`). Heads
/// outside `[0, N]` or self-references count against connectivity/acyclicity
/// rather than panicking.
pub fn check_heads(heads: &[usize]) -> TreeCheck {
    let n = heads.len();
    let is_single_root = heads.iter().filter(|&&h| h == 0).count() == 1;
    let mut is_acyclic = true;
    let mut is_connected = true;
    for start in 1..=n {
        // follow the head chain; a chain longer than n nodes must repeat
        let mut node = start;
        let mut steps = 0;
        loop {
            if node == 0 {
                break;
            }
            if node > n || heads[node - 1] == node {
                is_connected = false;
                if node <= n && heads[node - 1] == node {
                    is_acyclic = false;
                }
                break;
            }
            node = heads[node - 1];
            steps += 1;
            if steps > n {
                is_acyclic = false;
                is_connected = false;
                break;
            }
        }
    }
    TreeCheck {
        is_single_root,
        is_acyclic,
        is_connected,
    }
}

/// Flags computed from a sentence's gold head pointers.
pub fn validate_tree(sentence: &Sentence) -> TreeCheck {
    check_heads(&sentence.gold_heads())
}

fn is_range_or_empty_id(id: &str) -> bool {
    id.contains('-') || id.contains('.')
}

/// Parses a CoNLL-U document. Structural problems (column counts,
/// non-integer ids or heads, non-consecutive ids) are errors; tree validity
/// is checked separately by [`validate_tree`].
pub fn parse_conllu(text: &str) -> Result<Vec<Sentence>, TreebankError> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    for (lineno, raw_line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.is_empty() {
            if !current.tokens.is_empty() || !current.comments.is_empty() {
                if !current.tokens.is_empty() {
                    sentences.push(std::mem::take(&mut current));
                } else {
                    log::warn!("dropping comment-only block ending at line {lineno}");
                    current = Sentence::default();
                }
            }
            continue;
        }
        if current.tokens.is_empty() && current.comments.is_empty() && current.start_line == 0 {
            current.start_line = lineno;
        }
        if line.starts_with('#') {
            current.comments.push(line.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(TreebankError::ColumnCount {
                line: lineno,
                found: cols.len(),
            });
        }
        if is_range_or_empty_id(cols[0]) {
            current.extras.push(ExtraLine {
                before_token: current.tokens.len(),
                raw: line.to_string(),
            });
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| TreebankError::BadInteger {
            line: lineno,
            column: "id",
            value: cols[0].to_string(),
        })?;
        let expected = current.tokens.len() + 1;
        if id != expected {
            return Err(TreebankError::NonConsecutiveIds {
                line: lineno,
                expected,
                found: id,
            });
        }
        let head: usize = cols[6].parse().map_err(|_| TreebankError::BadInteger {
            line: lineno,
            column: "head",
            value: cols[6].to_string(),
        })?;
        current.tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            xpos: cols[4].to_string(),
            feats: cols[5].to_string(),
            head,
            deprel: cols[7].to_string(),
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
        });
    }
    if !current.tokens.is_empty() {
        sentences.push(current);
    } else if !current.comments.is_empty() {
        log::warn!("dropping comment-only block at end of document");
    }
    Ok(sentences)
}

/// How tree-invalid gold sentences are treated when loading supervision data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Reject the document on the first invalid tree (training default).
    Strict,
    /// Warn and drop invalid sentences (evaluation-data default).
    SkipInvalid,
    /// Keep everything; callers that only compare columns use this.
    KeepAll,
}

/// Parses a document and applies gold-tree validation policy. Head indices
/// beyond sentence length are treated as validation failures, not parse
/// errors.
pub fn load_conllu(text: &str, mode: LoadMode) -> Result<Vec<Sentence>, TreebankError> {
    let sentences = parse_conllu(text)?;
    if mode == LoadMode::KeepAll {
        return Ok(sentences);
    }
    let mut kept = Vec::with_capacity(sentences.len());
    for s in sentences {
        let n = s.len();
        let heads_in_range = s.tokens.iter().all(|t| t.head <= n && t.head != t.id);
        let check = validate_tree(&s);
        if heads_in_range && check.is_valid_tree() {
            kept.push(s);
        } else {
            let reason = format!(
                "single_root={} acyclic={} connected={} heads_in_range={}",
                check.is_single_root, check.is_acyclic, check.is_connected, heads_in_range
            );
            match mode {
                LoadMode::Strict => {
                    return Err(TreebankError::InvalidTree {
                        line: s.start_line,
                        reason,
                    })
                }
                LoadMode::SkipInvalid => {
                    log::warn!(
                        "skipping invalid sentence at line {}: {reason}",
                        s.start_line
                    );
                }
                LoadMode::KeepAll => unreachable!(),
            }
        }
    }
    Ok(kept)
}

fn token_line(t: &Token) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        t.id, t.form, t.lemma, t.upos, t.xpos, t.feats, t.head, t.deprel, t.deps, t.misc
    )
}

/// Serializes sentences back to CoNLL-U text. Inverse of [`parse_conllu`]
/// up to line-ending normalization.
pub fn serialize_conllu(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for c in &s.comments {
            out.push_str(c);
            out.push('\n');
        }
        let mut extras = s.extras.iter().peekable();
        for (i, t) in s.tokens.iter().enumerate() {
            while let Some(e) = extras.peek() {
                if e.before_token <= i {
                    out.push_str(&extras.next().unwrap().raw);
                    out.push('\n');
                } else {
                    break;
                }
            }
            out.push_str(&token_line(t));
            out.push('\n');
        }
        for e in extras {
            out.push_str(&e.raw);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Bijective mapping between relation labels and indices. Labels are sorted
/// lexicographically so the inventory is identical across runs and across
/// corpus shufflings; the index one past the known labels is reserved for
/// unseen relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInventory {
    relations: Vec<String>,
}

pub const UNKNOWN_LABEL: &str = "<unk-rel>";

impl LabelInventory {
    pub fn from_sentences(train: &[Sentence]) -> Result<LabelInventory, TreebankError> {
        if train.is_empty() {
            return Err(TreebankError::EmptyCorpus);
        }
        let set: BTreeSet<String> = train
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.deprel.clone()))
            .collect();
        Ok(LabelInventory {
            relations: set.into_iter().collect(),
        })
    }

    pub fn from_labels(labels: Vec<String>) -> LabelInventory {
        LabelInventory { relations: labels }
    }

    /// Number of distinct training labels (excludes the reserved slot).
    pub fn num_known(&self) -> usize {
        self.relations.len()
    }

    /// Model output size: known labels plus the reserved unknown slot.
    pub fn num_labels(&self) -> usize {
        self.relations.len() + 1
    }

    pub fn index_of(&self, label: &str) -> usize {
        self.relations
            .binary_search_by(|r| r.as_str().cmp(label))
            .unwrap_or(self.relations.len())
    }

    pub fn label_of(&self, index: usize) -> &str {
        self.relations
            .get(index)
            .map(String::as_str)
            .unwrap_or(UNKNOWN_LABEL)
    }

    pub fn labels(&self) -> &[String] {
        &self.relations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "1\tHe\the\tPRON\t_\t_\t2\tnsubj\t_\t_\n2\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n\n";

    #[test]
    fn parses_minimal_two_token_sentence() {
        let sents = parse_conllu(TINY).unwrap();
        assert_eq!(sents.len(), 1);
        let s = &sents[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.tokens[0].head, 2);
        assert_eq!(s.tokens[1].head, 0);
        assert_eq!(s.tokens[1].deprel, "root");
    }

    #[test]
    fn range_lines_are_excluded_but_round_trip() {
        let doc = "# text = won't\n1\two\t_\t_\t_\t_\t2\tdet\t_\t_\n2\tfoo\t_\t_\t_\t_\t0\troot\t_\t_\n3-4\tcan't\t_\t_\t_\t_\t_\t_\t_\t_\n3\tcan\t_\t_\t_\t_\t2\taux\t_\t_\n4\tnot\t_\t_\t_\t_\t2\tadvmod\t_\t_\n\n";
        let sents = parse_conllu(doc).unwrap();
        assert_eq!(sents[0].len(), 4);
        assert_eq!(sents[0].extras.len(), 1);
        assert_eq!(sents[0].extras[0].before_token, 2);
        assert_eq!(serialize_conllu(&sents), doc);
    }

    #[test]
    fn empty_node_lines_are_extras() {
        let doc = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n1.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n\n";
        let sents = parse_conllu(doc).unwrap();
        assert_eq!(sents[0].len(), 1);
        assert_eq!(sents[0].extras.len(), 1);
        assert_eq!(serialize_conllu(&sents), doc);
    }

    #[test]
    fn column_count_error_reports_line() {
        let doc = "1\tonly\tthree\n";
        match parse_conllu(doc) {
            Err(TreebankError::ColumnCount { line: 1, found: 3 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_integer_head_is_an_error() {
        let doc = "1\ta\t_\t_\t_\t_\tx\troot\t_\t_\n";
        match parse_conllu(doc) {
            Err(TreebankError::BadInteger { column: "head", .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_consecutive_ids_rejected() {
        let doc = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n3\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n";
        assert!(matches!(
            parse_conllu(doc),
            Err(TreebankError::NonConsecutiveIds { .. })
        ));
    }

    #[test]
    fn single_token_tree_is_valid() {
        assert_eq!(
            check_heads(&[0]),
            TreeCheck {
                is_single_root: true,
                is_acyclic: true,
                is_connected: true
            }
        );
    }

    #[test]
    fn two_cycle_has_no_root_and_cycles() {
        let check = check_heads(&[2, 1]);
        assert!(!check.is_single_root);
        assert!(!check.is_acyclic);
        assert!(!check.is_connected);
    }

    #[test]
    fn flags_match_brute_force_reachability() {
        // independent oracle: fixed-point reachability from node 0 for
        // connectivity, Kahn's algorithm over head->child arcs for cycles
        fn oracle(heads: &[usize]) -> TreeCheck {
            let n = heads.len();
            let single = heads.iter().filter(|&&h| h == 0).count() == 1;
            let mut reach = vec![false; n + 1];
            reach[0] = true;
            for _ in 0..=n {
                for i in 1..=n {
                    let h = heads[i - 1];
                    if h <= n && h != i && reach[h] {
                        reach[i] = true;
                    }
                }
            }
            let connected = reach.iter().all(|&r| r);
            let mut indegree = vec![0usize; n + 1];
            for i in 1..=n {
                if heads[i - 1] <= n {
                    indegree[i] = 1; // arc heads[i-1] -> i (self-loops included)
                }
            }
            let mut queue: Vec<usize> = (0..=n).filter(|&v| indegree[v] == 0).collect();
            let mut removed = 0;
            while let Some(v) = queue.pop() {
                removed += 1;
                for i in 1..=n {
                    if i != v && heads[i - 1] == v {
                        indegree[i] -= 1;
                        if indegree[i] == 0 {
                            queue.push(i);
                        }
                    }
                }
            }
            TreeCheck {
                is_single_root: single,
                is_acyclic: removed == n + 1,
                is_connected: connected,
            }
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let heads: Vec<usize> = (0..5).map(|_| rng.gen_range(0..=5)).collect();
            let got = check_heads(&heads);
            let want = oracle(&heads);
            assert_eq!(got, want, "flags for {heads:?}");
        }
    }

    #[test]
    fn strict_mode_rejects_invalid_trees() {
        let doc = "1\ta\t_\t_\t_\t_\t2\tdep\t_\t_\n2\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n\n";
        assert!(load_conllu(doc, LoadMode::Strict).is_err());
        assert_eq!(load_conllu(doc, LoadMode::SkipInvalid).unwrap().len(), 0);
        assert_eq!(load_conllu(doc, LoadMode::KeepAll).unwrap().len(), 1);
    }

    #[test]
    fn serialize_empty_list_is_empty_document() {
        assert_eq!(serialize_conllu(&[]), "");
    }

    #[test]
    fn one_token_sentence_serializes_with_trailing_blank() {
        let sents = parse_conllu("1\thi\t_\t_\t_\t_\t0\troot\t_\t_\n").unwrap();
        assert_eq!(
            serialize_conllu(&sents),
            "1\thi\t_\t_\t_\t_\t0\troot\t_\t_\n\n"
        );
    }

    #[test]
    fn label_inventory_is_sorted_and_reserves_unknown() {
        let sents = parse_conllu(TINY).unwrap();
        let inv = LabelInventory::from_sentences(&sents).unwrap();
        assert_eq!(inv.num_known(), 2);
        assert_eq!(inv.num_labels(), 3);
        assert_eq!(inv.index_of("nsubj"), 0);
        assert_eq!(inv.index_of("root"), 1);
        assert_eq!(inv.index_of("never-seen"), 2);
        assert_eq!(inv.label_of(2), UNKNOWN_LABEL);
    }

    #[test]
    fn label_inventory_ignores_sentence_order() {
        let doc = format!("{TINY}1\tx\t_\t_\t_\t_\t0\troot\t_\t_\n\n");
        let mut sents = parse_conllu(&doc).unwrap();
        let inv_a = LabelInventory::from_sentences(&sents).unwrap();
        sents.reverse();
        let inv_b = LabelInventory::from_sentences(&sents).unwrap();
        assert_eq!(inv_a, inv_b);
    }

    #[test]
    fn label_inventory_requires_nonempty_corpus() {
        assert!(matches!(
            LabelInventory::from_sentences(&[]),
            Err(TreebankError::EmptyCorpus)
        ));
    }

    #[test]
    fn text_comment_accessor() {
        let doc = "# text = He runs\n1\tHe\t_\t_\t_\t_\t2\tnsubj\t_\t_\n2\truns\t_\t_\t_\t_\t0\troot\t_\t_\n\n";
        let sents = parse_conllu(doc).unwrap();
        assert_eq!(sents[0].text(), Some("He runs"));
    }
}
