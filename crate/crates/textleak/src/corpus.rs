//! Corpus ingestion: loading labeled sentences from TSV, building the shared
//! vocabulary, and splitting into train / hyperparameter / test pools.
//!
//! The on-disk format is one `label TAB text` record per line with binary
//! labels. Vocabulary construction is deterministic (first-appearance order),
//! so reloading the same file always yields the same token ids.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{Vocab, UNK_ID};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `label<TAB>text`")]
    Malformed { line: usize },
    #[error("line {line}: label {label:?} is not 0 or 1")]
    BadLabel { line: usize, label: String },
    #[error("line {line}: no tokens in text")]
    EmptyText { line: usize },
    #[error("corpus has no records")]
    Empty,
}

/// One labeled sentence: content token ids (no sequence-start marker) plus
/// the original text for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub ids: Vec<u32>,
    pub label: u8,
    pub text: String,
}

/// A loaded corpus with its vocabulary. `warnings` lists lines whose tokens
/// all fell back to the unknown id (possible only when encoding against a
/// vocabulary built elsewhere).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub entries: Vec<CorpusEntry>,
    pub warnings: Vec<String>,
}

fn parse_lines(raw: &str) -> Result<Vec<(u8, &str, usize)>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) =
            line.split_once('\t').ok_or(CorpusError::Malformed { line: line_no })?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(CorpusError::BadLabel { line: line_no, label: other.to_string() })
            }
        };
        if crate::vocab::tokenize(text).is_empty() {
            return Err(CorpusError::EmptyText { line: line_no });
        }
        records.push((label, text, line_no));
    }
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(records)
}

impl Corpus {
    /// Loads a TSV corpus and builds its vocabulary from the texts.
    pub fn load(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_tsv(&raw)
    }

    /// Parses TSV content and builds the vocabulary from it.
    pub fn from_tsv(raw: &str) -> Result<Corpus, CorpusError> {
        let records = parse_lines(raw)?;
        let vocab = Vocab::build(records.iter().map(|(_, text, _)| *text));
        Ok(Self::encode_records(vocab, &records))
    }

    /// Parses TSV content but encodes against an existing vocabulary;
    /// out-of-vocabulary words map to the unknown id and fully-unknown lines
    /// are reported in `warnings`.
    pub fn from_tsv_with_vocab(raw: &str, vocab: &Vocab) -> Result<Corpus, CorpusError> {
        let records = parse_lines(raw)?;
        Ok(Self::encode_records(vocab.clone(), &records))
    }

    fn encode_records(vocab: Vocab, records: &[(u8, &str, usize)]) -> Corpus {
        let mut entries = Vec::with_capacity(records.len());
        let mut warnings = Vec::new();
        for &(label, text, line_no) in records {
            let (ids, unknown) = vocab.encode(text);
            if unknown == ids.len() {
                warnings.push(format!("line {line_no}: every token is out of vocabulary"));
            }
            debug_assert!(ids.iter().all(|&id| (id as usize) < vocab.len()));
            entries.push(CorpusEntry { ids, label, text: Vocab::normalize(text) });
        }
        Corpus { vocab, entries, warnings }
    }

    /// Training pairs in the shape the model trainers expect.
    pub fn labeled_seqs(&self, indices: &[usize]) -> Vec<(Vec<u32>, u8)> {
        indices.iter().map(|&i| (self.entries[i].ids.clone(), self.entries[i].label)).collect()
    }

    /// Sentences only (for language-model fitting).
    pub fn sentences(&self, indices: &[usize]) -> Vec<Vec<u32>> {
        indices.iter().map(|&i| self.entries[i].ids.clone()).collect()
    }

    /// Indices of entries whose UNK count is zero and whose length lies in
    /// `len_range` — the pool test targets are drawn from.
    pub fn indices_with_len(&self, min: usize, max: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| {
                let n = self.entries[i].ids.len();
                n >= min && n <= max && !self.entries[i].ids.contains(&UNK_ID)
            })
            .collect()
    }
}

/// Disjoint index pools over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub hyper: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits entries into train / hyperparameter / test pools, stratified by
/// sequence-length quartile so every pool covers short and long sentences
/// alike. Deterministic for a given seed; fractions give the hyper and test
/// shares (the remainder trains).
pub fn stratified_split(
    lengths: &[usize],
    hyper_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Split {
    assert!(hyper_frac >= 0.0 && test_frac >= 0.0 && hyper_frac + test_frac < 1.0);
    let mut sorted: Vec<usize> = lengths.to_vec();
    sorted.sort_unstable();
    let quartile = |q: f64| sorted[((sorted.len() - 1) as f64 * q) as usize];
    let (q1, q2, q3) = (quartile(0.25), quartile(0.5), quartile(0.75));
    let bucket_of = |len: usize| {
        if len <= q1 {
            0
        } else if len <= q2 {
            1
        } else if len <= q3 {
            2
        } else {
            3
        }
    };

    let mut buckets: [Vec<usize>; 4] = Default::default();
    for (i, &len) in lengths.iter().enumerate() {
        buckets[bucket_of(len)].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), hyper: Vec::new(), test: Vec::new() };
    for bucket in buckets.iter_mut() {
        bucket.shuffle(&mut rng);
        let n = bucket.len();
        let n_hyper = (n as f64 * hyper_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        let (hyper, rest) = bucket.split_at(n_hyper.min(n));
        let (test, train) = rest.split_at(n_test.min(rest.len()));
        split.hyper.extend_from_slice(hyper);
        split.test.extend_from_slice(test);
        split.train.extend_from_slice(train);
    }
    split.train.sort_unstable();
    split.hyper.sort_unstable();
    split.test.sort_unstable();
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_file_loads_both_records() {
        let c = Corpus::from_tsv("1\tgreat movie\n0\tthe soup was cold\n").unwrap();
        assert_eq!(c.entries.len(), 2);
        assert_eq!(c.entries[0].label, 1);
        assert_eq!(c.entries[1].label, 0);
        assert_eq!(c.entries[0].ids.len(), 2);
        assert_eq!(c.entries[1].ids.len(), 4);
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn reloading_gives_identical_vocabulary_and_ids() {
        let raw = "1\tthe movie was warm\n0\tthe soup was cold\n1\twarm bread\n";
        let a = Corpus::from_tsv(raw).unwrap();
        let b = Corpus::from_tsv(raw).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn malformed_line_is_rejected_with_its_number() {
        let err = Corpus::from_tsv("1\tfine\nno tab here\n").unwrap_err();
        match err {
            CorpusError::Malformed { line } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn non_binary_label_is_rejected() {
        let err = Corpus::from_tsv("2\tbad label\n").unwrap_err();
        match err {
            CorpusError::BadLabel { line, label } => {
                assert_eq!(line, 1);
                assert_eq!(label, "2");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_text_and_empty_file_are_rejected() {
        assert!(matches!(
            Corpus::from_tsv("1\t   \n"),
            Err(CorpusError::EmptyText { line: 1 })
        ));
        assert!(matches!(Corpus::from_tsv("\n\n"), Err(CorpusError::Empty)));
    }

    #[test]
    fn unknown_only_line_warns_under_foreign_vocabulary() {
        let vocab = Vocab::build(["the movie was warm"]);
        let c = Corpus::from_tsv_with_vocab("1\tsoup arrived\n0\tthe movie\n", &vocab).unwrap();
        assert_eq!(c.warnings.len(), 1);
        assert!(c.warnings[0].starts_with("line 1"), "{}", c.warnings[0]);
        assert_eq!(c.entries[0].ids, vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn blank_lines_are_skipped_not_rejected() {
        let c = Corpus::from_tsv("1\tgood\n\n0\tbad\n").unwrap();
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn split_pools_are_disjoint_and_cover_everything() {
        let lengths: Vec<usize> = (0..100).map(|i| 2 + i % 9).collect();
        let s = stratified_split(&lengths, 0.15, 0.25, 9);
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(s.hyper.iter())
            .chain(s.test.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!((s.hyper.len() as i64 - 15).abs() <= 2);
        assert!((s.test.len() as i64 - 25).abs() <= 2);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let lengths: Vec<usize> = (0..60).map(|i| 2 + (i * 7) % 10).collect();
        let a = stratified_split(&lengths, 0.2, 0.2, 1);
        let b = stratified_split(&lengths, 0.2, 0.2, 1);
        let c = stratified_split(&lengths, 0.2, 0.2, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_stratifies_across_length_quartiles() {
        // Half short, half long: every pool must see both kinds.
        let lengths: Vec<usize> =
            (0..40).map(|i| if i < 20 { 2 } else { 10 }).collect();
        let s = stratified_split(&lengths, 0.2, 0.3, 3);
        for pool in [&s.train, &s.hyper, &s.test] {
            assert!(pool.iter().any(|&i| lengths[i] == 2), "pool missing short");
            assert!(pool.iter().any(|&i| lengths[i] == 10), "pool missing long");
        }
    }

    #[test]
    fn bundled_corpus_meets_the_lab_requirements() {
        let raw = include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/corpus.tsv"
        ));
        let c = Corpus::from_tsv(raw).unwrap();
        assert!(c.entries.len() >= 200, "corpus has {} records", c.entries.len());
        assert!(c.vocab.len() <= 300, "vocabulary {} exceeds 300", c.vocab.len());
        assert!(c.warnings.is_empty());
        let short = c.entries.iter().filter(|e| e.ids.len() <= 4).count();
        let mid = c.entries.iter().filter(|e| (6..=10).contains(&e.ids.len())).count();
        assert!(short >= 25, "only {short} sentences of length <= 4");
        assert!(mid >= 20, "only {mid} sentences of length 6..=10");
        let pos = c.entries.iter().filter(|e| e.label == 1).count();
        assert!(pos * 3 >= c.entries.len() && pos * 3 <= 2 * c.entries.len());
        let max_len = c.entries.iter().map(|e| e.ids.len()).max().unwrap();
        assert!(max_len <= 32, "length {max_len} exceeds the position table");
    }
}
