//! Symbol-sequence corpora: loading, vocabularies and preprocessing.
//!
//! The on-disk format is UTF-8 text with one sequence per line and tokens
//! separated by runs of spaces or tabs. Blank lines are rejected.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

/// Name given to the residual symbol created by [`merge_rare_symbols`].
pub const RESIDUAL_SYMBOL: &str = "<rare>";

/// Bijection between surface strings and contiguous indices `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index_of: HashMap<String, u32>,
    residual: Option<u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from distinct symbols in the given order.
    pub fn from_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for s in symbols {
            let s = s.into();
            if v.index_of.contains_key(&s) {
                return Err(Error::InvalidArgument(format!("duplicate symbol {s:?}")));
            }
            v.intern(s);
        }
        Ok(v)
    }

    /// Returns the index of `s`, adding it if unseen.
    pub fn intern(&mut self, s: impl Into<String>) -> u32 {
        let s = s.into();
        if let Some(&i) = self.index_of.get(&s) {
            return i;
        }
        let i = self.symbols.len() as u32;
        self.index_of.insert(s.clone(), i);
        self.symbols.push(s);
        i
    }

    pub fn index(&self, s: &str) -> Option<u32> {
        self.index_of.get(s).copied()
    }

    pub fn symbol(&self, i: u32) -> Option<&str> {
        self.symbols.get(i as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Index of the residual symbol absorbing merged rare symbols, if any.
    pub fn residual(&self) -> Option<u32> {
        self.residual
    }

    pub fn residual_symbol(&self) -> Option<&str> {
        self.residual.and_then(|i| self.symbol(i))
    }

    /// Marks an existing symbol as the residual.
    pub fn set_residual(&mut self, s: &str) -> Result<()> {
        let i = self.index(s).ok_or_else(|| Error::InvalidArgument(format!("unknown residual symbol {s:?}")))?;
        self.residual = Some(i);
        Ok(())
    }

    /// Maps a token to its index, falling back to the residual symbol for
    /// tokens outside the vocabulary.
    pub fn lookup_or_residual(&self, s: &str) -> Option<u32> {
        self.index(s).or(self.residual)
    }
}

/// A list of integer-index sequences over a shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    sequences: Vec<Vec<u32>>,
    vocab: Vocabulary,
}

impl SequenceDataset {
    /// Validates that every index is inside the vocabulary and no sequence
    /// is empty.
    pub fn new(sequences: Vec<Vec<u32>>, vocab: Vocabulary) -> Result<Self> {
        let m = vocab.len() as u32;
        for (k, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidArgument(format!("sequence {k} is empty")));
            }
            if let Some(&bad) = seq.iter().find(|&&o| o >= m) {
                return Err(Error::InvalidArgument(format!(
                    "sequence {k} has symbol {bad} outside vocabulary of size {m}"
                )));
            }
        }
        Ok(Self { sequences, vocab })
    }

    /// Dataset over the anonymous vocabulary `"0", "1", …, "m-1"`.
    pub fn from_indices(sequences: Vec<Vec<u32>>, m: usize) -> Result<Self> {
        let vocab = Vocabulary::from_symbols((0..m).map(|i| i.to_string()))?;
        Self::new(sequences, vocab)
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_symbols(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of distinct symbols actually occurring in the sequences.
    pub fn distinct_symbols(&self) -> usize {
        let mut seen = vec![false; self.vocab.len()];
        for &o in self.sequences.iter().flatten() {
            seen[o as usize] = true;
        }
        seen.into_iter().filter(|x| *x).count()
    }

    /// Keeps the first `k` sequences.
    pub fn take(&self, k: usize) -> Self {
        Self { sequences: self.sequences.iter().take(k).cloned().collect(), vocab: self.vocab.clone() }
    }

    /// Token counts indexed by symbol.
    pub fn symbol_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab.len()];
        for &o in self.sequences.iter().flatten() {
            counts[o as usize] += 1;
        }
        counts
    }

    /// Serializes to the line format.
    pub fn to_line_format(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            for (t, &o) in seq.iter().enumerate() {
                if t > 0 {
                    out.push(' ');
                }
                out.push_str(self.vocab.symbol(o).expect("validated index"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_line_format()).map_err(|source| Error::Io { path: path.to_owned(), source })
    }
}

/// Parses the line format, building a vocabulary in first-appearance order.
pub fn parse_sequences(text: &str) -> Result<SequenceDataset> {
    let mut vocab = Vocabulary::new();
    let mut sequences = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let seq: Vec<u32> = line.split_whitespace().map(|tok| vocab.intern(tok)).collect();
        if seq.is_empty() {
            return Err(Error::Parse { line: k + 1, message: "line has no tokens".into() });
        }
        sequences.push(seq);
    }
    Ok(SequenceDataset { sequences, vocab })
}

/// Parses the line format against a fixed vocabulary. Unknown tokens map to
/// the residual symbol if the vocabulary has one, otherwise they are an error.
pub fn parse_sequences_with_vocab(text: &str, vocab: &Vocabulary) -> Result<SequenceDataset> {
    let mut sequences = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            let i = vocab.lookup_or_residual(tok).ok_or_else(|| Error::Parse {
                line: k + 1,
                message: format!("symbol {tok:?} is not in the model vocabulary"),
            })?;
            seq.push(i);
        }
        if seq.is_empty() {
            return Err(Error::Parse { line: k + 1, message: "line has no tokens".into() });
        }
        sequences.push(seq);
    }
    Ok(SequenceDataset { sequences, vocab: vocab.clone() })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })
}

/// Loads a line-format file.
pub fn load_sequences(path: &Path) -> Result<SequenceDataset> {
    let ds = parse_sequences(&read_text(path)?)?;
    if ds.is_empty() {
        return Err(Error::EmptyFile { path: path.to_owned() });
    }
    Ok(ds)
}

/// Loads a line-format file, mapping tokens through an existing vocabulary.
pub fn load_sequences_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<SequenceDataset> {
    let ds = parse_sequences_with_vocab(&read_text(path)?, vocab)?;
    if ds.is_empty() {
        return Err(Error::EmptyFile { path: path.to_owned() });
    }
    Ok(ds)
}

/// Cuts every sequence after `max_len` symbols.
pub fn truncate(ds: &SequenceDataset, max_len: usize) -> Result<SequenceDataset> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let sequences = ds.sequences.iter().map(|s| s[..s.len().min(max_len)].to_vec()).collect();
    Ok(SequenceDataset { sequences, vocab: ds.vocab.clone() })
}

/// Maps the rarest symbols, which together make up strictly less than
/// `cumulative_threshold` of all tokens, onto a single residual symbol.
///
/// Symbols are ranked by ascending count with ties broken by index. Kept
/// symbols retain their relative order and the residual symbol is appended
/// last. If the vocabulary already has a residual, merged symbols are folded
/// into it instead and it is never itself a merge candidate.
pub fn merge_rare_symbols(ds: &SequenceDataset, cumulative_threshold: f64) -> Result<SequenceDataset> {
    if !(0.0..1.0).contains(&cumulative_threshold) {
        return Err(Error::InvalidArgument(format!("merge threshold must lie in [0, 1), got {cumulative_threshold}")));
    }
    let counts = ds.symbol_counts();
    let total: u64 = counts.iter().sum();
    let existing = ds.vocab.residual;

    let mut ranking: Vec<u32> = (0..counts.len() as u32).filter(|&i| Some(i) != existing).collect();
    ranking.sort_by_key(|&i| (counts[i as usize], i));

    let mut merged = vec![false; counts.len()];
    let mut acc = 0u64;
    let mut n_merged = 0;
    for &i in &ranking {
        let next = acc + counts[i as usize];
        if total == 0 || (next as f64) / (total as f64) >= cumulative_threshold {
            break;
        }
        acc = next;
        merged[i as usize] = true;
        n_merged += 1;
    }
    if n_merged == 0 {
        return Ok(ds.clone());
    }
    if n_merged == ranking.len() && existing.is_none() {
        return Err(Error::MergeAll);
    }

    let mut vocab = Vocabulary::new();
    let mut remap = vec![0u32; counts.len()];
    for (i, s) in ds.vocab.symbols.iter().enumerate() {
        if !merged[i] && Some(i as u32) != existing {
            remap[i] = vocab.intern(s.clone());
        }
    }
    let residual_name = match existing {
        Some(r) => ds.vocab.symbols[r as usize].clone(),
        None => {
            let mut name = RESIDUAL_SYMBOL.to_string();
            while vocab.index(&name).is_some() || ds.vocab.index(&name).is_some() {
                name.push('_');
            }
            name
        }
    };
    let r = vocab.intern(residual_name);
    vocab.residual = Some(r);
    for (i, m) in merged.iter().enumerate() {
        if *m || Some(i as u32) == existing {
            remap[i] = r;
        }
    }
    let sequences = ds.sequences.iter().map(|s| s.iter().map(|&o| remap[o as usize]).collect()).collect();
    Ok(SequenceDataset { sequences, vocab })
}

/// Shuffles sequences with `rng` and splits off `test_fraction` of them
/// (rounded, at least one on each side). Returns `(train, test)`.
pub fn split_train_test<R: Rng + ?Sized>(
    ds: &SequenceDataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(SequenceDataset, SequenceDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("need at least two sequences to split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let n_test = ((ds.len() as f64 * test_fraction).round() as usize).clamp(1, ds.len() - 1);
    let n_train = ds.len() - n_test;
    let pick = |idx: &[usize]| SequenceDataset {
        sequences: idx.iter().map(|&i| ds.sequences[i].clone()).collect(),
        vocab: ds.vocab.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// One-line summary used in logs.
pub fn describe(ds: &SequenceDataset) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} sequences, {} tokens, vocabulary {}, max length {}",
        ds.len(),
        ds.total_tokens(),
        ds.num_symbols(),
        ds.max_len()
    );
    s
}
