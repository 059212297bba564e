//! Tokenization, corpus statistics, importance scores and frequency-based masking.

mod freq;
mod mask;
mod tokenizer;

pub use freq::{count_frequencies, importance_score, FreqTable, ImportanceScores};
pub use mask::{sample_mask, sample_mask_with, target_count, MaskVector};
pub use tokenizer::{Tokenizer, BOS, EOS, MIN_VOCAB, PAD, UNK};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the minimum {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("frequency table has no samples")]
    NoSamples,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Earlier tokens go to the visual path, later tokens to the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlowFastSplit<'a> {
    pub encoder_tokens: &'a [usize],
    pub decoder_tokens: &'a [usize],
}

impl<'a> SlowFastSplit<'a> {
    /// Prefix of length `min(t_e, len)` to the encoder, the rest to the decoder.
    pub fn new(tokens: &'a [usize], t_e: usize) -> Self {
        let (encoder_tokens, decoder_tokens) = tokens.split_at(t_e.min(tokens.len()));
        Self {
            encoder_tokens,
            decoder_tokens,
        }
    }
}

/// Reads samples from a text file (one per non-empty line) or from every
/// `.txt` file in a directory, in sorted path order.
pub fn read_samples(path: &Path) -> Result<Vec<String>, CorpusError> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "txt") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        out.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_prefix_suffix() {
        let t: Vec<usize> = (0..10).collect();
        let s = SlowFastSplit::new(&t, 4);
        assert_eq!(s.encoder_tokens, &[0, 1, 2, 3]);
        assert_eq!(s.decoder_tokens.len(), 6);
        let s = SlowFastSplit::new(&t, 0);
        assert!(s.encoder_tokens.is_empty());
        let s = SlowFastSplit::new(&t, 20);
        assert!(s.decoder_tokens.is_empty());
    }

    #[test]
    fn reads_lines_and_directories() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "second\n\nthird\n").unwrap();
        std::fs::write(dir.path().join("a.txt"), "first\n").unwrap();
        std::fs::write(dir.path().join("skip.md"), "nope\n").unwrap();
        let s = read_samples(dir.path()).unwrap();
        assert_eq!(s, vec!["first", "second", "third"]);
        let s = read_samples(&dir.path().join("b.txt")).unwrap();
        assert_eq!(s.len(), 2);
    }
}
