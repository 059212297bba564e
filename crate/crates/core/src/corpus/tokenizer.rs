use std::collections::HashMap;
use std::fmt::Write as _;

use super::CorpusError;

pub const BYTE_TOKENS: usize = 256;
pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const UNK: usize = 259;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
/// Smallest legal vocabulary: every byte plus the four specials.
pub const MIN_VOCAB: usize = BYTE_TOKENS + SPECIALS.len();

/// Byte-level BPE. Ids `0..256` are raw bytes, `256..260` are specials,
/// and every id from 260 on is a learned merge of two earlier ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(usize, usize)>,
    ranks: HashMap<(usize, usize), usize>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Space,
    Word,
    Other,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphanumeric() {
        Class::Word
    } else {
        Class::Other
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Chunk {
    Empty,
    SpaceRun,
    LeadSpace,
    Body(Class),
}

/// Splits text into merge domains: a single leading space attaches to the
/// following run of same-class characters; other whitespace stands alone.
pub(crate) fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut state = Chunk::Empty;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let cl = class(c);
        let next = if cl == Class::Space {
            let before_word = chars.peek().is_some_and(|&(_, n)| class(n) != Class::Space);
            if before_word {
                Chunk::LeadSpace
            } else if state == Chunk::SpaceRun {
                continue;
            } else {
                Chunk::SpaceRun
            }
        } else {
            match state {
                Chunk::LeadSpace => {
                    state = Chunk::Body(cl);
                    continue;
                }
                Chunk::Body(k) if k == cl => continue,
                _ => Chunk::Body(cl),
            }
        };
        if i > start {
            out.push(&text[start..i]);
        }
        start = i;
        state = next;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Tokenizer {
    /// Byte-level tokenizer with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges is always valid")
    }

    fn from_merges(merges: Vec<(usize, usize)>) -> Result<Self, CorpusError> {
        let mut pieces: Vec<Vec<u8>> = (0..BYTE_TOKENS).map(|b| vec![b as u8]).collect();
        pieces.extend(SPECIALS.iter().map(|s| s.as_bytes().to_vec()));
        let mut ranks = HashMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let id = MIN_VOCAB + r;
            let valid = |x: usize| x < id && !(BYTE_TOKENS..MIN_VOCAB).contains(&x);
            if !valid(a) || !valid(b) {
                return Err(CorpusError::Format(format!("merge {r} references invalid id")));
            }
            let mut p = pieces[a].clone();
            p.extend_from_slice(&pieces[b]);
            pieces.push(p);
            ranks.insert((a, b), r);
        }
        Ok(Self { merges, ranks, pieces })
    }

    /// Learns merges from `corpus` until the vocabulary reaches `vocab_size`
    /// or no pair occurs twice. Ties on pair frequency go to the smaller pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self, CorpusError> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(CorpusError::EmptyCorpus);
        }
        if vocab_size < MIN_VOCAB {
            return Err(CorpusError::VocabTooSmall {
                requested: vocab_size,
                minimum: MIN_VOCAB,
            });
        }
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for s in corpus {
            for w in pretokenize(s.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<usize>, u64)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(usize::from).collect(), c))
            .collect();
        words.sort();

        let mut merges = Vec::new();
        while MIN_VOCAB + merges.len() < vocab_size {
            let mut pair_counts: HashMap<(usize, usize), u64> = HashMap::new();
            for (ids, c) in &words {
                for p in ids.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let new_id = MIN_VOCAB + merges.len();
            merges.push(pair);
            for (ids, _) in words.iter_mut() {
                apply_merge(ids, pair, new_id);
            }
        }
        Self::from_merges(merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let mut ids: Vec<usize> = word.bytes().map(usize::from).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).copied())
                .min();
            let Some(rank) = best else { break };
            apply_merge(&mut ids, self.merges[rank], MIN_VOCAB + rank);
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for w in pretokenize(text) {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Raw bytes of a token sequence; specials contribute their marker text.
    pub fn decode_bytes(&self, ids: &[usize]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            match self.pieces.get(id) {
                Some(p) => out.extend_from_slice(p),
                None => out.extend_from_slice(SPECIALS[UNK - BYTE_TOKENS].as_bytes()),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Display form of one token.
    pub fn piece(&self, id: usize) -> String {
        String::from_utf8_lossy(&self.decode_bytes(&[id])).into_owned()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("vist-tokenizer 1\nmerges {}\n", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines();
        if lines.next() != Some("vist-tokenizer 1") {
            return Err(CorpusError::Format("missing tokenizer header".into()));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| CorpusError::Format("missing merge count".into()))?;
        let mut merges = Vec::with_capacity(n);
        for l in lines.take(n) {
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b))) => merges.push((a, b)),
                _ => return Err(CorpusError::Format(format!("bad merge line {l:?}"))),
            }
        }
        if merges.len() != n {
            return Err(CorpusError::Format("truncated merge list".into()));
        }
        Self::from_merges(merges)
    }
}

fn apply_merge(ids: &mut Vec<usize>, pair: (usize, usize), new_id: usize) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && (ids[r], ids[r + 1]) == pair {
            ids[w] = new_id;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretokenize_attaches_single_leading_space() {
        assert_eq!(pretokenize("the cat, sat"), vec!["the", " cat", ",", " sat"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pretokenize("  x "), vec![" ", " x", " "]);
        assert_eq!(pretokenize(""), Vec::<&str>::new());
    }

    #[test]
    fn byte_level_identity_at_minimum_vocab() {
        let tok = Tokenizer::train(&["abab"], MIN_VOCAB).unwrap();
        assert_eq!(tok.vocab_size(), 260);
        assert_eq!(tok.encode("ab").len(), 2);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(matches!(
            Tokenizer::train(&["abcdefghijklmnopqrstuvwxyz"], 3),
            Err(CorpusError::VocabTooSmall { .. })
        ));
        assert!(matches!(Tokenizer::train::<&str>(&[""], 300), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn merges_shorten_frequent_words_and_persist() {
        let corpus = ["the cat and the dog and the bird"; 4];
        let tok = Tokenizer::train(&corpus, 300).unwrap();
        assert!(tok.vocab_size() > MIN_VOCAB);
        assert!(tok.encode(" the").len() == 1);
        let back = Tokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(tok.decode(&tok.encode(corpus[0])), corpus[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<String> = (0..50).map(|i| format!("item {i} of list {}", i % 7)).collect();
        let a = Tokenizer::train(&corpus, 320).unwrap();
        let b = Tokenizer::train(&corpus, 320).unwrap();
        assert_eq!(a.merges(), b.merges());
    }
}
