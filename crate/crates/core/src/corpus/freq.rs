use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::CorpusError;

/// Sample-level token statistics: how many samples were seen, and for each
/// token how many of those samples contain it at least once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreqTable {
    sample_count: u64,
    counts: BTreeMap<usize, u64>,
}

impl FreqTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Number of samples containing `w`; zero for unseen tokens.
    pub fn count(&self, w: usize) -> u64 {
        self.counts.get(&w).copied().unwrap_or(0)
    }

    pub fn distinct_tokens(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn add_sample(&mut self, tokens: &[usize]) {
        self.sample_count += 1;
        let distinct: BTreeSet<usize> = tokens.iter().copied().collect();
        for w in distinct {
            *self.counts.entry(w).or_default() += 1;
        }
    }

    /// Folds another shard's counts into this one. Associative and commutative.
    pub fn merge(&mut self, other: &FreqTable) {
        self.sample_count += other.sample_count;
        for (&w, &c) in &other.counts {
            *self.counts.entry(w).or_default() += c;
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# vist-freq 1\nsamples {}\n", self.sample_count);
        for (w, c) in &self.counts {
            let _ = writeln!(s, "{w}\t{c}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("# vist-freq 1") {
            return Err(CorpusError::Format("missing frequency table header".into()));
        }
        let sample_count = lines
            .next()
            .and_then(|l| l.strip_prefix("samples "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| CorpusError::Format("missing sample count".into()))?;
        let mut counts = BTreeMap::new();
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let (w, c) = l
                .split_once('\t')
                .and_then(|(w, c)| Some((w.trim().parse::<usize>().ok()?, c.trim().parse::<u64>().ok()?)))
                .ok_or_else(|| CorpusError::Format(format!("bad count line {l:?}")))?;
            if c > sample_count {
                return Err(CorpusError::Format(format!("count {c} for token {w} exceeds sample count")));
            }
            counts.insert(w, c);
        }
        Ok(Self { sample_count, counts })
    }
}

/// Single pass over samples; order does not affect the result.
pub fn count_frequencies<I, S>(samples: I) -> FreqTable
where
    I: IntoIterator<Item = S>,
    S: AsRef<[usize]>,
{
    let mut t = FreqTable::new();
    for s in samples {
        t.add_sample(s.as_ref());
    }
    t
}

/// `ln(|S| / (1 + count(w)))`. Rare tokens score high; a token present in
/// every sample scores slightly below zero.
pub fn importance_score(table: &FreqTable, w: usize) -> Result<f64, CorpusError> {
    if table.sample_count == 0 {
        return Err(CorpusError::NoSamples);
    }
    Ok((table.sample_count as f64 / (1 + table.count(w)) as f64).ln())
}

/// Importance score per position of a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores(pub Vec<f64>);

impl ImportanceScores {
    pub fn for_tokens(table: &FreqTable, tokens: &[usize]) -> Result<Self, CorpusError> {
        tokens
            .iter()
            .map(|&w| importance_score(table, w))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_counts() {
        let t = count_frequencies([vec![1, 1, 2], vec![2, 3]]);
        assert_eq!(t.sample_count(), 2);
        assert_eq!((t.count(1), t.count(2), t.count(3), t.count(9)), (1, 2, 1, 0));
    }

    #[test]
    fn empty_stream_cannot_score() {
        let t = count_frequencies(Vec::<Vec<usize>>::new());
        assert_eq!(t.sample_count(), 0);
        assert!(matches!(importance_score(&t, 0), Err(CorpusError::NoSamples)));
    }

    fn table(samples: u64, w: usize, count: u64) -> FreqTable {
        let mut t = FreqTable::new();
        t.sample_count = samples;
        t.counts.insert(w, count);
        t
    }

    #[test]
    fn score_examples() {
        assert_eq!(importance_score(&table(1000, 7, 999), 7).unwrap(), 0.0);
        let s = importance_score(&table(8, 7, 3), 7).unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-15);
        let s = importance_score(&table(100, 7, 0), 8).unwrap();
        assert!((s - 4.605170185988091).abs() < 1e-12);
    }

    #[test]
    fn merge_matches_single_pass_and_persists() {
        let samples = [vec![1, 2], vec![2, 2, 5], vec![7], vec![1, 7, 9]];
        let whole = count_frequencies(&samples);
        let mut a = count_frequencies(&samples[..1]);
        let b = count_frequencies(&samples[1..]);
        a.merge(&b);
        assert_eq!(a, whole);
        assert_eq!(FreqTable::from_text(&whole.to_text()).unwrap(), whole);
        assert!(FreqTable::from_text("# vist-freq 1\nsamples 1\n3\t2\n").is_err());
        assert!(FreqTable::from_text("garbage").is_err());
    }
}
