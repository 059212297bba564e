//! Synthetic corpora for toy training runs.
//!
//! The recall corpus gives every sample a topic. The distant part is prose
//! built from the topic's own vocabulary (so the topic is visible in the
//! rendered images), and the near part is a list of `key value` pairs whose
//! values follow a topic-specific table. Predicting a value therefore needs
//! the topic, which only the distant part states outright.
//!
//! The in-context task bank draws inputs from two word groups. Each episode
//! picks one label per group from that group's label pool, and demos show
//! `input = label ;`. The query's label is known only if some demo of the
//! same group was seen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Tokenizer;

pub const FUNCTION_WORDS: [&str; 10] = ["the", "of", "and", "to", "in", "is", "a", "that", "for", "it"];

/// Disjoint letter sets so that topics differ in glyph shapes.
const TOPIC_LETTERS: [&str; 8] = ["bdpq", "mnhu", "ijlt", "ceos", "vwxy", "fkrz", "AEHK", "MNVW"];

fn make_word<R: Rng>(letters: &[u8], len: usize, rng: &mut R) -> String {
    (0..len).map(|_| letters[rng.gen_range(0..letters.len())] as char).collect()
}

/// `count` distinct words over `letters`, lengths 3 to 6.
fn word_set<R: Rng>(letters: &str, count: usize, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.gen_range(3..=6);
        let w = make_word(letters.as_bytes(), len, rng);
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSpec {
    pub topics: usize,
    pub topic_words: usize,
    pub keys: usize,
    /// Share of distant-part words that are function words.
    pub function_share: f64,
    pub seed: u64,
}

impl Default for RecallSpec {
    fn default() -> Self {
        Self {
            topics: 8,
            topic_words: 6,
            keys: 12,
            function_share: 0.5,
            seed: 7,
        }
    }
}

/// Vocabulary and per-topic tables of the recall corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallWorld {
    pub topic_words: Vec<Vec<String>>,
    pub keys: Vec<String>,
    pub values: Vec<String>,
    /// `table[topic][key]` is the index of the value.
    pub table: Vec<Vec<usize>>,
    pub function_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSample {
    pub topic: usize,
    pub distant: String,
    pub near: String,
}

impl RecallWorld {
    pub fn new(spec: &RecallSpec) -> Self {
        assert!(spec.topics <= TOPIC_LETTERS.len(), "at most {} topics", TOPIC_LETTERS.len());
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let topic_words = TOPIC_LETTERS[..spec.topics]
            .iter()
            .map(|l| word_set(l, spec.topic_words, &mut rng))
            .collect();
        let keys = (0..spec.keys).map(|i| format!("k{}", (b'a' + i as u8) as char)).collect();
        let values = (0..spec.keys).map(|i| format!("v{}", (b'a' + i as u8) as char)).collect();
        let table = (0..spec.topics)
            .map(|_| {
                let mut p: Vec<usize> = (0..spec.keys).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Self {
            topic_words,
            keys,
            values,
            table,
            function_share: spec.function_share,
        }
    }

    /// Distant prose of at least `words` words and `pairs` near pairs.
    pub fn sample<R: Rng>(&self, topic: usize, words: usize, pairs: usize, rng: &mut R) -> RecallSample {
        let tw = &self.topic_words[topic];
        let distant: Vec<&str> = (0..words)
            .map(|_| {
                if rng.gen_bool(self.function_share) {
                    FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())]
                } else {
                    tw[rng.gen_range(0..tw.len())].as_str()
                }
            })
            .collect();
        let near: Vec<String> = (0..pairs)
            .map(|_| {
                let k = rng.gen_range(0..self.keys.len());
                format!("{} {}", self.keys[k], self.values[self.table[topic][k]])
            })
            .collect();
        RecallSample {
            topic,
            distant: distant.join(" "),
            near: near.join(" "),
        }
    }

    /// Text covering every word twice (merges need a pair to recur), for
    /// tokenizer training.
    pub fn vocabulary_text(&self) -> String {
        let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
        for t in &self.topic_words {
            words.extend(t.iter().map(String::as_str));
        }
        words.extend(self.keys.iter().map(String::as_str));
        words.extend(self.values.iter().map(String::as_str));
        let once = words.join(" ");
        format!("{once} {once}")
    }
}

/// Samples with topics cycling in order, so every topic is equally common.
pub fn recall_corpus(world: &RecallWorld, count: usize, words: usize, pairs: usize, seed: u64) -> Vec<RecallSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = world.topic_words.len();
    (0..count).map(|i| world.sample(i % k, words, pairs, &mut rng)).collect()
}

/// Tokenizes the two parts separately so the split lands exactly at `t_e`:
/// the distant part is cut to `t_e` tokens, the near part (with a leading
/// space) to `t_d + 1`. `None` if either part is too short.
pub fn split_tokens(tok: &Tokenizer, distant: &str, near: &str, t_e: usize, t_d: usize) -> Option<Vec<usize>> {
    let mut a = if t_e == 0 { Vec::new() } else { tok.encode(distant) };
    let b = tok.encode(&format!(" {near}"));
    if a.len() < t_e || b.len() < t_d + 1 {
        return None;
    }
    a.truncate(t_e);
    a.extend_from_slice(&b[..t_d + 1]);
    Some(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclTask {
    pub name: String,
    /// Input words of the two classes.
    pub groups: [Vec<String>; 2],
    /// Per class, the labels an episode may assign to it.
    pub label_pools: [Vec<String>; 2],
}

impl IclTask {
    /// Every label that can be predicted, class 0 pool first.
    pub fn candidates(&self) -> Vec<String> {
        self.label_pools.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclDemo {
    pub input: String,
    pub class: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclEpisode {
    pub labels: [String; 2],
    pub encoder_demos: Vec<IclDemo>,
    pub decoder_demos: Vec<IclDemo>,
    pub query: IclDemo,
}

pub fn format_demo(d: &IclDemo) -> String {
    format!("{} = {} ;", d.input, d.label)
}

impl IclEpisode {
    pub fn encoder_text(&self) -> String {
        self.encoder_demos.iter().map(format_demo).collect::<Vec<_>>().join(" ")
    }

    /// Decoder demos followed by the unanswered query.
    pub fn prompt_text(&self) -> String {
        let mut parts: Vec<String> = self.decoder_demos.iter().map(format_demo).collect();
        parts.push(format!("{} =", self.query.input));
        parts.join(" ")
    }
}

impl IclTask {
    /// Classes of demos are drawn independently; the query class alternates
    /// with `index` so that evaluations are balanced.
    pub fn episode<R: Rng>(&self, n_e: usize, n_d: usize, index: usize, rng: &mut R) -> IclEpisode {
        let labels = [
            self.label_pools[0][rng.gen_range(0..self.label_pools[0].len())].clone(),
            self.label_pools[1][rng.gen_range(0..self.label_pools[1].len())].clone(),
        ];
        let demo = |class: usize, rng: &mut R| IclDemo {
            input: self.groups[class][rng.gen_range(0..self.groups[class].len())].clone(),
            class,
            label: labels[class].clone(),
        };
        let encoder_demos = (0..n_e).map(|_| demo(rng.gen_range(0..2), rng)).collect();
        let decoder_demos = (0..n_d).map(|_| demo(rng.gen_range(0..2), rng)).collect();
        let query = demo(index % 2, rng);
        IclEpisode {
            labels,
            encoder_demos,
            decoder_demos,
            query,
        }
    }
}

/// Two tasks sharing input groups: a plain two-label task and a pooled one
/// whose labels change from episode to episode.
pub fn icl_task_bank(seed: u64) -> Vec<IclTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [word_set("ceos", 8, &mut rng), word_set("ijlt", 8, &mut rng)];
    vec![
        IclTask {
            name: "binary".into(),
            groups: groups.clone(),
            label_pools: [vec!["yes".into()], vec!["no".into()]],
        },
        IclTask {
            name: "pooled".into(),
            groups,
            label_pools: [
                vec!["MMM".into(), "WWW".into(), "HHH".into(), "NNN".into()],
                vec!["ooo".into(), "xxx".into(), "vvv".into(), "ccc".into()],
            ],
        },
    ]
}

/// Text covering every word of a task bank twice.
pub fn icl_vocabulary_text(bank: &[IclTask]) -> String {
    let mut words = Vec::new();
    for t in bank {
        for g in &t.groups {
            words.extend(g.iter().cloned());
        }
        words.extend(t.candidates());
    }
    words.push("=".into());
    words.push(";".into());
    let once = words.join(" ");
    format!("{once} {once}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_values_follow_the_topic_table() {
        let w = RecallWorld::new(&RecallSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = w.sample(3, 20, 10, &mut rng);
        let words: Vec<&str> = s.near.split(' ').collect();
        for pair in words.chunks(2) {
            let k = w.keys.iter().position(|k| k == pair[0]).unwrap();
            assert_eq!(pair[1], w.values[w.table[3][k]]);
        }
        for word in s.distant.split(' ') {
            assert!(FUNCTION_WORDS.contains(&word) || w.topic_words[3].iter().any(|t| t == word));
        }
    }

    #[test]
    fn topics_use_disjoint_letters() {
        let w = RecallWorld::new(&RecallSpec::default());
        for (i, a) in w.topic_words.iter().enumerate() {
            for b in &w.topic_words[i + 1..] {
                for x in a {
                    assert!(b.iter().all(|y| x.chars().all(|c| !y.contains(c))));
                }
            }
        }
    }

    #[test]
    fn episodes_are_balanced_and_consistent() {
        let bank = icl_task_bank(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut classes = [0; 2];
        for i in 0..20 {
            let e = bank[1].episode(8, 2, i, &mut rng);
            classes[e.query.class] += 1;
            for d in e.encoder_demos.iter().chain(&e.decoder_demos) {
                assert_eq!(d.label, e.labels[d.class]);
                assert!(bank[1].groups[d.class].contains(&d.input));
            }
            assert!(e.prompt_text().ends_with(" ="));
        }
        assert_eq!(classes, [10, 10]);
    }
}
