use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{par_map, EvalError};
use crate::corpus::{target_count, FreqTable, ImportanceScores};
use crate::model::{Example, VistModel};
use crate::nn::ParamStore;
use crate::objectives::semantic_distance;
use crate::tensor::Real;
use crate::vision::{VisionError, VisualFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Highest importance score (rarest token) first.
    RareFirst,
    FrequentFirst,
    Random,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::RareFirst, MaskMode::FrequentFirst, MaskMode::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::RareFirst => "rare-first",
            MaskMode::FrequentFirst => "frequent-first",
            MaskMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistancePoint {
    pub ratio: f64,
    /// Absent when the ratio would mask every token.
    pub sum: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceCurve {
    pub mode: MaskMode,
    pub points: Vec<DistancePoint>,
}

impl DistanceCurve {
    pub fn sum_at(&self, ratio: f64) -> Option<f64> {
        self.points.iter().find(|p| p.ratio == ratio).and_then(|p| p.sum)
    }
}

pub const CURVES_HEADER: &str = "mode,ratio,distance_sum,distance_mean";

/// One row per point; absent values are left empty.
pub fn curves_csv(curves: &[DistanceCurve]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
    for c in curves {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{},{}", c.mode.as_str(), p.ratio, opt(p.sum), opt(p.mean));
        }
    }
    s
}

/// Positions in masking order. Ties keep position order.
fn mask_order(scores: &[f64], mode: MaskMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match mode {
        MaskMode::RareFirst => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        MaskMode::FrequentFirst => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        MaskMode::Random => idx.shuffle(rng),
    }
    idx
}

/// Keep flags after masking the first `ratio` share of `order`, or `None`
/// when nothing would be left.
fn keep_flags(order: &[usize], ratio: f64) -> Option<Vec<bool>> {
    let n = order.len();
    let k = target_count(n, ratio);
    if k >= n {
        return None;
    }
    let mut keep = vec![true; n];
    order[..k].iter().for_each(|&i| keep[i] = false);
    Some(keep)
}

/// Text-visual distance per mask ratio: each example's encoder tokens are
/// masked in `mode` order, the survivors are mean-pooled through the
/// embedding table and compared with the projected pooled visual tokens.
/// The random mode draws one permutation per example from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn distance_sweep<T: Real>(
    model: &VistModel,
    store: &ParamStore<T>,
    examples: &[Example],
    cache: &[Option<VisualFeatures<T>>],
    freq: &FreqTable,
    ratios: &[f64],
    mode: MaskMode,
    seed: u64,
    workers: usize,
) -> Result<DistanceCurve, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if let Some(&r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EvalError::Ratio(r));
    }
    let per: Vec<Vec<Option<f64>>> = par_map(workers, examples, |i, ex| {
        if ex.images.is_empty() || ex.encoder_tokens.is_empty() {
            return Err(EvalError::Model(VisionError::NoImages.into()));
        }
        let visual = model.visual_embedding(store, &ex.images, cache.get(i).and_then(Option::as_ref))?;
        let scores = ImportanceScores::for_tokens(freq, &ex.encoder_tokens)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let order = mask_order(&scores.0, mode, &mut rng);
        ratios
            .iter()
            .map(|&r| match keep_flags(&order, r) {
                None => Ok(None),
                Some(keep) => {
                    let text = model.text_embedding(store, &ex.encoder_tokens, &keep)?;
                    Ok(Some(semantic_distance(&visual, &text)?))
                }
            })
            .collect()
    })?;
    let points = ratios
        .iter()
        .enumerate()
        .map(|(j, &ratio)| {
            let vals: Option<Vec<f64>> = per.iter().map(|row| row[j]).collect();
            let sum = vals.as_ref().map(|v| v.iter().sum::<f64>());
            DistancePoint {
                ratio,
                sum,
                mean: sum.map(|s| s / examples.len() as f64),
            }
        })
        .collect();
    Ok(DistanceCurve { mode, points })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenGain {
    pub token: usize,
    pub score: f64,
    /// Among the most frequent half of the sentence.
    pub masked: bool,
}

/// Importance score per token with deterministic flags on the most frequent
/// half. At least one token always stays unflagged.
pub fn info_gain_profile(tokens: &[usize], table: &FreqTable) -> Result<Vec<TokenGain>, EvalError> {
    let scores = ImportanceScores::for_tokens(table, tokens)?;
    let n = tokens.len();
    let order = mask_order(&scores.0, MaskMode::FrequentFirst, &mut ChaCha8Rng::seed_from_u64(0));
    let k = target_count(n, 0.5).min(n.saturating_sub(1));
    let mut masked = vec![false; n];
    order[..k].iter().for_each(|&i| masked[i] = true);
    Ok(tokens
        .iter()
        .zip(scores.0)
        .zip(masked)
        .map(|((&token, score), masked)| TokenGain { token, score, masked })
        .collect())
}
