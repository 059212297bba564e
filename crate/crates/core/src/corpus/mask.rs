use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, ImportanceScores};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    masked: Vec<bool>,
    masked_count: usize,
}

impl MaskVector {
    pub fn none(n: usize) -> Self {
        Self {
            masked: vec![false; n],
            masked_count: 0,
        }
    }

    pub fn from_flags(masked: Vec<bool>) -> Self {
        let masked_count = masked.iter().filter(|&&m| m).count();
        Self { masked, masked_count }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    /// Complement: `true` where the position survives.
    pub fn keep(&self) -> Vec<bool> {
        self.masked.iter().map(|&m| !m).collect()
    }
}

/// `floor(rate * n + 0.5)`.
pub fn target_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64 + 0.5).floor() as usize).min(n)
}

/// Masks exactly `floor(rate * n + 0.5)` positions, drawn without replacement
/// with weight `exp(-s / kappa)` per position, so low-importance tokens go
/// first. Uses weighted reservoir keys `ln(u) / w`: the largest keys win,
/// which is equivalent to successive weighted draws.
pub fn sample_mask(
    scores: &ImportanceScores,
    rate: f64,
    kappa: f64,
    seed: u64,
) -> Result<MaskVector, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(scores, rate, kappa, &mut rng)
}

pub fn sample_mask_with<R: Rng>(
    scores: &ImportanceScores,
    rate: f64,
    kappa: f64,
    rng: &mut R,
) -> Result<MaskVector, CorpusError> {
    let n = scores.len();
    if !(0.0..=1.0).contains(&rate) {
        return Err(CorpusError::Invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    if !(kappa > 0.0) {
        return Err(CorpusError::Invalid(format!("mask temperature {kappa} must be positive")));
    }
    if n == 0 {
        return Err(CorpusError::Invalid("cannot mask an empty sequence".into()));
    }
    let k = target_count(n, rate);
    // Subtracting the minimum score keeps every weight in (0, 1].
    let s_min = scores.0.iter().copied().fold(f64::INFINITY, f64::min);
    let mut keys: Vec<(f64, usize)> = scores
        .0
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            // ln(u) / exp(-(s - s_min)/kappa)
            (u.ln() * ((s - s_min) / kappa).exp(), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut masked = vec![false; n];
    for &(_, i) in &keys[..k] {
        masked[i] = true;
    }
    Ok(MaskVector { masked, masked_count: k })
}
