//! Contrastive alignment between pooled visual tokens and masked text
//! embeddings, plus the joint objective.

use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("every text position is masked")]
    AllMasked,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vectors differ in length: {0} vs {1}")]
    Length(usize, usize),
    #[error("similarities are not finite")]
    NonFinite,
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Dot,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Self::Cosine),
            "dot" => Some(Self::Dot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PveConfig {
    pub tau: f64,
    pub lambda: f64,
    pub mask_rate: f64,
    pub mask_kappa: f64,
    pub similarity: Similarity,
    /// Adds the text-to-visual direction and averages the two.
    pub symmetric: bool,
    /// Lets the contrastive loss update the shared embedding table.
    pub text_grad: bool,
}

impl Default for PveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            mask_rate: 0.5,
            mask_kappa: 1.0,
            similarity: Similarity::Cosine,
            symmetric: false,
            text_grad: true,
        }
    }
}

impl PveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.mask_kappa > 0.0) {
            return bad(format!("mask_kappa {} must be positive", self.mask_kappa));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        Ok(())
    }
}

/// Mean of the embedding rows of `ids: [B, T]` where `keep` is true, giving `[B, D]`.
pub fn text_anchor<T: Real>(g: &mut Graph<T>, table: Var, ids: &[usize], keep: &[bool], batch: usize) -> Result<Var, ObjectiveError> {
    let t = ids.len() / batch.max(1);
    for row in keep.chunks(t.max(1)) {
        if !row.iter().any(|&k| k) {
            return Err(ObjectiveError::AllMasked);
        }
    }
    let e = g.embedding(table, ids, &[batch, t])?;
    Ok(g.mean_pool(e, Some(keep))?)
}

/// Visual-to-text InfoNCE over a batch of paired rows `[B, D]`.
pub fn pve_loss<T: Real>(g: &mut Graph<T>, visual: Var, text: Var, cfg: &PveConfig) -> Result<Var, ObjectiveError> {
    let b = g.shape(visual)[0];
    let (v, t) = match cfg.similarity {
        Similarity::Cosine => (g.l2_normalize(visual)?, g.l2_normalize(text)?),
        Similarity::Dot => (visual, text),
    };
    let tt = g.transpose_last(t)?;
    let sim = g.matmul(v, tt)?;
    if !g.value(sim).all_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    let logits = g.scale(sim, T::of(1.0 / cfg.tau));
    let diag: Vec<usize> = (0..b).collect();
    let forward = g.cross_entropy(logits, &diag, None)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let lt = g.transpose_last(logits)?;
    let backward = g.cross_entropy(lt, &diag, None)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, T::of(0.5)))
}

/// `lm + lambda * pve`.
pub fn joint_loss<T: Real>(g: &mut Graph<T>, lm: Var, pve: Var, lambda: f64) -> Result<Var, TensorError> {
    let w = g.scale(pve, T::of(lambda));
    g.add(lm, w)
}

/// Evaluates [`pve_loss`] on plain row vectors.
pub fn pve_loss_value(visual: &[Vec<f64>], text: &[Vec<f64>], cfg: &PveConfig) -> Result<f64, ObjectiveError> {
    if visual.len() != text.len() {
        return Err(ObjectiveError::Length(visual.len(), text.len()));
    }
    let d = visual.first().map_or(0, Vec::len);
    let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor<f64>, ObjectiveError> {
        if rows.iter().any(|r| r.len() != d) {
            return Err(ObjectiveError::Length(d, rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d)));
        }
        Ok(Tensor::new(vec![rows.len(), d], rows.concat())?)
    };
    let mut g = Graph::new();
    let v = g.constant(to_tensor(visual)?);
    let t = g.constant(to_tensor(text)?);
    let l = pve_loss(&mut g, v, t, cfg)?;
    Ok(g.value(l).item())
}

/// `1 - cos(a, b)`.
pub fn semantic_distance(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Length(a.len(), b.len()));
    }
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // one square root keeps identical inputs at exactly zero
    Ok(1.0 - dot / (na * nb).sqrt())
}
