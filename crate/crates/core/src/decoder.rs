//! The slow path: a causal decoder with gated cross-attention into the
//! visual tokens.

use rand::Rng;
use thiserror::Error;

use crate::nn::{causal_mask, key_mask, Attention, Bound, Group, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("visual tokens have dim {got}, decoder expects {want}")]
    VisualDim { got: usize, want: usize },
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    /// Cross-attention follows every `cross_stride`-th self-attention layer.
    pub cross_stride: usize,
    pub gate_init: f64,
    /// Width of the incoming visual tokens.
    pub visual_dim: usize,
    pub cross_attend_cls: bool,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            dim: 256,
            layers: 4,
            heads: 4,
            max_positions: 512,
            cross_stride: 2,
            gate_init: 0.0,
            visual_dim: 128,
            cross_attend_cls: true,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.cross_stride == 0 || self.cross_stride > self.layers {
            return bad(format!("cross_stride {} leaves no cross-attention layer among {}", self.cross_stride, self.layers));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        Ok(())
    }

    pub fn cross_layers(&self) -> usize {
        self.layers / self.cross_stride
    }
}

#[derive(Debug, Clone)]
struct CrossBlock {
    ln: LayerNorm,
    attn: Attention,
    gate: ParamId,
    ln_ff: LayerNorm,
    mlp: Mlp,
    gate_ff: ParamId,
}

#[derive(Debug, Clone)]
struct SelfBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
    cross: Option<CrossBlock>,
}

/// Batched visual keys for cross-attention.
#[derive(Debug, Clone)]
pub struct VisualInput {
    /// `[B, S, D_v]`, padded per sample.
    pub tokens: Var,
    /// `[B, S]` key validity.
    pub valid: Vec<bool>,
    /// Samples without any visual token get no cross-attention residual.
    pub present: Vec<bool>,
}

pub struct DecoderOut {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Per cross-attention layer, `[B, H, T, S]` weights.
    pub cross_probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok_emb: ParamId,
    pos_emb: ParamId,
    visual_proj: Linear,
    blocks: Vec<SelfBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: DecoderConfig, rng: &mut R) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let (d, s, x) = (cfg.dim, Group::DecoderSelf, Group::CrossAttention);
        let tok_emb = store.add_normal("decoder.tok_emb", s, &[cfg.vocab_size, d], 0.02, rng);
        let pos_emb = store.add_normal("decoder.pos_emb", s, &[cfg.max_positions, d], 0.02, rng);
        let visual_proj = Linear::new(store, "decoder.visual_proj", x, cfg.visual_dim, d, rng);
        let blocks = (0..cfg.layers)
            .map(|i| SelfBlock {
                ln1: LayerNorm::new(store, &format!("decoder.{i}.ln1"), s, d),
                attn: Attention::new(store, &format!("decoder.{i}.attn"), s, d, d, d, cfg.heads, rng),
                ln2: LayerNorm::new(store, &format!("decoder.{i}.ln2"), s, d),
                mlp: Mlp::new(store, &format!("decoder.{i}.mlp"), s, d, d * cfg.mlp_ratio, rng),
                cross: ((i + 1) % cfg.cross_stride == 0).then(|| CrossBlock {
                    ln: LayerNorm::new(store, &format!("decoder.{i}.cross.ln"), x, d),
                    attn: Attention::new(store, &format!("decoder.{i}.cross.attn"), x, d, d, d, cfg.heads, rng),
                    gate: store.add_const(format!("decoder.{i}.cross.gate"), Group::Gate, &[1], cfg.gate_init),
                    ln_ff: LayerNorm::new(store, &format!("decoder.{i}.cross.ln_ff"), x, d),
                    mlp: Mlp::new(store, &format!("decoder.{i}.cross.mlp"), x, d, d * cfg.mlp_ratio, rng),
                    gate_ff: store.add_const(format!("decoder.{i}.cross.gate_ff"), Group::Gate, &[1], cfg.gate_init),
                }),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "decoder.ln_f", s, d);
        let head = Linear::new(store, "decoder.head", s, d, cfg.vocab_size, rng);
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            visual_proj,
            blocks,
            ln_f,
            head,
        })
    }

    /// Every cross-attention gate, in layer order.
    pub fn gates(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| b.cross.as_ref())
            .flat_map(|c| [c.gate, c.gate_ff])
            .collect()
    }

    /// `tokens` is `[B, T]` row-major. With `visual = None` this is a plain
    /// causal LM.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        visual: Option<&VisualInput>,
    ) -> Result<DecoderOut, DecoderError> {
        let t = tokens.len() / batch.max(1);
        if t > self.cfg.max_positions {
            return Err(DecoderError::TooLong {
                len: t,
                max: self.cfg.max_positions,
            });
        }
        let emb = g.embedding(p.var(self.tok_emb), tokens, &[batch, t])?;
        let pos = g.slice(p.var(self.pos_emb), 0, 0, t)?;
        let mut x = g.add(emb, pos)?;

        let vis = match visual {
            Some(v) => {
                let dv = g.shape(v.tokens)[2];
                if dv != self.cfg.visual_dim {
                    return Err(DecoderError::VisualDim {
                        got: dv,
                        want: self.cfg.visual_dim,
                    });
                }
                let kv = self.visual_proj.forward(g, p, v.tokens)?;
                let mask = key_mask::<T>(&v.valid, batch);
                let present = if v.present.iter().all(|&b| b) {
                    None
                } else {
                    let f = v.present.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
                    Some(g.constant(Tensor::new(vec![batch, 1, 1], f)?))
                };
                Some((kv, mask, present))
            }
            None => None,
        };

        let causal = causal_mask::<T>(t);
        let mut cross_probs = Vec::new();
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let a = b.attn.forward(g, p, h, h, Some(&causal))?;
            x = g.add(x, a.out)?;
            let h = b.ln2.forward(g, p, x)?;
            let f = b.mlp.forward(g, p, h)?;
            x = g.add(x, f)?;
            if let (Some(c), Some((kv, mask, present))) = (&b.cross, &vis) {
                let h = c.ln.forward(g, p, x)?;
                let a = c.attn.forward(g, p, h, *kv, Some(mask))?;
                cross_probs.push(a.probs);
                let mut r = g.mul(a.out, p.var(c.gate))?;
                if let Some(pr) = present {
                    r = g.mul(r, *pr)?;
                }
                x = g.add(x, r)?;
                let h = c.ln_ff.forward(g, p, x)?;
                let f = c.mlp.forward(g, p, h)?;
                let mut r = g.mul(f, p.var(c.gate_ff))?;
                if let Some(pr) = present {
                    r = g.mul(r, *pr)?;
                }
                x = g.add(x, r)?;
            }
        }
        let x = self.ln_f.forward(g, p, x)?;
        let logits = self.head.forward(g, p, x)?;
        Ok(DecoderOut { logits, cross_probs })
    }

    /// Greedy continuation of `prompt` by `max_new` tokens. `visual` is one
    /// sample's `[M, N + 1, D_v]` tokens.
    pub fn generate<T: Real>(&self, store: &ParamStore<T>, prompt: &[usize], visual: Option<&Tensor<T>>, max_new: usize) -> Result<Vec<usize>, DecoderError> {
        if prompt.len() + max_new > self.cfg.max_positions {
            return Err(DecoderError::TooLong {
                len: prompt.len() + max_new,
                max: self.cfg.max_positions,
            });
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let vis = match visual {
                Some(v) => {
                    let v = g.constant(v.clone());
                    pack_visual(&mut g, &[Some(v)], self.cfg.visual_dim, self.cfg.cross_attend_cls)?
                }
                None => None,
            };
            let out = self.forward(&mut g, &p, &seq, 1, vis.as_ref())?;
            seq.push(argmax_last(g.value(out.logits)));
        }
        Ok(seq)
    }
}

/// Index of the largest logit at the last position; ties go to the lower id.
pub fn argmax_last<T: Real>(logits: &Tensor<T>) -> usize {
    let v = *logits.shape().last().unwrap_or(&0);
    let row = &logits.data()[logits.len() - v..];
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Pads per-sample visual tokens `[M_i, N + 1, D_v]` into a `[B, S, D_v]`
/// batch. Samples with no images get one dummy key and `present = false`.
/// Returns `None` when no sample has visual tokens.
pub fn pack_visual<T: Real>(g: &mut Graph<T>, per_sample: &[Option<Var>], dv: usize, include_cls: bool) -> Result<Option<VisualInput>, TensorError> {
    let mut flat = Vec::with_capacity(per_sample.len());
    for v in per_sample {
        let f = match v {
            Some(v) => {
                let s = g.shape(*v).to_vec();
                let (m, k) = (s[0], s[1]);
                let (src, k) = if include_cls { (*v, k) } else { (g.slice(*v, 1, 1, k)?, k - 1) };
                if m * k == 0 {
                    None
                } else {
                    Some((g.reshape(src, &[1, m * k, dv])?, m * k))
                }
            }
            None => None,
        };
        flat.push(f);
    }
    if flat.iter().all(Option::is_none) {
        return Ok(None);
    }
    let s_max = flat.iter().map(|f| f.map_or(1, |(_, n)| n)).max().unwrap_or(1);
    let mut rows = Vec::with_capacity(flat.len());
    let mut valid = Vec::with_capacity(flat.len() * s_max);
    let mut present = Vec::with_capacity(flat.len());
    for f in flat {
        let (row, n) = match f {
            Some((v, n)) if n == s_max => (v, n),
            Some((v, n)) => {
                let pad = g.constant(Tensor::zeros([1, s_max - n, dv]));
                (g.concat(&[v, pad], 1)?, n)
            }
            None => (g.constant(Tensor::zeros([1, s_max, dv])), 0),
        };
        rows.push(row);
        present.push(n > 0);
        let live = n.max(1);
        valid.extend((0..s_max).map(|i| i < live));
    }
    let tokens = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    Ok(Some(VisualInput { tokens, valid, present }))
}

/// Mean next-token cross-entropy of `logits: [.., V]` over positions where
/// `loss_mask` is true. `targets` are already shifted.
pub fn lm_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var, TensorError> {
    g.cross_entropy(logits, targets, Some(loss_mask))
}

/// Scores only the last `k` positions of each length-`t` row.
pub fn last_k_mask(batch: usize, t: usize, k: usize) -> Vec<bool> {
    (0..batch).flat_map(|_| (0..t).map(move |i| i + k >= t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(gate: f64) -> (Decoder, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            vocab_size: 11,
            dim: 8,
            layers: 2,
            heads: 2,
            max_positions: 16,
            cross_stride: 1,
            gate_init: gate,
            visual_dim: 6,
            cross_attend_cls: true,
            mlp_ratio: 2,
        };
        let d = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        (d, store)
    }

    fn visual(g: &mut Graph<f64>, m: usize) -> Var {
        g.constant(Tensor::new([m, 3, 6], (0..m * 18).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap())
    }

    #[test]
    fn zero_gate_matches_no_visual() {
        let (d, store) = toy(0.0);
        let toks = [1, 4, 2, 7, 3, 3, 9, 0];
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = visual(&mut g, 2);
        let vis = pack_visual(&mut g, &[Some(v), None], 6, true).unwrap().unwrap();
        let with = d.forward(&mut g, &p, &toks, 2, Some(&vis)).unwrap();
        let without = d.forward(&mut g, &p, &toks, 2, None).unwrap();
        assert_eq!(g.value(with.logits).data(), g.value(without.logits).data());
    }

    #[test]
    fn causality_and_cross_mass() {
        let (d, store) = toy(0.7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = visual(&mut g, 1);
        let vis = pack_visual(&mut g, &[Some(v)], 6, false).unwrap().unwrap();
        assert_eq!(vis.valid.len(), 2);
        let a = d.forward(&mut g, &p, &[1, 2, 3, 4, 5], 1, Some(&vis)).unwrap();
        let b = d.forward(&mut g, &p, &[1, 2, 3, 8, 5], 1, Some(&vis)).unwrap();
        let (la, lb) = (g.value(a.logits).data(), g.value(b.logits).data());
        assert_eq!(la[..3 * 11], lb[..3 * 11]);
        assert_ne!(la[3 * 11..], lb[3 * 11..]);
        for probs in a.cross_probs {
            for row in g.value(probs).data().chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_and_dim_guards() {
        let (d, store) = toy(0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        assert!(matches!(d.forward(&mut g, &p, &[0; 17], 1, None), Err(DecoderError::TooLong { .. })));
        let bad = g.constant(Tensor::zeros([1, 2, 5]));
        let vis = pack_visual(&mut g, &[Some(bad)], 5, true).unwrap().unwrap();
        assert!(matches!(d.forward(&mut g, &p, &[1], 1, Some(&vis)), Err(DecoderError::VisualDim { .. })));
        assert!(d.generate(&store, &[1; 10], None, 7).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_zero_is_identity() {
        let (d, store) = toy(0.0);
        assert_eq!(d.generate(&store, &[3, 1], None, 0).unwrap(), vec![3, 1]);
        let a = d.generate(&store, &[3, 1], None, 5).unwrap();
        assert_eq!(a, d.generate(&store, &[3, 1], None, 5).unwrap());
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn last_k_scores_only_the_tail() {
        let m = last_k_mask(2, 300, 256);
        assert_eq!(m.iter().filter(|&&b| b).count(), 512);
        assert!(!m[43] && m[44] && !m[300 + 43] && m[300 + 44]);
    }
}
