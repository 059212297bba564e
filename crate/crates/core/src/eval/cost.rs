use serde::Serialize;

use crate::model::ModelConfig;
use crate::render::{image_count, RenderConfig};
use crate::tensor::DType;

/// Images, visual tokens and compression ratio for `token_count` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    pub images: usize,
    /// Content latents only; the per-image CLS token is not counted.
    pub visual_tokens: usize,
    pub delta: Option<f64>,
}

impl CompressionReport {
    /// Ratio to one decimal, or `absent`.
    pub fn delta_display(&self) -> String {
        self.delta.map_or_else(|| "absent".into(), |d| format!("{d:.1}"))
    }
}

pub fn compression_report(token_count: usize, render: &RenderConfig, latents: usize) -> CompressionReport {
    let images = image_count(token_count, 0, render);
    let visual_tokens = images * latents;
    let delta = (token_count > 0 && visual_tokens > 0).then(|| token_count as f64 / visual_tokens as f64);
    CompressionReport {
        images,
        visual_tokens,
        delta,
    }
}

pub const COST_FORMULA: &str = "\
forward pass only; a linear layer on s tokens costs 2*in*out*s, an attention \
layer costs its four projections plus 2*s_q*s_k*d for the score map and \
2*s_q*s_k*d for the weighted sum (causal maps are counted in full); \
cross-attention blocks are skipped when there are no images; \
memory = (parameters + activations + attention maps) * bytes per element, \
where activations count two residual-width vectors and one MLP hidden vector \
per token per block and attention maps count heads*s_q*s_k per attention layer; \
an estimate, not a measurement";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub images: usize,
    pub encoder_flops: f64,
    pub resampler_flops: f64,
    pub decoder_flops: f64,
    pub flops: f64,
    pub params: u64,
    pub activations: u64,
    pub attention_maps: u64,
    pub memory_bytes: u64,
}

#[derive(Default)]
struct Tally {
    flops: f64,
    params: u64,
    acts: u64,
    maps: u64,
}

impl Tally {
    fn linear(&mut self, din: usize, dout: usize, tokens: usize) {
        self.params += (din * dout + dout) as u64;
        self.flops += 2.0 * (din * dout) as f64 * tokens as f64;
    }

    fn norm(&mut self, d: usize) {
        self.params += 2 * d as u64;
    }

    /// `q` query tokens and `kv` key tokens in total; `pairs` is the summed
    /// size of every score map, i.e. `s_q * s_k` per sequence.
    fn attention(&mut self, d: usize, heads: usize, q: usize, kv: usize, pairs: usize) {
        self.linear(d, d, q);
        self.linear(d, d, kv);
        self.linear(d, d, kv);
        self.linear(d, d, q);
        self.flops += 4.0 * pairs as f64 * d as f64;
        self.maps += (heads * pairs) as u64;
    }

    /// Pre-norm attention plus MLP block.
    fn block(&mut self, d: usize, hidden: usize, heads: usize, (q, kv, pairs): (usize, usize, usize), norms: usize) {
        (0..norms).for_each(|_| self.norm(d));
        self.attention(d, heads, q, kv, pairs);
        self.linear(d, hidden, q);
        self.linear(hidden, d, q);
        self.acts += (q * (2 * d + hidden)) as u64;
    }
}

/// Analytic forward FLOPs and memory for `t_e` encoder tokens and `t_d`
/// decoder tokens. See [`COST_FORMULA`].
pub fn cost_estimate(cfg: &ModelConfig, t_e: usize, t_d: usize, dtype: DType) -> CostEstimate {
    let (v, r, dc) = (&cfg.vision, &cfg.resampler, &cfg.decoder);
    let m = image_count(t_e, 0, &cfg.render);
    let sv = v.patches + 1;

    let mut enc = Tally::default();
    enc.linear(v.patch_dim, v.dim, m * v.patches);
    enc.params += ((sv + 1) * v.dim) as u64;
    for _ in 0..v.layers {
        enc.block(v.dim, v.dim * v.mlp_ratio, v.heads, (m * sv, m * sv, m * sv * sv), 2);
    }
    enc.norm(v.dim);
    // reconstruction head, stored but unused at inference
    enc.params += v.dim as u64 + (v.dim * v.patch_dim + v.patch_dim) as u64;

    let nq = r.latents + 1;
    let mut res = Tally::default();
    res.params += (nq * v.dim) as u64;
    for _ in 0..r.depth {
        res.norm(v.dim);
        res.block(v.dim, v.dim * 4, r.heads, (m * nq, m * sv, m * nq * sv), 2);
        if r.latent_self_attention {
            res.norm(v.dim);
            res.attention(v.dim, r.heads, m * nq, m * nq, m * nq * nq);
        }
    }
    res.norm(v.dim);

    let vt = m * (r.latents + usize::from(dc.cross_attend_cls));
    let mut dec = Tally::default();
    dec.params += ((dc.vocab_size + dc.max_positions) * dc.dim) as u64;
    dec.linear(dc.visual_dim, dc.dim, vt);
    for i in 0..dc.layers {
        dec.block(dc.dim, dc.dim * dc.mlp_ratio, dc.heads, (t_d, t_d, t_d * t_d), 2);
        if (i + 1) % dc.cross_stride == 0 {
            let mut x = Tally::default();
            x.norm(dc.dim);
            x.norm(dc.dim);
            x.params += 2;
            x.attention(dc.dim, dc.heads, t_d, vt, t_d * vt);
            x.linear(dc.dim, dc.dim * dc.mlp_ratio, t_d);
            x.linear(dc.dim * dc.mlp_ratio, dc.dim, t_d);
            x.acts += (t_d * (2 * dc.dim + dc.dim * dc.mlp_ratio)) as u64;
            dec.params += x.params;
            if vt > 0 {
                dec.flops += x.flops;
                dec.acts += x.acts;
                dec.maps += x.maps;
            }
        }
    }
    dec.norm(dc.dim);
    dec.linear(dc.dim, dc.vocab_size, t_d);
    dec.acts += (t_d * dc.vocab_size) as u64;
    // contrastive projection, training only
    dec.params += (v.dim * dc.dim + dc.dim) as u64;

    let params = enc.params + res.params + dec.params;
    let activations = enc.acts + res.acts + dec.acts;
    let attention_maps = enc.maps + res.maps + dec.maps;
    CostEstimate {
        images: m,
        encoder_flops: enc.flops,
        resampler_flops: res.flops,
        decoder_flops: dec.flops,
        flops: enc.flops + res.flops + dec.flops,
        params,
        activations,
        attention_maps,
        memory_bytes: (params + activations + attention_maps) * dtype.size_bytes() as u64,
    }
}
