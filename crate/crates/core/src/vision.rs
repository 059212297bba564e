//! The fast path: a small ViT over patch grids and a Perceiver-style
//! resampler that turns each image into `N + 1` latent tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{expand_batch, key_mask, Attention, Bound, Group, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::render::PatchGrid;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::train::optim::{AdamW, Schedule};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image {0} has no non-empty patch")]
    BlankImage(usize),
    #[error("patch grid {index} has {got} patches of dim {dim}, expected {want}")]
    Geometry { index: usize, got: usize, dim: usize, want: usize },
    #[error("no images")]
    NoImages,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    MaskedPixelReconstruction,
    FrozenRandom,
}

impl PretrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::MaskedPixelReconstruction => "masked-pixel-reconstruction",
            PretrainMode::FrozenRandom => "frozen-random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "masked-pixel-reconstruction" => Some(Self::MaskedPixelReconstruction),
            "frozen-random" => Some(Self::FrozenRandom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub patch_dim: usize,
    pub patches: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frozen: bool,
    pub pretrain_mode: PretrainMode,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            patch_dim: 588,
            patches: 256,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            frozen: true,
            pretrain_mode: PretrainMode::MaskedPixelReconstruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerConfig {
    pub latents: usize,
    pub depth: usize,
    pub heads: usize,
    pub latent_self_attention: bool,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            latents: 64,
            depth: 2,
            heads: 4,
            latent_self_attention: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Encoder output `F: [M, L, D]` with `L = patches + 1` (CLS first).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures<T> {
    pub feats: Tensor<T>,
    /// `[M, L]`; empty patches are false, CLS is always true.
    pub valid: Vec<bool>,
}

impl<T: Real> VisualFeatures<T> {
    pub fn images(&self) -> usize {
        self.feats.shape().first().copied().unwrap_or(0)
    }
}

/// Resampler output `F': [M, N + 1, D]`, CLS latent first.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens<T> {
    pub tokens: Tensor<T>,
}

impl<T: Real> VisualTokens<T> {
    pub fn images(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn per_image(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Pixel input for the encoder: `1 - intensity`, so background is zero.
pub fn ink_tensor<T: Real>(grids: &[PatchGrid], cfg: &VisionConfig) -> Result<(Tensor<T>, Vec<bool>), VisionError> {
    let l = cfg.patches + 1;
    let mut data = Vec::with_capacity(grids.len() * cfg.patches * cfg.patch_dim);
    let mut valid = Vec::with_capacity(grids.len() * l);
    for (i, g) in grids.iter().enumerate() {
        if g.len() != cfg.patches || g.patch_dim != cfg.patch_dim {
            return Err(VisionError::Geometry {
                index: i,
                got: g.len(),
                dim: g.patch_dim,
                want: cfg.patches,
            });
        }
        if g.non_empty_count() == 0 {
            return Err(VisionError::BlankImage(i));
        }
        data.extend(g.patches.iter().map(|&p| T::of(1.0 - p as f64)));
        valid.push(true);
        valid.extend(g.empty_mask.iter().map(|&e| !e));
    }
    let t = Tensor::new(vec![grids.len(), cfg.patches, cfg.patch_dim], data)?;
    Ok((t, valid))
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    /// Learned stand-in for hidden patches during reconstruction pretraining.
    mask_token: ParamId,
    recon_head: Linear,
}

impl VisionEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: VisionConfig, rng: &mut R) -> Self {
        let g = Group::Vision;
        let d = cfg.dim;
        let embed = Linear::new(store, "vision.embed", g, cfg.patch_dim, d, rng);
        let cls = store.add_normal("vision.cls", g, &[1, d], 0.02, rng);
        let pos = store.add_normal("vision.pos", g, &[cfg.patches + 1, d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                ln1: LayerNorm::new(store, &format!("vision.{i}.ln1"), g, d),
                attn: Attention::new(store, &format!("vision.{i}.attn"), g, d, d, d, cfg.heads, rng),
                ln2: LayerNorm::new(store, &format!("vision.{i}.ln2"), g, d),
                mlp: Mlp::new(store, &format!("vision.{i}.mlp"), g, d, d * cfg.mlp_ratio, rng),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "vision.ln_f", g, d);
        let mask_token = store.add_normal("vision.mask_token", Group::PretrainHead, &[d], 0.02, rng);
        let recon_head = Linear::new(store, "vision.recon", Group::PretrainHead, d, cfg.patch_dim, rng);
        Self {
            cfg,
            embed,
            cls,
            pos,
            blocks,
            ln_f,
            mask_token,
            recon_head,
        }
    }

    /// `ink: [M, P, patch_dim]` to features `[M, P + 1, D]`. `hidden`, when
    /// given, is `[M, P]` and swaps those patch embeddings for the mask token.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ink: Var, valid: &[bool], hidden: Option<&[bool]>) -> Result<Var, TensorError> {
        let m = g.shape(ink)[0];
        let mut x = self.embed.forward(g, p, ink)?;
        if let Some(h) = hidden {
            let keep = Tensor::new(vec![m, self.cfg.patches, 1], h.iter().map(|&h| if h { T::zero() } else { T::one() }).collect())?;
            let put = Tensor::new(vec![m, self.cfg.patches, 1], h.iter().map(|&h| if h { T::one() } else { T::zero() }).collect())?;
            let keep = g.constant(keep);
            let put = g.constant(put);
            let kept = g.mul(x, keep)?;
            let tok = g.mul(put, p.var(self.mask_token))?;
            x = g.add(kept, tok)?;
        }
        let cls = expand_batch(g, p.var(self.cls), m)?;
        let x = g.concat(&[cls, x], 1)?;
        let mut x = g.add(x, p.var(self.pos))?;
        let mask = key_mask::<T>(valid, m);
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let a = b.attn.forward(g, p, h, h, Some(&mask))?;
            x = g.add(x, a.out)?;
            let h = b.ln2.forward(g, p, x)?;
            let f = b.mlp.forward(g, p, h)?;
            x = g.add(x, f)?;
        }
        self.ln_f.forward(g, p, x)
    }

    /// Forward pass outside any training graph.
    pub fn encode_images<T: Real>(&self, store: &ParamStore<T>, grids: &[PatchGrid]) -> Result<VisualFeatures<T>, VisionError> {
        let l = self.cfg.patches + 1;
        if grids.is_empty() {
            return Ok(VisualFeatures {
                feats: Tensor::zeros([0, l, self.cfg.dim]),
                valid: Vec::new(),
            });
        }
        let (ink, valid) = ink_tensor::<T>(grids, &self.cfg)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let ink = g.constant(ink);
        let f = self.forward(&mut g, &p, ink, &valid, None)?;
        Ok(VisualFeatures {
            feats: g.value(f).clone(),
            valid,
        })
    }

    /// Mean squared pixel error of the reconstruction head over hidden patches.
    pub fn reconstruction_loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ink: &Tensor<T>, valid: &[bool], hidden: &[bool]) -> Result<Var, TensorError> {
        let m = ink.shape()[0];
        let target = g.constant(ink.clone());
        let input = g.constant(ink.clone());
        let f = self.forward(g, p, input, valid, Some(hidden))?;
        let patches = g.slice(f, 1, 1, self.cfg.patches + 1)?;
        let pred = self.recon_head.forward(g, p, patches)?;
        pixel_mse(g, pred, target, hidden, m, self.cfg.patches)
    }
}

/// Mean over hidden patches of the squared pixel error.
pub fn pixel_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, hidden: &[bool], m: usize, patches: usize) -> Result<Var, TensorError> {
    let count = hidden.iter().filter(|&&h| h).count();
    if count == 0 {
        return Err(TensorError::Invalid("no hidden patch to reconstruct".into()));
    }
    let dim = g.shape(pred)[2];
    let sel = Tensor::new(vec![m, patches, 1], hidden.iter().map(|&h| if h { T::one() } else { T::zero() }).collect())?;
    let sel = g.constant(sel);
    let diff = g.sub(pred, target)?;
    let diff = g.mul(diff, sel)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::of(1.0 / (count * dim) as f64)))
}

#[derive(Debug, Clone)]
struct ResamplerBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: Attention,
    self_attn: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Resampler {
    pub cfg: ResamplerConfig,
    pub dim: usize,
    latents: ParamId,
    blocks: Vec<ResamplerBlock>,
    ln_f: LayerNorm,
}

impl Resampler {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: ResamplerConfig, dim: usize, rng: &mut R) -> Self {
        let g = Group::Resampler;
        let latents = store.add_normal("resampler.latents", g, &[cfg.latents + 1, dim], 1.0, rng);
        let blocks = (0..cfg.depth)
            .map(|i| ResamplerBlock {
                ln_q: LayerNorm::new(store, &format!("resampler.{i}.ln_q"), g, dim),
                ln_kv: LayerNorm::new(store, &format!("resampler.{i}.ln_kv"), g, dim),
                cross: Attention::new(store, &format!("resampler.{i}.cross"), g, dim, dim, dim, cfg.heads, rng),
                self_attn: cfg.latent_self_attention.then(|| {
                    (
                        LayerNorm::new(store, &format!("resampler.{i}.ln_self"), g, dim),
                        Attention::new(store, &format!("resampler.{i}.self"), g, dim, dim, dim, cfg.heads, rng),
                    )
                }),
                ln_ff: LayerNorm::new(store, &format!("resampler.{i}.ln_ff"), g, dim),
                mlp: Mlp::new(store, &format!("resampler.{i}.mlp"), g, dim, dim * 4, rng),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "resampler.ln_f", g, dim);
        Self {
            cfg,
            dim,
            latents,
            blocks,
            ln_f,
        }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.cfg.latents + 1
    }

    /// `feats: [M, L, D]` to `[M, N + 1, D]`; latents see only valid features.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, feats: Var, valid: &[bool]) -> Result<Var, TensorError> {
        let m = g.shape(feats)[0];
        let mask = key_mask::<T>(valid, m);
        let mut x = expand_batch(g, p.var(self.latents), m)?;
        for b in &self.blocks {
            let q = b.ln_q.forward(g, p, x)?;
            let kv = b.ln_kv.forward(g, p, feats)?;
            let a = b.cross.forward(g, p, q, kv, Some(&mask))?;
            x = g.add(x, a.out)?;
            if let Some((ln, att)) = &b.self_attn {
                let h = ln.forward(g, p, x)?;
                let a = att.forward(g, p, h, h, None)?;
                x = g.add(x, a.out)?;
            }
            let h = b.ln_ff.forward(g, p, x)?;
            let f = b.mlp.forward(g, p, h)?;
            x = g.add(x, f)?;
        }
        self.ln_f.forward(g, p, x)
    }

    pub fn resample<T: Real>(&self, store: &ParamStore<T>, feats: &VisualFeatures<T>) -> Result<VisualTokens<T>, TensorError> {
        let m = feats.images();
        if m == 0 {
            return Ok(VisualTokens {
                tokens: Tensor::zeros([0, self.tokens_per_image(), self.dim]),
            });
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(feats.feats.clone());
        let out = self.forward(&mut g, &p, f, &feats.valid)?;
        Ok(VisualTokens {
            tokens: g.value(out).clone(),
        })
    }
}

/// Mean of the per-image CLS tokens.
pub fn pool_visual<T: Real>(tokens: &VisualTokens<T>) -> Result<Vec<T>, VisionError> {
    let (m, per, d) = (tokens.images(), tokens.per_image(), tokens.dim());
    if m == 0 {
        return Err(VisionError::NoImages);
    }
    let data = tokens.tokens.data();
    let mut out = vec![T::zero(); d];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(&data[i * per * d..i * per * d + d]) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::of(m as f64);
    Ok(out.into_iter().map(|v| v * inv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of non-empty patches hidden per image.
    pub hide_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 1e-3,
            hide_ratio: 0.25,
            seed: 0,
        }
    }
}

/// Picks `ratio` of each image's non-empty patches to hide, at least one.
pub fn choose_hidden<R: Rng>(grids: &[PatchGrid], ratio: f64, rng: &mut R) -> Vec<bool> {
    let mut hidden = Vec::new();
    for g in grids {
        let mut idx: Vec<usize> = (0..g.len()).filter(|&i| !g.empty_mask[i]).collect();
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len());
        let mut h = vec![false; g.len()];
        for &i in &idx[..k] {
            h[i] = true;
        }
        hidden.extend(h);
    }
    hidden
}

/// Held-out masked-patch reconstruction error, hiding patches with a fixed seed.
pub fn reconstruction_error<T: Real>(enc: &VisionEncoder, store: &ParamStore<T>, grids: &[PatchGrid], ratio: f64, seed: u64) -> Result<f64, VisionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = choose_hidden(grids, ratio, &mut rng);
    let (ink, valid) = ink_tensor::<T>(grids, &enc.cfg)?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let l = enc.reconstruction_loss(&mut g, &p, &ink, &valid, &hidden)?;
    Ok(g.value(l).item().f64())
}

/// Trains the encoder (or, in frozen-random mode, only the reconstruction
/// head) on masked-patch reconstruction, then freezes the encoder.
/// Returns the per-step training loss.
pub fn pretrain_vision<T: Real>(
    enc: &VisionEncoder,
    store: &mut ParamStore<T>,
    images: &[PatchGrid],
    schedule: &PretrainSchedule,
) -> Result<Vec<f64>, VisionError> {
    if images.is_empty() {
        return Err(VisionError::NoImages);
    }
    let train_encoder = enc.cfg.pretrain_mode == PretrainMode::MaskedPixelReconstruction;
    store.set_frozen(Group::Vision, !train_encoder);
    store.set_frozen(Group::PretrainHead, false);
    let frozen_others: Vec<(usize, bool)> = store
        .iter_mut()
        .enumerate()
        .filter(|(_, p)| !matches!(p.group, Group::Vision | Group::PretrainHead))
        .map(|(i, p)| (i, std::mem::replace(&mut p.frozen, true)))
        .collect();

    let mut opt = AdamW::new(store, 0.9, 0.999, 0.0);
    let sched = Schedule {
        lr: schedule.lr,
        warmup: (schedule.steps / 10).max(1),
        total: schedule.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut batch = Vec::with_capacity(schedule.batch);
        while batch.len() < schedule.batch.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let hidden = choose_hidden(&batch, schedule.hide_ratio, &mut rng);
        let (ink, valid) = ink_tensor::<T>(&batch, &enc.cfg)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let loss = enc.reconstruction_loss(&mut g, &p, &ink, &valid, &hidden)?;
        g.backward(loss)?;
        losses.push(g.value(loss).item().f64());
        opt.step(store, &g, &p, sched.lr_at(step));
    }

    store.set_frozen(Group::Vision, enc.cfg.frozen);
    store.set_frozen(Group::PretrainHead, true);
    for (i, f) in frozen_others {
        store.get_mut(ParamId(i)).frozen = f;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{patchify, rasterize, RenderConfig};

    fn small_cfg() -> VisionConfig {
        VisionConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            ..VisionConfig::default()
        }
    }

    fn grid(text: &str) -> PatchGrid {
        let cfg = RenderConfig::default();
        patchify(&rasterize(text, &cfg).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn shapes_through_encoder_and_resampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(&mut store, small_cfg(), &mut rng);
        let rs = Resampler::new(&mut store, ResamplerConfig { latents: 8, depth: 1, heads: 2, latent_self_attention: true }, 16, &mut rng);
        let grids: Vec<_> = (0..3).map(|i| grid(&format!("image number {i}"))).collect();
        let f = enc.encode_images(&store, &grids).unwrap();
        assert_eq!(f.feats.shape(), &[3, 257, 16]);
        let t = rs.resample(&store, &f).unwrap();
        assert_eq!(t.tokens.shape(), &[3, 9, 16]);
        assert_eq!(pool_visual(&t).unwrap().len(), 16);

        let none = enc.encode_images(&store, &[]).unwrap();
        assert_eq!(none.images(), 0);
        assert_eq!(rs.resample(&store, &none).unwrap().images(), 0);
    }

    #[test]
    fn blank_grid_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(&mut store, small_cfg(), &mut rng);
        assert!(matches!(enc.encode_images(&store, &[grid("")]), Err(VisionError::BlankImage(0))));
    }

    #[test]
    fn pooling_is_mean_of_cls() {
        let t = VisualTokens {
            tokens: Tensor::<f64>::from_f64([2, 2, 2], &[1.0, 2.0, 9.0, 9.0, 3.0, 6.0, 9.0, 9.0]).unwrap(),
        };
        assert_eq!(pool_visual(&t).unwrap(), vec![2.0, 4.0]);
        let one = VisualTokens {
            tokens: Tensor::<f64>::from_f64([1, 1, 2], &[5.0, -1.0]).unwrap(),
        };
        assert_eq!(pool_visual(&one).unwrap(), vec![5.0, -1.0]);
        let none = VisualTokens {
            tokens: Tensor::<f64>::zeros([0, 1, 2]),
        };
        assert!(pool_visual(&none).is_err());
    }

    #[test]
    fn reconstruction_loss_zero_for_background_prediction() {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::zeros([1, 2, 3]));
        let target = g.constant(Tensor::zeros([1, 2, 3]));
        let l = pixel_mse(&mut g, pred, target, &[true, false], 1, 2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
