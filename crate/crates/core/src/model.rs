//! The full model: frozen encoder, resampler, decoder and the contrastive
//! projection, wired over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{MaskVector, PAD};
use crate::decoder::{lm_loss, pack_visual, Decoder, DecoderConfig, DecoderError};
use crate::nn::{Bound, Group, Linear, ParamStore};
use crate::objectives::{joint_loss, pve_loss, text_anchor, ObjectiveError, PveConfig};
use crate::render::{PatchGrid, RenderConfig};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::vision::{ink_tensor, Resampler, ResamplerConfig, VisionConfig, VisionEncoder, VisionError, VisualFeatures, VisualTokens};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub render: RenderConfig,
    pub vision: VisionConfig,
    pub resampler: ResamplerConfig,
    pub decoder: DecoderConfig,
    pub pve: PveConfig,
    /// Whether decoder self-attention, embeddings and head are tuned.
    pub train_decoder_self: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            vision: VisionConfig::default(),
            resampler: ResamplerConfig::default(),
            decoder: DecoderConfig::default(),
            pve: PveConfig::default(),
            train_decoder_self: true,
        }
    }
}

impl ModelConfig {
    /// Derives the geometry-dependent fields from the render config and the
    /// visual width, so callers only set the free dimensions.
    pub fn sync(&mut self) {
        self.vision.patch_dim = self.render.patch_dim();
        self.vision.patches = self.render.patch_count();
        self.decoder.visual_dim = self.vision.dim;
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        self.render.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        self.decoder.validate()?;
        self.pve.validate()?;
        let v = &self.vision;
        if v.heads == 0 || v.dim % v.heads != 0 {
            return bad(format!("vision dim {} is not divisible by {} heads", v.dim, v.heads));
        }
        if self.resampler.heads == 0 || v.dim % self.resampler.heads != 0 {
            return bad(format!("resampler heads {} do not divide dim {}", self.resampler.heads, v.dim));
        }
        if v.patch_dim != self.render.patch_dim() || v.patches != self.render.patch_count() {
            return bad("vision patch geometry does not match the render config".into());
        }
        if self.decoder.visual_dim != v.dim {
            return bad(format!("decoder expects visual dim {}, vision produces {}", self.decoder.visual_dim, v.dim));
        }
        Ok(())
    }
}

/// One training or evaluation example after the slow-fast split.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub images: Vec<PatchGrid>,
    pub encoder_tokens: Vec<usize>,
    pub decoder_tokens: Vec<usize>,
    /// Next-token targets aligned with `decoder_tokens`; positions whose
    /// target is the padding token are not scored.
    pub targets: Vec<usize>,
}

/// Losses of one joint forward pass.
pub struct JointOut {
    pub logits: Var,
    pub lm: Var,
    pub pve: Option<Var>,
    pub joint: Var,
}

#[derive(Debug, Clone)]
pub struct VistModel {
    pub cfg: ModelConfig,
    pub encoder: VisionEncoder,
    pub resampler: Resampler,
    pub decoder: Decoder,
    pub pve_proj: Linear,
}

impl VistModel {
    /// Builds the layout and a freshly initialized store. The same config
    /// and seed always give the same parameters.
    pub fn build<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>), ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = VisionEncoder::new(&mut store, cfg.vision.clone(), &mut rng);
        let resampler = Resampler::new(&mut store, cfg.resampler.clone(), cfg.vision.dim, &mut rng);
        let decoder = Decoder::new(&mut store, cfg.decoder.clone(), &mut rng)?;
        let pve_proj = Linear::new(&mut store, "pve.proj", Group::Projection, cfg.vision.dim, cfg.decoder.dim, &mut rng);
        let model = Self {
            cfg,
            encoder,
            resampler,
            decoder,
            pve_proj,
        };
        model.apply_freeze(&mut store);
        Ok((model, store))
    }

    pub fn apply_freeze<T: Real>(&self, store: &mut ParamStore<T>) {
        store.set_frozen(Group::Vision, self.cfg.vision.frozen);
        store.set_frozen(Group::PretrainHead, true);
        store.set_frozen(Group::DecoderSelf, !self.cfg.train_decoder_self);
    }

    /// A copy of `store` with every cross-attention gate set to zero.
    pub fn gates_zeroed<T: Real>(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut s = store.clone();
        for id in self.decoder.gates() {
            s.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        s
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, images: &[PatchGrid]) -> Result<VisualFeatures<T>, ModelError> {
        Ok(self.encoder.encode_images(store, images)?)
    }

    pub fn visual_tokens<T: Real>(&self, store: &ParamStore<T>, images: &[PatchGrid]) -> Result<VisualTokens<T>, ModelError> {
        let f = self.encode(store, images)?;
        Ok(self.resampler.resample(store, &f)?)
    }

    /// Resampled tokens `[M, N + 1, D_v]` for one example inside `g`, or
    /// `None` without images. `cached` skips the encoder when it is frozen.
    pub fn visual_var<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: &[PatchGrid], cached: Option<&VisualFeatures<T>>) -> Result<Option<Var>, ModelError> {
        if images.is_empty() {
            return Ok(None);
        }
        let (feats, valid) = match cached {
            Some(f) => (g.constant(f.feats.clone()), f.valid.clone()),
            None => {
                let (ink, valid) = ink_tensor::<T>(images, &self.encoder.cfg)?;
                let ink = g.constant(ink);
                (self.encoder.forward(g, p, ink, &valid, None)?, valid)
            }
        };
        Ok(Some(self.resampler.forward(g, p, feats, &valid)?))
    }

    /// Projected mean CLS token `[1, D_m]` from one example's visual tokens.
    pub fn pooled_visual<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var, ModelError> {
        let m = g.shape(tokens)[0];
        let d = g.shape(tokens)[2];
        let cls = g.slice(tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, &[1, m, d])?;
        let pooled = g.mean_pool(cls, None)?;
        Ok(self.pve_proj.forward(g, p, pooled)?)
    }

    /// Embedding table for the text side, detached unless configured otherwise.
    fn text_table<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        let t = p.var(self.decoder.tok_emb);
        if self.cfg.pve.text_grad {
            t
        } else {
            let v = g.value(t).clone();
            g.constant(v)
        }
    }

    /// Joint loss over a batch. `cached[i]` holds frozen-encoder features;
    /// `masks[i]` selects surviving text positions for the contrastive anchor.
    pub fn joint_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &[&Example],
        cached: &[Option<&VisualFeatures<T>>],
        masks: &[MaskVector],
        loss_mask: Option<&[bool]>,
    ) -> Result<JointOut, ModelError> {
        let b = batch.len();
        let mut per = Vec::with_capacity(b);
        for (i, ex) in batch.iter().enumerate() {
            per.push(self.visual_var(g, p, &ex.images, cached.get(i).copied().flatten())?);
        }
        let vis = pack_visual(g, &per, self.cfg.vision.dim, self.cfg.decoder.cross_attend_cls)?;
        let tokens: Vec<usize> = batch.iter().flat_map(|e| e.decoder_tokens.iter().copied()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.targets.iter().copied()).collect();
        let out = self.decoder.forward(g, p, &tokens, b, vis.as_ref())?;
        // padding targets carry no loss
        let scored: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let lm = lm_loss(g, out.logits, &targets, loss_mask.unwrap_or(&scored))?;

        // rows of different length are padded with masked-out positions
        let t_max = batch.iter().map(|e| e.encoder_tokens.len()).max().unwrap_or(0);
        let mut pooled = Vec::new();
        let mut ids = Vec::new();
        let mut keep = Vec::new();
        for (i, (ex, v)) in batch.iter().zip(&per).enumerate() {
            let Some(v) = v else { continue };
            let n = ex.encoder_tokens.len();
            let mut k = masks.get(i).map_or_else(|| vec![true; n], MaskVector::keep);
            if n == 0 || k.len() != n || !k.iter().any(|&x| x) {
                continue;
            }
            pooled.push(self.pooled_visual(g, p, *v)?);
            ids.extend_from_slice(&ex.encoder_tokens);
            ids.resize(ids.len() + t_max - n, 0);
            k.resize(t_max, false);
            keep.extend(k);
        }
        let pve = if pooled.is_empty() {
            None
        } else {
            let n = pooled.len();
            let visual = if n == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
            let table = self.text_table(g, p);
            let text = text_anchor(g, table, &ids, &keep, n)?;
            Some(pve_loss(g, visual, text, &self.cfg.pve)?)
        };
        let joint = match pve {
            Some(v) => joint_loss(g, lm, v, self.cfg.pve.lambda)?,
            None => lm,
        };
        Ok(JointOut {
            logits: out.logits,
            lm,
            pve,
            joint,
        })
    }

    /// Projected pooled visual vector of one example, outside any graph.
    pub fn visual_embedding<T: Real>(&self, store: &ParamStore<T>, images: &[PatchGrid], cached: Option<&VisualFeatures<T>>) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = self
            .visual_var(&mut g, &p, images, cached)?
            .ok_or(ModelError::Vision(VisionError::NoImages))?;
        let e = self.pooled_visual(&mut g, &p, v)?;
        Ok(g.value(e).data().iter().map(|x| x.f64()).collect())
    }

    /// Masked mean of the decoder embeddings of `ids`.
    pub fn text_embedding<T: Real>(&self, store: &ParamStore<T>, ids: &[usize], keep: &[bool]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let table = g.constant(store.get(self.decoder.tok_emb).value.clone());
        let a = text_anchor(&mut g, table, ids, keep, 1)?;
        Ok(g.value(a).data().iter().map(|x| x.f64()).collect())
    }

    /// Logits `[T, V]` for one example, optionally with gates forced to zero.
    pub fn example_logits<T: Real>(&self, store: &ParamStore<T>, ex: &Example, cached: Option<&VisualFeatures<T>>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = self.visual_var(&mut g, &p, &ex.images, cached)?;
        let vis = pack_visual(&mut g, &[v], self.cfg.vision.dim, self.cfg.decoder.cross_attend_cls)?;
        let out = self.decoder.forward(&mut g, &p, &ex.decoder_tokens, 1, vis.as_ref())?;
        Ok(g.value(out.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{patchify, rasterize};

    pub(crate) fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig {
            vision: VisionConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                ..VisionConfig::default()
            },
            resampler: ResamplerConfig {
                latents: 4,
                depth: 1,
                heads: 2,
                latent_self_attention: false,
            },
            decoder: DecoderConfig {
                vocab_size: 300,
                dim: 8,
                layers: 2,
                heads: 2,
                max_positions: 16,
                cross_stride: 2,
                gate_init: 0.1,
                mlp_ratio: 2,
                ..DecoderConfig::default()
            },
            train_decoder_self: true,
            ..ModelConfig::default()
        };
        cfg.sync();
        cfg
    }

    #[test]
    fn build_is_deterministic() {
        let (_, a) = VistModel::build::<f32>(tiny(), 9).unwrap();
        let (_, b) = VistModel::build::<f32>(tiny(), 9).unwrap();
        let (_, c) = VistModel::build::<f32>(tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().filter(|p| p.group == Group::Vision).all(|p| p.frozen));
    }

    #[test]
    fn joint_forward_runs_with_and_without_images() {
        let (m, store) = VistModel::build::<f64>(tiny(), 1).unwrap();
        let rc = RenderConfig::default();
        let img = patchify(&rasterize("hello world", &rc).unwrap(), &rc).unwrap();
        let a = Example {
            images: vec![img.clone()],
            encoder_tokens: vec![104, 105, 32, 119],
            decoder_tokens: vec![1, 2, 3],
            targets: vec![2, 3, 4],
        };
        let b = Example {
            images: vec![img.clone(), img],
            encoder_tokens: vec![104, 105, 33, 119],
            decoder_tokens: vec![5, 6, 7],
            targets: vec![6, 7, 8],
        };
        let c = Example {
            images: vec![],
            encoder_tokens: vec![],
            decoder_tokens: vec![9, 9, 9],
            targets: vec![9, 9, 9],
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = m.joint_forward(&mut g, &p, &[&a, &b, &c], &[], &[], None).unwrap();
        assert!(out.pve.is_some());
        assert!(g.value(out.joint).item().is_finite());
        g.backward(out.joint).unwrap();
        assert!(g.grad(p.var(m.pve_proj.w)).is_some());
        for (i, param) in store.iter().enumerate() {
            if param.group == Group::Vision {
                assert!(g.grad(p.0[i]).is_none(), "{}", param.name);
            }
        }
    }
}

