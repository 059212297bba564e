//! WebAssembly bindings for the static page in `www/`. Each exported
//! function is a thin wrapper over a plain Rust function so the logic can be
//! tested natively.

use serde_json::json;
use wasm_bindgen::prelude::*;

use vist_core::corpus::{FreqTable, Tokenizer};
use vist_core::eval::{compression_report, cost_estimate, info_gain_profile};
use vist_core::model::ModelConfig;
use vist_core::render::{paginate_text, patchify, RenderConfig};
use vist_core::tensor::DType;

/// Vocabulary used by the mask preview's tokenizer.
const PREVIEW_VOCAB: usize = 512;

// overlay tints, RGB
const EMPTY_TINT: [u8; 3] = [235, 240, 250];
const INK_TINT: [u8; 3] = [255, 196, 120];
const GRID: [u8; 3] = [150, 160, 190];

/// Folded images of `text`, side by side, as RGBA rows. Patches holding ink
/// are tinted and every patch border is drawn when `grid` is set.
#[wasm_bindgen]
pub struct Rendered {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    images: usize,
    non_empty: usize,
    patches: usize,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn images(&self) -> usize {
        self.images
    }

    #[wasm_bindgen(getter = nonEmpty)]
    pub fn non_empty(&self) -> usize {
        self.non_empty
    }

    #[wasm_bindgen(getter)]
    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn blend(px: u8, tint: u8) -> u8 {
    ((px as u16 * tint as u16) / 255) as u8
}

pub fn render_overlay(text: &str, grid: bool) -> Result<Rendered, String> {
    let cfg = RenderConfig::default();
    // no trained tokenizer here; assume about four bytes per token
    let tokens = text.len().div_ceil(4);
    let images = paginate_text(text, tokens, &cfg).map_err(|e| e.to_string())?;
    let side = cfg.fold_side;
    let gap = if images.is_empty() { 0 } else { 8 };
    let width = images.len().max(1) * side + images.len().saturating_sub(1) * gap;
    let mut rgba = vec![255u8; width * side * 4];
    let (mut non_empty, mut patches) = (0, 0);
    for (k, img) in images.iter().enumerate() {
        let grid_cells = patchify(img, &cfg).map_err(|e| e.to_string())?;
        non_empty += grid_cells.non_empty_count();
        patches += grid_cells.len();
        let per_side = cfg.patches_per_side();
        let x0 = k * (side + gap);
        for r in 0..side {
            for c in 0..side {
                let (pr, pc) = (r / cfg.patch_size, c / cfg.patch_size);
                let inked = !grid_cells.empty_mask[pr * per_side + pc];
                let edge = grid && (r % cfg.patch_size == 0 || c % cfg.patch_size == 0);
                let v = (img.pixel(r, c, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
                let tint = if edge {
                    GRID
                } else if inked {
                    INK_TINT
                } else {
                    EMPTY_TINT
                };
                let o = (r * width + x0 + c) * 4;
                for ch in 0..3 {
                    rgba[o + ch] = blend(v, tint[ch]);
                }
            }
        }
    }
    Ok(Rendered {
        width,
        height: side,
        rgba,
        images: images.len(),
        non_empty,
        patches,
    })
}

#[wasm_bindgen(js_name = renderText)]
pub fn render_text(text: &str, grid: bool) -> Result<Rendered, JsError> {
    render_overlay(text, grid).map_err(|e| JsError::new(&e))
}

/// Importance scores of `text` against a reference corpus (samples split on
/// blank lines) and the tokens the frequency mask hides, as JSON:
/// `{"tokens":[{"piece","score","masked"}..], "vocab":n}`.
pub fn mask_json(corpus: &str, text: &str) -> Result<String, String> {
    let samples: Vec<&str> = corpus.split("\n\n").map(str::trim).filter(|s| !s.is_empty()).collect();
    if samples.is_empty() {
        return Err("reference corpus is empty".into());
    }
    let tok = Tokenizer::train(&samples, PREVIEW_VOCAB).map_err(|e| e.to_string())?;
    let mut freq = FreqTable::new();
    for s in &samples {
        freq.add_sample(&tok.encode(s));
    }
    let ids = tok.encode(text);
    let profile = info_gain_profile(&ids, &freq).map_err(|e| e.to_string())?;
    let tokens: Vec<_> = profile
        .iter()
        .map(|g| json!({"piece": tok.piece(g.token), "score": g.score, "masked": g.masked}))
        .collect();
    Ok(json!({"tokens": tokens, "vocab": tok.vocab_size(), "samples": samples.len()}).to_string())
}

#[wasm_bindgen(js_name = maskPreview)]
pub fn mask_preview(corpus: &str, text: &str) -> Result<String, JsError> {
    mask_json(corpus, text).map_err(|e| JsError::new(&e))
}

/// Compression and forward cost of a `t_e`-token distant context with a
/// `t_d`-token decoder window, next to feeding all `t_e + t_d` tokens to
/// the decoder directly.
pub fn cost_json(t_e: usize, t_d: usize, latents: usize) -> String {
    let mut cfg = ModelConfig::default();
    cfg.resampler.latents = latents.max(1);
    cfg.decoder.max_positions = cfg.decoder.max_positions.max(t_e + t_d);
    cfg.sync();
    let comp = compression_report(t_e, &cfg.render, cfg.resampler.latents);
    let with = cost_estimate(&cfg, t_e, t_d, DType::F32);
    let flat = cost_estimate(&cfg, 0, t_e + t_d, DType::F32);
    json!({
        "images": comp.images,
        "visual_tokens": comp.visual_tokens,
        "delta": comp.delta_display(),
        "flops": with.flops,
        "memory_bytes": with.memory_bytes,
        "flat_flops": flat.flops,
        "flat_memory_bytes": flat.memory_bytes,
    })
    .to_string()
}

#[wasm_bindgen(js_name = costEstimate)]
pub fn cost_estimate_js(t_e: usize, t_d: usize, latents: usize) -> String {
    cost_json(t_e, t_d, latents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_covers_every_image() {
        let r = render_overlay("hello world, rendered for the browser", true).unwrap();
        assert_eq!(r.images, 1);
        assert_eq!(r.rgba.len(), r.width * r.height * 4);
        assert_eq!(r.patches, 256);
        assert!(r.non_empty > 0 && r.non_empty < r.patches);
    }

    #[test]
    fn empty_text_gives_a_blank_canvas() {
        let r = render_overlay("", false).unwrap();
        assert_eq!((r.images, r.non_empty), (0, 0));
        assert!(r.rgba.iter().all(|&b| b == 255));
    }

    #[test]
    fn mask_preview_hides_half() {
        let corpus = "the cat sat on the mat\n\nthe dog sat on the log\n\na bird sang";
        let v: serde_json::Value = serde_json::from_str(&mask_json(corpus, "the cat sang").unwrap()).unwrap();
        let toks = v["tokens"].as_array().unwrap();
        let masked = toks.iter().filter(|t| t["masked"] == true).count();
        assert_eq!(masked, (toks.len() + 1) / 2);
        assert!(mask_json("  \n\n ", "x").is_err());
    }

    #[test]
    fn cost_matches_compression_arithmetic() {
        let v: serde_json::Value = serde_json::from_str(&cost_json(1024, 128, 64)).unwrap();
        assert_eq!(v["images"], 7);
        assert_eq!(v["visual_tokens"], 448);
        assert_eq!(v["delta"], "2.3");
        assert!(v["flops"].as_f64().unwrap() < v["flat_flops"].as_f64().unwrap());
    }
}
