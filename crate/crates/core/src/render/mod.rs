//! Text-to-image rendering: a fixed bitmap atlas draws text onto a thin
//! strip, the strip folds into a square image, and the square is cut into
//! patches with an emptiness flag per patch.

mod atlas;
mod export;
mod paginate;
mod patch;

pub use export::{read_pgm, to_pgm, to_png};
pub use paginate::{image_count, paginate, paginate_text};
pub use patch::{patchify, PatchGrid};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("text of {chars} characters overflows a strip holding {capacity}")]
    Overflow { chars: usize, capacity: usize },
    #[error("image geometry {got:?} does not match config {want:?}")]
    Geometry { got: (usize, usize), want: (usize, usize) },
    #[error("malformed image file: {0}")]
    Format(String),
}

pub const GLYPH_WIDTH: usize = 6;
pub const GLYPH_ROWS: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub strip_height: usize,
    pub strip_width: usize,
    pub channels: usize,
    pub fold_side: usize,
    pub patch_size: usize,
    pub glyph_height: usize,
    /// Horizontal cell size of the monospace atlas.
    pub glyph_advance: usize,
    pub background_level: f32,
    pub ink_level: f32,
    pub empty_threshold: f32,
    /// Pagination calibration: at most this many tokens per image.
    pub tokens_per_image: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            strip_height: 14,
            strip_width: 3584,
            channels: 3,
            fold_side: 224,
            patch_size: 14,
            glyph_height: GLYPH_ROWS,
            glyph_advance: GLYPH_WIDTH,
            background_level: 1.0,
            ink_level: 0.0,
            empty_threshold: 0.98,
            tokens_per_image: 147,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::Config(m));
        if self.strip_height * self.strip_width != self.fold_side * self.fold_side {
            return bad(format!(
                "{}x{} strip does not fold into a {} square",
                self.strip_height, self.strip_width, self.fold_side
            ));
        }
        if self.fold_side % self.strip_height != 0 {
            return bad("fold side must be a multiple of the strip height".into());
        }
        if self.patch_size == 0 || self.fold_side % self.patch_size != 0 {
            return bad(format!("patch size {} does not tile {}", self.patch_size, self.fold_side));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.glyph_height > self.strip_height || self.glyph_height != GLYPH_ROWS {
            return bad(format!("glyph height must be {GLYPH_ROWS} and fit the strip"));
        }
        if self.glyph_advance < GLYPH_WIDTH || self.glyph_advance > self.fold_side {
            return bad("glyph advance must cover the atlas cell and fit a band".into());
        }
        if self.tokens_per_image == 0 {
            return bad("tokens_per_image must be positive".into());
        }
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !unit(self.background_level) || !unit(self.ink_level) || !unit(self.empty_threshold) {
            return bad("intensities must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Number of fold_side-wide bands the strip is cut into.
    pub fn bands(&self) -> usize {
        self.strip_width / self.fold_side
    }

    /// Glyph cells per band; a glyph never straddles a fold.
    pub fn cells_per_band(&self) -> usize {
        self.fold_side / self.glyph_advance
    }

    /// Characters one strip holds.
    pub fn strip_capacity(&self) -> usize {
        self.bands() * self.cells_per_band()
    }

    pub fn patches_per_side(&self) -> usize {
        self.fold_side / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// A folded square image, `fold_side x fold_side x channels`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct TextImage {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    /// Half-open token range this image was rendered from.
    pub source_span: (usize, usize),
}

impl TextImage {
    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.side + col) * self.channels + ch]
    }

    /// True when some pixel is darker than `background`.
    pub fn has_ink(&self, background: f32) -> bool {
        self.pixels.iter().any(|&p| p < background)
    }
}

fn glyph(c: char) -> &'static [u8; GLYPH_ROWS] {
    match c {
        ' '..='~' => &atlas::GLYPH_ROWS[c as usize - 0x20],
        _ => &atlas::REPLACEMENT,
    }
}

/// Draws `text` left to right on a single-channel `strip_height x strip_width`
/// strip. Control whitespace renders as a blank cell.
pub fn render_strip(text: &str, cfg: &RenderConfig) -> Result<Vec<f32>, RenderError> {
    cfg.validate()?;
    let chars = text.chars().count();
    if chars > cfg.strip_capacity() {
        return Err(RenderError::Overflow {
            chars,
            capacity: cfg.strip_capacity(),
        });
    }
    let (h, w) = (cfg.strip_height, cfg.strip_width);
    let mut strip = vec![cfg.background_level; h * w];
    let top = (h - cfg.glyph_height) / 2;
    let per_band = cfg.cells_per_band();
    for (i, c) in text.chars().enumerate() {
        let c = if c.is_whitespace() { ' ' } else { c };
        let x0 = (i / per_band) * cfg.fold_side + (i % per_band) * cfg.glyph_advance;
        for (r, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_WIDTH {
                if bits & (1 << (GLYPH_WIDTH - 1 - col)) != 0 {
                    strip[(top + r) * w + x0 + col] = cfg.ink_level;
                }
            }
        }
    }
    Ok(strip)
}

/// Cuts the strip into `bands` segments of width `fold_side` and stacks them
/// top to bottom. A pure reshuffle of pixels.
pub fn fold_strip(strip: &[f32], cfg: &RenderConfig) -> Vec<f32> {
    let (h, w, side) = (cfg.strip_height, cfg.strip_width, cfg.fold_side);
    let mut out = vec![0.0; side * side];
    for b in 0..cfg.bands() {
        for y in 0..h {
            let src = &strip[y * w + b * side..y * w + (b + 1) * side];
            out[(b * h + y) * side..(b * h + y + 1) * side].copy_from_slice(src);
        }
    }
    out
}

/// Renders one strip's worth of text into a folded square image.
pub fn rasterize(text: &str, cfg: &RenderConfig) -> Result<TextImage, RenderError> {
    let strip = render_strip(text, cfg)?;
    let gray = fold_strip(&strip, cfg);
    let c = cfg.channels;
    let mut pixels = Vec::with_capacity(gray.len() * c);
    for v in gray {
        pixels.extend(std::iter::repeat(v).take(c));
    }
    Ok(TextImage {
        side: cfg.fold_side,
        channels: c,
        pixels,
        source_span: (0, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = RenderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.strip_height * cfg.strip_width, 224 * 224);
        assert_eq!(cfg.bands(), 16);
        assert_eq!(cfg.patches_per_side(), 16);
        assert_eq!(cfg.patch_count(), 256);
        assert_eq!(cfg.patch_dim(), 588);
        assert_eq!(cfg.strip_capacity(), 16 * 37);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = RenderConfig {
            strip_width: 3000,
            ..RenderConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = RenderConfig {
            patch_size: 15,
            ..RenderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_text_is_background() {
        let cfg = RenderConfig::default();
        let img = rasterize("", &cfg).unwrap();
        assert_eq!(img.pixels.len(), 224 * 224 * 3);
        assert!(img.pixels.iter().all(|&p| p == cfg.background_level));
        assert!(!img.has_ink(cfg.background_level));
    }

    #[test]
    fn overflow_is_an_error() {
        let cfg = RenderConfig::default();
        let text = "x".repeat(cfg.strip_capacity() + 1);
        assert!(matches!(rasterize(&text, &cfg), Err(RenderError::Overflow { .. })));
        assert!(rasterize(&text[1..], &cfg).is_ok());
    }

    #[test]
    fn fold_conserves_pixel_multiset() {
        let cfg = RenderConfig::default();
        let strip = render_strip("The quick brown fox jumps over the lazy dog. 0123456789", &cfg).unwrap();
        let folded = fold_strip(&strip, &cfg);
        let mut a: Vec<u32> = strip.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = folded.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_glyphs_use_replacement() {
        let cfg = RenderConfig::default();
        let a = rasterize("\u{00e9}", &cfg).unwrap();
        let b = rasterize("\u{4e2d}", &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.has_ink(cfg.background_level));
    }
}
