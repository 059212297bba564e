use super::{RenderConfig, RenderError, TextImage};

/// Non-overlapping square patches in row-major order, each flattened as
/// `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_dim: usize,
    pub patches: Vec<f32>,
    /// `true` when every pixel of the patch is at or above the empty threshold.
    pub empty_mask: Vec<bool>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.empty_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empty_mask.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn non_empty_count(&self) -> usize {
        self.empty_mask.iter().filter(|&&e| !e).count()
    }
}

pub fn patchify(img: &TextImage, cfg: &RenderConfig) -> Result<PatchGrid, RenderError> {
    if img.side != cfg.fold_side || img.channels != cfg.channels || img.pixels.len() != img.side * img.side * img.channels {
        return Err(RenderError::Geometry {
            got: (img.side, img.channels),
            want: (cfg.fold_side, cfg.channels),
        });
    }
    let (p, c, side) = (cfg.patch_size, cfg.channels, cfg.fold_side);
    let per_side = side / p;
    let dim = p * p * c;
    let mut patches = Vec::with_capacity(per_side * per_side * dim);
    let mut empty_mask = Vec::with_capacity(per_side * per_side);
    for pr in 0..per_side {
        for pc in 0..per_side {
            let start = patches.len();
            for y in 0..p {
                let row = (pr * p + y) * side + pc * p;
                patches.extend_from_slice(&img.pixels[row * c..(row + p) * c]);
            }
            empty_mask.push(patches[start..].iter().all(|&v| v >= cfg.empty_threshold));
        }
    }
    Ok(PatchGrid {
        patch_dim: dim,
        patches,
        empty_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::super::rasterize;
    use super::*;

    #[test]
    fn blank_image_is_all_empty() {
        let cfg = RenderConfig::default();
        let g = patchify(&rasterize("", &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(g.len(), 256);
        assert!(g.empty_mask.iter().all(|&e| e));
    }

    #[test]
    fn ink_in_top_left_block_only() {
        let cfg = RenderConfig::default();
        let mut img = rasterize("", &cfg).unwrap();
        img.pixels[(3 * 224 + 5) * 3 + 1] = 0.2;
        img.pixels[(13 * 224 + 13) * 3] = 0.0;
        let g = patchify(&img, &cfg).unwrap();
        // brute-force count over patches
        let mut non_empty = 0;
        for i in 0..g.len() {
            if g.patch(i).iter().any(|&v| v < cfg.empty_threshold) {
                non_empty += 1;
            }
        }
        assert_eq!(non_empty, 1);
        assert_eq!(g.non_empty_count(), 1);
        assert!(!g.empty_mask[0]);
    }

    #[test]
    fn zero_threshold_means_nothing_is_empty_on_white() {
        let cfg = RenderConfig {
            empty_threshold: 0.0,
            ..RenderConfig::default()
        };
        let g = patchify(&rasterize("", &cfg).unwrap(), &cfg).unwrap();
        // every pixel is 1.0 >= 0.0, so every patch still counts as empty
        assert_eq!(g.non_empty_count(), 0);
        let mut img = rasterize("", &cfg).unwrap();
        img.pixels.iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(patchify(&img, &cfg).unwrap().non_empty_count(), 0);
    }

    #[test]
    fn geometry_mismatch() {
        let cfg = RenderConfig::default();
        let mut img = rasterize("a", &cfg).unwrap();
        img.side = 112;
        assert!(matches!(patchify(&img, &cfg), Err(RenderError::Geometry { .. })));
    }

    #[test]
    fn patch_layout_is_row_major() {
        let cfg = RenderConfig::default();
        let mut img = rasterize("", &cfg).unwrap();
        // pixel (row 14, col 28) is the first pixel of patch (1, 2)
        img.pixels[(14 * 224 + 28) * 3 + 2] = 0.5;
        let g = patchify(&img, &cfg).unwrap();
        assert_eq!(g.patch(16 + 2)[2], 0.5);
    }
}
