//! Local-binary-pattern texture masks, masked textures, and output fusion.
//!
//! LBP codes use the standard 8-bit convention: neighbour `p = 1..8`, walked
//! clockwise from the top-left, contributes `2^(p-1)` when it is at least as
//! bright as the centre. Borders replicate the edge pixel, so every pixel has
//! a full neighbourhood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Default mask threshold.
pub const DEFAULT_TAU: u8 = 180;
/// Default weight of the network output in [`fuse`].
pub const DEFAULT_ALPHA: f64 = 0.9;

/// `(dy, dx)` offsets, clockwise from the top-left neighbour.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub tau: u8,
    pub alpha: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl TextureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-pixel LBP codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpMap {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextureMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl TextureMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Fraction of pixels set.
    pub fn density(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len().max(1) as f64
    }

    pub fn as_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("dims match")
    }
}

/// Affine min–max rescale to `[0, 255]` with rounding; constant images map to zeros.
pub fn quantize(image: &Image) -> Vec<u8> {
    let (lo, hi) = (image.min(), image.max());
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0; image.len()];
    }
    image
        .data()
        .iter()
        .map(|&v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// LBP codes of an already-quantized grid.
pub fn lbp_codes(gray: &[u8], height: usize, width: usize) -> Result<LbpMap> {
    if height == 0 || width == 0 {
        return Err(Error::EmptyImage);
    }
    if gray.len() != height * width {
        return Err(Error::Shape(format!(
            "{height}×{width} grid with {} samples",
            gray.len()
        )));
    }
    let (hi, wi) = (height as isize, width as isize);
    let mut codes = Vec::with_capacity(gray.len());
    for y in 0..hi {
        for x in 0..wi {
            let center = gray[(y * wi + x) as usize];
            let mut code = 0u8;
            for (p, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                let ny = (y + dy).clamp(0, hi - 1);
                let nx = (x + dx).clamp(0, wi - 1);
                if gray[(ny * wi + nx) as usize] >= center {
                    code |= 1 << p;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpMap {
        height,
        width,
        codes,
    })
}

pub fn lbp_map(image: &Image) -> Result<LbpMap> {
    if image.is_empty() {
        return Err(Error::EmptyImage);
    }
    lbp_codes(&quantize(image), image.height(), image.width())
}

/// 1 where the code is at least `tau`.
pub fn texture_mask(lbp: &LbpMap, tau: u8) -> TextureMask {
    TextureMask {
        height: lbp.height,
        width: lbp.width,
        bits: lbp.codes.iter().map(|&c| (c >= tau) as u8).collect(),
    }
}

/// `image ⊙ mask`.
pub fn masked_texture(image: &Image, mask: &TextureMask) -> Result<Image> {
    if image.dims() != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            (mask.height, mask.width)
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
        .collect();
    Image::new(image.height(), image.width(), data)
}

/// Mask of `image`'s own texture and the masked image.
pub fn texture_condition(image: &Image, tau: u8) -> Result<(TextureMask, Image)> {
    let mask = texture_mask(&lbp_map(image)?, tau);
    let u = masked_texture(image, &mask)?;
    Ok((mask, u))
}

/// `alpha·separated + (1 − alpha)·masked`.
pub fn fuse(separated: &Image, masked: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        separated.ensure_same_dims(masked)?;
        return Ok(separated.clone());
    }
    separated.zip_map(masked, |s, u| alpha * s + (1.0 - alpha) * u)
}

/// Inference-time fusion: the masked texture comes from the output's own mask.
pub fn fuse_with_own_texture(separated: &Image, cfg: &TextureConfig) -> Result<Image> {
    let (_, u) = texture_condition(separated, cfg.tau)?;
    fuse(separated, &u, cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lbp_oracle(gray: &[u8], h: usize, w: usize) -> Vec<u8> {
        let at = |y: isize, x: isize| {
            let y = y.max(0).min(h as isize - 1) as usize;
            let x = x.max(0).min(w as isize - 1) as usize;
            gray[y * w + x] as i32
        };
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let c = at(y, x);
                let n = [
                    at(y - 1, x - 1),
                    at(y - 1, x),
                    at(y - 1, x + 1),
                    at(y, x + 1),
                    at(y + 1, x + 1),
                    at(y + 1, x),
                    at(y + 1, x - 1),
                    at(y, x - 1),
                ];
                let mut code = 0u32;
                for p in 1..=8u32 {
                    if n[p as usize - 1] - c >= 0 {
                        code += 2u32.pow(p - 1);
                    }
                }
                out.push(code as u8);
            }
        }
        out
    }

    #[test]
    fn constant_image_is_all_255() {
        let img = Image::from_fn(4, 5, |_, _| 3.7);
        assert!(lbp_map(&img).unwrap().codes.iter().all(|&c| c == 255));
    }

    #[test]
    fn dark_neighbourhood_is_zero() {
        let mut g = vec![0u8; 9];
        g[4] = 5;
        assert_eq!(lbp_codes(&g, 3, 3).unwrap().codes[4], 0);
    }

    #[test]
    fn worked_neighbourhood_gives_205() {
        // clockwise from top-left: 200, 50, 150, 100, 0, 99, 100, 101
        let g = [200u8, 50, 150, 101, 100, 100, 100, 99, 0];
        assert_eq!(lbp_codes(&g, 3, 3).unwrap().codes[4], 205);
        assert_eq!(lbp_oracle(&g, 3, 3)[4], 205);
        let img = Image::new(3, 3, g.iter().map(|&v| v as f64).collect()).unwrap();
        assert_eq!(lbp_map(&img).unwrap().codes[4], 205);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(
            lbp_map(&Image::zeros(0, 0)),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn mask_threshold_examples() {
        let lbp = LbpMap {
            height: 1,
            width: 3,
            codes: vec![205, 150, 0],
        };
        assert_eq!(texture_mask(&lbp, 180).bits, vec![1, 0, 0]);
        assert_eq!(texture_mask(&lbp, 0).bits, vec![1, 1, 1]);
        assert_eq!(TextureConfig::default().tau, 180);
    }

    #[test]
    fn masked_texture_examples() {
        let img = Image::new(1, 2, vec![2.0, 3.0]).unwrap();
        assert_eq!(masked_texture(&img, &TextureMask::ones(1, 2)).unwrap(), img);
        assert_eq!(
            masked_texture(&img, &TextureMask::zeros(1, 2)).unwrap(),
            Image::zeros(1, 2)
        );
        let m = TextureMask {
            height: 1,
            width: 2,
            bits: vec![1, 0],
        };
        assert_eq!(masked_texture(&img, &m).unwrap().data(), &[2.0, 0.0]);
        assert!(masked_texture(&img, &TextureMask::ones(2, 1)).is_err());
    }

    #[test]
    fn fuse_examples() {
        let s = Image::new(1, 1, vec![2.0]).unwrap();
        let u = Image::new(1, 1, vec![4.0]).unwrap();
        assert_eq!(fuse(&s, &u, 1.0).unwrap(), s);
        assert_eq!(fuse(&s, &u, 0.0).unwrap(), u);
        assert_eq!(fuse(&s, &u, 0.5).unwrap().data(), &[3.0]);
        assert!(fuse(&s, &Image::zeros(2, 1), 0.5).is_err());
        assert!(fuse(&s, &u, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn lbp_matches_brute_force(seed in proptest::collection::vec(0u8..=255, 1..200), w in 1usize..12) {
            let h = seed.len() / w;
            prop_assume!(h >= 1);
            let g = &seed[..h * w];
            prop_assert_eq!(lbp_codes(g, h, w).unwrap().codes, lbp_oracle(g, h, w));
        }

        #[test]
        fn mask_is_monotone_in_tau(codes in proptest::collection::vec(0u8..=255, 1..64), t1 in 0u8..=255, t2 in 0u8..=255) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let lbp = LbpMap { height: 1, width: codes.len(), codes };
            let (a, b) = (texture_mask(&lbp, lo), texture_mask(&lbp, hi));
            for (x, y) in a.bits.iter().zip(&b.bits) {
                prop_assert!(y <= x);
            }
        }

        #[test]
        fn fuse_is_affine_in_alpha(v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..20), alpha in 0.0f64..=1.0) {
            let n = v.len();
            let s = Image::new(1, n, v.iter().map(|p| p.0).collect()).unwrap();
            let u = Image::new(1, n, v.iter().map(|p| p.1).collect()).unwrap();
            let f = fuse(&s, &u, alpha).unwrap();
            let (f1, f0) = (fuse(&s, &u, 1.0).unwrap(), fuse(&s, &u, 0.0).unwrap());
            for i in 0..n {
                let lin = alpha * f1.data()[i] + (1.0 - alpha) * f0.data()[i];
                prop_assert!((f.data()[i] - lin).abs() < 1e-12);
            }
        }

        #[test]
        fn lbp_invariant_to_positive_affine_rescale(
            vals in proptest::collection::vec(0u32..1000, 16),
            scale_pow in -2i32..4,
            offset in 0u32..50,
        ) {
            let img = Image::new(4, 4, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let a = 2f64.powi(scale_pow);
            let shifted = img.map(|v| a * (v + offset as f64));
            prop_assert_eq!(lbp_map(&img).unwrap(), lbp_map(&shifted).unwrap());
        }
    }
}
