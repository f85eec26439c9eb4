//! Frozen feature providers.
//!
//! The expert scorer and the retrievers only need a global embedding and a
//! patch-token grid per image. Real deployments plug in a frozen vision
//! backbone; [`SyntheticProvider`] is a cheap deterministic stand-in.

use image::RgbImage;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::imaging::{luminance, resize};

/// Patch tokens on a fixed `rows × cols` grid, row-major, `dim` floats each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchTokens {
    pub fn from_tokens(rows: usize, cols: usize, tokens: &[Vec<f64>]) -> Self {
        assert_eq!(tokens.len(), rows * cols, "token count must match grid");
        let dim = tokens.first().map_or(0, Vec::len);
        assert!(tokens.iter().all(|t| t.len() == dim), "ragged tokens");
        PatchTokens {
            rows,
            cols,
            dim,
            data: tokens.concat(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Unit-norm global descriptor.
    fn embed_global(&self, img: &RgbImage) -> Vec<f64>;

    /// Patch tokens; the grid size is fixed per provider.
    fn patch_tokens(&self, img: &RgbImage) -> PatchTokens;
}

/// Deterministic provider built from simple pixel statistics.
///
/// Each patch is summarised by its mean RGB and luminance spread, then
/// lifted to `dim` dimensions with seeded random Fourier features. The
/// global embedding is a centred 8×8 luminance thumbnail plus the mean
/// brightness, normalised to unit length.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    grid: usize,
    patch_px: u32,
    weights: Vec<[f64; 4]>,
    phases: Vec<f64>,
}

impl Default for SyntheticProvider {
    fn default() -> Self {
        SyntheticProvider::new(48, 4, 32, 0)
    }
}

impl SyntheticProvider {
    pub fn new(grid: usize, patch_px: u32, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || {
            // Box-Muller on two uniforms in (0, 1]
            let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let weights = (0..dim)
            .map(|_| [gauss() * 3.0, gauss() * 3.0, gauss() * 3.0, gauss() * 6.0])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let phases = (0..dim)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU)
            .collect();
        SyntheticProvider {
            grid,
            patch_px,
            weights,
            phases,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    fn lift(&self, stats: [f64; 4]) -> Vec<f64> {
        let norm = (2.0 / self.weights.len() as f64).sqrt();
        self.weights
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| {
                let z: f64 = w.iter().zip(&stats).map(|(a, s)| a * s).sum();
                norm * (z + b).cos()
            })
            .collect()
    }
}

impl FeatureProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic-rff"
    }

    fn embed_global(&self, img: &RgbImage) -> Vec<f64> {
        let thumb = luminance(&resize(img, 8, 8));
        let mean = thumb.mean();
        let mut v: Vec<f64> = thumb.data.iter().map(|x| x - mean).collect();
        v.push(mean);
        normalize(v)
    }

    fn patch_tokens(&self, img: &RgbImage) -> PatchTokens {
        let side = self.grid as u32 * self.patch_px;
        let im = resize(img, side, side);
        let p = self.patch_px;
        let n = (p * p) as f64;
        let mut data = Vec::with_capacity(self.grid * self.grid * self.weights.len());
        for gy in 0..self.grid as u32 {
            for gx in 0..self.grid as u32 {
                let (mut r, mut g, mut b, mut l, mut l2) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        let px = im.get_pixel(x, y);
                        let (pr, pg, pb) = (px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0);
                        let lum = 0.299 * pr + 0.587 * pg + 0.114 * pb;
                        r += pr;
                        g += pg;
                        b += pb;
                        l += lum;
                        l2 += lum * lum;
                    }
                }
                let ml = l / n;
                let sd = (l2 / n - ml * ml).max(0.0).sqrt();
                data.extend(self.lift([r / n, g / n, b / n, sd]));
            }
        }
        PatchTokens {
            rows: self.grid,
            cols: self.grid,
            dim: self.weights.len(),
            data,
        }
    }
}

pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::render_synthetic;

    #[test]
    fn global_embedding_is_unit_norm() {
        let p = SyntheticProvider::default();
        for loc in ["synth://texture/1", "synth://plain/2", "synth://flat/3"] {
            let e = p.embed_global(&render_synthetic(loc).unwrap());
            let n: f64 = e.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12, "{loc}");
        }
        let black = RgbImage::new(10, 10);
        let e = p.embed_global(&black);
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_is_fixed() {
        let p = SyntheticProvider::default();
        let t = p.patch_tokens(&render_synthetic("synth://texture/1?size=100").unwrap());
        assert_eq!((t.rows, t.cols, t.dim), (48, 48, 32));
        let t2 = p.patch_tokens(&render_synthetic("synth://texture/1?size=300").unwrap());
        assert_eq!(t2.len(), t.len());
    }

    #[test]
    fn deterministic() {
        let img = render_synthetic("synth://texture/9").unwrap();
        let a = SyntheticProvider::default().patch_tokens(&img);
        let b = SyntheticProvider::default().patch_tokens(&img);
        assert_eq!(a, b);
    }
}
