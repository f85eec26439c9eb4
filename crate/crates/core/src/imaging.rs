//! Image primitives shared by the tools: real-valued grids, luminance,
//! normalized crops, connected components, Otsu thresholding, rotation and
//! the `synth://` generator used by tests and the toy benchmark.

use std::sync::Arc;

use image::{imageops::FilterType, Rgb, RgbImage};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Row-major real grid. Used for luminance planes, masks and heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == width), "ragged grid");
        Grid {
            width,
            height,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Gray image; values are mapped linearly from `[lo, hi]` to `[0, 255]`.
    pub fn to_image(&self, lo: f64, hi: f64) -> RgbImage {
        let span = if hi > lo { hi - lo } else { 1.0 };
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = ((self.get(x as usize, y as usize) - lo) / span).clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            Rgb([g, g, g])
        })
    }
}

/// Rec. 601 luma in `[0, 1]`.
pub fn luminance(img: &RgbImage) -> Grid {
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    Grid {
        width: w as usize,
        height: h as usize,
        data,
    }
}

pub fn resize(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    if img.dimensions() == (w, h) {
        return img.clone();
    }
    image::imageops::resize(img, w.max(1), h.max(1), FilterType::Triangle)
}

/// Scales so that the longer edge equals `edge`, keeping the aspect ratio.
pub fn resize_long_edge(img: &RgbImage, edge: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let long = w.max(h).max(1) as f64;
    let s = edge as f64 / long;
    resize(
        img,
        ((w as f64 * s).round() as u32).max(1),
        ((h as f64 * s).round() as u32).max(1),
    )
}

/// Normalized bounding box `[x0, y0, x1, y1]` with coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox(pub [f64; 4]);

impl NormBox {
    pub const FULL: NormBox = NormBox([0.0, 0.0, 1.0, 1.0]);

    pub fn validate(self) -> Result<Self, String> {
        let [x0, y0, x1, y1] = self.0;
        if !self.0.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(format!("bbox {:?} has coordinates outside [0,1]", self.0));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(format!("bbox {:?} is empty", self.0));
        }
        Ok(self)
    }

    /// Pixel rectangle `(x, y, w, h)`; never empty.
    pub fn to_pixels(self, w: u32, h: u32) -> (u32, u32, u32, u32) {
        let [x0, y0, x1, y1] = self.0;
        let px0 = ((x0 * w as f64).floor() as u32).min(w.saturating_sub(1));
        let py0 = ((y0 * h as f64).floor() as u32).min(h.saturating_sub(1));
        let px1 = ((x1 * w as f64).ceil() as u32).clamp(px0 + 1, w.max(px0 + 1));
        let py1 = ((y1 * h as f64).ceil() as u32).clamp(py0 + 1, h.max(py0 + 1));
        (px0, py0, px1 - px0, py1 - py0)
    }
}

pub fn crop(img: &RgbImage, bbox: NormBox) -> RgbImage {
    let (x, y, w, h) = bbox.to_pixels(img.width(), img.height());
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

/// Places images left to right on a black canvas, each scaled to `height`.
pub fn hconcat(images: &[&RgbImage], height: u32, gap: u32) -> RgbImage {
    let scaled: Vec<RgbImage> = images
        .iter()
        .map(|im| {
            let (w, h) = im.dimensions();
            let nw = ((w as f64 * height as f64 / h.max(1) as f64).round() as u32).max(1);
            resize(im, nw, height)
        })
        .collect();
    let total: u32 =
        scaled.iter().map(|s| s.width()).sum::<u32>() + gap * scaled.len().saturating_sub(1) as u32;
    let mut out = RgbImage::new(total.max(1), height);
    let mut x = 0i64;
    for s in &scaled {
        image::imageops::overlay(&mut out, s, x, 0);
        x += (s.width() + gap) as i64;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub area: usize,
    /// `(x, y)` mean of member cell coordinates.
    pub centroid: (f64, f64),
    /// Inclusive cell bounds `(x0, y0, x1, y1)`.
    pub bounds: (usize, usize, usize, usize),
}

/// 8-connected labelling of cells strictly above `threshold`.
///
/// Components are numbered in raster order of their first cell, i.e. by
/// top-left-most cell (row first, then column).
pub fn connected_components(mask: &Grid, threshold: f64) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !(mask.data[start] > threshold) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sx, mut sy) = (0usize, 0.0, 0.0);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.data[j] > threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Component {
            area,
            centroid: (sx / area as f64, sy / area as f64),
            bounds: (x0, y0, x1, y1),
        });
    }
    out
}

/// Otsu threshold over a 256-bin histogram of values in `[lo, hi]`.
/// Returns `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return None;
    }
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    let scale = (BINS - 1) as f64 / (hi - lo);
    for &v in values {
        hist[((v - lo) * scale).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // cells strictly above the returned value are foreground
    Some(lo + (best_t as f64 + 0.5) / scale)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bilinear rotation about the centre by `deg` degrees (counter-clockwise
/// in image coordinates); samples falling outside are set to `fill`.
pub fn rotate_grid(g: &Grid, deg: f64, fill: f64) -> Grid {
    let (w, h) = (g.width, g.height);
    let (s, c) = deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Grid::new(w, h, fill);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            if let Some(v) = bilinear(g, sx, sy) {
                out.set(x, y, v);
            }
        }
    }
    out
}

fn bilinear(g: &Grid, x: f64, y: f64) -> Option<f64> {
    if x < 0.0 || y < 0.0 || x > (g.width - 1) as f64 || y > (g.height - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(g.width - 1);
    let y1 = (y0 + 1).min(g.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = g.get(x0, y0) * (1.0 - fx) + g.get(x1, y0) * fx;
    let bot = g.get(x0, y1) * (1.0 - fx) + g.get(x1, y1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Rotates an RGB image with the same convention as [`rotate_grid`],
/// nearest-neighbour sampling, black fill.
pub fn rotate_image(img: &RgbImage, deg: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (s, c) = deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = (c * dx + s * dy + cx).round();
        let sy = (-s * dx + c * dy + cy).round();
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            Rgb([0, 0, 0])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// Pearson correlation of two equally sized grids; 0 when either is flat.
pub fn ncc(a: &Grid, b: &Grid) -> f64 {
    let ma = a.mean();
    let mb = b.mean();
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        num / (va.sqrt() * vb.sqrt())
    }
}

pub const SYNTH_SCHEME: &str = "synth://";

/// Renders a `synth://<kind>/<seed>[?size=N&blob=x,y,r&...]` locator.
///
/// Kinds: `plain` (uniform gray), `flat` (4×4 piecewise-constant blocks),
/// `texture` (sum of seeded sinusoids). Each `blob` paints a white disk at
/// normalized centre `(x, y)` with normalized radius `r`.
pub fn render_synthetic(locator: &str) -> Result<RgbImage, String> {
    let rest = locator
        .strip_prefix(SYNTH_SCHEME)
        .ok_or_else(|| format!("not a synthetic locator: {locator}"))?;
    let (path, query) = rest.split_once('?').unwrap_or((rest, ""));
    let (kind, seed) = path
        .split_once('/')
        .ok_or_else(|| format!("synthetic locator needs <kind>/<seed>: {locator}"))?;
    let seed: u64 = seed
        .parse()
        .map_err(|_| format!("bad seed in synthetic locator: {locator}"))?;
    let mut size = 192u32;
    let mut blobs = Vec::new();
    for kv in query.split('&').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad parameter {kv}"))?;
        match k {
            "size" => size = v.parse().map_err(|_| format!("bad size {v}"))?,
            "blob" => {
                let p: Vec<f64> = v
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("bad blob {v}"))?;
                if p.len() != 3 {
                    return Err(format!("blob needs x,y,r: {v}"));
                }
                blobs.push((p[0], p[1], p[2]));
            }
            other => return Err(format!("unknown synthetic parameter {other}")),
        }
    }
    if size == 0 || size > 4096 {
        return Err(format!("synthetic size {size} out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut img = match kind {
        "plain" => {
            let g = (40.0 + 60.0 * unit()).round() as u8;
            RgbImage::from_pixel(size, size, Rgb([g, g, g]))
        }
        "flat" => {
            let levels: Vec<[u8; 3]> = (0..16)
                .map(|_| {
                    let base = 30.0 + 150.0 * unit();
                    [base as u8, (base * 0.9) as u8, (base * 0.8) as u8]
                })
                .collect();
            let block = (size / 4).max(1);
            RgbImage::from_fn(size, size, |x, y| {
                let bx = (x / block).min(3);
                let by = (y / block).min(3);
                Rgb(levels[(by * 4 + bx) as usize])
            })
        }
        "texture" => {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let theta = unit() * std::f64::consts::PI;
                    let freq = 2.0 + unit() * 10.0;
                    (theta, freq, unit() * std::f64::consts::TAU)
                })
                .collect();
            let tint = [0.9 + 0.1 * unit(), 0.8 + 0.2 * unit(), 0.7 + 0.3 * unit()];
            RgbImage::from_fn(size, size, |x, y| {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                let s: f64 = waves
                    .iter()
                    .map(|&(t, f, p)| (std::f64::consts::TAU * f * (u * t.cos() + v * t.sin()) + p).sin())
                    .sum::<f64>()
                    / 3.0;
                let l = 0.35 + 0.15 * s;
                Rgb(tint.map(|k| (255.0 * l * k).round().clamp(0.0, 255.0) as u8))
            })
        }
        other => return Err(format!("unknown synthetic kind {other}")),
    };
    for (bx, by, br) in blobs {
        let cx = bx * size as f64;
        let cy = by * size as f64;
        let r = br * size as f64;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    img.put_pixel(x, y, Rgb([250, 250, 250]));
                }
            }
        }
    }
    Ok(img)
}

pub fn shared(img: RgbImage) -> Arc<RgbImage> {
    Arc::new(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_two_blocks() {
        let mut g = Grid::new(6, 6, 0.0);
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1), (4, 4), (5, 4), (4, 5), (5, 5)] {
            g.set(x, y, 1.0);
        }
        let cs = connected_components(&g, 0.5);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].area, 4);
        assert_eq!(cs[1].area, 4);
        assert_eq!(cs[0].centroid, (0.5, 0.5));
        assert_eq!(cs[1].centroid, (4.5, 4.5));
    }

    #[test]
    fn components_diagonal_is_connected() {
        let g = Grid::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(connected_components(&g, 0.5).len(), 1);
    }

    #[test]
    fn components_full_and_empty() {
        let g = Grid::new(5, 3, 1.0);
        let cs = connected_components(&g, 0.5);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].area, 15);
        assert!(connected_components(&Grid::new(5, 3, 0.0), 0.5).is_empty());
        // threshold is strict
        assert!(connected_components(&Grid::new(2, 2, 0.5), 0.5).is_empty());
    }

    #[test]
    fn components_ordered_by_first_raster_cell() {
        // the component reaching row 0 at column 4 comes first even though
        // the other one has a smaller column
        let g = Grid::from_rows(&[
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0, 1.0],
        ]);
        let cs = connected_components(&g, 0.5);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].bounds.0, 4);
        assert_eq!(cs[1].bounds.0, 0);
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![0.1; 50];
        v.extend(vec![0.9; 50]);
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert!(otsu_threshold(&[0.3; 10]).is_none());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = render_synthetic("synth://texture/3?blob=0.5,0.5,0.1").unwrap();
        let b = render_synthetic("synth://texture/3?blob=0.5,0.5,0.1").unwrap();
        assert_eq!(a, b);
        let c = render_synthetic("synth://texture/4").unwrap();
        assert_ne!(a, c);
        assert_eq!(a.get_pixel(96, 96), &Rgb([250, 250, 250]));
        assert!(render_synthetic("synth://nope/1").is_err());
        assert!(render_synthetic("synth://plain/x").is_err());
    }

    #[test]
    fn norm_box_pixels() {
        assert_eq!(NormBox::FULL.to_pixels(100, 50), (0, 0, 100, 50));
        assert_eq!(NormBox([0.5, 0.5, 0.5001, 0.5001]).to_pixels(10, 10), (5, 5, 1, 1));
        assert!(NormBox([0.5, 0.0, 0.4, 1.0]).validate().is_err());
        assert!(NormBox([0.0, 0.0, 1.2, 1.0]).validate().is_err());
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let g = luminance(&render_synthetic("synth://texture/1?size=32").unwrap());
        let r = rotate_grid(&g, 0.0, 0.0);
        for (a, b) in g.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ncc(&g, &r) - 1.0).abs() < 1e-12);
    }
}
