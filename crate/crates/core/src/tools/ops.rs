//! Pixel-level tools. All functions are pure in their inputs.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rustfft::{num_complex::Complex, FftPlanner};
use serde_json::{json, Value};

use crate::backend::Attachment;
use crate::imaging::{
    connected_components, crop, hconcat, luminance, median, ncc, otsu_threshold, resize,
    resize_long_edge, rotate_grid, rotate_image, Component, Grid, NormBox,
};

/// What a tool hands back before it is wrapped into a `ToolResult`.
#[derive(Debug, Clone)]
pub struct Output {
    pub observation: String,
    pub attachments: Vec<Attachment>,
    pub payload: Value,
}

fn att(caption: &str, img: RgbImage) -> Attachment {
    Attachment::new(caption, Arc::new(img))
}

fn fmt_box(b: NormBox) -> String {
    let [x0, y0, x1, y1] = b.0;
    format!("[{x0:.3}, {y0:.3}, {x1:.3}, {y1:.3}]")
}

/// Mean absolute luminance difference after resizing `b` onto `a`.
pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    let la = luminance(a);
    let lb = luminance(&resize(b, a.width(), a.height()));
    la.data
        .iter()
        .zip(&lb.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / la.data.len().max(1) as f64
}

pub fn side_by_side(query: &RgbImage, refs: &[&RgbImage], bbox: NormBox, max_refs: usize) -> Output {
    let q = crop(query, bbox);
    let crops: Vec<RgbImage> = refs.iter().take(max_refs.max(1)).map(|r| crop(r, bbox)).collect();
    let diffs: Vec<f64> = crops.iter().map(|c| mean_abs_diff(&q, c)).collect();
    let mut panels: Vec<&RgbImage> = vec![&q];
    panels.extend(crops.iter());
    let composite = hconcat(&panels, 256, 4);
    let listing = diffs
        .iter()
        .enumerate()
        .map(|(i, d)| format!("ref {i}: {d:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Output {
        observation: format!(
            "Composite of the query region {} (left) next to the same region in {} reference(s). Mean absolute luminance difference per reference: {listing}.",
            fmt_box(bbox),
            crops.len()
        ),
        attachments: vec![att("side_by_side", composite)],
        payload: json!({"bbox": bbox.0, "references": (0..crops.len()).collect::<Vec<_>>(), "mean_abs_diff": diffs}),
    }
}

pub fn zoom_bbox(query: &RgbImage, bbox: NormBox, edge: u32) -> Output {
    let (x, y, w, h) = bbox.to_pixels(query.width(), query.height());
    let zoomed = resize_long_edge(&crop(query, bbox), edge);
    let (zw, zh) = zoomed.dimensions();
    Output {
        observation: format!(
            "Zoomed crop of the query at {} (pixels x={x}, y={y}, w={w}, h={h}), resampled to {zw}x{zh}.",
            fmt_box(bbox)
        ),
        attachments: vec![att("zoom", zoomed)],
        payload: json!({"bbox": bbox.0, "pixels": [x, y, w, h], "width": zw, "height": zh}),
    }
}

/// Signed luminance difference `query - reference`, reference resized to
/// the query's size.
pub fn diff_grid(query: &RgbImage, reference: &RgbImage) -> Grid {
    let lq = luminance(query);
    let lr = luminance(&resize(reference, query.width(), query.height()));
    Grid {
        width: lq.width,
        height: lq.height,
        data: lq.data.iter().zip(&lr.data).map(|(a, b)| a - b).collect(),
    }
}

pub fn image_diff(query: &RgbImage, reference: &RgbImage, ref_index: usize) -> Output {
    let d = diff_grid(query, reference);
    let n = d.data.len().max(1) as f64;
    let mean_abs = d.data.iter().map(|v| v.abs()).sum::<f64>() / n;
    let (peak, max_abs) = d
        .data
        .iter()
        .enumerate()
        .fold((0usize, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    let changed = d.data.iter().filter(|v| v.abs() > 0.1).count() as f64 / n;
    let shown = Grid {
        width: d.width,
        height: d.height,
        data: d.data.iter().map(|v| 0.5 + 0.5 * v).collect(),
    };
    let (px, py) = (peak % d.width.max(1), peak / d.width.max(1));
    Output {
        observation: format!(
            "Signed luminance difference query minus reference {ref_index} (gray = equal, bright = query brighter). Mean |diff| {mean_abs:.4}, max |diff| {max_abs:.4} at pixel ({px}, {py}), {:.2}% of pixels differ by more than 0.1.",
            changed * 100.0
        ),
        attachments: vec![att("diff", shown.to_image(0.0, 1.0))],
        payload: json!({"ref_index": ref_index, "mean_abs": mean_abs, "max_abs": max_abs, "peak": [px, py], "changed_fraction": changed}),
    }
}

const ALIGN_SIDE: u32 = 64;

/// Best rotation of the query onto the reference over a 1 degree grid.
/// Angles are tried in the order 0, 1, -1, 2, -2, ... so ties go to the
/// smallest rotation.
pub fn best_rotation(query: &RgbImage, reference: &RgbImage) -> (f64, f64, f64) {
    let q = luminance(&resize(query, ALIGN_SIDE, ALIGN_SIDE));
    let r = luminance(&resize(reference, ALIGN_SIDE, ALIGN_SIDE));
    let fill = q.mean();
    let base = ncc(&q, &r);
    let (mut best_deg, mut best) = (0.0, base);
    for step in 1..=180 {
        for sign in [1.0, -1.0] {
            let deg = sign * step as f64;
            if deg == -180.0 {
                continue;
            }
            let v = ncc(&rotate_grid(&q, deg, fill), &r);
            if v > best {
                best = v;
                best_deg = deg;
            }
        }
    }
    (best_deg, best, base)
}

pub fn rotate_align(query: &RgbImage, reference: &RgbImage, ref_index: usize) -> Output {
    let (deg, score, base) = best_rotation(query, reference);
    let aligned = rotate_image(query, deg);
    Output {
        observation: format!(
            "Rigid alignment of the query to reference {ref_index}: best rotation {deg:.0} degrees, correlation {score:.4} (unrotated {base:.4}). Aligned query attached."
        ),
        attachments: vec![att("aligned_query", aligned)],
        payload: json!({"ref_index": ref_index, "angle_deg": deg, "ncc": score, "ncc_unrotated": base}),
    }
}

/// Foreground mask from background-subtracted luminance.
///
/// Background is the median luminance; the contrast map `|l - median|` is
/// split with Otsu's threshold. Images without real contrast (max contrast
/// below `min_contrast`) have an empty mask.
pub fn foreground_mask(img: &RgbImage, min_contrast: f64) -> (Grid, Option<f64>) {
    let l = luminance(img);
    let bg = median(&l.data);
    let contrast = Grid {
        width: l.width,
        height: l.height,
        data: l.data.iter().map(|v| (v - bg).abs()).collect(),
    };
    if contrast.max() < min_contrast {
        return (Grid::new(l.width, l.height, 0.0), None);
    }
    match otsu_threshold(&contrast.data) {
        Some(t) => {
            let data = contrast.data.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
            (
                Grid {
                    width: l.width,
                    height: l.height,
                    data,
                },
                Some(t),
            )
        }
        None => (Grid::new(l.width, l.height, 0.0), None),
    }
}

pub fn segment(img: &RgbImage, min_area: usize) -> (Grid, Vec<Component>, Option<f64>) {
    let (mask, t) = foreground_mask(img, 0.05);
    let comps = connected_components(&mask, 0.5)
        .into_iter()
        .filter(|c| c.area >= min_area)
        .collect();
    (mask, comps, t)
}

pub fn segment_and_count(query: &RgbImage, reference: Option<(&RgbImage, usize)>, min_area: usize) -> Output {
    let (mask, comps, t) = segment(query, min_area);
    let mut observation = format!("Foreground segmentation of the query: {} component(s)", comps.len());
    let areas: Vec<usize> = comps.iter().map(|c| c.area).collect();
    if !areas.is_empty() {
        observation.push_str(&format!(" with areas {areas:?}"));
    }
    observation.push('.');
    let mut payload = json!({
        "count": comps.len(),
        "components": comps.iter().take(16).map(|c| json!({"area": c.area, "centroid": [c.centroid.0, c.centroid.1]})).collect::<Vec<_>>(),
        "threshold": t,
    });
    if let Some((r, i)) = reference {
        let (_, rc, _) = segment(r, min_area);
        observation.push_str(&format!(" Same procedure on reference {i}: {} component(s).", rc.len()));
        payload["reference_index"] = json!(i);
        payload["reference_count"] = json!(rc.len());
    }
    Output {
        observation,
        attachments: vec![att("foreground_mask", mask.to_image(0.0, 1.0))],
        payload,
    }
}

const FFT_SIDE: usize = 128;
pub const FFT_BANDS: usize = 8;

/// Centred magnitude spectrum of the mean-removed luminance.
pub fn magnitude_spectrum(img: &RgbImage) -> Grid {
    let n = FFT_SIDE;
    let l = luminance(&resize(img, n as u32, n as u32));
    let m = l.mean();
    let mut buf: Vec<Complex<f64>> = l.data.iter().map(|&v| Complex::new(v - m, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    let mut out = Grid::new(n, n, 0.0);
    for y in 0..n {
        for x in 0..n {
            // shift zero frequency to the centre
            let sx = (x + n / 2) % n;
            let sy = (y + n / 2) % n;
            out.set(sx, sy, buf[y * n + x].norm());
        }
    }
    out
}

/// Band edges in cycles per image: log-spaced from 1 to the corner radius.
pub fn band_edges() -> [f64; FFT_BANDS + 1] {
    let rmax = (FFT_SIDE as f64 / 2.0) * std::f64::consts::SQRT_2;
    let mut e = [0.0; FFT_BANDS + 1];
    for (i, v) in e.iter_mut().enumerate() {
        *v = (rmax.ln() * i as f64 / FFT_BANDS as f64).exp();
    }
    e
}

/// Spectral energy per radial band; the DC term is excluded.
pub fn band_energies(spec: &Grid) -> [f64; FFT_BANDS] {
    let edges = band_edges();
    let c = (spec.width / 2) as f64;
    let mut out = [0.0; FFT_BANDS];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if r < edges[0] {
                continue;
            }
            let b = edges
                .windows(2)
                .position(|w| r >= w[0] && r < w[1])
                .unwrap_or(FFT_BANDS - 1);
            out[b] += spec.get(x, y).powi(2);
        }
    }
    out
}

pub fn texture_fft(query: &RgbImage, reference: &RgbImage, ref_index: usize) -> Output {
    let sq = magnitude_spectrum(query);
    let sr = magnitude_spectrum(reference);
    let eq = band_energies(&sq);
    let er = band_energies(&sr);
    let ratio: Vec<Option<f64>> = eq
        .iter()
        .zip(&er)
        .map(|(a, b)| if *b > 0.0 { Some(a / b) } else if *a == 0.0 { Some(1.0) } else { None })
        .collect();
    let diff = Grid {
        width: sq.width,
        height: sq.height,
        data: sq.data.iter().zip(&sr.data).map(|(a, b)| a.ln_1p() - b.ln_1p()).collect(),
    };
    let span = diff.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let listing = ratio
        .iter()
        .map(|r| r.map_or("inf".to_string(), |v| format!("{v:.3}")))
        .collect::<Vec<_>>()
        .join(", ");
    Output {
        observation: format!(
            "Spectrum comparison against reference {ref_index}. Band energy ratios query/reference from low to high frequency ({FFT_BANDS} log-spaced bands): {listing}."
        ),
        attachments: vec![att("spectrum_diff", diff.to_image(-span, span))],
        payload: json!({
            "ref_index": ref_index,
            "band_edges": band_edges().to_vec(),
            "query_energy": eq.to_vec(),
            "reference_energy": er.to_vec(),
            "ratio": ratio,
        }),
    }
}

fn draw_grid(img: &RgbImage, k: usize) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = out.dimensions();
    for i in 1..k {
        let x = (w as usize * i / k) as u32;
        let y = (h as usize * i / k) as u32;
        for yy in 0..h {
            out.put_pixel(x.min(w - 1), yy, Rgb([255, 0, 0]));
        }
        for xx in 0..w {
            out.put_pixel(xx, y.min(h - 1), Rgb([255, 0, 0]));
        }
    }
    out
}

/// Per-cell mean absolute luminance difference on a `k × k` tiling.
pub fn cell_diffs(query: &RgbImage, reference: &RgbImage, k: usize) -> Vec<Vec<f64>> {
    let d = diff_grid(query, reference);
    let mut out = vec![vec![0.0; k]; k];
    for (cy, row) in out.iter_mut().enumerate() {
        for (cx, cell) in row.iter_mut().enumerate() {
            let (x0, x1) = (d.width * cx / k, d.width * (cx + 1) / k);
            let (y0, y1) = (d.height * cy / k, d.height * (cy + 1) / k);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += d.get(x, y).abs();
                }
            }
            *cell = s / ((x1 - x0) * (y1 - y0)).max(1) as f64;
        }
    }
    out
}

pub fn patch_grid(query: &RgbImage, reference: &RgbImage, ref_index: usize, k: usize) -> Output {
    let k = k.max(1);
    let cells = cell_diffs(query, reference, k);
    let (mut br, mut bc, mut bv) = (0, 0, f64::NEG_INFINITY);
    for (r, row) in cells.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > bv {
                (br, bc, bv) = (r, c, v);
            }
        }
    }
    let rq = resize(reference, query.width(), query.height());
    let composite = hconcat(&[&draw_grid(query, k), &draw_grid(&rq, k)], 256, 4);
    Output {
        observation: format!(
            "{k}x{k} tiled comparison of the query (left) and reference {ref_index} (right). Largest mean |diff| {bv:.4} in cell row {br}, column {bc} (0-based)."
        ),
        attachments: vec![att("patch_grid", composite)],
        payload: json!({"k": k, "ref_index": ref_index, "cell_diff": cells, "max_cell": [br, bc]}),
    }
}
