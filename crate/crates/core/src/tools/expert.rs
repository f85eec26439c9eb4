//! Per-query subspace expert.
//!
//! Patch tokens from the item's references are pooled, a principal subspace
//! is fitted to them, and every query token is scored by its squared
//! distance to that (affine) subspace. Nothing is cached between items.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::provider::{FeatureProvider, PatchTokens};
use crate::imaging::Grid;
use crate::manifest::DomainCode;

/// How the heatmap is reduced to a scalar score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExpertReduce {
    Max,
    TopKMean { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub rank_max: usize,
    pub reduce: ExpertReduce,
    pub bbox_top_patches: usize,
    pub bbox_pad: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            rank_max: 16,
            reduce: ExpertReduce::Max,
            bbox_top_patches: 5,
            bbox_pad: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip)]
    pub heatmap: Option<Grid>,
    /// `[x0, y0, x1, y1]` in query pixel coordinates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested_bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl ExpertVerdict {
    pub fn unavailable() -> Self {
        ExpertVerdict {
            available: false,
            score: None,
            heatmap: None,
            suggested_bbox: None,
            rank: None,
        }
    }
}

/// Affine subspace `mean + span(basis)`.
#[derive(Debug, Clone)]
pub struct Subspace {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
}

impl Subspace {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Squared distance from `x` to the subspace.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let y = DVector::from_column_slice(x) - &self.mean;
        let coeff = self.basis.tr_mul(&y);
        let r = &y - &self.basis * coeff;
        r.norm_squared()
    }
}

/// Fits the principal subspace of `tokens` with dimension
/// `min(rank_max, numerical rank)`. Tokens are centred first.
pub fn fit_subspace(tokens: &[&[f64]], rank_max: usize) -> Subspace {
    let n = tokens.len();
    let dim = tokens.first().map_or(0, |t| t.len());
    let mut mean = DVector::zeros(dim);
    for t in tokens {
        mean += DVector::from_column_slice(t);
    }
    if n > 0 {
        mean /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for t in tokens {
        let y = DVector::from_column_slice(t) - &mean;
        cov.ger(1.0, &y, &y, 1.0);
    }
    if n > 0 {
        cov /= n as f64;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let tol = top.max(0.0) * 1e-10;
    let numerical_rank = order
        .iter()
        .take_while(|&&i| top > 0.0 && eig.eigenvalues[i] > tol)
        .count();
    let r = numerical_rank.min(rank_max);
    let mut basis = DMatrix::zeros(dim, r);
    for (j, &i) in order.iter().take(r).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    Subspace { mean, basis }
}

/// Residual heatmap of `query` against the pooled reference tokens.
pub fn residual_map(query: &PatchTokens, refs: &[PatchTokens], rank_max: usize) -> (Grid, usize) {
    let pooled: Vec<&[f64]> = refs
        .iter()
        .flat_map(|r| (0..r.len()).map(move |i| r.token(i)))
        .collect();
    let sub = fit_subspace(&pooled, rank_max);
    let data = (0..query.len()).map(|i| sub.residual(query.token(i))).collect();
    (
        Grid {
            width: query.cols,
            height: query.rows,
            data,
        },
        sub.rank(),
    )
}

pub fn reduce(heatmap: &Grid, how: ExpertReduce) -> f64 {
    match how {
        ExpertReduce::Max => heatmap.max().max(0.0),
        ExpertReduce::TopKMean { k } => {
            let mut v = heatmap.data.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = k.clamp(1, v.len().max(1));
            v.iter().take(k).sum::<f64>() / k as f64
        }
    }
}

/// Padded box around the `top` highest cells, in pixel coordinates of an
/// image of size `(w, h)` covered by the heatmap grid.
pub fn hotspot_bbox(heatmap: &Grid, top: usize, pad: f64, w: u32, h: u32) -> [f64; 4] {
    let mut idx: Vec<usize> = (0..heatmap.data.len()).collect();
    idx.sort_by(|&a, &b| heatmap.data[b].total_cmp(&heatmap.data[a]).then(a.cmp(&b)));
    let cw = w as f64 / heatmap.width as f64;
    let ch = h as f64 / heatmap.height as f64;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, 0.0f64, 0.0f64);
    for &i in idx.iter().take(top.max(1)) {
        let cx = (i % heatmap.width) as f64;
        let cy = (i / heatmap.width) as f64;
        x0 = x0.min(cx * cw);
        y0 = y0.min(cy * ch);
        x1 = x1.max((cx + 1.0) * cw);
        y1 = y1.max((cy + 1.0) * ch);
    }
    let px = pad * (x1 - x0);
    let py = pad * (y1 - y0);
    [
        (x0 - px).max(0.0),
        (y0 - py).max(0.0),
        (x1 + px).min(w as f64),
        (y1 + py).min(h as f64),
    ]
}

/// Runs the expert on one item. Only the item's own query and references
/// are read.
pub fn expert_score(
    domain: DomainCode,
    query: &RgbImage,
    refs: &[&RgbImage],
    provider: &dyn FeatureProvider,
    cfg: &ExpertConfig,
) -> ExpertVerdict {
    if !domain.expert_available() || refs.is_empty() {
        return ExpertVerdict::unavailable();
    }
    let q = provider.patch_tokens(query);
    let r: Vec<PatchTokens> = refs.iter().map(|im| provider.patch_tokens(im)).collect();
    let (heatmap, rank) = residual_map(&q, &r, cfg.rank_max);
    let score = reduce(&heatmap, cfg.reduce);
    let bbox = hotspot_bbox(
        &heatmap,
        cfg.bbox_top_patches,
        cfg.bbox_pad,
        query.width(),
        query.height(),
    );
    ExpertVerdict {
        available: true,
        score: Some(score),
        heatmap: Some(heatmap),
        suggested_bbox: Some(bbox),
        rank: Some(rank),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_projection() {
        let refs: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, -2.0, 0.0],
        ];
        let views: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let s = fit_subspace(&views, 16);
        assert_eq!(s.rank(), 2);
        assert!((s.residual(&[0.0, 0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((s.residual(&[3.0, -1.0, 2.0]) - 4.0).abs() < 1e-12);
        assert!(s.residual(&[0.7, 0.3, 0.0]) < 1e-20);
    }

    #[test]
    fn rank_is_capped() {
        let refs: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64).collect())
            .collect();
        let views: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        assert_eq!(fit_subspace(&views, 2).rank(), 2);
        assert!(fit_subspace(&views, 16).rank() <= 6);
    }

    #[test]
    fn identical_tokens_give_rank_zero() {
        let refs = [vec![1.0, 2.0], vec![1.0, 2.0]];
        let views: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let s = fit_subspace(&views, 16);
        assert_eq!(s.rank(), 0);
        assert!((s.residual(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bbox_pads_and_clamps() {
        let mut g = Grid::new(4, 4, 0.0);
        g.set(1, 1, 1.0);
        let b = hotspot_bbox(&g, 1, 0.15, 40, 40);
        // cell (1,1) spans [10,20]; 15% padding
        assert_eq!(b, [8.5, 8.5, 21.5, 21.5]);
        let mut g = Grid::new(2, 2, 0.0);
        g.set(0, 0, 1.0);
        let b = hotspot_bbox(&g, 1, 0.15, 10, 10);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn reducers() {
        let g = Grid::from_rows(&[vec![0.1, 0.4], vec![0.3, 0.2]]);
        assert_eq!(reduce(&g, ExpertReduce::Max), 0.4);
        assert!((reduce(&g, ExpertReduce::TopKMean { k: 2 }) - 0.35).abs() < 1e-15);
    }
}
