//! Attention and feature-correlation diagnostics, the proxy-token score, and
//! heatmap rendering.

use crate::encoder::EncodeOutput;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::numerics::{bilinear_sample, cosine, real, Grid, Mat, Real};

/// Share of patch tokens treated as proxy candidates by [`proxy_score`].
pub const DEFAULT_PROXY_FRAC: f64 = 0.02;

fn layer_map<T: Real>(out: &EncodeOutput<T>, layer: usize) -> Result<&Mat<T>> {
    out.attn_maps.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} out of range for depth {}", out.attn_maps.len()))
    })
}

fn anchor_index<T>(grid: &Grid<T>, anchor: (usize, usize)) -> Result<usize> {
    let (r, c) = anchor;
    if r >= grid.h || c >= grid.w {
        return Err(Error::InvalidArgument(format!(
            "anchor ({r}, {c}) outside the {}x{} token grid",
            grid.h, grid.w
        )));
    }
    Ok(r * grid.w + c)
}

/// Row 0 of the layer's head-averaged attention, patch columns only.
pub fn cls_attention<T: Real>(out: &EncodeOutput<T>, layer: usize) -> Result<Vec<T>> {
    let m = layer_map(out, layer)?;
    Ok(m.row(0)[1..].to_vec())
}

/// Attention row of the patch token at `anchor = (row, col)`, patch columns only.
pub fn anchor_attention<T: Real>(out: &EncodeOutput<T>, layer: usize, anchor: (usize, usize)) -> Result<Vec<T>> {
    let m = layer_map(out, layer)?;
    let i = anchor_index(&out.dense, anchor)?;
    Ok(m.row(1 + i)[1..].to_vec())
}

/// Patch-token outputs of block `layer`, before any projection.
pub fn layer_grid<T: Real>(out: &EncodeOutput<T>, layer: usize) -> Result<Grid<T>> {
    let z = out.layer_tokens.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} out of range for depth {}", out.layer_tokens.len()))
    })?;
    Ok(Grid::new(out.dense.h, out.dense.w, z.slice_rows(1, z.rows)))
}

/// Cosine of the anchor token against every token of `grid`.
pub fn feature_correlation<T: Real>(grid: &Grid<T>, anchor: (usize, usize)) -> Result<Vec<T>> {
    let a = grid.tokens.row(anchor_index(grid, anchor)?);
    Ok((0..grid.cells()).map(|j| cosine(a, grid.tokens.row(j))).collect())
}

/// Number of proxy candidates for `hw` patch tokens.
pub fn proxy_count(hw: usize, frac: f64) -> usize {
    ((frac * hw as f64).round() as usize).clamp(1, hw)
}

/// Mean over patch rows of the attention mass on the `proxy_count` patch
/// columns that receive the most [CLS] attention (ties to the lower index).
pub fn proxy_score_map<T: Real>(attn: &Mat<T>, frac: f64) -> f64 {
    let hw = attn.rows - 1;
    let p = proxy_count(hw, frac);
    let cls = &attn.row(0)[1..];
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| cls[b].partial_cmp(&cls[a]).unwrap_or(std::cmp::Ordering::Equal));
    let top = &order[..p];
    let total: f64 = (1..=hw)
        .map(|r| top.iter().map(|&c| attn.at(r, c + 1).to_f64().unwrap_or(f64::NAN)).sum::<f64>())
        .sum();
    total / hw as f64
}

pub fn proxy_score<T: Real>(out: &EncodeOutput<T>, layer: usize, frac: f64) -> Result<f64> {
    Ok(proxy_score_map(layer_map(out, layer)?, frac))
}

/// Bilinear upsample of an `h × w` map to `out_px × out_px`, min-max scaled
/// to 0..=255. A constant map renders as uniform 128.
pub fn render_heatmap<T: Real>(v: &[T], h: usize, w: usize, out_px: usize) -> Result<GrayImage> {
    if v.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("heatmap values", format!("{h}x{w}"), v.len()));
    }
    let grid = Grid::new(h, w, Mat::from_vec(h * w, 1, v.to_vec()));
    let (sy, sx) = (h as f64 / out_px as f64, w as f64 / out_px as f64);
    let mut up = Vec::with_capacity(out_px * out_px);
    for y in 0..out_px {
        let fy = real::<T>((y as f64 + 0.5) * sy - 0.5);
        for x in 0..out_px {
            let fx = real::<T>((x as f64 + 0.5) * sx - 0.5);
            up.push(bilinear_sample(&grid, fx, fy)[0].to_f64().unwrap_or(f64::NAN));
        }
    }
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::non_finite("heatmap values"));
    }
    let data = if hi == lo {
        vec![128; up.len()]
    } else {
        up.iter().map(|&u| ((u - lo) / (hi - lo) * 255.0).round() as u8).collect()
    };
    Ok(GrayImage::new(out_px, out_px, data))
}
