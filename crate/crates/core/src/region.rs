//! Region sampling, crop-and-resize, RoI Align and mask pooling.
//!
//! Boxes are normalized to `[0, 1]` on both axes. A box maps onto an image
//! or feature grid of `h × w` cells by scaling to edge coordinates
//! (`x · w`), where cell `j` spans `[j, j + 1]` and its center sits at
//! `j + 0.5`; subtracting `0.5` gives the center-at-integer sampling frame
//! of [`crate::numerics::bilinear_weights`].

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{bilinear_weights, real, Grid, Real, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "region box ({x0}, {y0}, {x1}, {y1}) must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )));
        }
        Ok(RegionBox { x0, y0, x1, y1 })
    }

    pub const FULL: RegionBox = RegionBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionOrigin {
    Grid { rows: usize, cols: usize },
    Annotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub boxes: Vec<RegionBox>,
    pub origin: RegionOrigin,
}

impl RegionSet {
    /// `rows × cols` equal cells in row-major order, tiling the unit square.
    pub fn grid(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1);
        let mut boxes = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                boxes.push(RegionBox {
                    x0: j as f64 / cols as f64,
                    y0: i as f64 / rows as f64,
                    x1: (j + 1) as f64 / cols as f64,
                    y1: (i + 1) as f64 / rows as f64,
                });
            }
        }
        RegionSet {
            boxes,
            origin: RegionOrigin::Grid { rows, cols },
        }
    }

    pub fn annotated(boxes: Vec<RegionBox>) -> Self {
        RegionSet {
            boxes,
            origin: RegionOrigin::Annotation,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Grid partition with `rows` and `cols` drawn independently and uniformly
/// from `[lo, hi]`.
pub fn sample_grid(rng: &mut Rng, lo: usize, hi: usize) -> Result<RegionSet> {
    if lo < 1 || lo > hi {
        return Err(Error::InvalidArgument(format!("grid range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
    }
    let rows = rng.int_inclusive(lo, hi);
    let cols = rng.int_inclusive(lo, hi);
    Ok(RegionSet::grid(rows, cols))
}

/// Bilinear resample of `bx` to an `out × out` image.
pub fn crop_resize(image: &Image, bx: &RegionBox, out: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let sx = bx.width() * w as f64 / out as f64;
    let sy = bx.height() * h as f64 / out as f64;
    let mut data = Vec::with_capacity(out * out * 3);
    for v in 0..out {
        let y = bx.y0 * h as f64 + (v as f64 + 0.5) * sy - 0.5;
        for u in 0..out {
            let x = bx.x0 * w as f64 + (u as f64 + 0.5) * sx - 0.5;
            let mut px = [0.0f64; 3];
            for (cell, wgt) in bilinear_weights(h, w, x, y) {
                if wgt == 0.0 {
                    continue;
                }
                for (c, acc) in px.iter_mut().enumerate() {
                    *acc += wgt * image.data[cell * 3 + c] as f64;
                }
            }
            data.extend(px.iter().map(|&v| v as f32));
        }
    }
    Image::new(out, out, data)
}

/// Resize so the shorter side equals `short`, preserving aspect ratio.
pub fn resize_shorter_side(image: &Image, short: usize) -> Image {
    let s = image.height.min(image.width);
    if s == short {
        return image.clone();
    }
    let oh = ((image.height * short) as f64 / s as f64).round() as usize;
    let ow = ((image.width * short) as f64 / s as f64).round() as usize;
    resize(image, oh, ow)
}

/// Bilinear resize of the whole image to `out_h × out_w`.
pub fn resize(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for v in 0..out_h {
        let y = (v as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for u in 0..out_w {
            let x = (u as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let mut px = [0.0f64; 3];
            for (cell, wgt) in bilinear_weights(h, w, x, y) {
                for (c, acc) in px.iter_mut().enumerate() {
                    *acc += wgt * image.data[cell * 3 + c] as f64;
                }
            }
            data.extend(px.iter().map(|&v| v as f32));
        }
    }
    Image::new(out_h, out_w, data)
}

/// Per-cell weights such that RoI Align of any feature grid equals
/// `Σ_c weight[c] · feat[c]`. The weights sum to one.
pub fn roi_align_weights(h: usize, w: usize, bx: &RegionBox, bins: usize, samples: usize) -> Vec<f64> {
    assert!(bins >= 1 && samples >= 1, "bins and samples must be positive");
    let mut weights = vec![0.0; h * w];
    let n = bins * samples;
    let step_x = bx.width() * w as f64 / n as f64;
    let step_y = bx.height() * h as f64 / n as f64;
    let each = 1.0 / (n * n) as f64;
    // Bin b, sample s along an axis lands at index b·samples + s of n
    // equally spaced midpoints; averaging per bin then across bins is the
    // same as averaging all n² points.
    for iy in 0..n {
        let y = bx.y0 * h as f64 + (iy as f64 + 0.5) * step_y - 0.5;
        for ix in 0..n {
            let x = bx.x0 * w as f64 + (ix as f64 + 0.5) * step_x - 0.5;
            for (cell, wgt) in bilinear_weights(h, w, x, y) {
                weights[cell] += wgt * each;
            }
        }
    }
    weights
}

/// Pools `feat` over `bx` into one vector: `bins × bins` bins, each the mean
/// of `samples²` bilinear samples, averaged over bins.
pub fn roi_align<T: Real>(feat: &Grid<T>, bx: &RegionBox, bins: usize, samples: usize) -> Vec<T> {
    let weights = roi_align_weights(feat.h, feat.w, bx, bins, samples);
    pool_weighted(feat, &weights)
}

pub(crate) fn pool_weighted<T: Real>(feat: &Grid<T>, weights: &[f64]) -> Vec<T> {
    let mut out = vec![T::zero(); feat.dim()];
    for (cell, &wgt) in weights.iter().enumerate() {
        if wgt == 0.0 {
            continue;
        }
        let wt = real::<T>(wgt);
        for (o, v) in out.iter_mut().zip(feat.tokens.row(cell)) {
            *o += wt * *v;
        }
    }
    out
}

/// Mean of the feature vectors over the set cells of `mask` (row-major `h × w`).
pub fn mask_pool<T: Real>(feat: &Grid<T>, mask: &[bool]) -> Result<Vec<T>> {
    if mask.len() != feat.cells() {
        return Err(Error::shape("mask", feat.cells(), mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("mask_pool: mask has no set cells".into()));
    }
    let wgt = 1.0 / count as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { wgt } else { 0.0 }).collect();
    Ok(pool_weighted(feat, &weights))
}
