//! Training-free segmentation and region classification from dense features,
//! with mIoU and mAcc metrics.

use std::collections::HashSet;

use crate::decoupled::{dense_for_inference, ContextType};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};
use crate::numerics::{bilinear_sample, cosine, real, Grid, Mat, Real};
use crate::region::{crop_resize, mask_pool, roi_align, RegionBox};

/// Label value excluded from every metric count.
pub const IGNORE_INDEX: u8 = 255;

/// Class names with unit-norm embeddings, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    names: Vec<String>,
    embeds: Mat<f32>,
}

impl ClassBank {
    /// Normalizes each embedding; rejects duplicate names and zero vectors.
    pub fn new(names: Vec<String>, embeds: Mat<f32>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("class bank is empty".into()));
        }
        if names.len() != embeds.rows {
            return Err(Error::shape("class bank embeddings", names.len(), embeds.rows));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        let mut embeds = embeds;
        for (r, name) in names.iter().enumerate() {
            let row = embeds.row_mut(r);
            let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::InvalidArgument(format!("class `{name}` has a zero or non-finite embedding")));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        Ok(ClassBank { names, embeds })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeds.cols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embedding(&self, class: usize) -> &[f32] {
        self.embeds.row(class)
    }

    /// Index of the class with the highest cosine to `v`; ties go to the
    /// lower index.
    pub fn classify<T: Real>(&self, v: &[T]) -> usize {
        argmax(&self.scores(v))
    }

    pub fn scores<T: Real>(&self, v: &[T]) -> Vec<T> {
        (0..self.len())
            .map(|c| {
                let e: Vec<T> = self.embedding(c).iter().map(|&x| real(x as f64)).collect();
                cosine(v, &e)
            })
            .collect()
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_bank_dim<T: Real>(dense: &Grid<T>, bank: &ClassBank) -> Result<()> {
    if dense.dim() != bank.dim() {
        return Err(Error::shape("dense feature width vs class bank", bank.dim(), dense.dim()));
    }
    Ok(())
}

/// Per-cell class indices and the `H × W × K` cosine score grid.
pub fn classify_pixels<T: Real>(dense: &Grid<T>, bank: &ClassBank) -> Result<(Vec<usize>, Grid<T>)> {
    check_bank_dim(dense, bank)?;
    let k = bank.len();
    let mut scores = Grid::zeros(dense.h, dense.w, k);
    let mut labels = Vec::with_capacity(dense.cells());
    for cell in 0..dense.cells() {
        let s = bank.scores(dense.tokens.row(cell));
        labels.push(argmax(&s));
        scores.tokens.row_mut(cell).copy_from_slice(&s);
    }
    Ok((labels, scores))
}

/// Per-pixel class indices at image resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegPrediction {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

/// Bilinearly upsamples the score grid to `out_h × out_w`, then takes the
/// per-pixel argmax.
pub fn upsample_labels<T: Real>(scores: &Grid<T>, out_h: usize, out_w: usize) -> Result<SegPrediction> {
    if out_h < scores.h || out_w < scores.w {
        return Err(Error::InvalidArgument(format!(
            "upsample target {out_h}x{out_w} is smaller than the score grid {}x{}",
            scores.h, scores.w
        )));
    }
    let sy = scores.h as f64 / out_h as f64;
    let sx = scores.w as f64 / out_w as f64;
    let mut labels = Vec::with_capacity(out_h * out_w);
    for v in 0..out_h {
        let y = real::<T>((v as f64 + 0.5) * sy - 0.5);
        for u in 0..out_w {
            let x = real::<T>((u as f64 + 0.5) * sx - 0.5);
            labels.push(argmax(&bilinear_sample(scores, x, y)));
        }
    }
    Ok(SegPrediction {
        height: out_h,
        width: out_w,
        labels,
    })
}

/// Window positions along one axis: `0, stride, 2·stride, …`, with the last
/// window clamped to end at the image border.
fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let last = len - window;
    while *starts.last().expect("nonempty") < last {
        let next = (starts.last().expect("nonempty") + stride).min(last);
        starts.push(next);
    }
    starts
}

/// Dense features for an image of any size at least `window`, stitched
/// from overlapping windows. Each window is resized to the model input size;
/// overlapping cells are averaged.
pub fn sliding_window_dense<T: Real>(
    image: &Image,
    model: &Encoder<T>,
    ctype: ContextType,
    window: usize,
    stride: usize,
) -> Result<Grid<T>> {
    let g = model.cfg.grid();
    let (h, w) = (image.height, image.width);
    if window == 0 || stride == 0 || window > h || window > w || stride > window {
        return Err(Error::InvalidArgument(format!(
            "sliding window needs 0 < stride <= window <= image size, got window {window}, stride {stride}, image {h}x{w}"
        )));
    }
    if window % g != 0 {
        return Err(Error::InvalidArgument(format!("window {window} must be a multiple of the token grid {g}")));
    }
    let cell = window / g;
    if stride % cell != 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} and image size {h}x{w} must be multiples of the feature cell size {cell}"
        )));
    }
    let (gh, gw) = (h / cell, w / cell);
    let mut acc: Option<Grid<T>> = None;
    let mut counts = vec![0u32; gh * gw];
    for &y0 in &window_starts(h, window, stride) {
        for &x0 in &window_starts(w, window, stride) {
            let bx = RegionBox::new(
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x0 + window) as f64 / w as f64,
                (y0 + window) as f64 / h as f64,
            )?;
            let crop = crop_resize(image, &bx, model.cfg.image_size);
            let dense = dense_for_inference(&crop, &model.params, &model.cfg, ctype)?;
            let out = acc.get_or_insert_with(|| Grid::zeros(gh, gw, dense.dim()));
            let (cy, cx) = (y0 / cell, x0 / cell);
            for i in 0..g {
                for j in 0..g {
                    let dst = (cy + i) * gw + cx + j;
                    counts[dst] += 1;
                    // Running mean: equal contributions average to themselves exactly.
                    let inv = T::one() / real::<T>(counts[dst] as f64);
                    for (o, v) in out.tokens.row_mut(dst).iter_mut().zip(dense.at(i, j)) {
                        *o += (*v - *o) * inv;
                    }
                }
            }
        }
    }
    Ok(acc.expect("at least one window"))
}

/// A region to classify: a normalized box, or a cell mask on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionShape {
    Box(RegionBox),
    Mask(Vec<bool>),
}

/// Pools each region (RoI Align for boxes, mask pooling for masks) and
/// returns the best-matching class per region.
pub fn region_classify<T: Real>(
    dense: &Grid<T>,
    regions: &[RegionShape],
    bank: &ClassBank,
    bins: usize,
    samples: usize,
) -> Result<Vec<usize>> {
    check_bank_dim(dense, bank)?;
    regions
        .iter()
        .map(|r| {
            let pooled = match r {
                RegionShape::Box(b) => roi_align(dense, b, bins, samples),
                RegionShape::Mask(m) => mask_pool(dense, m)?,
            };
            Ok(bank.classify(&pooled))
        })
        .collect()
}

/// Reduces a pixel mask to the feature grid: a cell is set when at least
/// half its pixels are set. A nonempty mask smaller than every cell maps to
/// its best-covered cell.
pub fn mask_to_grid(mask: &GrayImage, h: usize, w: usize) -> Result<Vec<bool>> {
    if mask.height % h != 0 || mask.width % w != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} is not divisible into a {h}x{w} grid",
            mask.height, mask.width
        )));
    }
    let (ch, cw) = (mask.height / h, mask.width / w);
    let mut cover = vec![0usize; h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) != 0 {
                cover[(y / ch) * w + x / cw] += 1;
            }
        }
    }
    let area = ch * cw;
    let mut cells: Vec<bool> = cover.iter().map(|&c| 2 * c >= area && c > 0).collect();
    if !cells.iter().any(|&c| c) {
        let best = argmax(&cover.iter().map(|&c| c as f64).collect::<Vec<_>>());
        if cover[best] == 0 {
            return Err(Error::InvalidArgument("mask has no set pixels".into()));
        }
        cells[best] = true;
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Integer confusion counts for mIoU, mergeable across images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &SegPrediction, gt: &GrayImage) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "prediction vs ground truth",
                format!("{}x{}", gt.height, gt.width),
                format!("{}x{}", pred.height, pred.width),
            ));
        }
        let k = self.intersection.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.data) {
            if g == IGNORE_INDEX {
                continue;
            }
            let g = g as usize;
            if g >= k || p >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {k} classes",
                    if g >= k { g } else { p }
                )));
            }
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    /// Adds another accumulator's counts; merging is associative and
    /// commutative, so per-image accumulators may be combined in any order.
    pub fn merge(&mut self, other: &IouCounts) -> Result<()> {
        if other.union.len() != self.union.len() {
            return Err(Error::shape("IoU counts", self.union.len(), other.union.len()));
        }
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IouReport { per_class, mean }
    }
}

/// Per-class IoU and their mean over `classes` classes.
pub fn miou(pred: &SegPrediction, gt: &GrayImage, classes: usize) -> Result<IouReport> {
    let mut c = IouCounts::new(classes);
    c.add(pred, gt)?;
    Ok(c.report())
}

/// Mean over ground-truth classes of per-class top-1 accuracy.
pub fn macc(preds: &[usize], gts: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "macc needs equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            gts.len()
        )));
    }
    let k = gts.iter().max().copied().unwrap_or(0) + 1;
    let mut total = vec![0u64; k];
    let mut hit = vec![0u64; k];
    for (&p, &g) in preds.iter().zip(gts) {
        total[g] += 1;
        hit[g] += (p == g) as u64;
    }
    let accs: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Classifies a full image: sliding-window dense features, cosine scores,
/// upsampling to image resolution.
pub fn segment<T: Real>(
    image: &Image,
    model: &Encoder<T>,
    ctype: ContextType,
    bank: &ClassBank,
    window: usize,
    stride: usize,
) -> Result<SegPrediction> {
    let dense = sliding_window_dense(image, model, ctype, window, stride)?;
    let (_, scores) = classify_pixels(&dense, bank)?;
    upsample_labels(&scores, image.height, image.width)
}
