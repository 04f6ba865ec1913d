//! Content and context distillation objectives, their gradients, and the
//! training loop.
//!
//! * Content: pooled student region features are aligned to the frozen
//!   teacher's [CLS] output on the matching image crops with `1 - cos`.
//! * Context: the student's context features are trained so that their
//!   pairwise token cosine similarities match those of a foundation-model
//!   encoder on the same image.
//! * Total: `content + λ · context`.

mod grad;
mod gradcheck;
mod train;

use std::fmt;
use std::str::FromStr;

pub use grad::{loss_and_gradients, trainable_mask, StudentFeatures};
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};
pub use train::{format_report, mean_losses, AdamW, TrainLog, Trainer};

use crate::decoupled::ContextType;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{cosine, dot, norm, real, Grid, Mat, Real};
use crate::region::{crop_resize, resize, roi_align_weights, RegionSet};

/// How the student's features are split between the two objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistillMode {
    /// Content loss on `X_content`, context loss on `X_context`.
    #[default]
    Decoupled,
    /// Both losses on the ordinary dense output of the final block.
    Coupled,
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::Decoupled => "decoupled",
            DistillMode::Coupled => "coupled",
        })
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(DistillMode::Decoupled),
            "coupled" => Ok(DistillMode::Coupled),
            other => Err(Error::InvalidArgument(format!("mode must be decoupled or coupled, got `{other}`"))),
        }
    }
}

/// Normalization of the correlation discrepancy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContextNorm {
    /// `(1/N) Σ_i ‖R_i^vfm − R_i^student‖₂` over anchor rows `i`.
    #[default]
    Rows,
    /// `(1/N²) Σ_ij |R_ij^vfm − R_ij^student|`, the mean absolute discrepancy.
    Pairs,
}

impl fmt::Display for ContextNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextNorm::Rows => "rows",
            ContextNorm::Pairs => "pairs",
        })
    }
}

impl FromStr for ContextNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(ContextNorm::Rows),
            "pairs" => Ok(ContextNorm::Pairs),
            other => Err(Error::InvalidArgument(format!("context_norm must be rows or pairs, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub context_type: ContextType,
    pub context_norm: ContextNorm,
    pub mode: DistillMode,
    /// Number of trailing blocks that receive gradients; the final
    /// (decoupled) block is always among them.
    pub finetune_layers: usize,
    pub train_vl_proj: bool,
    pub grid_lo: usize,
    pub grid_hi: usize,
    pub teacher_crop_px: usize,
    pub roi_bins: usize,
    pub roi_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Stops training early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.25,
            context_type: ContextType::Q,
            context_norm: ContextNorm::Rows,
            mode: DistillMode::Decoupled,
            finetune_layers: 2,
            train_vl_proj: true,
            grid_lo: 1,
            grid_hi: 6,
            teacher_crop_px: 32,
            roi_bins: 1,
            roi_samples: 2,
            lr: 1e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 6,
            batch: 2,
            max_steps: None,
            log_every: 1,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Checks the configuration against the three encoders it will drive.
    pub fn validate(&self, student: &EncoderConfig, teacher: &EncoderConfig, vfm: &EncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if self.finetune_layers == 0 || self.finetune_layers > student.depth {
            return bad(format!(
                "finetune_layers must be in [1, {}], got {}",
                student.depth, self.finetune_layers
            ));
        }
        if self.grid_lo < 1 || self.grid_lo > self.grid_hi {
            return bad(format!("grid range [{}, {}] is empty", self.grid_lo, self.grid_hi));
        }
        if self.roi_bins == 0 || self.roi_samples == 0 || self.batch == 0 || self.log_every == 0 {
            return bad("roi_bins, roi_samples, batch and log_every must be positive".into());
        }
        if self.teacher_crop_px != teacher.image_size {
            return bad(format!(
                "teacher_crop_px {} must equal the teacher's image_size {}",
                self.teacher_crop_px, teacher.image_size
            ));
        }
        if student.grid() != vfm.grid() {
            return bad(format!(
                "token-count mismatch: student {}/{} gives a {}x{} grid, foundation model {}/{} gives {}x{}",
                student.image_size,
                student.patch_size,
                student.grid(),
                student.grid(),
                vfm.image_size,
                vfm.patch_size,
                vfm.grid(),
                vfm.grid()
            ));
        }
        if teacher.out_dim() != student.out_dim() {
            return bad(format!(
                "teacher output width {} differs from student output width {}",
                teacher.out_dim(),
                student.out_dim()
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub content: f64,
    pub context: f64,
    pub total: f64,
    pub step: usize,
}

/// Pairwise cosine similarities between the tokens of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrVolume<T = f32> {
    pub n: usize,
    pub vals: Mat<T>,
}

/// `vals[i][j] = cos(token_i, token_j)` in row-major token order. The
/// diagonal is 1; zero-norm tokens get zero off-diagonal entries.
pub fn corr_volume<T: Real>(tokens: &Grid<T>) -> CorrVolume<T> {
    let n = tokens.cells();
    let normed = unit_rows(&tokens.tokens);
    let mut vals = normed.matmul_nt(&normed);
    for i in 0..n {
        for j in 0..n {
            let v = vals.at_mut(i, j);
            *v = if i == j { T::one() } else { v.max(-T::one()).min(T::one()) };
        }
    }
    CorrVolume { n, vals }
}

/// Rows scaled to unit norm; zero rows stay zero.
fn unit_rows<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let nr = norm(m.row(r));
        if nr > T::zero() {
            out.row_mut(r).iter_mut().for_each(|v| *v /= nr);
        }
    }
    out
}

/// Discrepancy between two correlation volumes and its gradient with
/// respect to the student volume (zero on the diagonal).
fn corr_discrepancy<T: Real>(vfm: &Mat<T>, student: &Mat<T>, norm_kind: ContextNorm) -> (T, Mat<T>) {
    let n = vfm.rows;
    let nf = real::<T>(n as f64);
    let mut grad = Mat::zeros(n, n);
    let mut loss = T::zero();
    match norm_kind {
        ContextNorm::Rows => {
            for i in 0..n {
                let mut sq = T::zero();
                for j in 0..n {
                    let d = vfm.at(i, j) - student.at(i, j);
                    sq += d * d;
                }
                let rn = sq.sqrt();
                loss += rn;
                if rn > T::zero() {
                    for j in 0..n {
                        if i != j {
                            *grad.at_mut(i, j) = -(vfm.at(i, j) - student.at(i, j)) / (rn * nf);
                        }
                    }
                }
            }
            loss /= nf;
        }
        ContextNorm::Pairs => {
            let nn = nf * nf;
            for i in 0..n {
                for j in 0..n {
                    let d = vfm.at(i, j) - student.at(i, j);
                    loss += d.abs();
                    if i != j && d != T::zero() {
                        *grad.at_mut(i, j) = -d.signum() / nn;
                    }
                }
            }
            loss /= nn;
        }
    }
    (loss, grad)
}

/// Correlation-matching loss between student context tokens and the
/// foundation model's dense tokens. Widths may differ; grids may not.
pub fn context_loss<T: Real>(student_context: &Grid<T>, vfm_dense: &Grid<T>, norm_kind: ContextNorm) -> Result<T> {
    check_same_grid(student_context, vfm_dense)?;
    let v = corr_volume(vfm_dense);
    let s = corr_volume(student_context);
    Ok(corr_discrepancy(&v.vals, &s.vals, norm_kind).0)
}

/// Mean absolute correlation discrepancy over all token pairs.
pub fn correlation_discrepancy<T: Real>(student_context: &Grid<T>, vfm_dense: &Grid<T>) -> Result<T> {
    context_loss(student_context, vfm_dense, ContextNorm::Pairs)
}

fn check_same_grid<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(
            "context grids",
            format!("{}x{} (foundation model)", b.h, b.w),
            format!("{}x{} (student)", a.h, a.w),
        ));
    }
    Ok(())
}

/// Gradient of the context loss with respect to the student's context tokens.
pub(crate) fn context_loss_grad<T: Real>(ctx: &Mat<T>, vfm_corr: &Mat<T>, norm_kind: ContextNorm) -> (T, Mat<T>) {
    let normed = unit_rows(ctx);
    let mut s = normed.matmul_nt(&normed);
    let n = ctx.rows;
    for i in 0..n {
        for j in 0..n {
            let v = s.at_mut(i, j);
            *v = if i == j { T::one() } else { v.max(-T::one()).min(T::one()) };
        }
    }
    let (loss, g) = corr_discrepancy(vfm_corr, &s, norm_kind);
    // dS_ij = n_i · n_j, so dn_i = Σ_j (G_ij + G_ji) n_j.
    let mut gs = g.clone();
    gs.add_assign(&g.transpose());
    let dn = gs.matmul(&normed);
    let mut dx = Mat::zeros(n, ctx.cols);
    for i in 0..n {
        let nr = norm(ctx.row(i));
        if nr == T::zero() {
            continue;
        }
        let ni = normed.row(i);
        let proj = dot(ni, dn.row(i));
        for (c, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = (dn.at(i, c) - ni[c] * proj) / nr;
        }
    }
    (loss, dx)
}

/// Frozen-teacher [CLS] target per region; `None` marks a region skipped
/// because it covers less than one source pixel along some axis.
pub fn teacher_targets<T: Real>(teacher: &Encoder<T>, image: &Image, regions: &RegionSet) -> Result<Vec<Option<Vec<T>>>> {
    regions
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if b.width() * (image.width as f64) < 1.0 || b.height() * (image.height as f64) < 1.0 {
                log::warn!("region {i} ({:?}) is smaller than one pixel; skipped", b);
                return Ok(None);
            }
            let crop = crop_resize(image, b, teacher.cfg.image_size);
            Ok(Some(teacher.encode(&crop)?.cls_token))
        })
        .collect()
}

/// `(1/k) Σ_i (1 - cos(f_i^t, f_i^s))` with its gradient on the feature grid.
pub(crate) fn content_loss_grad<T: Real>(
    feat: &Grid<T>,
    regions: &RegionSet,
    targets: &[Option<Vec<T>>],
    bins: usize,
    samples: usize,
) -> Result<(T, Mat<T>)> {
    let k = targets.iter().filter(|t| t.is_some()).count();
    if k == 0 {
        return Err(Error::InvalidArgument("content loss needs at least one valid region".into()));
    }
    let kf = real::<T>(k as f64);
    let mut loss = T::zero();
    let mut grad = Mat::zeros(feat.cells(), feat.dim());
    for (b, t) in regions.boxes.iter().zip(targets) {
        let Some(t) = t else { continue };
        let weights = roi_align_weights(feat.h, feat.w, b, bins, samples);
        let f = crate::region::pool_weighted(feat, &weights);
        let c = cosine(t, &f);
        loss += T::one() - c;
        let (nt, nf) = (norm(t.as_slice()), norm(f.as_slice()));
        if nt == T::zero() || nf == T::zero() {
            continue;
        }
        // d(1 - cos)/df = -(t / (|t||f|) - cos · f / |f|²) / k
        let df: Vec<T> = t
            .iter()
            .zip(&f)
            .map(|(&tv, &fv)| -(tv / (nt * nf) - c * fv / (nf * nf)) / kf)
            .collect();
        for (cell, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let wt = real::<T>(w);
            for (g, d) in grad.row_mut(cell).iter_mut().zip(&df) {
                *g += wt * *d;
            }
        }
    }
    Ok((loss / kf, grad))
}

/// Content loss for a student feature grid against a frozen teacher.
pub fn content_loss<T: Real>(
    student_content: &Grid<T>,
    regions: &RegionSet,
    teacher: &Encoder<T>,
    image: &Image,
    bins: usize,
    samples: usize,
) -> Result<T> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("content loss needs a nonempty region set".into()));
    }
    let targets = teacher_targets(teacher, image, regions)?;
    Ok(content_loss_grad(student_content, regions, &targets, bins, samples)?.0)
}

/// The student input and foundation-model dense features for one image.
pub(crate) fn vfm_dense<T: Real>(vfm: &Encoder<T>, image: &Image) -> Result<Grid<T>> {
    let sized = if image.height == vfm.cfg.image_size && image.width == vfm.cfg.image_size {
        image.clone()
    } else {
        resize(image, vfm.cfg.image_size, vfm.cfg.image_size)
    };
    Ok(vfm.encode(&sized)?.dense)
}

pub(crate) fn student_input(student: &EncoderConfig, image: &Image) -> Image {
    if image.height == student.image_size && image.width == student.image_size {
        image.clone()
    } else {
        resize(image, student.image_size, student.image_size)
    }
}

/// Frozen-teacher quantities for one image and region set.
pub struct Targets<T> {
    pub teacher_cls: Vec<Option<Vec<T>>>,
    pub vfm_corr: CorrVolume<T>,
}

impl<T: Real> Targets<T> {
    pub fn compute(teacher: &Encoder<T>, vfm: &Encoder<T>, image: &Image, regions: &RegionSet) -> Result<Self> {
        Ok(Targets {
            teacher_cls: teacher_targets(teacher, image, regions)?,
            vfm_corr: corr_volume(&vfm_dense(vfm, image)?),
        })
    }
}

/// Both losses on one student forward pass.
pub fn total_loss<T: Real>(
    image: &Image,
    student: &Encoder<T>,
    teacher: &Encoder<T>,
    vfm: &Encoder<T>,
    regions: &RegionSet,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    let targets = Targets::compute(teacher, vfm, image, regions)?;
    let feats = StudentFeatures::compute(student, image, cfg)?;
    losses_from_features(&feats, regions, &targets, cfg)
}

pub(crate) fn losses_from_features<T: Real>(
    feats: &StudentFeatures<T>,
    regions: &RegionSet,
    targets: &Targets<T>,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    let (content, _) = content_loss_grad(&feats.features, regions, &targets.teacher_cls, cfg.roi_bins, cfg.roi_samples)?;
    if feats.context.cells() != targets.vfm_corr.n {
        return Err(Error::shape("context grid", targets.vfm_corr.n, feats.context.cells()));
    }
    let (context, _) = context_loss_grad(&feats.context.tokens, &targets.vfm_corr.vals, cfg.context_norm);
    let content = content.to_f64().unwrap_or(f64::NAN);
    let context = context.to_f64().unwrap_or(f64::NAN);
    Ok(LossReport {
        content,
        context,
        total: content + cfg.lambda * context,
        step: 0,
    })
}
