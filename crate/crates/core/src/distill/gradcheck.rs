use super::{grad, losses_from_features, DistillConfig, StudentFeatures, Targets};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Rng;
use crate::region::RegionSet;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute agreement.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the total loss against central finite
/// differences at `coords` trainable coordinates drawn with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    student: &Encoder<f64>,
    teacher: &Encoder<f64>,
    vfm: &Encoder<f64>,
    image: &Image,
    regions: &RegionSet,
    cfg: &DistillConfig,
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    cfg.validate(&student.cfg, &teacher.cfg, &vfm.cfg)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let targets = Targets::compute(teacher, vfm, image, regions)?;
    let (_, grads) = grad::loss_and_gradients(student, image, regions, &targets, cfg)?;
    let mask = grad::trainable_mask(&student.cfg, cfg);

    let mut pool = Vec::new();
    for (t, tensor) in grads.tensors().iter().enumerate() {
        if mask[t] {
            pool.extend((0..tensor.data.len()).map(|i| (t, i)));
        }
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no trainable parameters to check".into()));
    }
    let mut rng = Rng::new(seed);
    let gt = grads.tensors();
    let mut entries = Vec::with_capacity(coords);
    let mut probe = student.clone();
    for _ in 0..coords {
        let (t, i) = pool[rng.index(pool.len())];
        let analytic = gt[t].data[i];
        let loss_at = |probe: &mut Encoder<f64>, delta: f64| -> Result<f64> {
            let original = {
                let mut ts = probe.params.tensors_mut();
                let v = &mut ts[t].1[i];
                let o = *v;
                *v = o + delta;
                o
            };
            let feats = StudentFeatures::compute(probe, image, cfg);
            probe.params.tensors_mut()[t].1[i] = original;
            Ok(losses_from_features(&feats?, regions, &targets, cfg)?.total)
        };
        let numeric = (loss_at(&mut probe, step)? - loss_at(&mut probe, -step)?) / (2.0 * step);
        entries.push(GradCheckEntry {
            tensor: gt[t].name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err })
}
