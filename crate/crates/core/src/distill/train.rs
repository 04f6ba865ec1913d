use std::io::Write;

use super::{corr_volume, grad, losses_from_features, teacher_targets, vfm_dense, CorrVolume, DistillConfig, LossReport, StudentFeatures, Targets};
use crate::encoder::{Encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{real, Real, Rng};
use crate::region::{sample_grid, RegionSet};

/// AdamW with decoupled weight decay; frozen tensors are never touched.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &DistillConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, mask: &[bool]) {
        let g = grads.tensors();
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = real::<T>(self.lr * bc2.sqrt() / bc1);
        let decay = real::<T>(1.0 - self.lr * self.weight_decay);
        let (b1, b2) = (real::<T>(self.beta1), real::<T>(self.beta2));
        let eps = real::<T>(self.eps);
        let eps_hat = eps * real::<T>(bc2.sqrt());
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.iter_mut().enumerate() {
                let gj = g[i].data[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *w = *w * decay - step_size * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
    }
}

/// One `step content context total` line, tab separated.
pub fn format_report(r: &LossReport) -> String {
    format!("{}\t{:.8e}\t{:.8e}\t{:.8e}", r.step, r.content, r.context, r.total)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub reports: Vec<LossReport>,
}

/// Distills a student against a frozen teacher and foundation model.
pub struct Trainer<'a, T> {
    pub student: Encoder<T>,
    teacher: &'a Encoder<T>,
    vfm: &'a Encoder<T>,
    cfg: DistillConfig,
    opt: AdamW<T>,
    mask: Vec<bool>,
    rng: Rng,
    step: usize,
    vfm_cache: Vec<Option<CorrVolume<T>>>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(student: Encoder<T>, teacher: &'a Encoder<T>, vfm: &'a Encoder<T>, cfg: DistillConfig) -> Result<Self> {
        student.cfg.validate()?;
        teacher.cfg.validate()?;
        vfm.cfg.validate()?;
        cfg.validate(&student.cfg, &teacher.cfg, &vfm.cfg)?;
        let mask = grad::trainable_mask(&student.cfg, &cfg);
        Ok(Trainer {
            opt: AdamW::new(&cfg),
            rng: Rng::new(cfg.seed),
            student,
            teacher,
            vfm,
            cfg,
            mask,
            step: 0,
            vfm_cache: Vec::new(),
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn vfm_corr(&mut self, idx: usize, image: &Image) -> Result<CorrVolume<T>> {
        if self.vfm_cache.len() <= idx {
            self.vfm_cache.resize(idx + 1, None);
        }
        if let Some(c) = &self.vfm_cache[idx] {
            return Ok(c.clone());
        }
        let c = corr_volume(&vfm_dense(self.vfm, image)?);
        self.vfm_cache[idx] = Some(c.clone());
        Ok(c)
    }

    /// One optimizer step over `batch` (indices into `images`), each image
    /// with freshly sampled grid regions.
    pub fn train_step(&mut self, images: &[Image], batch: &[usize]) -> Result<LossReport> {
        let mut sum: Option<EncoderParams<T>> = None;
        let (mut content, mut context) = (0.0, 0.0);
        for &i in batch {
            let regions = sample_grid(&mut self.rng, self.cfg.grid_lo, self.cfg.grid_hi)?;
            let targets = Targets {
                teacher_cls: teacher_targets(self.teacher, &images[i], &regions)?,
                vfm_corr: self.vfm_corr(i, &images[i])?,
            };
            let (rep, g) = grad::loss_and_gradients(&self.student, &images[i], &regions, &targets, &self.cfg)?;
            content += rep.content;
            context += rep.context;
            match &mut sum {
                None => sum = Some(g),
                Some(s) => {
                    for ((_, a), b) in s.tensors_mut().into_iter().zip(g.tensors()) {
                        a.iter_mut().zip(b.data).for_each(|(x, y)| *x += *y);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut g = sum.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let inv = real::<T>(1.0 / n);
        for (_, t) in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= inv);
        }
        let (content, context) = (content / n, context / n);
        let report = LossReport {
            content,
            context,
            total: content + self.cfg.lambda * context,
            step: self.step,
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss is {} (content {}, context {})", report.total, content, context),
            });
        }
        self.opt.step(&mut self.student.params, &g, &self.mask);
        if let Some((name, _)) = self.student.params.tensors().iter().map(|t| (&t.name, t.data)).find(|(_, d)| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("parameter {name} became non-finite"),
            });
        }
        self.step += 1;
        Ok(report)
    }

    /// Runs the configured number of epochs (or `max_steps`), writing one
    /// line per `log_every` steps to `log`.
    pub fn fit(&mut self, images: &[Image], log: &mut dyn Write) -> Result<TrainLog> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut out = TrainLog::default();
        let limit = self.cfg.max_steps.unwrap_or(usize::MAX);
        'epochs: for _ in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            self.rng.shuffle(&mut order);
            for batch in order.chunks(self.cfg.batch) {
                if self.step >= limit {
                    break 'epochs;
                }
                let rep = self.train_step(images, batch)?;
                if rep.step % self.cfg.log_every == 0 {
                    writeln!(log, "{}", format_report(&rep)).map_err(|e| Error::io("training log", e))?;
                }
                log::debug!("{}", format_report(&rep));
                out.reports.push(rep);
            }
        }
        Ok(out)
    }

    /// Mean losses of the current student over `images` with the given
    /// fixed region sets; no parameters change.
    pub fn evaluate(&self, images: &[Image], regions: &[RegionSet]) -> Result<LossReport> {
        mean_losses(&self.student, self.teacher, self.vfm, images, regions, &self.cfg)
    }
}

/// Dataset-mean losses for fixed region sets.
pub fn mean_losses<T: Real>(
    student: &Encoder<T>,
    teacher: &Encoder<T>,
    vfm: &Encoder<T>,
    images: &[Image],
    regions: &[RegionSet],
    cfg: &DistillConfig,
) -> Result<LossReport> {
    if images.is_empty() || images.len() != regions.len() {
        return Err(Error::InvalidArgument(format!(
            "need one region set per image, got {} images and {} region sets",
            images.len(),
            regions.len()
        )));
    }
    let (mut content, mut context) = (0.0, 0.0);
    for (img, r) in images.iter().zip(regions) {
        let targets = Targets::compute(teacher, vfm, img, r)?;
        let feats = StudentFeatures::compute(student, img, cfg)?;
        let rep = losses_from_features(&feats, r, &targets, cfg)?;
        content += rep.content;
        context += rep.context;
    }
    let n = images.len() as f64;
    Ok(LossReport {
        content: content / n,
        context: context / n,
        total: (content + cfg.lambda * context) / n,
        step: 0,
    })
}
