//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoupled::ContextType;
use crate::distill::{ContextNorm, DistillConfig, DistillMode};
use crate::encoder::{EncoderConfig, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::probe::DEFAULT_PROXY_FRAC;

const WHAT: &str = "run config";

/// Every recognized key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("image_size", "student input resolution in pixels"),
    ("patch_size", "student patch size"),
    ("depth", "student transformer blocks"),
    ("heads", "student attention heads"),
    ("dim", "student token width"),
    ("vl_dim", "width of the vision-language embedding space"),
    ("vfm_image_size", "foundation-model input resolution"),
    ("vfm_patch_size", "foundation-model patch size"),
    ("vfm_depth", "foundation-model blocks"),
    ("vfm_heads", "foundation-model attention heads"),
    ("vfm_dim", "foundation-model token width"),
    ("init_seed", "seed for the student (and teacher) initialization"),
    ("vfm_seed", "seed for the foundation-model initialization"),
    ("lambda", "weight of the context loss"),
    ("context_type", "q, k or qk; qk averages the two post-softmax maps"),
    ("context_norm", "rows or pairs"),
    ("mode", "decoupled or coupled"),
    ("finetune_layers", "trailing student blocks that are trained (default: depth)"),
    ("train_vl_proj", "whether the vision-language projection is trained"),
    ("grid_lo", "smallest region grid side"),
    ("grid_hi", "largest region grid side"),
    ("teacher_crop_px", "teacher crop resolution (default: image_size)"),
    ("roi_bins", "RoI Align bins per side"),
    ("roi_samples", "RoI Align samples per bin side"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "optimizer epsilon"),
    ("epochs", "passes over the training set"),
    ("batch", "images per optimizer step"),
    ("max_steps", "stop after this many steps (optional)"),
    ("log_every", "steps between training log lines"),
    ("seed", "training seed (data order and regions)"),
    ("window", "sliding-window size in pixels (default: image_size)"),
    ("stride", "sliding-window stride in pixels (default: window)"),
    ("eval_short_side", "shorter image side before windowing (default: window)"),
    ("proxy_top_frac", "share of tokens counted as proxy candidates"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub student: EncoderConfig,
    pub vfm: EncoderConfig,
    pub distill: DistillConfig,
    pub init_seed: u64,
    pub vfm_seed: u64,
    pub window: usize,
    pub stride: usize,
    pub eval_short_side: usize,
    pub proxy_top_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let student = EncoderConfig::default();
        let vfm = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            depth: 1,
            heads: 2,
            dim: 8,
            vl_dim: 0,
            has_vl_proj: false,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        };
        let distill = DistillConfig {
            finetune_layers: student.depth,
            teacher_crop_px: student.image_size,
            ..DistillConfig::default()
        };
        RunConfig {
            window: student.image_size,
            stride: student.image_size,
            eval_short_side: student.image_size,
            student,
            vfm,
            distill,
            init_seed: 0,
            vfm_seed: 1,
            proxy_top_frac: DEFAULT_PROXY_FRAC,
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: WHAT,
        line,
        msg: msg.into(),
    }
}

fn value<T: FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| parse_err(line, format!("invalid value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment. Unknown and repeated
    /// keys are rejected with their line number. Keys left out keep their
    /// defaults; a few defaults follow other keys (see [`KEYS`]).
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let (mut finetune, mut crop, mut window, mut stride, mut short) = (None, None, None, None, None);
        for (idx, raw) in text.lines().enumerate() {
            let n = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| parse_err(n, format!("expected `key = value`, got `{line}`")))?;
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(parse_err(n, format!("unknown key `{key}`")));
            }
            if seen.iter().any(|s| s == key) {
                return Err(parse_err(n, format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            let d = &mut c.distill;
            match key {
                "image_size" => c.student.image_size = value(v, key, n)?,
                "patch_size" => c.student.patch_size = value(v, key, n)?,
                "depth" => c.student.depth = value(v, key, n)?,
                "heads" => c.student.heads = value(v, key, n)?,
                "dim" => c.student.dim = value(v, key, n)?,
                "vl_dim" => c.student.vl_dim = value(v, key, n)?,
                "vfm_image_size" => c.vfm.image_size = value(v, key, n)?,
                "vfm_patch_size" => c.vfm.patch_size = value(v, key, n)?,
                "vfm_depth" => c.vfm.depth = value(v, key, n)?,
                "vfm_heads" => c.vfm.heads = value(v, key, n)?,
                "vfm_dim" => c.vfm.dim = value(v, key, n)?,
                "init_seed" => c.init_seed = value(v, key, n)?,
                "vfm_seed" => c.vfm_seed = value(v, key, n)?,
                "lambda" => d.lambda = value(v, key, n)?,
                "context_type" => d.context_type = v.parse::<ContextType>().map_err(|e| parse_err(n, e.to_string()))?,
                "context_norm" => d.context_norm = v.parse::<ContextNorm>().map_err(|e| parse_err(n, e.to_string()))?,
                "mode" => d.mode = v.parse::<DistillMode>().map_err(|e| parse_err(n, e.to_string()))?,
                "finetune_layers" => finetune = Some(value(v, key, n)?),
                "train_vl_proj" => d.train_vl_proj = value(v, key, n)?,
                "grid_lo" => d.grid_lo = value(v, key, n)?,
                "grid_hi" => d.grid_hi = value(v, key, n)?,
                "teacher_crop_px" => crop = Some(value(v, key, n)?),
                "roi_bins" => d.roi_bins = value(v, key, n)?,
                "roi_samples" => d.roi_samples = value(v, key, n)?,
                "lr" => d.lr = value(v, key, n)?,
                "weight_decay" => d.weight_decay = value(v, key, n)?,
                "beta1" => d.beta1 = value(v, key, n)?,
                "beta2" => d.beta2 = value(v, key, n)?,
                "adam_eps" => d.adam_eps = value(v, key, n)?,
                "epochs" => d.epochs = value(v, key, n)?,
                "batch" => d.batch = value(v, key, n)?,
                "max_steps" => d.max_steps = Some(value(v, key, n)?),
                "log_every" => d.log_every = value(v, key, n)?,
                "seed" => d.seed = value(v, key, n)?,
                "window" => window = Some(value(v, key, n)?),
                "stride" => stride = Some(value(v, key, n)?),
                "eval_short_side" => short = Some(value(v, key, n)?),
                "proxy_top_frac" => c.proxy_top_frac = value(v, key, n)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        c.distill.finetune_layers = finetune.unwrap_or(c.student.depth);
        c.distill.teacher_crop_px = crop.unwrap_or(c.student.image_size);
        c.window = window.unwrap_or(c.student.image_size);
        c.stride = stride.unwrap_or(c.window);
        c.eval_short_side = short.unwrap_or(c.window);
        c.validate()?;
        Ok(c)
    }

    /// The teacher shares the student's architecture.
    pub fn teacher(&self) -> &EncoderConfig {
        &self.student
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.vfm.validate()?;
        if !self.student.has_vl_proj {
            return Err(Error::InvalidArgument("the student needs a vision-language projection".into()));
        }
        self.distill.validate(&self.student, &self.student, &self.vfm)?;
        if !(self.proxy_top_frac > 0.0 && self.proxy_top_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "proxy_top_frac must be in (0, 1], got {}",
                self.proxy_top_frac
            )));
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window || self.eval_short_side < self.window {
            return Err(Error::InvalidArgument(format!(
                "need 0 < stride <= window <= eval_short_side, got stride {}, window {}, eval_short_side {}",
                self.stride, self.window, self.eval_short_side
            )));
        }
        Ok(())
    }

    /// Writes every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (s, v, d) = (&self.student, &self.vfm, &self.distill);
        let mut out = String::new();
        let mut put = |k: &str, val: String| {
            let _ = writeln!(out, "{k} = {val}");
        };
        put("image_size", s.image_size.to_string());
        put("patch_size", s.patch_size.to_string());
        put("depth", s.depth.to_string());
        put("heads", s.heads.to_string());
        put("dim", s.dim.to_string());
        put("vl_dim", s.vl_dim.to_string());
        put("vfm_image_size", v.image_size.to_string());
        put("vfm_patch_size", v.patch_size.to_string());
        put("vfm_depth", v.depth.to_string());
        put("vfm_heads", v.heads.to_string());
        put("vfm_dim", v.dim.to_string());
        put("init_seed", self.init_seed.to_string());
        put("vfm_seed", self.vfm_seed.to_string());
        put("lambda", d.lambda.to_string());
        put("context_type", d.context_type.to_string());
        put("context_norm", d.context_norm.to_string());
        put("mode", d.mode.to_string());
        put("finetune_layers", d.finetune_layers.to_string());
        put("train_vl_proj", d.train_vl_proj.to_string());
        put("grid_lo", d.grid_lo.to_string());
        put("grid_hi", d.grid_hi.to_string());
        put("teacher_crop_px", d.teacher_crop_px.to_string());
        put("roi_bins", d.roi_bins.to_string());
        put("roi_samples", d.roi_samples.to_string());
        put("lr", d.lr.to_string());
        put("weight_decay", d.weight_decay.to_string());
        put("beta1", d.beta1.to_string());
        put("beta2", d.beta2.to_string());
        put("adam_eps", d.adam_eps.to_string());
        put("epochs", d.epochs.to_string());
        put("batch", d.batch.to_string());
        if let Some(m) = d.max_steps {
            put("max_steps", m.to_string());
        }
        put("log_every", d.log_every.to_string());
        put("seed", d.seed.to_string());
        put("window", self.window.to_string());
        put("stride", self.stride.to_string());
        put("eval_short_side", self.eval_short_side.to_string());
        put("proxy_top_frac", self.proxy_top_frac.to_string());
        out
    }
}
