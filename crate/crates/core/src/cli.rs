//! The `ddistill` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::decoupled::decoupled_encode;
use crate::distill::{gradient_check, Trainer};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::{classify_pixels, mask_to_grid, region_classify, sliding_window_dense, upsample_labels, IouCounts, RegionShape};
use crate::image::{GrayImage, Image};
use crate::io::config::{RunConfig, KEYS};
use crate::io::synth::{self, SynthParams};
use crate::io::{load_checkpoint, load_pgm, load_ppm, read_text, save_checkpoint, save_pgm};
use crate::numerics::{Grid, Real, Rng};
use crate::probe::{anchor_attention, cls_attention, feature_correlation, layer_grid, proxy_score, render_heatmap};
use crate::region::{resize, sample_grid};

/// Largest relative error `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;
const GRAD_CHECK_STEP: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "ddistill", version, about = "Decoupled content/context attention distillation for ViT dense features")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

fn config_help() -> String {
    let mut s = String::from("Run config keys (`key = value`, `#` comments):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<18} {d}\n"));
    }
    s
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes dataset.
    GenSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        px: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Width of the emitted class bank; must match the student's vl_dim.
        #[arg(long, default_value_t = 8)]
        bank_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize student, teacher (a copy of the student) and foundation model.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 3, value_names = ["STUDENT", "TEACHER", "VFM"], required = true)]
        out: Vec<PathBuf>,
    },
    /// Train the student; writes the loss log to stdout.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        vfm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel segmentation; prints per-class IoU and the mean.
    EvalSeg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Classify annotated regions; prints the mean class accuracy.
    EvalRegion {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum, default_value_t = RegionMode::Box)]
        mode: RegionMode,
    },
    /// Attention and correlation heatmaps plus per-layer proxy scores.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Anchor token as `row,col`.
        #[arg(long, value_parser = parse_anchor)]
        anchor: (usize, usize),
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the distillation gradients.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        coords: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegionMode {
    Box,
    Mask,
}

fn parse_anchor(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected `row,col`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid anchor component `{v}`"));
    Ok((p(r)?, p(c)?))
}

/// Parses `argv` (program name first) and runs the subcommand, writing
/// results to `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::parse(&read_text(p)?).map_err(|e| match e {
            Error::Parse { what, line, msg } => Error::Parse {
                what,
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("stdout", e))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenSynth {
            seed,
            count,
            px,
            classes,
            bank_dim,
            out: dir,
        } => {
            synth::generate(
                &dir,
                &SynthParams {
                    seed,
                    count,
                    px,
                    classes,
                    bank_dim,
                },
            )?;
            emit(out, format!("wrote {count} samples to {}", dir.display()))?;
        }
        Command::Init { config, out: paths } => {
            let cfg = load_config(config.as_deref())?;
            let student = Encoder::<f32>::init(cfg.student.clone(), cfg.init_seed)?;
            let vfm = Encoder::<f32>::init(cfg.vfm.clone(), cfg.vfm_seed)?;
            save_checkpoint(&paths[0], &student)?;
            save_checkpoint(&paths[1], &student)?;
            save_checkpoint(&paths[2], &vfm)?;
        }
        Command::Distill {
            config,
            data,
            student,
            teacher,
            vfm,
            out: dst,
        } => {
            let cfg = load_config(config.as_deref())?;
            let student = load_checkpoint(&student)?.cast::<f64>();
            let teacher = load_checkpoint(&teacher)?.cast::<f64>();
            let vfm = load_checkpoint(&vfm)?.cast::<f64>();
            let images = synth::load_images(&data)?;
            let mut trainer = Trainer::new(student, &teacher, &vfm, cfg.distill.clone())?;
            let mut log = Vec::new();
            let result = trainer.fit(&images, &mut log);
            out.write_all(&log).map_err(|e| Error::io("stdout", e))?;
            result?;
            save_checkpoint(&dst, &trainer.student.cast::<f32>())?;
        }
        Command::EvalSeg {
            config,
            data,
            student,
            bank,
            window,
            stride,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(w) = window {
                cfg.window = w;
                cfg.eval_short_side = cfg.eval_short_side.max(w);
                if stride.is_none() {
                    cfg.stride = w;
                }
            }
            if let Some(s) = stride {
                cfg.stride = s;
            }
            let model = load_checkpoint(&student)?;
            let bank = synth::load_bank(&bank)?;
            let images = synth::load_images(&data)?;
            let labels = synth::load_labels(&data, images.len())?;
            let mut counts = IouCounts::new(bank.len());
            for (img, gt) in images.iter().zip(&labels) {
                let dense = eval_dense(img, &model, &cfg)?;
                let (_, scores) = classify_pixels(&dense, &bank)?;
                counts.add(&upsample_labels(&scores, gt.height, gt.width)?, gt)?;
            }
            let report = counts.report();
            emit(out, "class\tiou")?;
            for (name, iou) in bank.names().iter().zip(&report.per_class) {
                match iou {
                    Some(v) => emit(out, format!("{name}\t{v:.6}"))?,
                    None => emit(out, format!("{name}\tn/a"))?,
                }
            }
            emit(out, format!("mIoU\t{:.6}", report.mean))?;
        }
        Command::EvalRegion {
            config,
            data,
            student,
            bank,
            mode,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_checkpoint(&student)?;
            let bank = synth::load_bank(&bank)?;
            let images = synth::load_images(&data)?;
            let regions = synth::load_regions(&data)?;
            let (mut preds, mut gts) = (Vec::new(), Vec::new());
            for (i, img) in images.iter().enumerate() {
                let mine: Vec<_> = regions.iter().filter(|r| r.image == i).collect();
                if mine.is_empty() {
                    continue;
                }
                let dense = eval_dense(img, &model, &cfg)?;
                let shapes = mine
                    .iter()
                    .enumerate()
                    .map(|(k, r)| match mode {
                        RegionMode::Box => Ok(RegionShape::Box(r.bx)),
                        RegionMode::Mask => {
                            let mask = load_pgm(&synth::mask_path(&data, i, k))?;
                            Ok(RegionShape::Mask(mask_to_grid(&fit_mask(&mask, &dense), dense.h, dense.w)?))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                preds.extend(region_classify(&dense, &shapes, &bank, cfg.distill.roi_bins, cfg.distill.roi_samples)?);
                gts.extend(mine.iter().map(|r| r.class));
            }
            if let Some(&c) = gts.iter().find(|&&c| c >= bank.len()) {
                return Err(Error::InvalidArgument(format!("region class {c} is outside the {}-class bank", bank.len())));
            }
            let acc = crate::eval::macc(&preds, &gts)?;
            emit(out, format!("regions\t{}", gts.len()))?;
            emit(out, format!("mAcc\t{acc:.6}"))?;
        }
        Command::Probe {
            config,
            student,
            image,
            anchor,
            layer,
            out: dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_checkpoint(&student)?;
            let img = load_ppm(&image)?;
            let size = model.cfg.image_size;
            let img = if img.height == size && img.width == size { img } else { resize(&img, size, size) };
            let enc = model.encode(&img)?;
            let g = model.cfg.grid();
            let ctype = cfg.distill.context_type;
            let dec = decoupled_encode(&img, &model.params, &model.cfg, ctype)?;
            let anchor_row = {
                let a = layer_grid(&enc, layer)?;
                feature_correlation(&a, anchor)?
            };
            let ctx_row = {
                let i = anchor.0 * g + anchor.1;
                dec.attn_context.row(i).to_vec()
            };
            let maps: [(&str, Vec<f32>); 5] = [
                ("cls_attention", cls_attention(&enc, layer)?),
                ("anchor_attention", anchor_attention(&enc, layer, anchor)?),
                ("anchor_correlation", anchor_row),
                ("context_attention", ctx_row),
                ("content_correlation", feature_correlation(&dec.content, anchor)?),
            ];
            for (name, v) in &maps {
                save_pgm(&dir.join(format!("{name}.pgm")), &render_heatmap(v, g, g, size)?)?;
            }
            emit(out, "layer\tproxy_score")?;
            for l in 0..model.cfg.depth {
                emit(out, format!("{l}\t{:.6}", proxy_score(&enc, l, cfg.proxy_top_frac)?))?;
            }
        }
        Command::GradCheck { config, seed, coords } => {
            let cfg = load_config(config.as_deref())?;
            let student = Encoder::<f64>::init(cfg.student.clone(), cfg.init_seed)?;
            let vfm = Encoder::<f64>::init(cfg.vfm.clone(), cfg.vfm_seed)?;
            let mut rng = Rng::new(seed);
            // Perturb the student so it differs from its teacher copy.
            let mut moved = student.clone();
            for (_, t) in moved.params.tensors_mut() {
                t.iter_mut().for_each(|v| *v += 0.02 * rng.normal());
            }
            let (image, regions) = grad_check_input(&cfg, &mut rng)?;
            let report = gradient_check(&moved, &student, &vfm, &image, &regions, &cfg.distill, coords, GRAD_CHECK_STEP, seed)?;
            emit(out, "tensor\tindex\tanalytic\tnumeric\trel_err")?;
            for e in &report.entries {
                emit(out, format!("{}\t{}\t{:.8e}\t{:.8e}\t{:.3e}", e.tensor, e.index, e.analytic, e.numeric, e.rel_err))?;
            }
            emit(out, format!("max_rel_err\t{:.3e}", report.max_rel_err))?;
            if !(report.max_rel_err <= GRAD_CHECK_TOLERANCE) {
                return Err(Error::GradCheck {
                    max_rel_err: report.max_rel_err,
                    tolerance: GRAD_CHECK_TOLERANCE,
                });
            }
        }
    }
    Ok(0)
}

fn grad_check_input(cfg: &RunConfig, rng: &mut Rng) -> Result<(Image, crate::region::RegionSet)> {
    let px = cfg.student.image_size;
    let shapes = synth::sample_shapes(rng, px.max(8), 3);
    let (image, _) = synth::rasterize(px.max(8), &shapes, rng);
    let image = if image.height == px { image } else { resize(&image, px, px) };
    let regions = sample_grid(rng, cfg.distill.grid_lo, cfg.distill.grid_hi)?;
    Ok((image, regions))
}

/// Shorter side scaled to `eval_short_side`, the longer side rounded to a
/// whole number of feature cells, then sliding-window dense features.
fn eval_dense<T: Real>(image: &Image, model: &Encoder<T>, cfg: &RunConfig) -> Result<Grid<T>> {
    let cell = cfg.window / model.cfg.grid().max(1);
    if cell == 0 || cfg.window % model.cfg.grid() != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {} must be a multiple of the token grid {}",
            cfg.window,
            model.cfg.grid()
        )));
    }
    let short = cfg.eval_short_side;
    let (h, w) = (image.height, image.width);
    let s = h.min(w) as f64;
    let scale = |v: usize| -> usize {
        if v == h.min(w) {
            return short;
        }
        let cells = ((v as f64 * short as f64 / s) / cell as f64).round() as usize;
        cells.max(1) * cell
    };
    let (oh, ow) = (scale(h), scale(w));
    let sized = if (oh, ow) == (h, w) { image.clone() } else { resize(image, oh, ow) };
    sliding_window_dense(&sized, model, cfg.distill.context_type, cfg.window, cfg.stride)
}

/// Nearest-neighbour resize of a mask whose size does not divide the grid
/// of `dense`.
fn fit_mask<T>(mask: &GrayImage, dense: &Grid<T>) -> GrayImage {
    if mask.height % dense.h == 0 && mask.width % dense.w == 0 {
        return mask.clone();
    }
    let cy = mask.height.div_ceil(dense.h).max(1);
    let cx = mask.width.div_ceil(dense.w).max(1);
    let (oh, ow) = (dense.h * cy, dense.w * cx);
    let mut out = GrayImage::filled(oh, ow, 0);
    for y in 0..oh {
        for x in 0..ow {
            let sy = (y * mask.height / oh).min(mask.height - 1);
            let sx = (x * mask.width / ow).min(mask.width - 1);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}
