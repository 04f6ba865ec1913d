//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use decoupled_distill::decoupled::{decoupled_encode, dense_for_inference, ContextType};
use decoupled_distill::distill::{
    content_loss, context_loss, corr_volume, correlation_discrepancy, gradient_check, mean_losses, total_loss,
    ContextNorm, DistillConfig, DistillMode, StudentFeatures, Trainer,
};
use decoupled_distill::encoder::{Encoder, EncoderConfig, LN_EPS};
use decoupled_distill::eval::{classify_pixels, macc, miou, sliding_window_dense, ClassBank, SegPrediction, IGNORE_INDEX};
use decoupled_distill::image::{GrayImage, Image};
use decoupled_distill::io::config::RunConfig;
use decoupled_distill::io::synth::{self, SynthParams};
use decoupled_distill::numerics::{bilinear_sample, cosine, softmax_rows, Grid, Mat, Rng};
use decoupled_distill::probe::{proxy_score_map, DEFAULT_PROXY_FRAC};
use decoupled_distill::region::{crop_resize, resize, roi_align, sample_grid, RegionBox, RegionSet};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

fn rand_mat(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect())
}

fn rand_grid(h: usize, w: usize, d: usize, rng: &mut Rng) -> Grid<f64> {
    Grid::new(h, w, rand_mat(h * w, d, 1.0, rng))
}

fn rand_image(px: usize, rng: &mut Rng) -> Image {
    Image::from_fn(px, px, |_, _| [rng.unit() as f32, rng.unit() as f32, rng.unit() as f32])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn softmax64(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Bilinear sample with cell centers at integer coordinates, clamped to the border.
fn bilinear64(g: &Grid<f64>, x: f64, y: f64) -> Vec<f64> {
    let x = x.clamp(0.0, (g.w - 1) as f64);
    let y = y.clamp(0.0, (g.h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(g.w - 1), (y0 + 1).min(g.h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..g.dim())
        .map(|c| {
            let v = |i: usize, j: usize| g.at(i, j)[c];
            (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
        })
        .collect()
}

/// RoI pooling as the mean of an `n × n` lattice of bilinear samples, `n = bins·samples`.
fn roi64(g: &Grid<f64>, b: &RegionBox, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; g.dim()];
    for iy in 0..n {
        let y = (b.y0 + (iy as f64 + 0.5) / n as f64 * b.height()) * g.h as f64 - 0.5;
        for ix in 0..n {
            let x = (b.x0 + (ix as f64 + 0.5) / n as f64 * b.width()) * g.w as f64 - 0.5;
            for (a, v) in acc.iter_mut().zip(bilinear64(g, x, y)) {
                *a += v;
            }
        }
    }
    acc.iter().map(|v| v / (n * n) as f64).collect()
}

fn corr64(g: &Grid<f64>) -> Vec<Vec<f64>> {
    let n = g.cells();
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { cos64(g.tokens.row(i), g.tokens.row(j)) }).collect()).collect()
}

fn context64(student: &Grid<f64>, vfm: &Grid<f64>, norm: ContextNorm) -> f64 {
    let (s, v) = (corr64(student), corr64(vfm));
    let n = s.len();
    match norm {
        ContextNorm::Rows => (0..n).map(|i| (0..n).map(|j| (v[i][j] - s[i][j]).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / n as f64,
        ContextNorm::Pairs => (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (v[i][j] - s[i][j]).abs()).sum::<f64>() / (n * n) as f64,
    }
}

fn content64(student: &Grid<f64>, regions: &RegionSet, teacher: &Encoder<f64>, image: &Image, n: usize) -> f64 {
    let mut sum = 0.0;
    for b in &regions.boxes {
        let crop = crop_resize(image, b, teacher.cfg.image_size);
        let target = teacher.encode(&crop).unwrap().cls_token;
        sum += 1.0 - cos64(&roi64(student, b, n), &target);
    }
    sum / regions.len() as f64
}

fn layer_norm64(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn linear64(x: &[f64], w: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.cols).map(|o| b[o] + (0..w.rows).map(|i| x[i] * w.at(i, o)).sum::<f64>()).collect()
}

/// Head-averaged attention of one block recomputed from its input tokens.
fn attention64(tokens: &Mat<f64>, enc: &Encoder<f64>, layer: usize) -> Vec<Vec<f64>> {
    let blk = &enc.params.blocks[layer];
    let n = tokens.rows;
    let ln: Vec<Vec<f64>> = (0..n).map(|i| layer_norm64(tokens.row(i), &blk.ln1.gain, &blk.ln1.bias)).collect();
    let q: Vec<Vec<f64>> = ln.iter().map(|x| linear64(x, &blk.q.w, &blk.q.b)).collect();
    let k: Vec<Vec<f64>> = ln.iter().map(|x| linear64(x, &blk.k.w, &blk.k.b)).collect();
    let heads = enc.cfg.heads;
    let hd = enc.cfg.dim / heads;
    let mut avg = vec![vec![0.0; n]; n];
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n).map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (hd as f64).sqrt()).collect();
            for (a, p) in avg[i].iter_mut().zip(softmax64(&logits)) {
                *a += p / heads as f64;
            }
        }
    }
    avg
}

// ---------------------------------------------------------------- fixtures

fn tiny_student(image_size: usize, patch: usize, vl_dim: usize) -> EncoderConfig {
    EncoderConfig {
        image_size,
        patch_size: patch,
        depth: 2,
        heads: 2,
        dim: 8,
        vl_dim,
        has_vl_proj: true,
        ..EncoderConfig::default()
    }
}

fn tiny_vfm(image_size: usize, patch: usize) -> EncoderConfig {
    EncoderConfig {
        image_size,
        patch_size: patch,
        depth: 1,
        heads: 2,
        dim: 8,
        vl_dim: 0,
        has_vl_proj: false,
        ..EncoderConfig::default()
    }
}

fn perturbed(enc: &Encoder<f64>, scale: f64, seed: u64) -> Encoder<f64> {
    let mut out = enc.clone();
    let mut rng = Rng::new(seed);
    for (_, t) in out.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += scale * rng.normal());
    }
    out
}

// ---------------------------------------------------------------- criteria

fn kernel_oracles() -> Outcome {
    let mut rng = Rng::new(1);
    let cases = 1000;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (r, c) = (rng.int_inclusive(1, 6), rng.int_inclusive(1, 12));
        let m = rand_mat(r, c, 4.0, &mut rng);
        let scale = rng.uniform(0.1, 2.0);
        let p = softmax_rows(&m, scale).map_err(|e| e.to_string())?;
        for i in 0..r {
            let scaled: Vec<f64> = m.row(i).iter().map(|v| v * scale).collect();
            let oracle = softmax64(&scaled);
            let sum: f64 = p.row(i).iter().sum();
            worst = worst.max((sum - 1.0).abs());
            for (a, o) in p.row(i).iter().zip(&oracle) {
                worst = worst.max((a - o).abs());
            }
        }

        let d = rng.int_inclusive(1, 16);
        let a: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let (sa, sb) = (rng.uniform(1e-3, 1e3), rng.uniform(1e-3, 1e3));
        let a2: Vec<f64> = a.iter().map(|v| v * sa).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * sb).collect();
        let oracle = cos64(&a, &b);
        worst = worst.max((cosine(&a, &b) - oracle).abs()).max((cosine(&a2, &b2) - oracle).abs());

        let g = rand_grid(rng.int_inclusive(1, 6), rng.int_inclusive(1, 6), 3, &mut rng);
        for i in 0..g.h {
            for j in 0..g.w {
                let s = bilinear_sample(&g, j as f64, i as f64);
                for (x, y) in s.iter().zip(g.at(i, j)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        let (x, y) = (rng.uniform(-1.0, g.w as f64), rng.uniform(-1.0, g.h as f64));
        for (s, o) in bilinear_sample(&g, x, y).iter().zip(bilinear64(&g, x, y)) {
            worst = worst.max((s - o).abs());
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:.3e} > 1e-6");
    Ok(format!("{cases} cases per kernel, max deviation {worst:.1e}"))
}

fn loss_fidelity() -> Outcome {
    let mut rng = Rng::new(2);
    let instances = 100;
    let (mut worst_content, mut worst_corr, mut worst_ctx, mut worst_total): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let scfg = tiny_student(32, 16, 6);
    let vcfg = tiny_vfm(16, 8);
    let mut cfg = DistillConfig {
        teacher_crop_px: 32,
        ..DistillConfig::default()
    };
    for k in 0..instances {
        let image = rand_image(32, &mut rng);
        let teacher = Encoder::<f64>::init(scfg.clone(), k).unwrap();
        let student = perturbed(&teacher, 0.05, 1000 + k);
        let vfm = Encoder::<f64>::init(vcfg.clone(), 2000 + k).unwrap();
        let regions = sample_grid(&mut rng, 1, 4).unwrap();
        let (bins, samples) = (rng.int_inclusive(1, 3), rng.int_inclusive(1, 3));

        let content_grid = rand_grid(2, 2, 6, &mut rng);
        let got = content_loss(&content_grid, &regions, &teacher, &image, bins, samples).map_err(|e| e.to_string())?;
        worst_content = worst_content.max((got - content64(&content_grid, &regions, &teacher, &image, bins * samples)).abs());

        let g = rand_grid(rng.int_inclusive(1, 4), rng.int_inclusive(1, 4), rng.int_inclusive(1, 8), &mut rng);
        let c = corr_volume(&g);
        for (i, row) in corr64(&g).iter().enumerate() {
            for (j, o) in row.iter().enumerate() {
                worst_corr = worst_corr.max((c.vals.at(i, j) - o).abs());
            }
        }

        let (s, v) = (rand_grid(2, 3, 5, &mut rng), rand_grid(2, 3, 4, &mut rng));
        for norm in [ContextNorm::Rows, ContextNorm::Pairs] {
            let got = context_loss(&s, &v, norm).map_err(|e| e.to_string())?;
            worst_ctx = worst_ctx.max((got - context64(&s, &v, norm)).abs());
        }

        cfg.roi_bins = bins;
        cfg.roi_samples = samples;
        cfg.context_type = [ContextType::Q, ContextType::K, ContextType::QPlusK][k as usize % 3];
        let out = decoupled_encode(&image, &student.params, &student.cfg, cfg.context_type).unwrap();
        let vfm_dense = vfm.encode(&resize(&image, 16, 16)).unwrap().dense;
        let want = content64(&out.content, &regions, &teacher, &image, bins * samples)
            + cfg.lambda * context64(&out.context, &vfm_dense, cfg.context_norm);
        let mut reports = Vec::new();
        for lambda in [0.0, 0.25, 1.7] {
            let c = DistillConfig { lambda, ..cfg.clone() };
            let r = total_loss(&image, &student, &teacher, &vfm, &regions, &c).map_err(|e| e.to_string())?;
            ensure!(r.total == r.content + lambda * r.context, "λ-linearity not exact at λ={lambda}: {r:?}");
            reports.push(r);
        }
        ensure!(
            reports.iter().all(|r| r.content == reports[0].content && r.context == reports[0].context),
            "content or context loss depends on λ"
        );
        worst_total = worst_total.max((reports[1].total - want).abs());
    }
    let worst = worst_content.max(worst_corr).max(worst_ctx).max(worst_total);
    ensure!(
        worst <= 1e-6,
        "content {worst_content:.1e}, corr {worst_corr:.1e}, context {worst_ctx:.1e}, total {worst_total:.1e}"
    );
    Ok(format!(
        "{instances} instances, max dev content {worst_content:.1e} corr {worst_corr:.1e} context {worst_ctx:.1e} total {worst_total:.1e}, λ-linear"
    ))
}

fn roi_align_oracle() -> Outcome {
    let mut rng = Rng::new(3);
    let boxes = 200;
    let mut worst: f64 = 0.0;
    for _ in 0..boxes {
        let g = rand_grid(rng.int_inclusive(2, 8), rng.int_inclusive(2, 8), 3, &mut rng);
        let x0 = rng.uniform(0.0, 0.9);
        let y0 = rng.uniform(0.0, 0.9);
        let b = RegionBox::new(x0, y0, rng.uniform(x0 + 0.02, 1.0), rng.uniform(y0 + 0.02, 1.0)).unwrap();
        for (a, o) in roi_align(&g, &b, 8, 8).iter().zip(roi64(&g, &b, 256)) {
            worst = worst.max((a - o).abs());
        }
    }
    ensure!(worst <= 1e-3, "box pooling deviates by {worst:.3e}");
    let mut worst_full: f64 = 0.0;
    for _ in 0..50 {
        let g = rand_grid(rng.int_inclusive(1, 8), rng.int_inclusive(1, 8), 3, &mut rng);
        let mean: Vec<f64> = (0..3).map(|c| (0..g.cells()).map(|i| g.tokens.at(i, c)).sum::<f64>() / g.cells() as f64).collect();
        for (a, m) in roi_align(&g, &RegionBox::FULL, 5, 4).iter().zip(&mean) {
            worst_full = worst_full.max((a - m).abs());
        }
    }
    ensure!(worst_full <= 1e-2, "full-box pooling deviates from the grid mean by {worst_full:.3e}");
    Ok(format!("{boxes} boxes max dev {worst:.1e}; full box vs mean {worst_full:.1e}"))
}

fn gradient_check_criterion() -> Outcome {
    let rc = RunConfig::default();
    ensure!(
        rc.student.depth == 2 && rc.student.dim == 8 && rc.student.heads == 2 && rc.student.grid() == 2,
        "default config is not the tiny 2x2 setup"
    );
    let teacher = Encoder::<f64>::init(rc.student.clone(), rc.init_seed).unwrap();
    let student = perturbed(&teacher, 0.02, 9);
    let vfm = Encoder::<f64>::init(rc.vfm.clone(), rc.vfm_seed).unwrap();
    let mut rng = Rng::new(4);
    let image = rand_image(rc.student.image_size, &mut rng);
    let regions = sample_grid(&mut rng, rc.distill.grid_lo, rc.distill.grid_hi).unwrap();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for ctype in [ContextType::Q, ContextType::K, ContextType::QPlusK] {
        let cfg = DistillConfig {
            context_type: ctype,
            ..rc.distill.clone()
        };
        let r = gradient_check(&student, &teacher, &vfm, &image, &regions, &cfg, 50, 1e-4, 5).map_err(|e| e.to_string())?;
        ensure!(r.entries.len() == 50, "expected 50 coordinates");
        worst = worst.max(r.max_rel_err);
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-3, "max relative error {worst:.3e}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("50 coords x {{q,k,qk}}, max rel err {worst:.1e}, {:.1}s", elapsed.as_secs_f64()))
}

fn decoupling_isolation() -> Outcome {
    let rc = RunConfig::default();
    let teacher = Encoder::<f64>::init(rc.student.clone(), 0).unwrap();
    let vfm = Encoder::<f64>::init(rc.vfm.clone(), 1).unwrap();
    let mut rng = Rng::new(6);
    let image = rand_image(rc.student.image_size, &mut rng);
    let regions = RegionSet::grid(2, 3);
    let vfm_dense = vfm.encode(&resize(&image, rc.vfm.image_size, rc.vfm.image_size)).unwrap().dense;
    let mut moved = 0;
    for trial in 0..20 {
        let student = perturbed(&teacher, 0.05, 100 + trial);
        let cfg = DistillConfig {
            context_type: [ContextType::Q, ContextType::K, ContextType::QPlusK][trial as usize % 3],
            ..rc.distill.clone()
        };
        let ctx = |s: &Encoder<f64>| -> f64 {
            let f = StudentFeatures::compute(s, &image, &cfg).unwrap();
            context_loss(&f.context, &vfm_dense, cfg.context_norm).unwrap()
        };
        let before = ctx(&student);
        let mut changed = student.clone();
        let last = changed.cfg.depth - 1;
        let blk = &mut changed.params.blocks[last];
        for t in [&mut blk.v.w.data, &mut blk.v.b, &mut blk.o.w.data, &mut blk.o.b] {
            t.iter_mut().for_each(|v| *v += rng.normal());
        }
        if let Some(p) = &mut changed.params.vl_proj {
            p.data.iter_mut().for_each(|v| *v += rng.normal());
        }
        ensure!(ctx(&changed) == before, "content-path perturbation moved the context loss (trial {trial})");
        let content = |s: &Encoder<f64>| content_loss(&dense_for_inference(&image, &s.params, &s.cfg, cfg.context_type).unwrap(), &regions, &teacher, &image, 1, 2).unwrap();
        if content(&changed) != content(&student) {
            moved += 1;
        }

        let targets = |t: &Encoder<f64>| -> Vec<Vec<f64>> { regions.boxes.iter().map(|b| t.encode(&crop_resize(&image, b, 32)).unwrap().cls_token).collect() };
        let base = targets(&teacher);
        let mut q_moved = student.clone();
        q_moved.params.blocks[last].q.w.data.iter_mut().for_each(|v| *v *= -3.0);
        let r = total_loss(&image, &q_moved, &teacher, &vfm, &regions, &DistillConfig { context_type: ContextType::Q, ..cfg.clone() }).unwrap();
        ensure!(r.total.is_finite(), "non-finite loss");
        ensure!(targets(&teacher) == base, "query perturbation changed teacher targets");
    }
    ensure!(moved == 20, "content perturbation left the content loss unchanged in {} trials", 20 - moved);
    Ok("20 trials: context loss bit-identical, teacher targets bit-identical".into())
}

fn tied_projection_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(7);
    for seed in 0..20 {
        let cfg = tiny_student(48, 16, 6);
        let mut enc = Encoder::<f64>::init(cfg, seed).unwrap();
        let last = enc.cfg.depth - 1;
        let q = enc.params.blocks[last].q.clone();
        enc.params.blocks[last].k = q;
        let image = rand_image(48, &mut rng);
        let outs: Vec<_> = [ContextType::Q, ContextType::K, ContextType::QPlusK]
            .iter()
            .map(|&c| decoupled_encode(&image, &enc.params, &enc.cfg, c).unwrap())
            .collect();
        for o in &outs[1..] {
            for (a, b) in [(&o.context.tokens, &outs[0].context.tokens), (&o.content.tokens, &outs[0].content.tokens), (&o.attn_context, &outs[0].attn_context)] {
                for (x, y) in a.data.iter().zip(&b.data) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "variants differ by {worst:.3e}");
    Ok(format!("20 models, q/k/qk max difference {worst:.1e}"))
}

struct ToyRun {
    start: f64,
    end: f64,
    content0: f64,
    content1: f64,
    context0: f64,
    context1: f64,
    disc0: f64,
    disc1: f64,
    log: Vec<u8>,
    params: Vec<u64>,
}

struct Toy {
    images: Vec<Image>,
    regions: Vec<RegionSet>,
    teacher: Encoder<f64>,
    vfm: Encoder<f64>,
    cfg: RunConfig,
}

const TOY_CONFIG: &str = "\
image_size = 64
patch_size = 16
dim = 16
vfm_image_size = 32
vfm_patch_size = 8
lambda = 0.25
lr = 0.01
batch = 8
epochs = 1000
max_steps = 200
seed = 0
";

fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(
        dir.path(),
        &SynthParams {
            seed: 0,
            count: 64,
            px: 64,
            classes: 4,
            bank_dim: 8,
        },
    )
    .unwrap();
    let images = synth::load_images(dir.path()).unwrap();
    let cfg = RunConfig::parse(TOY_CONFIG).unwrap();
    cfg.validate().unwrap();
    let teacher = Encoder::<f32>::init(cfg.student.clone(), cfg.init_seed).unwrap().cast::<f64>();
    let vfm = Encoder::<f32>::init(cfg.vfm.clone(), cfg.vfm_seed).unwrap().cast::<f64>();
    let mut rng = Rng::new(1234);
    let regions = images.iter().map(|_| sample_grid(&mut rng, cfg.distill.grid_lo, cfg.distill.grid_hi).unwrap()).collect();
    Toy {
        images,
        regions,
        teacher,
        vfm,
        cfg,
    }
}

fn mean_discrepancy(toy: &Toy, student: &Encoder<f64>, cfg: &DistillConfig) -> f64 {
    let v = toy.vfm.cfg.image_size;
    let total: f64 = toy
        .images
        .iter()
        .map(|img| {
            let f = StudentFeatures::compute(student, img, cfg).unwrap();
            correlation_discrepancy(&f.context, &toy.vfm.encode(&resize(img, v, v)).unwrap().dense).unwrap()
        })
        .sum();
    total / toy.images.len() as f64
}

fn toy_run(toy: &Toy, cfg: &DistillConfig) -> Result<ToyRun, String> {
    let before = mean_losses(&toy.teacher, &toy.teacher, &toy.vfm, &toy.images, &toy.regions, cfg).map_err(|e| e.to_string())?;
    let disc0 = mean_discrepancy(toy, &toy.teacher, cfg);
    let mut trainer = Trainer::new(toy.teacher.clone(), &toy.teacher, &toy.vfm, cfg.clone()).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    let hist = trainer.fit(&toy.images, &mut log).map_err(|e| e.to_string())?;
    let after = trainer.evaluate(&toy.images, &toy.regions).map_err(|e| e.to_string())?;
    let params = trainer.student.params.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect();
    Ok(ToyRun {
        start: hist.reports.first().map_or(f64::NAN, |r| r.total),
        end: hist.reports.last().map_or(f64::NAN, |r| r.total),
        content0: before.content,
        content1: after.content,
        context0: before.context,
        context1: after.context,
        disc0,
        disc1: mean_discrepancy(toy, &trainer.student, cfg),
        log,
        params,
    })
}

fn toy_distillation(toy: &Toy, first: &ToyRun, elapsed: Duration) -> Outcome {
    let lines = String::from_utf8_lossy(&first.log).lines().count();
    ensure!(lines == 200, "expected 200 log lines, got {lines}");
    let rc = first.content1 / first.content0;
    let rx = first.context1 / first.context0;
    let rd = first.disc1 / first.disc0;
    let detail = format!(
        "content {:.3}->{:.3} ({:.0}%), context {:.3}->{:.3} ({:.0}%), discrepancy {:.3}->{:.3} ({:.0}%), log total {:.3}->{:.3}, {:.0}s/run",
        first.content0,
        first.content1,
        100.0 * (1.0 - rc),
        first.context0,
        first.context1,
        100.0 * (1.0 - rx),
        first.disc0,
        first.disc1,
        100.0 * (1.0 - rd),
        first.start,
        first.end,
        elapsed.as_secs_f64()
    );
    ensure!(rc <= 0.5 && rx <= 0.5, "losses did not halve: {detail}");
    ensure!(rd <= 0.6, "discrepancy did not drop 40%: {detail}");
    let second = toy_run(toy, &toy.cfg.distill)?;
    ensure!(second.log == first.log, "rerun log differs");
    ensure!(second.params == first.params, "rerun parameters differ");
    ensure!(elapsed < Duration::from_secs(600), "run took {elapsed:?}");
    Ok(format!("{detail}; rerun byte-identical"))
}

fn direction_of_effect(toy: &Toy, decoupled: &ToyRun) -> Outcome {
    let coupled = toy_run(
        toy,
        &DistillConfig {
            mode: DistillMode::Coupled,
            ..toy.cfg.distill.clone()
        },
    )?;
    let content_only = toy_run(
        toy,
        &DistillConfig {
            lambda: 0.0,
            ..toy.cfg.distill.clone()
        },
    )?;
    let detail = format!(
        "content: decoupled {:.4} vs coupled {:.4}; discrepancy: decoupled {:.4} vs content-only {:.4}",
        decoupled.content1, coupled.content1, decoupled.disc1, content_only.disc1
    );
    ensure!(decoupled.content1 <= coupled.content1, "{detail}");
    ensure!(decoupled.disc1 <= content_only.disc1, "{detail}");
    Ok(detail)
}

fn evaluation_pipeline() -> Outcome {
    let mut rng = Rng::new(10);
    for seed in 0..10 {
        let cfg = tiny_student(48, 16, 6);
        let enc = Encoder::<f64>::init(cfg, seed).unwrap();
        let image = rand_image(48, &mut rng);
        for ctype in [ContextType::Q, ContextType::K, ContextType::QPlusK] {
            let direct = dense_for_inference(&image, &enc.params, &enc.cfg, ctype).unwrap();
            for stride in [16, 32, 48] {
                let stitched = sliding_window_dense(&image, &enc, ctype, 48, stride).map_err(|e| e.to_string())?;
                ensure!(stitched == direct, "stitched features differ from direct inference (seed {seed}, stride {stride})");
            }
        }
    }

    let gt = GrayImage::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, IGNORE_INDEX, IGNORE_INDEX, 2, 2]);
    let pred = SegPrediction {
        height: 4,
        width: 4,
        labels: vec![0, 0, 1, 0, 0, 1, 1, 1, 2, 2, 2, 1, 0, 1, 2, 2],
    };
    let r = miou(&pred, &gt, 3).map_err(|e| e.to_string())?;
    let expect = [3.0 / 5.0, 3.0 / 6.0, 5.0 / 6.0];
    for (c, e) in expect.iter().enumerate() {
        ensure!(r.per_class[c] == Some(*e), "class {c} IoU {:?} != {e}", r.per_class[c]);
    }
    let mean = expect.iter().sum::<f64>() / 3.0;
    ensure!((r.mean - mean).abs() <= 1e-15, "mIoU {} != {mean}", r.mean);
    let acc = macc(&[0, 1, 1, 2, 2, 0], &[0, 0, 1, 2, 2, 2]).map_err(|e| e.to_string())?;
    let want = (0.5 + 1.0 + 2.0 / 3.0) / 3.0;
    ensure!((acc - want).abs() <= 1e-15, "mAcc {acc} != {want}");

    for case in 0..100 {
        let (k, c) = (rng.int_inclusive(1, 8), rng.int_inclusive(1, 6));
        let names = (0..k).map(|i| format!("c{i}")).collect();
        let bank = ClassBank::new(names, Mat::from_vec(k, c, (0..k * c).map(|_| rng.normal() as f32).collect())).unwrap();
        let g = rand_grid(rng.int_inclusive(1, 5), rng.int_inclusive(1, 5), c, &mut rng);
        let (labels, _) = classify_pixels(&g, &bank).map_err(|e| e.to_string())?;
        for cell in 0..g.cells() {
            let v = g.tokens.row(cell);
            let mut best = (0, f64::NEG_INFINITY);
            for class in 0..k {
                let e: Vec<f64> = bank.embedding(class).iter().map(|&x| x as f64).collect();
                let s = cos64(v, &e);
                if s > best.1 {
                    best = (class, s);
                }
            }
            ensure!(labels[cell] == best.0, "case {case} cell {cell}: {} vs oracle {}", labels[cell], best.0);
        }
    }
    Ok("stitching exact, mIoU/mAcc fixtures exact, 100 argmax cases agree".into())
}

fn probe_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(11);
    for seed in 0..5 {
        let cfg = EncoderConfig {
            depth: 3,
            ..tiny_student(48, 16, 6)
        };
        let enc = Encoder::<f64>::init(cfg, seed).unwrap();
        let out = enc.encode(&rand_image(48, &mut rng)).unwrap();
        let mut inputs: Vec<(usize, Mat<f64>)> = (1..enc.cfg.depth).map(|l| (l, out.layer_tokens[l - 1].clone())).collect();
        inputs.push((enc.cfg.depth - 1, out.last_block_input.to_mat()));
        for (l, x) in inputs {
            for (i, row) in attention64(&x, &enc, l).iter().enumerate() {
                for (j, o) in row.iter().enumerate() {
                    worst = worst.max((out.attn_maps[l].at(i, j) - o).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "attention maps deviate by {worst:.3e}");

    let n = 197;
    let uniform = Mat::from_vec(n, n, vec![1.0 / n as f64; n * n]);
    let s = proxy_score_map(&uniform, DEFAULT_PROXY_FRAC);
    ensure!((s - DEFAULT_PROXY_FRAC).abs() <= 1e-3, "uniform proxy score {s}");

    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        let p = |s: &str| d.join(s).to_string_lossy().into_owned();
        let mut sink = Vec::new();
        let mut out = Vec::new();
        let steps: [Vec<String>; 3] = [
            vec!["gen-synth".into(), "--seed".into(), "3".into(), "--count".into(), "1".into(), "--px".into(), "32".into(), "--out".into(), p("data")],
            vec!["init".into(), "--out".into(), p("s.ckpt"), p("t.ckpt"), p("v.ckpt")],
            vec![
                "probe".into(),
                "--student".into(),
                p("s.ckpt"),
                "--image".into(),
                p("data/images/0000.ppm"),
                "--anchor".into(),
                "1,0".into(),
                "--layer".into(),
                "1".into(),
                "--out".into(),
                p("probe"),
            ],
        ];
        for args in steps {
            out.clear();
            let code = decoupled_distill::cli::run(std::iter::once("ddistill".to_string()).chain(args), &mut out, &mut sink);
            if code != 0 {
                return Err(format!("cli exited {code}: {}", String::from_utf8_lossy(&sink)));
            }
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(d.join("probe"))
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files.push(("stdout".into(), out));
        Ok(files)
    };
    let (a, b) = (run()?, run()?);
    ensure!(a.len() == 6, "expected 5 heatmaps and a table, got {}", a.len());
    ensure!(a == b, "probe outputs differ between identical runs");
    Ok(format!("attention max dev {worst:.1e}, uniform proxy score {s:.4}, {} PGM files byte-stable", a.len() - 1))
}

// ---------------------------------------------------------------- harness

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome, t: Duration| {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail} [{:.1}s]", t.as_secs_f64());
    };
    let simple: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "kernel oracles", kernel_oracles),
        (2, "loss fidelity", loss_fidelity),
        (3, "RoI Align oracle", roi_align_oracle),
        (4, "gradient check", gradient_check_criterion),
        (5, "decoupling isolation", decoupling_isolation),
        (6, "tied-projection equivalence", tied_projection_equivalence),
    ];
    for (n, name, f) in simple {
        let t = Instant::now();
        let r = guarded(f);
        report(n, name, r, t.elapsed());
    }

    let t = Instant::now();
    match guarded(|| Ok(toy())).and_then(|toy| guarded(|| toy_run(&toy, &toy.cfg.distill)).map(|run| (toy, run))) {
        Ok((toy, run)) => {
            let once = t.elapsed();
            let t7 = Instant::now();
            report(7, "toy distillation", guarded(|| toy_distillation(&toy, &run, once)), once + t7.elapsed());
            let t8 = Instant::now();
            report(8, "direction of effect", guarded(|| direction_of_effect(&toy, &run)), t8.elapsed());
        }
        Err(e) => {
            report(7, "toy distillation", Err(e.clone()), t.elapsed());
            report(8, "direction of effect", Err(e), t.elapsed());
        }
    }

    for (n, name, f) in [(9, "evaluation pipeline", evaluation_pipeline as fn() -> Outcome), (10, "probe suite", probe_suite)] {
        let t = Instant::now();
        let r = guarded(f);
        report(n, name, r, t.elapsed());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
