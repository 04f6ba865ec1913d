//! Synthetic segmentation data: flat-colored shapes on a noisy background,
//! with per-pixel labels, annotated boxes, instance masks and a class bank.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! images/NNNN.ppm      RGB image
//! labels/NNNN.pgm      class index per pixel (0 = background)
//! masks/NNNN_K.pgm     255 inside the K-th region of image NNNN
//! regions.txt          image_id x0 y0 x1 y1 class_id
//! bank.txt             class bank
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::regions::{self, AnnotatedRegion};
use super::{bank, load_pgm, load_ppm, read_text, save_pgm, save_ppm, write_bytes};
use crate::error::{Error, Result};
use crate::eval::ClassBank;
use crate::image::{GrayImage, Image};
use crate::numerics::Rng;
use crate::region::RegionBox;

const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 64;
const NOISE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

/// A filled shape inside the axis-aligned pixel box `[x0, x1) × [y0, y1)`.
/// Circles are inscribed in the box; triangles have their base on the
/// bottom edge and apex at the top center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Shape {
    /// Whether the pixel whose center is `(x + 0.5, y + 0.5)` is inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (x0, y0, x1, y1) = (self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64);
        if px < x0 || px >= x1 || py < y0 || py >= y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Circle => {
                let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let r = (x1 - x0).min(y1 - y0) / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // Half-width grows linearly from 0 at the apex to the full
                // half-base at the bottom edge.
                let half = (x1 - x0) / 2.0 * (py - y0) / (y1 - y0);
                (px - (x0 + x1) / 2.0).abs() <= half
            }
        }
    }

    /// A pixel box well inside the shape: the shape itself for rectangles,
    /// the inscribed square for circles, and the central rectangle spanning
    /// the lower half for triangles.
    pub fn inner_box(&self) -> (usize, usize, usize, usize) {
        let (w, h) = ((self.x1 - self.x0) as f64, (self.y1 - self.y0) as f64);
        let (cx, cy) = ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0);
        let (bx0, by0, bx1, by1) = match self.kind {
            ShapeKind::Rect => return (self.x0, self.y0, self.x1, self.y1),
            ShapeKind::Circle => {
                let half = w.min(h) / 2.0 / std::f64::consts::SQRT_2;
                (cx - half, cy - half, cx + half, cy + half)
            }
            ShapeKind::Triangle => (cx - w / 4.0, self.y0 as f64 + h / 2.0, cx + w / 4.0, self.y1 as f64),
        };
        (bx0.ceil() as usize, by0.ceil() as usize, bx1.floor() as usize, by1.floor() as usize)
    }
}

/// Base color of a class, independent of the dataset seed.
pub fn class_color(class: u8) -> [f32; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let mut rng = Rng::with_stream(0x5EED_C010, class as u64);
    [0.1 + 0.8 * rng.unit(), 0.1 + 0.8 * rng.unit(), 0.1 + 0.8 * rng.unit()].map(|v| v as f32)
}

/// Paints `shapes` over a noisy background.
pub fn rasterize(px: usize, shapes: &[Shape], rng: &mut Rng) -> (Image, GrayImage) {
    let mut labels = GrayImage::filled(px, px, 0);
    for s in shapes {
        for y in s.y0..s.y1.min(px) {
            for x in s.x0..s.x1.min(px) {
                if s.contains(y, x) {
                    labels.set(y, x, s.class);
                }
            }
        }
    }
    let image = Image::from_fn(px, px, |y, x| {
        let base = class_color(labels.get(y, x));
        base.map(|c| (c as f64 + rng.uniform(-NOISE, NOISE)).clamp(0.0, 1.0) as f32)
    });
    (image, labels)
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    // One pixel of clearance keeps shapes and their boxes disjoint.
    a.x0 < b.x1 + 1 && b.x0 < a.x1 + 1 && a.y0 < b.y1 + 1 && b.y0 < a.y1 + 1
}

/// Draws 1–4 non-overlapping shapes with classes in `1..classes`.
pub fn sample_shapes(rng: &mut Rng, px: usize, classes: usize) -> Vec<Shape> {
    let want = rng.int_inclusive(1, MAX_SHAPES);
    let lo = (px / 5).max(4).min(px);
    let hi = (px / 2).max(lo);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut tries = 0;
    while shapes.len() < want && tries < PLACEMENT_TRIES {
        tries += 1;
        let kind = [ShapeKind::Rect, ShapeKind::Circle, ShapeKind::Triangle][rng.index(3)];
        let w = rng.int_inclusive(lo, hi);
        let h = if kind == ShapeKind::Circle { w } else { rng.int_inclusive(lo, hi) };
        let x0 = rng.int_inclusive(0, px - w);
        let y0 = rng.int_inclusive(0, px - h);
        let s = Shape {
            kind,
            class: rng.int_inclusive(1, classes - 1) as u8,
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        if !shapes.iter().any(|o| overlaps(o, &s)) {
            shapes.push(s);
        }
    }
    if shapes.len() < want {
        log::info!("placed {} of {want} shapes after {PLACEMENT_TRIES} tries", shapes.len());
    }
    shapes
}

pub struct SynthParams {
    pub seed: u64,
    pub count: usize,
    pub px: usize,
    pub classes: usize,
    pub bank_dim: usize,
}

fn image_name(i: usize) -> String {
    format!("{i:04}")
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{}.ppm", image_name(i)))
}

pub fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{}.pgm", image_name(i)))
}

pub fn mask_path(dir: &Path, i: usize, k: usize) -> PathBuf {
    dir.join("masks").join(format!("{}_{k}.pgm", image_name(i)))
}

/// Writes a synthetic dataset to `dir`. Identical parameters produce
/// byte-identical directories.
pub fn generate(dir: &Path, params: &SynthParams) -> Result<()> {
    if params.classes < 2 || params.classes > 255 {
        return Err(Error::InvalidArgument(format!("classes must be in 2..=255, got {}", params.classes)));
    }
    if params.px < 8 || params.count == 0 || params.bank_dim == 0 {
        return Err(Error::InvalidArgument("need px >= 8, count >= 1 and bank_dim >= 1".into()));
    }
    let mut rng = Rng::new(params.seed);
    let mut all_regions = Vec::new();
    for i in 0..params.count {
        let shapes = sample_shapes(&mut rng, params.px, params.classes);
        let (image, labels) = rasterize(params.px, &shapes, &mut rng);
        save_ppm(&image_path(dir, i), &image)?;
        save_pgm(&label_path(dir, i), &labels)?;
        let mut k = 0;
        for s in &shapes {
            let (bx0, by0, bx1, by1) = s.inner_box();
            if bx1 <= bx0 || by1 <= by0 {
                log::info!("image {i}: shape too small for a region box; no annotation");
                continue;
            }
            let p = params.px as f64;
            all_regions.push(AnnotatedRegion {
                image: i,
                bx: RegionBox::new(bx0 as f64 / p, by0 as f64 / p, bx1 as f64 / p, by1 as f64 / p)?,
                class: s.class as usize,
            });
            let mut mask = GrayImage::filled(params.px, params.px, 0);
            for y in s.y0..s.y1 {
                for x in s.x0..s.x1 {
                    if s.contains(y, x) {
                        mask.set(y, x, 255);
                    }
                }
            }
            save_pgm(&mask_path(dir, i, k), &mask)?;
            k += 1;
        }
    }
    write_bytes(&dir.join("regions.txt"), regions::format(&all_regions).as_bytes())?;
    let names = (0..params.classes)
        .map(|c| if c == 0 { "background".to_string() } else { format!("class{c}") })
        .collect();
    let b = bank::random(names, params.bank_dim, params.seed ^ 0xBA4C)?;
    write_bytes(&dir.join("bank.txt"), bank::format(&b).as_bytes())
}

/// Number of consecutive `images/NNNN.ppm` files starting at 0.
pub fn image_count(dir: &Path) -> Result<usize> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let n = entries.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "ppm")).count();
    for i in 0..n {
        let p = image_path(dir, i);
        if !p.exists() {
            return Err(Error::Format {
                what: "dataset",
                msg: format!("{} is missing; images must be numbered 0000..{:04}", p.display(), n - 1),
            });
        }
    }
    Ok(n)
}

pub fn load_images(dir: &Path) -> Result<Vec<Image>> {
    (0..image_count(dir)?).map(|i| load_ppm(&image_path(dir, i))).collect()
}

pub fn load_labels(dir: &Path, count: usize) -> Result<Vec<GrayImage>> {
    (0..count).map(|i| load_pgm(&label_path(dir, i))).collect()
}

pub fn load_regions(dir: &Path) -> Result<Vec<AnnotatedRegion>> {
    regions::parse(&read_text(&dir.join("regions.txt"))?)
}

pub fn load_bank(path: &Path) -> Result<ClassBank> {
    bank::parse(&read_text(path)?)
}
