//! Minimal pre-norm ViT encoder with a [CLS] token.
//!
//! Block layout: `Y = X + Proj(Attn_qk · V)` computed from `LN1(X)`, then
//! `Z = Y + FFN(LN2(Y))`. Linear weights are stored `in × out` so that a
//! token matrix `X` (one row per token) maps as `X · W + b`.
//!
//! Besides the forward pass this module holds the backward rules for every
//! layer it uses; the distillation trainer composes them.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{real, softmax_in_place, Grid, Mat, Real, Rng};

pub const LN_EPS: f64 = 1e-5;

/// CLIP preprocessing constants.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
/// ImageNet preprocessing constants, used by the foundation-model encoder.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub vl_dim: usize,
    pub has_vl_proj: bool,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 16,
            depth: 2,
            heads: 2,
            dim: 8,
            vl_dim: 8,
            has_vl_proj: true,
            pixel_mean: CLIP_MEAN,
            pixel_std: CLIP_STD,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "depth {} and heads {} must be positive and dim {} divisible by heads",
                self.depth, self.heads, self.dim
            ));
        }
        if self.has_vl_proj && self.vl_dim == 0 {
            return bad("vl_dim must be positive when has_vl_proj is set".into());
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return bad("pixel_std entries must be positive".into());
        }
        Ok(())
    }

    /// Patch grid side length `H = W`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `1 + H·W`
    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// Total scalar parameter count, or `None` on arithmetic overflow.
    pub fn param_count(&self) -> Option<usize> {
        let d = self.dim;
        let f = d.checked_mul(4)?;
        let g = self.image_size.checked_div(self.patch_size)?;
        let tokens = g.checked_mul(g)?.checked_add(1)?;
        let pd = self.patch_size.checked_mul(self.patch_size)?.checked_mul(3)?;
        let lin = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let block = [
            d.checked_mul(4),
            lin(d, d)?.checked_mul(4),
            lin(d, f),
            lin(f, d),
        ]
        .into_iter()
        .try_fold(0usize, |acc, x| acc.checked_add(x?))?;
        let vl = if self.has_vl_proj { d.checked_mul(self.vl_dim)? } else { 0 };
        lin(pd, d)?
            .checked_add(d)?
            .checked_add(tokens.checked_mul(d)?)?
            .checked_add(block.checked_mul(self.depth)?)?
            .checked_add(vl)
    }

    /// Width of `cls_token` and dense features.
    pub fn out_dim(&self) -> usize {
        if self.has_vl_proj {
            self.vl_dim
        } else {
            self.dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Mat::zeros(fan_in, fan_out),
            b: vec![T::zero(); fan_out],
        }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: uniform_mat(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            b: vec![T::zero(); fan_out],
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        y.add_row_vec(&self.b);
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dX`.
    pub(crate) fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        grad.w.add_assign(&x.matmul_tn(dy));
        for (g, s) in grad.b.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        dy.matmul_nt(&self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: vec![T::zero(); dim],
            bias: vec![T::zero(); dim],
        }
    }

    pub(crate) fn forward(&self, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let n = real::<T>(x.cols as f64);
        let eps = real::<T>(LN_EPS);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..x.cols {
                let h = (row[c] - mean) * s;
                *xhat.at_mut(r, c) = h;
                *y.at_mut(r, c) = h * self.gain[c] + self.bias[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub(crate) fn backward(&self, cache: &LnCache<T>, dy: &Mat<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let n = real::<T>(dy.cols as f64);
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for c in 0..dy.cols {
                grad.gain[c] += dyr[c] * xh[c];
                grad.bias[c] += dyr[c];
                let d = dyr[c] * self.gain[c];
                mean_d += d;
                mean_dx += d * xh[c];
            }
            mean_d /= n;
            mean_dx /= n;
            let s = cache.rstd[r];
            for c in 0..dy.cols {
                let d = dyr[c] * self.gain[c];
                *dx.at_mut(r, c) = s * (d - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    /// Attention output projection.
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Block<T> {
    fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        Block {
            ln1: LayerNorm::identity(d),
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            ln2: LayerNorm::identity(d),
            fc1: Linear::init(d, f, rng),
            fc2: Linear::init(f, d, rng),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        Block {
            ln1: LayerNorm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, f),
            fc2: Linear::zeros(f, d),
        }
    }
}

/// All parameters of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub patch: Linear<T>,
    pub cls: Vec<T>,
    /// `(1 + H·W) × D` positional terms, row 0 belongs to [CLS].
    pub pos: Mat<T>,
    pub blocks: Vec<Block<T>>,
    /// `D × C`, no bias.
    pub vl_proj: Option<Mat<T>>,
}

/// One named parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Real> EncoderParams<T> {
    /// Seeded uniform init scaled by `1/√fan_in`; layer norms start at identity.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let d = cfg.dim;
        let patch = Linear::init(cfg.patch_dim(), d, &mut rng);
        let scale = 1.0 / (d as f64).sqrt();
        let cls = (0..d).map(|_| real(rng.uniform(-scale, scale))).collect();
        let pos = uniform_mat(cfg.tokens(), d, scale, &mut rng);
        let blocks = (0..cfg.depth).map(|_| Block::init(cfg, &mut rng)).collect();
        let vl_proj = cfg
            .has_vl_proj
            .then(|| uniform_mat(d, cfg.vl_dim, scale, &mut rng));
        EncoderParams {
            patch,
            cls,
            pos,
            blocks,
            vl_proj,
        }
    }

    /// Zero tensors with the shapes `cfg` implies; used for gradient sets.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams {
            patch: Linear::zeros(cfg.patch_dim(), cfg.dim),
            cls: vec![T::zero(); cfg.dim],
            pos: Mat::zeros(cfg.tokens(), cfg.dim),
            blocks: (0..cfg.depth).map(|_| Block::zeros(cfg)).collect(),
            vl_proj: cfg.has_vl_proj.then(|| Mat::zeros(cfg.dim, cfg.vl_dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.1.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = EncoderParams::<T>::zeros(cfg);
        let a = self.tensors();
        let b = reference.tensors();
        if a.len() != b.len() {
            return Err(Error::shape("parameter set", format!("{} tensors", b.len()), a.len()));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(Error::shape(
                    y.name.clone(),
                    format!("{:?}", y.shape),
                    format!("{} {:?}", x.name, x.shape),
                ));
            }
        }
        Ok(())
    }

    /// Every tensor in a fixed order, with its name and shape.
    pub fn tensors<'a>(&'a self) -> Vec<TensorRef<'a, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &'a [T]| {
            out.push(TensorRef { name, shape, data });
        };
        // Order must match tensors_mut.
        push("patch.w".into(), vec![self.patch.w.rows, self.patch.w.cols], &self.patch.w.data);
        push("patch.b".into(), vec![self.patch.b.len()], &self.patch.b);
        push("cls".into(), vec![self.cls.len()], &self.cls);
        push("pos".into(), vec![self.pos.rows, self.pos.cols], &self.pos.data);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            push(format!("{p}.ln1.gain"), vec![b.ln1.gain.len()], &b.ln1.gain);
            push(format!("{p}.ln1.bias"), vec![b.ln1.bias.len()], &b.ln1.bias);
            for (n, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                push(format!("{p}.{n}.w"), vec![l.w.rows, l.w.cols], &l.w.data);
                push(format!("{p}.{n}.b"), vec![l.b.len()], &l.b);
            }
            push(format!("{p}.ln2.gain"), vec![b.ln2.gain.len()], &b.ln2.gain);
            push(format!("{p}.ln2.bias"), vec![b.ln2.bias.len()], &b.ln2.bias);
            for (n, l) in [("fc1", &b.fc1), ("fc2", &b.fc2)] {
                push(format!("{p}.{n}.w"), vec![l.w.rows, l.w.cols], &l.w.data);
                push(format!("{p}.{n}.b"), vec![l.b.len()], &l.b);
            }
        }
        if let Some(vl) = &self.vl_proj {
            push("vl_proj".into(), vec![vl.rows, vl.cols], &vl.data);
        }
        out
    }

    /// Mutable view of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
        out.push(("patch.w".into(), &mut self.patch.w.data));
        out.push(("patch.b".into(), &mut self.patch.b));
        out.push(("cls".into(), &mut self.cls));
        out.push(("pos".into(), &mut self.pos.data));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &mut b.ln1.bias));
            for (n, l) in [("q", &mut b.q), ("k", &mut b.k), ("v", &mut b.v), ("o", &mut b.o)] {
                out.push((format!("{p}.{n}.w"), &mut l.w.data));
                out.push((format!("{p}.{n}.b"), &mut l.b));
            }
            out.push((format!("{p}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &mut b.ln2.bias));
            for (n, l) in [("fc1", &mut b.fc1), ("fc2", &mut b.fc2)] {
                out.push((format!("{p}.{n}.w"), &mut l.w.data));
                out.push((format!("{p}.{n}.b"), &mut l.b));
            }
        }
        if let Some(vl) = &mut self.vl_proj {
            out.push(("vl_proj".into(), &mut vl.data));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let lin = |l: &Linear<T>| Linear {
            w: l.w.cast(),
            b: cast_vec(&l.b),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gain: cast_vec(&l.gain),
            bias: cast_vec(&l.bias),
        };
        EncoderParams {
            patch: lin(&self.patch),
            cls: cast_vec(&self.cls),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: ln(&b.ln1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            vl_proj: self.vl_proj.as_ref().map(Mat::cast),
        }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| real::<U>(x.to_f64().unwrap_or(f64::NAN))).collect()
}

fn uniform_mat<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Mat<T> {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| real(rng.uniform(-scale, scale))).collect(),
    )
}

/// An encoder's configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    pub cfg: EncoderConfig,
    pub params: EncoderParams<T>,
}

impl<T: Real> Encoder<T> {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = EncoderParams::init(&cfg, seed);
        Ok(Encoder { cfg, params })
    }

    pub fn new(cfg: EncoderConfig, params: EncoderParams<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Encoder { cfg, params })
    }

    pub fn encode(&self, image: &Image) -> Result<EncodeOutput<T>> {
        encode(image, &self.params, &self.cfg)
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}

/// One [CLS] embedding plus an `H×W` grid of patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T = f32> {
    pub cls: Vec<T>,
    pub grid: Grid<T>,
}

impl<T: Real> TokenSeq<T> {
    /// Splits an `(1 + H·W) × D` token matrix.
    pub fn from_mat(m: &Mat<T>, h: usize, w: usize) -> Self {
        assert_eq!(m.rows, 1 + h * w);
        TokenSeq {
            cls: m.row(0).to_vec(),
            grid: Grid::new(h, w, m.slice_rows(1, m.rows)),
        }
    }

    pub fn to_mat(&self) -> Mat<T> {
        let d = self.cls.len();
        let mut data = Vec::with_capacity((1 + self.grid.cells()) * d);
        data.extend_from_slice(&self.cls);
        data.extend_from_slice(&self.grid.tokens.data);
        Mat::from_vec(1 + self.grid.cells(), d, data)
    }
}

/// Everything one encoder pass exposes to the rest of the crate.
#[derive(Clone, Debug)]
pub struct EncodeOutput<T = f32> {
    pub cls_token: Vec<T>,
    pub dense: Grid<T>,
    /// Head-averaged post-softmax attention, one `(1+HW)×(1+HW)` map per layer.
    pub attn_maps: Vec<Mat<T>>,
    /// Output tokens of every block, before the V-L projection.
    pub layer_tokens: Vec<Mat<T>>,
    pub last_block_input: TokenSeq<T>,
    pub last_qkv: (Mat<T>, Mat<T>, Mat<T>),
}

/// Flattens an image into normalized patch vectors, one row per patch,
/// laid out `(py, px, channel)`.
pub(crate) fn image_patches<T: Real>(image: &Image, cfg: &EncoderConfig) -> Result<Mat<T>> {
    if image.height != cfg.image_size || image.width != cfg.image_size {
        return Err(Error::shape(
            "encoder input image",
            format!("{0}x{0}", cfg.image_size),
            format!("{}x{}", image.height, image.width),
        ));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut m = Mat::zeros(g * g, cfg.patch_dim());
    for gi in 0..g {
        for gj in 0..g {
            let row = m.row_mut(gi * g + gj);
            let mut o = 0;
            for py in 0..p {
                for px in 0..p {
                    let rgb = image.pixel(gi * p + py, gj * p + px);
                    for c in 0..3 {
                        row[o] = real(((rgb[c] - cfg.pixel_mean[c]) / cfg.pixel_std[c]) as f64);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Patch embedding plus [CLS] and positional terms, as a token matrix.
pub(crate) fn embed_tokens<T: Real>(image: &Image, params: &EncoderParams<T>, cfg: &EncoderConfig) -> Result<Mat<T>> {
    let patches = image_patches(image, cfg)?;
    let emb = params.patch.forward(&patches);
    let mut x = Mat::zeros(cfg.tokens(), cfg.dim);
    for (c, v) in x.row_mut(0).iter_mut().enumerate() {
        *v = params.cls[c] + params.pos.at(0, c);
    }
    for r in 0..emb.rows {
        for c in 0..cfg.dim {
            *x.at_mut(r + 1, c) = emb.at(r, c) + params.pos.at(r + 1, c);
        }
    }
    Ok(x)
}

pub fn patch_embed<T: Real>(image: &Image, params: &EncoderParams<T>, cfg: &EncoderConfig) -> Result<TokenSeq<T>> {
    let x = embed_tokens(image, params, cfg)?;
    Ok(TokenSeq::from_mat(&x, cfg.grid(), cfg.grid()))
}

/// Multi-head scaled dot-product attention. Returns the concatenated head
/// outputs and the per-head probability matrices.
pub(crate) fn mha_forward<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize) -> Result<(Mat<T>, Vec<Mat<T>>)> {
    let hd = q.cols / heads;
    let scale = T::one() / real::<T>(hd as f64).sqrt();
    let mut out = Mat::zeros(q.rows, v.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * hd, (h + 1) * hd);
        let kh = k.slice_cols(h * hd, (h + 1) * hd);
        let vh = v.slice_cols(h * hd, (h + 1) * hd);
        let mut s = qh.matmul_nt(&kh);
        if let Some(r) = s.first_non_finite_row() {
            return Err(Error::non_finite(format!("attention logits, head {h}, row {r}")));
        }
        for r in 0..s.rows {
            softmax_in_place(s.row_mut(r), scale);
        }
        out.add_cols_from(h * hd, &s.matmul(&vh));
        probs.push(s);
    }
    Ok((out, probs))
}

/// Backward of [`mha_forward`]: returns `(dQ, dK, dV)`.
pub(crate) fn mha_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    probs: &[Mat<T>],
    dout: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let heads = probs.len();
    let hd = q.cols / heads;
    let scale = T::one() / real::<T>(hd as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    for (h, p) in probs.iter().enumerate() {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = q.slice_cols(a, b);
        let kh = k.slice_cols(a, b);
        let vh = v.slice_cols(a, b);
        let doh = dout.slice_cols(a, b);
        dv.add_cols_from(a, &p.matmul_tn(&doh));
        let dp = doh.matmul_nt(&vh);
        let mut ds = Mat::zeros(p.rows, p.cols);
        for r in 0..p.rows {
            let pr = p.row(r);
            let dpr = dp.row(r);
            let inner = pr.iter().zip(dpr).fold(T::zero(), |acc, (x, y)| acc + *x * *y);
            for c in 0..p.cols {
                *ds.at_mut(r, c) = pr[c] * (dpr[c] - inner) * scale;
            }
        }
        dq.add_cols_from(a, &ds.matmul(&kh));
        dk.add_cols_from(a, &ds.matmul_tn(&qh));
    }
    (dq, dk, dv)
}

pub(crate) fn head_average<T: Real>(probs: &[Mat<T>]) -> Mat<T> {
    let mut avg = probs[0].clone();
    for p in &probs[1..] {
        avg.add_assign(p);
    }
    avg.scale(T::one() / real::<T>(probs.len() as f64));
    avg
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_A);
    let half = real::<T>(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_A);
    let half = real::<T>(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + real::<T>(3.0) * a * u * u)
}

/// Intermediate values of one standard block, kept for the backward pass.
pub(crate) struct BlockTrace<T> {
    pub x: Mat<T>,
    pub ln1: LnCache<T>,
    pub h1: Mat<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    pub probs: Vec<Mat<T>>,
    pub a: Mat<T>,
    pub ln2: LnCache<T>,
    pub h2: Mat<T>,
    pub u: Mat<T>,
    pub g: Mat<T>,
    pub z: Mat<T>,
}

pub(crate) fn block_forward_traced<T: Real>(x: &Mat<T>, p: &Block<T>, heads: usize, layer: usize) -> Result<BlockTrace<T>> {
    let (h1, ln1) = p.ln1.forward(x);
    let q = p.q.forward(&h1);
    let k = p.k.forward(&h1);
    let v = p.v.forward(&h1);
    let (a, probs) = mha_forward(&q, &k, &v, heads).map_err(|e| at_layer(e, layer))?;
    let mut y = p.o.forward(&a);
    y.add_assign(x);
    let (h2, ln2) = p.ln2.forward(&y);
    let u = p.fc1.forward(&h2);
    let mut g = u.clone();
    g.data.iter_mut().for_each(|v| *v = gelu(*v));
    let mut z = p.fc2.forward(&g);
    z.add_assign(&y);
    if let Some(r) = z.first_non_finite_row() {
        return Err(Error::non_finite(format!("block {layer} output, token {r}")));
    }
    Ok(BlockTrace {
        x: x.clone(),
        ln1,
        h1,
        q,
        k,
        v,
        probs,
        a,
        ln2,
        h2,
        u,
        g,
        z,
    })
}

fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::non_finite(format!("block {layer}: {context}")),
        other => other,
    }
}

/// Backward through one standard block. Accumulates parameter gradients
/// into `grad` and returns `dX`.
pub(crate) fn block_backward<T: Real>(p: &Block<T>, tr: &BlockTrace<T>, dz: &Mat<T>, grad: &mut Block<T>) -> Mat<T> {
    // Z = Y + fc2(gelu(fc1(LN2(Y))))
    let dg = p.fc2.backward(&tr.g, dz, &mut grad.fc2);
    let mut du = dg;
    for (d, u) in du.data.iter_mut().zip(&tr.u.data) {
        *d *= gelu_grad(*u);
    }
    let dh2 = p.fc1.backward(&tr.h2, &du, &mut grad.fc1);
    let mut dy = p.ln2.backward(&tr.ln2, &dh2, &mut grad.ln2);
    dy.add_assign(dz);
    // Y = X + o(attn(q, k, v)) over LN1(X)
    let da = p.o.backward(&tr.a, &dy, &mut grad.o);
    let (dq, dk, dv) = mha_backward(&tr.q, &tr.k, &tr.v, &tr.probs, &da);
    let mut dh1 = p.q.backward(&tr.h1, &dq, &mut grad.q);
    dh1.add_assign(&p.k.backward(&tr.h1, &dk, &mut grad.k));
    dh1.add_assign(&p.v.backward(&tr.h1, &dv, &mut grad.v));
    let mut dx = p.ln1.backward(&tr.ln1, &dh1, &mut grad.ln1);
    dx.add_assign(&dy);
    dx
}

/// One standard block on a token sequence. Returns the output tokens and
/// the head-averaged attention map.
pub fn block_forward<T: Real>(x: &TokenSeq<T>, p: &Block<T>, heads: usize) -> Result<(TokenSeq<T>, Mat<T>)> {
    let tr = block_forward_traced(&x.to_mat(), p, heads, 0)?;
    let attn = head_average(&tr.probs);
    Ok((TokenSeq::from_mat(&tr.z, x.grid.h, x.grid.w), attn))
}

/// Runs the blocks in `range` starting from token matrix `x`.
pub(crate) fn run_blocks<T: Real>(
    mut x: Mat<T>,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    range: std::ops::Range<usize>,
) -> Result<Vec<BlockTrace<T>>> {
    let mut traces = Vec::with_capacity(range.len());
    for l in range {
        let tr = block_forward_traced(&x, &params.blocks[l], cfg.heads, l)?;
        x = tr.z.clone();
        traces.push(tr);
    }
    Ok(traces)
}

/// Applies the V-L projection (when present) to the rows of `m`.
pub(crate) fn project_vl<T: Real>(m: &Mat<T>, vl: Option<&Mat<T>>) -> Mat<T> {
    match vl {
        Some(p) => m.matmul(p),
        None => m.clone(),
    }
}

/// Full encoder pass.
pub fn encode<T: Real>(image: &Image, params: &EncoderParams<T>, cfg: &EncoderConfig) -> Result<EncodeOutput<T>> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let x0 = embed_tokens(image, params, cfg)?;
    let traces = run_blocks(x0, params, cfg, 0..cfg.depth)?;
    let last = traces.last().expect("depth >= 1");
    let z = &last.z;
    let g = cfg.grid();
    let projected = project_vl(z, params.vl_proj.as_ref());
    Ok(EncodeOutput {
        cls_token: projected.row(0).to_vec(),
        dense: Grid::new(g, g, projected.slice_rows(1, projected.rows)),
        attn_maps: traces.iter().map(|t| head_average(&t.probs)).collect(),
        layer_tokens: traces.iter().map(|t| t.z.clone()).collect(),
        last_block_input: TokenSeq::from_mat(&last.x, g, g),
        last_qkv: (last.q.clone(), last.k.clone(), last.v.clone()),
    })
}
