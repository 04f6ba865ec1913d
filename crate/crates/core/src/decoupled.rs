//! Decoupled replacement for the final attention block.
//!
//! From the final block's input `X` (layer-normalized with the block's own
//! `LN1`), the head produces
//!
//! * `X_context = Proj_q(X)` (or `Proj_k`, or both),
//! * `Attn_context = softmax(X_context · X_contextᵀ / √d)` over patch tokens
//!   only, per head,
//! * `X_content = VL(Proj(Attn_context · Proj_v(X)))`.
//!
//! There is no residual path and no FFN. For [`ContextType::QPlusK`] the two
//! self-similarity maps are softmaxed separately and averaged, and the
//! context feature is the mean `(Proj_q(X) + Proj_k(X)) / 2`.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{
    embed_tokens, head_average, mha_backward, mha_forward, project_vl, run_blocks, EncoderConfig, EncoderParams,
    LayerNorm, Linear, LnCache, TokenSeq,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{real, Grid, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContextType {
    #[default]
    Q,
    K,
    QPlusK,
}

impl fmt::Display for ContextType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextType::Q => "q",
            ContextType::K => "k",
            ContextType::QPlusK => "qk",
        })
    }
}

impl FromStr for ContextType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(ContextType::Q),
            "k" => Ok(ContextType::K),
            "qk" => Ok(ContextType::QPlusK),
            other => Err(Error::InvalidArgument(format!("context_type must be q, k or qk, got `{other}`"))),
        }
    }
}

/// Borrowed parameters of the decoupled head. The query/key projections are
/// optional so that a head can be assembled from partial parameter sets.
#[derive(Clone, Copy)]
pub struct HeadParams<'a, T> {
    pub ln: &'a LayerNorm<T>,
    pub q: Option<&'a Linear<T>>,
    pub k: Option<&'a Linear<T>>,
    pub v: &'a Linear<T>,
    pub o: &'a Linear<T>,
    pub vl_proj: Option<&'a Mat<T>>,
}

impl<'a, T: Real> HeadParams<'a, T> {
    /// The head built from the encoder's final block.
    pub fn from_encoder(params: &'a EncoderParams<T>) -> Self {
        let b = params.blocks.last().expect("encoder has at least one block");
        HeadParams {
            ln: &b.ln1,
            q: Some(&b.q),
            k: Some(&b.k),
            v: &b.v,
            o: &b.o,
            vl_proj: params.vl_proj.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoupledOutput<T = f32> {
    /// `X_context`, patch tokens only, width D.
    pub context: Grid<T>,
    /// `X_content` after the V-L projection, width C.
    pub content: Grid<T>,
    /// Head-averaged `HW × HW` context attention.
    pub attn_context: Mat<T>,
}

pub(crate) struct HeadTrace<T> {
    ln: LnCache<T>,
    /// LN1 output restricted to patch rows.
    hp: Mat<T>,
    q: Option<Mat<T>>,
    k: Option<Mat<T>>,
    probs_q: Vec<Mat<T>>,
    probs_k: Vec<Mat<T>>,
    v: Mat<T>,
    a: Mat<T>,
    o: Mat<T>,
    pub context: Mat<T>,
    pub content: Mat<T>,
}

impl<T: Real> HeadTrace<T> {
    fn attn_context(&self) -> Mat<T> {
        match (self.probs_q.is_empty(), self.probs_k.is_empty()) {
            (false, true) => head_average(&self.probs_q),
            (true, false) => head_average(&self.probs_k),
            _ => {
                let mut m = head_average(&self.probs_q);
                m.add_assign(&head_average(&self.probs_k));
                m.scale(real(0.5));
                m
            }
        }
    }
}

pub(crate) fn head_forward_traced<T: Real>(
    x: &Mat<T>,
    p: &HeadParams<'_, T>,
    heads: usize,
    ctype: ContextType,
) -> Result<HeadTrace<T>> {
    let need_q = matches!(ctype, ContextType::Q | ContextType::QPlusK);
    let need_k = matches!(ctype, ContextType::K | ContextType::QPlusK);
    let pq = if need_q { Some(p.q.ok_or(Error::MissingProjection("proj_q"))?) } else { None };
    let pk = if need_k { Some(p.k.ok_or(Error::MissingProjection("proj_k"))?) } else { None };

    let (h, ln) = p.ln.forward(x);
    let hp = h.slice_rows(1, h.rows);
    let v = p.v.forward(&hp);
    let q = pq.map(|l| l.forward(&hp));
    let k = pk.map(|l| l.forward(&hp));

    let mut a = Mat::zeros(hp.rows, v.cols);
    let mut probs_q = Vec::new();
    let mut probs_k = Vec::new();
    let half = real::<T>(0.5);
    for (src, probs) in [(&q, &mut probs_q), (&k, &mut probs_k)] {
        if let Some(c) = src {
            let (mut out, pr) = mha_forward(c, c, &v, heads)?;
            if q.is_some() && k.is_some() {
                out.scale(half);
            }
            a.add_assign(&out);
            *probs = pr;
        }
    }
    let o = p.o.forward(&a);
    let content = project_vl(&o, p.vl_proj);
    let context = match (&q, &k) {
        (Some(q), None) => q.clone(),
        (None, Some(k)) => k.clone(),
        (Some(q), Some(k)) => {
            let mut s = q.clone();
            s.add_assign(k);
            s.scale(half);
            s
        }
        (None, None) => unreachable!("at least one projection is selected"),
    };
    if let Some(r) = content.first_non_finite_row() {
        return Err(Error::non_finite(format!("decoupled content, token {r}")));
    }
    Ok(HeadTrace {
        ln,
        hp,
        q,
        k,
        probs_q,
        probs_k,
        v,
        a,
        o,
        context,
        content,
    })
}

/// Gradient slots for the head's parameters.
pub(crate) struct HeadGrads<'a, T> {
    pub ln: &'a mut LayerNorm<T>,
    pub q: &'a mut Linear<T>,
    pub k: &'a mut Linear<T>,
    pub v: &'a mut Linear<T>,
    pub o: &'a mut Linear<T>,
    /// `None` when the V-L projection is frozen or absent.
    pub vl_proj: Option<&'a mut Mat<T>>,
}

/// Backward through the head given gradients on `content` (`HW × C`) and on
/// `context` (`HW × D`). Returns the gradient on the full token input.
pub(crate) fn head_backward<T: Real>(
    p: &HeadParams<'_, T>,
    tr: &HeadTrace<T>,
    d_content: &Mat<T>,
    d_context: Option<&Mat<T>>,
    g: HeadGrads<'_, T>,
) -> Mat<T> {
    let d_o = match p.vl_proj {
        Some(vl) => {
            if let Some(gvl) = g.vl_proj {
                gvl.add_assign(&tr.o.matmul_tn(d_content));
            }
            d_content.matmul_nt(vl)
        }
        None => d_content.clone(),
    };
    let d_a = p.o.backward(&tr.a, &d_o, g.o);
    let both = tr.q.is_some() && tr.k.is_some();
    let mut d_a_branch = d_a.clone();
    if both {
        d_a_branch.scale(real(0.5));
    }

    let mut dv = Mat::zeros(tr.v.rows, tr.v.cols);
    let mut dhp = Mat::zeros(tr.hp.rows, tr.hp.cols);
    let branches = [(&tr.q, &tr.probs_q, p.q, &mut *g.q), (&tr.k, &tr.probs_k, p.k, &mut *g.k)];
    for (feat, probs, lin, glin) in branches {
        let (Some(c), Some(lin)) = (feat, lin) else { continue };
        let (dq, dk, dvb) = mha_backward(c, c, &tr.v, probs, &d_a_branch);
        dv.add_assign(&dvb);
        let mut dc = dq;
        dc.add_assign(&dk);
        if let Some(dctx) = d_context {
            if both {
                let mut h = dctx.clone();
                h.scale(real(0.5));
                dc.add_assign(&h);
            } else {
                dc.add_assign(dctx);
            }
        }
        dhp.add_assign(&lin.backward(&tr.hp, &dc, glin));
    }
    dhp.add_assign(&p.v.backward(&tr.hp, &dv, g.v));

    let mut dh = Mat::zeros(dhp.rows + 1, dhp.cols);
    for r in 0..dhp.rows {
        dh.row_mut(r + 1).copy_from_slice(dhp.row(r));
    }
    p.ln.backward(&tr.ln, &dh, g.ln)
}

/// Runs the decoupled head on the final block's input.
pub fn decoupled_forward<T: Real>(
    x: &TokenSeq<T>,
    params: &HeadParams<'_, T>,
    heads: usize,
    ctype: ContextType,
) -> Result<DecoupledOutput<T>> {
    let tr = head_forward_traced(&x.to_mat(), params, heads, ctype)?;
    let (h, w) = (x.grid.h, x.grid.w);
    Ok(DecoupledOutput {
        attn_context: tr.attn_context(),
        context: Grid::new(h, w, tr.context),
        content: Grid::new(h, w, tr.content),
    })
}

/// Student dense features: blocks `0..depth-1` as usual, then the
/// decoupled head in place of the final block. Returns the decoupled output.
pub fn decoupled_encode<T: Real>(
    image: &Image,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    ctype: ContextType,
) -> Result<DecoupledOutput<T>> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let x0 = embed_tokens(image, params, cfg)?;
    let traces = run_blocks(x0.clone(), params, cfg, 0..cfg.depth - 1)?;
    let x = traces.last().map_or(x0, |t| t.z.clone());
    let g = cfg.grid();
    decoupled_forward(&TokenSeq::from_mat(&x, g, g), &HeadParams::from_encoder(params), cfg.heads, ctype)
}

/// The student's dense representation used by every downstream protocol.
pub fn dense_for_inference<T: Real>(
    image: &Image,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    ctype: ContextType,
) -> Result<Grid<T>> {
    Ok(decoupled_encode(image, params, cfg, ctype)?.content)
}
