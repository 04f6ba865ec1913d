use super::{content_loss_grad, context_loss_grad, student_input, DistillConfig, DistillMode, LossReport, Targets};
use crate::decoupled::{head_backward, head_forward_traced, HeadGrads, HeadParams, HeadTrace};
use crate::encoder::{block_backward, embed_tokens, project_vl, run_blocks, BlockTrace, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{real, Grid, Mat, Real};
use crate::region::RegionSet;

/// Which tensors of [`EncoderParams::tensors`] receive gradients.
pub fn trainable_mask(enc: &EncoderConfig, cfg: &DistillConfig) -> Vec<bool> {
    let first = enc.depth.saturating_sub(cfg.finetune_layers);
    let last = enc.depth - 1;
    EncoderParams::<f32>::zeros(enc)
        .tensors()
        .iter()
        .map(|t| is_trainable(&t.name, first, last, cfg))
        .collect()
}

fn is_trainable(name: &str, first: usize, last: usize, cfg: &DistillConfig) -> bool {
    if name == "vl_proj" {
        return cfg.train_vl_proj;
    }
    let Some(rest) = name.strip_prefix("blocks.") else { return false };
    let Some((idx, field)) = rest.split_once('.') else { return false };
    let Ok(i) = idx.parse::<usize>() else { return false };
    if i < first {
        return false;
    }
    let unused_ffn = ["ln2.", "fc1.", "fc2."].iter().any(|p| field.starts_with(p));
    !(cfg.mode == DistillMode::Decoupled && i == last && unused_ffn)
}

enum Tail<T> {
    Decoupled(HeadTrace<T>),
    Coupled(BlockTrace<T>),
}

/// Student features used by the two losses, with the intermediate values
/// needed to differentiate them.
pub struct StudentFeatures<T> {
    /// Features for the content loss (`X_content`, or the dense output in
    /// coupled mode).
    pub features: Grid<T>,
    /// Features for the context loss.
    pub context: Grid<T>,
    body: Vec<BlockTrace<T>>,
    tail: Tail<T>,
}

impl<T: Real> StudentFeatures<T> {
    pub fn compute(student: &Encoder<T>, image: &Image, cfg: &DistillConfig) -> Result<Self> {
        let enc = &student.cfg;
        enc.validate()?;
        student.params.check_shapes(enc)?;
        let p = &student.params;
        let img = student_input(enc, image);
        let x0 = embed_tokens(&img, p, enc)?;
        let body = run_blocks(x0.clone(), p, enc, 0..enc.depth - 1)?;
        let x = body.last().map_or(x0, |t| t.z.clone());
        let g = enc.grid();
        match cfg.mode {
            DistillMode::Decoupled => {
                let tr = head_forward_traced(&x, &HeadParams::from_encoder(p), enc.heads, cfg.context_type)?;
                Ok(StudentFeatures {
                    features: Grid::new(g, g, tr.content.clone()),
                    context: Grid::new(g, g, tr.context.clone()),
                    body,
                    tail: Tail::Decoupled(tr),
                })
            }
            DistillMode::Coupled => {
                let mut last = run_blocks(x, p, enc, enc.depth - 1..enc.depth)?;
                let tr = last.pop().expect("one block");
                let proj = project_vl(&tr.z, p.vl_proj.as_ref());
                let dense = Grid::new(g, g, proj.slice_rows(1, proj.rows));
                Ok(StudentFeatures {
                    features: dense.clone(),
                    context: dense,
                    body,
                    tail: Tail::Coupled(tr),
                })
            }
        }
    }
}

/// Losses for one image and the gradient of `content + λ·context` with
/// respect to every student parameter. Frozen tensors get exact zeros.
pub fn loss_and_gradients<T: Real>(
    student: &Encoder<T>,
    image: &Image,
    regions: &RegionSet,
    targets: &Targets<T>,
    cfg: &DistillConfig,
) -> Result<(LossReport, EncoderParams<T>)> {
    let enc = &student.cfg;
    let p = &student.params;
    let feats = StudentFeatures::compute(student, image, cfg)?;
    let (content, d_feat) = content_loss_grad(&feats.features, regions, &targets.teacher_cls, cfg.roi_bins, cfg.roi_samples)?;
    if feats.context.cells() != targets.vfm_corr.n {
        return Err(Error::shape("context grid", targets.vfm_corr.n, feats.context.cells()));
    }
    let (context, mut d_ctx) = context_loss_grad(&feats.context.tokens, &targets.vfm_corr.vals, cfg.context_norm);
    let lambda = real::<T>(cfg.lambda);
    d_ctx.scale(lambda);

    let mask = trainable_mask(enc, cfg);
    let first = enc.depth.saturating_sub(cfg.finetune_layers);
    let last = enc.depth - 1;
    let mut grads = EncoderParams::zeros(enc);
    let vl_trainable = cfg.train_vl_proj && p.vl_proj.is_some();

    let mut dx = match &feats.tail {
        Tail::Decoupled(tr) => {
            let head = HeadParams::from_encoder(p);
            let mut g_vl = grads.vl_proj.take();
            let gb = &mut grads.blocks[last];
            let hg = HeadGrads {
                ln: &mut gb.ln1,
                q: &mut gb.q,
                k: &mut gb.k,
                v: &mut gb.v,
                o: &mut gb.o,
                vl_proj: if vl_trainable { g_vl.as_mut() } else { None },
            };
            let dx = head_backward(&head, tr, &d_feat, Some(&d_ctx), hg);
            grads.vl_proj = g_vl;
            dx
        }
        Tail::Coupled(tr) => {
            let mut d_dense = d_feat;
            d_dense.add_assign(&d_ctx);
            let mut d_proj = Mat::zeros(tr.z.rows, d_dense.cols);
            for r in 0..d_dense.rows {
                d_proj.row_mut(r + 1).copy_from_slice(d_dense.row(r));
            }
            let dz = match &p.vl_proj {
                Some(vl) => {
                    if vl_trainable {
                        if let Some(g) = grads.vl_proj.as_mut() {
                            g.add_assign(&tr.z.matmul_tn(&d_proj));
                        }
                    }
                    d_proj.matmul_nt(vl)
                }
                None => d_proj,
            };
            if last >= first {
                block_backward(&p.blocks[last], tr, &dz, &mut grads.blocks[last])
            } else {
                dz
            }
        }
    };
    for l in (first..last).rev() {
        dx = block_backward(&p.blocks[l], &feats.body[l], &dx, &mut grads.blocks[l]);
    }

    for ((name, g), &train) in grads.tensors_mut().into_iter().zip(&mask) {
        if !train {
            g.iter_mut().for_each(|v| *v = T::zero());
        } else if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {name} at index {i}")));
        }
    }
    let content = content.to_f64().unwrap_or(f64::NAN);
    let context = context.to_f64().unwrap_or(f64::NAN);
    Ok((
        LossReport {
            content,
            context,
            total: content + cfg.lambda * context,
            step: 0,
        },
        grads,
    ))
}
