//! Semantic-activated visual prompt encoder.
//!
//! A prompt-agnostic semantic map S (D×H3×W3) is pooled with prompt-aware
//! weights 𝒲 (A×H3×W3) that are softmax-normalized inside the prompt
//! region. Channel group `i` of S is pooled with weight map `i`, and the
//! concatenated groups are L2-normalized into one prompt embedding.

use crate::autodiff::{self, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{conv_act, conv_linear};
use crate::model::{FeaturePyramid, ModelConfig, LEVELS, STRIDES};
use crate::tensor::{self, l2_normalize_rows, s, Scalar, Tensor, NORM_EPS};

/// A visual cue: a pixel box or a full-resolution binary mask.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualPrompt<T: Scalar> {
    /// x0, y0, x1, y1 in image pixels.
    Box([f64; 4]),
    Mask(Tensor<T>),
}

/// Rasterizes a prompt to an `image_size`² binary mask.
///
/// A box covers pixel columns `round(x0) ≤ x < round(x1)` and likewise for
/// rows, so the mask area equals the rounded box area.
pub fn rasterize<T: Scalar>(prompt: &VisualPrompt<T>, image_size: usize) -> Result<Tensor<T>> {
    match prompt {
        VisualPrompt::Box(b) => {
            let lim = image_size as f64;
            let [x0, y0, x1, y1] = *b;
            if b.iter().any(|v| !v.is_finite()) || x0 < 0.0 || y0 < 0.0 || x1 > lim || y1 > lim {
                return Err(Error::InvalidArgument(format!(
                    "box {b:?} is outside the {image_size}×{image_size} image"
                )));
            }
            if x1 <= x0 || y1 <= y0 {
                return Err(Error::InvalidArgument(format!("box {b:?} has no area")));
            }
            let (c0, c1) = (x0.round() as usize, x1.round() as usize);
            let (r0, r1) = (y0.round() as usize, y1.round() as usize);
            if c1 <= c0 || r1 <= r0 {
                return Err(Error::EmptyRegion("rasterize"));
            }
            Ok(Tensor::from_fn([image_size, image_size], |i| {
                let (y, x) = (i / image_size, i % image_size);
                if (r0..r1).contains(&y) && (c0..c1).contains(&x) {
                    T::one()
                } else {
                    T::zero()
                }
            }))
        }
        VisualPrompt::Mask(m) => {
            if m.shape() != [image_size, image_size] {
                return Err(Error::shape(
                    "rasterize",
                    format!("mask {:?} for image size {image_size}", m.shape()),
                ));
            }
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::InvalidArgument("mask must be binary".into()));
            }
            if m.data().iter().all(|&v| v == T::zero()) {
                return Err(Error::EmptyRegion("rasterize"));
            }
            Ok(m.clone())
        }
    }
}

/// Downsamples a full-resolution mask to P3 and marks cells with any overlap.
/// Returns the pooled mask and the binary region.
pub fn downsample_region<T: Scalar>(mask: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let pooled = tensor::avg_downsample(mask, STRIDES[0])?;
    let region = pooled.map(|v| if v > T::zero() { T::one() } else { T::zero() });
    if region.data().iter().all(|&v| v == T::zero()) {
        return Err(Error::EmptyRegion("activation_branch"));
    }
    Ok((pooled, region))
}

/// S = proj(concat(up(conv(conv(P_l))))) over the three levels: D×H3×W3.
pub fn semantic_branch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (idx, level) in LEVELS.iter().enumerate() {
        if g.shape(pyr[idx])[0] != cfg.pan_widths[idx] {
            return Err(Error::shape(
                "semantic_branch",
                format!("level {level} {:?}", g.shape(pyr[idx])),
            ));
        }
        let h = conv_act(g, store, &format!("savpe.sem.{level}.conv1"), pyr[idx], 1)?;
        let h = conv_act(g, store, &format!("savpe.sem.{level}.conv2"), h, 1)?;
        parts.push(g.upsample(h, 1 << idx)?);
    }
    let cat = g.concat(&parts, 0)?;
    conv_linear(g, store, "savpe.sem.proj", cat, true)
}

/// 𝒲 = masked_softmax(fuse(concat(F_V, F_I)), region): A×H3×W3.
///
/// F_V is a conv over the pooled mask; F_I sums per-level convs upsampled
/// to P3. `mask` is the full-resolution binary prompt mask.
pub fn activation_branch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
    mask: &Tensor<T>,
) -> Result<Var> {
    if mask.shape() != [cfg.image_size, cfg.image_size] {
        return Err(Error::shape("activation_branch", format!("mask {:?}", mask.shape())));
    }
    let (pooled, region) = downsample_region(mask)?;
    let grid = pooled.dim(0);
    let m = g.constant(pooled.reshape([1, grid, grid])?);
    let fv = conv_act(g, store, "savpe.act.mask", m, 1)?;
    let mut fi: Option<Var> = None;
    for (idx, level) in LEVELS.iter().enumerate() {
        let h = conv_act(g, store, &format!("savpe.act.{level}"), pyr[idx], 1)?;
        let h = g.upsample(h, 1 << idx)?;
        fi = Some(match fi {
            None => h,
            Some(acc) => g.add(acc, h)?,
        });
    }
    let cat = g.concat(&[fv, fi.expect("three levels")], 0)?;
    let logits = conv_linear(g, store, "savpe.act.fuse", cat, true)?;
    g.masked_softmax(logits, &region)
}

/// normalize(Concat(G_1..G_A)) on a tape.
pub fn aggregate_var<T: Scalar>(g: &mut Graph<T>, semantic: Var, weights: Var) -> Result<Var> {
    let pooled = g.grouped_aggregate(semantic, weights)?;
    g.l2_normalize_rows(pooled)
}

/// Grouped weighted pooling of S by 𝒲, L2-normalized: 1×D.
pub fn aggregate<T: Scalar>(semantic: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    l2_normalize_rows(&autodiff::grouped_aggregate(semantic, weights)?, s(NORM_EPS))
}

/// Uniform average of S over the prompt region, L2-normalized: 1×D.
pub fn mask_pool_baseline<T: Scalar>(semantic: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, region) = downsample_region(mask)?;
    if semantic.rank() != 3 || semantic.shape()[1..] != *region.shape() {
        return Err(Error::shape(
            "mask_pool_baseline",
            format!("S {:?}, region {:?}", semantic.shape(), region.shape()),
        ));
    }
    let count = region.data().iter().filter(|&&v| v > T::zero()).count();
    let uniform = region.map(|v| v / T::from_usize(count).unwrap());
    let weights = uniform.reshape([1, region.dim(0), region.dim(1)])?;
    aggregate(semantic, &weights)
}

/// Full encoder for one prompt mask on a tape, given S already recorded.
pub fn encode_prompt_var<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
    semantic: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    let weights = activation_branch(g, store, cfg, pyr, mask)?;
    aggregate_var(g, semantic, weights)
}

/// One embedding per prompt (C×D), sharing a single semantic map.
pub fn encode_prompts<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid<T>,
    prompts: &[VisualPrompt<T>],
) -> Result<Tensor<T>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no visual prompts".into()));
    }
    let mut g = Graph::inference();
    let pyr = pyramid.to_graph(&mut g);
    let semantic = semantic_branch(&mut g, store, cfg, pyr)?;
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        let mask = rasterize(p, cfg.image_size)?;
        rows.push(encode_prompt_var(&mut g, store, cfg, pyr, semantic, &mask)?);
    }
    let all = g.concat(&rows, 0)?;
    Ok(g.value(all).clone())
}

/// Arithmetic mean of 1×D embeddings, re-normalized.
pub fn average_embeddings<T: Scalar>(embeddings: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut acc = first.clone();
    for e in &embeddings[1..] {
        acc = tensor::add(&acc, e)?;
    }
    let mean = tensor::scale(&acc, T::one() / T::from_usize(embeddings.len()).unwrap())?;
    l2_normalize_rows(&mean, s(NORM_EPS))
}
