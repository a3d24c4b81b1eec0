//! Per-sample losses of the three training stages, generic over the scalar
//! type so the same code drives f32 training and f64 gradient checks.

use super::assign::Targets;
use crate::autodiff::{bce_mean, Graph, ParamStore, Var};
use crate::error::Result;
use crate::lrpc::SPECIALIZED;
use crate::model::{backbone_pan, box_head, embedding_head, FeaturePyramid, ModelConfig};
use crate::reprta::enhance_var;
use crate::savpe::{encode_prompt_var, semantic_branch};
use crate::tensor::{Scalar, Tensor};

/// Mean binary cross-entropy with logits (stable form). Targets must be 0 or 1.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    bce_mean(logits, targets)
}

/// N×C one-hot class targets; `columns[class]` is the prompt column of a
/// class, or `None` when that class is not among the prompts.
pub fn class_targets<T: Scalar>(targets: &Targets, columns: &[Option<usize>], num_prompts: usize) -> Tensor<T> {
    let n = targets.class.len();
    let mut t = Tensor::zeros([n, num_prompts]);
    for (a, class) in targets.class.iter().enumerate() {
        if let Some(col) = class.and_then(|c| columns.get(c).copied().flatten()) {
            t.set(&[a, col], T::one());
        }
    }
    t
}

/// BCE summed over all logits and divided by the positive-anchor count.
fn classification<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: Tensor<T>, num_pos: usize) -> Result<Var> {
    let count = labels.numel();
    let mean = g.bce_with_logits(logits, labels)?;
    g.scale(
        mean,
        T::from_usize(count).unwrap() / T::from_usize(num_pos.max(1)).unwrap(),
    )
}

/// L1 over ltrb offsets of positive anchors, divided by the positive count.
fn box_l1<T: Scalar>(g: &mut Graph<T>, boxes: Var, targets: &Targets) -> Result<Var> {
    let n = targets.boxes.len();
    let goal = Tensor::from_fn([n, 4], |i| T::from_f64_lossy(targets.boxes[i / 4][i % 4]));
    let mask = Tensor::from_fn([n, 4], |i| {
        if targets.is_positive(i / 4) {
            T::one()
        } else {
            T::zero()
        }
    });
    let goal = g.constant(goal);
    let diff = g.sub(boxes, goal)?;
    let diff = g.abs(diff);
    let diff = g.mul_const(diff, mask)?;
    let total = g.sum(diff);
    g.scale(total, T::one() / T::from_usize(targets.num_positive().max(1)).unwrap())
}

/// Text stage: contrast of O with adapter-enhanced prompts plus box L1.
pub fn text_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    prompts: &Tensor<T>,
    targets: &Targets,
    columns: &[Option<usize>],
) -> Result<Var> {
    let x = g.constant(image.clone());
    let pyr = backbone_pan(g, store, cfg, x)?;
    let (o, _) = embedding_head(g, store, cfg, pyr)?;
    let p = g.constant(prompts.clone());
    let p = enhance_var(g, store, p)?;
    let logits = g.matmul_nt(o, p)?;
    let labels = class_targets(targets, columns, prompts.dim(0));
    let cls = classification(g, logits, labels, targets.num_positive())?;
    let boxes = box_head(g, store, cfg, pyr)?;
    let reg = box_l1(g, boxes, targets)?;
    g.add(cls, reg)
}

/// Visual-prompt stage: prompts encoded from `masks` on a frozen pyramid and
/// contrasted with the frozen object embeddings `o`.
#[allow(clippy::too_many_arguments)]
pub fn savpe_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid<T>,
    o: &Tensor<T>,
    masks: &[Tensor<T>],
    targets: &Targets,
    columns: &[Option<usize>],
) -> Result<Var> {
    let pyr = pyramid.to_graph(g);
    let semantic = semantic_branch(g, store, cfg, pyr)?;
    let mut rows = Vec::with_capacity(masks.len());
    for m in masks {
        rows.push(encode_prompt_var(g, store, cfg, pyr, semantic, m)?);
    }
    let prompts = g.concat(&rows, 0)?;
    let o = g.constant(o.clone());
    let logits = g.matmul_nt(o, prompts)?;
    let labels = class_targets(targets, columns, masks.len());
    classification(g, logits, labels, targets.num_positive())
}

/// Specialized stage: every object is the single positive class for the
/// normalized P_s.
pub fn specialized_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    o: &Tensor<T>,
    targets: &Targets,
) -> Result<Var> {
    let ps = g.param(store, SPECIALIZED)?;
    let ps = g.l2_normalize_rows(ps)?;
    let o = g.constant(o.clone());
    let logits = g.matmul_nt(o, ps)?;
    let n = targets.object.len();
    let labels = Tensor::from_fn([n, 1], |a| if targets.is_positive(a) { T::one() } else { T::zero() });
    g.bce_with_logits(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let one = Tensor::<f64>::ones([1]);
        let l = bce_loss(&Tensor::zeros([1]), &one).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&Tensor::full([1], 50.0), &one).unwrap() <= 1e-6);
        assert!(bce_loss(&Tensor::zeros([1]), &Tensor::full([1], 0.5)).is_err());
        assert!(bce_loss(&Tensor::<f64>::zeros([2]), &Tensor::ones([1])).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::from_fn([7, 5], |_| rng.gen_range(-8.0..8.0));
        let t = Tensor::<f64>::from_fn([7, 5], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let mut want = 0.0;
        for (&xi, &ti) in x.data().iter().zip(t.data()) {
            let p = 1.0 / (1.0 + (-xi).exp());
            want -= ti * p.ln() + (1.0 - ti) * (1.0 - p).ln();
        }
        want /= 35.0;
        assert!((bce_loss(&x, &t).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn class_targets_follow_columns() {
        let t = Targets {
            object: vec![Some(0), None, Some(1)],
            class: vec![Some(2), None, Some(0)],
            boxes: vec![[0.0; 4]; 3],
        };
        let m: Tensor<f32> = class_targets(&t, &[None, None, Some(1)], 2);
        assert_eq!(m.data(), &[0., 1., 0., 0., 0., 0.]);
    }
}
