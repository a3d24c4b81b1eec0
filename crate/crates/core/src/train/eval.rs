//! Recall of detections against synthetic ground truth.

use super::data::{Object, SyntheticSample};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::lrpc::{prompt_free_detect, DotCounter, Vocabulary, SPECIALIZED};
use crate::model::{box_iou, contrast, decode_and_nms, Detection, Detector, ModelConfig};
use crate::savpe::{average_embeddings, encode_prompts, VisualPrompt};
use crate::tensor::{l2_normalize_rows, Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecallCount {
    pub matched: usize,
    pub total: usize,
}

impl RecallCount {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: RecallCount) {
        self.matched += other.matched;
        self.total += other.total;
    }
}

/// Greedy one-to-one matching in descending score order: a ground-truth
/// object counts once it is claimed by a detection of the right class with
/// IoU ≥ `iou`.
pub fn match_objects(dets: &[Detection], objects: &[Object], iou: f64) -> RecallCount {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor)));
    let mut taken = vec![false; objects.len()];
    for d in order {
        let best = objects
            .iter()
            .enumerate()
            .filter(|(i, o)| !taken[*i] && o.class_id == d.class_id)
            .map(|(i, o)| (i, box_iou(&d.bbox, &o.bbox)))
            .filter(|&(_, v)| v >= iou)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            taken[i] = true;
        }
    }
    RecallCount {
        matched: taken.iter().filter(|&&t| t).count(),
        total: objects.len(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub match_iou: f64,
    pub delta: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            score_thresh: 0.25,
            iou_thresh: 0.5,
            match_iou: 0.5,
            delta: crate::lrpc::DEFAULT_DELTA,
        }
    }
}

/// Closed-set detections: fused models use their baked-in classes, eager
/// models contrast O with `prompts` (already in prompt space).
pub fn closed_set_detect(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    image: &Tensor<f32>,
    prompts: Option<&Tensor<f32>>,
    opts: &EvalOptions,
) -> Result<Vec<Detection>> {
    let det = Detector::new(cfg.clone())?;
    let pred = det.predict(store, image)?;
    let logits = match (&pred.fused_logits, prompts) {
        (Some(l), _) => l.clone(),
        (None, Some(p)) => contrast(pred.embeddings()?, p)?,
        (None, None) => return Err(Error::InvalidArgument("eager model needs prompt embeddings".into())),
    };
    decode_and_nms(&pred, &logits, opts.score_thresh, opts.iou_thresh)
}

/// Recall with fixed prompt embeddings (text or visual) or a fused model.
pub fn evaluate_closed_set(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    prompts: Option<&Tensor<f32>>,
    data: &[SyntheticSample],
    opts: &EvalOptions,
) -> Result<RecallCount> {
    let mut count = RecallCount::default();
    for s in data {
        let dets = closed_set_detect(store, cfg, &s.image, prompts, opts)?;
        count.add(match_objects(&dets, &s.objects, opts.match_iou));
    }
    Ok(count)
}

/// Per-class visual prompt embeddings: for each class, box exemplars from
/// the first `per_class` support images containing it, encoded and averaged.
pub fn visual_class_prompts(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    support: &[SyntheticSample],
    num_classes: usize,
    per_class: usize,
) -> Result<Tensor<f32>> {
    let det = Detector::new(cfg.clone())?;
    let mut rows = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut embeds = Vec::new();
        for s in support {
            if embeds.len() == per_class {
                break;
            }
            if let Some(o) = s.objects.iter().find(|o| o.class_id == class) {
                let pyr = det.pyramid(store, &s.image)?;
                embeds.push(encode_prompts(store, cfg, &pyr, &[VisualPrompt::Box(o.bbox)])?);
            }
        }
        if embeds.is_empty() {
            return Err(Error::InvalidArgument(format!("no support exemplar for class {class}")));
        }
        rows.push(average_embeddings(&embeds)?);
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    crate::tensor::concat(&refs, 0)
}

/// Prompt-free recall: a detection is correct when its retrieved name is
/// the name of the matched object's class.
pub fn evaluate_prompt_free(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary<f32>,
    class_names: &[String],
    data: &[SyntheticSample],
    opts: &EvalOptions,
) -> Result<RecallCount> {
    let det = Detector::new(cfg.clone())?;
    let ps = l2_normalize_rows(store.get(SPECIALIZED)?, NORM_EPS as f32)?;
    let mut count = RecallCount::default();
    for s in data {
        let pred = det.predict(store, &s.image)?;
        let named = prompt_free_detect(
            &pred,
            &ps,
            vocab,
            opts.delta,
            opts.score_thresh,
            opts.iou_thresh,
            &DotCounter::new(),
        )?;
        // map names back to toy class ids; anything else cannot match
        let dets: Vec<Detection> = named
            .into_iter()
            .map(|n| {
                let mut d = n.detection;
                d.class_id = class_names.iter().position(|c| *c == n.name).unwrap_or(usize::MAX);
                d
            })
            .collect();
        count.add(match_objects(&dets, &s.objects, opts.match_iou));
    }
    Ok(count)
}
