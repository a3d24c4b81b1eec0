use std::cmp::Ordering;

use super::Predictions;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, sigmoid_scalar, Scalar, Tensor};

/// Region-prompt contrast: `O · 𝒫ᵀ` (N×C logits).
pub fn contrast<T: Scalar>(embeddings: &Tensor<T>, prompts: &Tensor<T>) -> Result<Tensor<T>> {
    if embeddings.rank() != 2 || prompts.rank() != 2 || embeddings.dim(1) != prompts.dim(1) {
        return Err(Error::shape(
            "contrast",
            format!("O {:?}, prompts {:?}", embeddings.shape(), prompts.shape()),
        ));
    }
    matmul_nt(embeddings, prompts)
}

/// `sigmoid(Σ_j coeffs[m,j] · prototypes[j])` for each of the M rows: M×Hm×Wm.
pub fn assemble_masks<T: Scalar>(coeffs: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Tensor<T>> {
    if coeffs.rank() != 2 || prototypes.rank() != 3 || coeffs.dim(1) != prototypes.dim(0) {
        return Err(Error::shape(
            "assemble_masks",
            format!("coeffs {:?}, prototypes {:?}", coeffs.shape(), prototypes.shape()),
        ));
    }
    let (m, k) = (coeffs.dim(0), coeffs.dim(1));
    let (h, w) = (prototypes.dim(1), prototypes.dim(2));
    let flat = prototypes.reshape([k, h * w])?;
    let logits = crate::tensor::matmul(coeffs, &flat)?;
    crate::tensor::sigmoid(&logits).reshape([m, h, w])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// x0, y0, x1, y1 in image pixels.
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
    pub anchor: usize,
    pub mask_coeffs: Vec<f64>,
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor))
}

/// Greedy class-agnostic NMS: keeps boxes in descending score order,
/// dropping any whose IoU with a kept box exceeds `iou_thresh`.
pub fn nms(mut candidates: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    candidates.sort_by(by_score_desc);
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| box_iou(&k.bbox, &c.bbox) <= iou_thresh) {
            kept.push(c);
        }
    }
    kept
}

fn decode_box<T: Scalar>(pred: &Predictions<T>, anchor: usize) -> [f64; 4] {
    let [cx, cy] = pred.anchor_centers[anchor];
    let s = pred.anchor_strides[anchor] as f64;
    let off = pred.box_offsets.row(anchor);
    let lim = pred.image_size as f64;
    let clip = |v: f64| v.clamp(0.0, lim);
    // distances are non-negative by definition; a negative output collapses that side onto the centre
    let dist = |k: usize| off[k].to_f64().unwrap().max(0.0) * s;
    [
        clip(cx - dist(0)),
        clip(cy - dist(1)),
        clip(cx + dist(2)),
        clip(cy + dist(3)),
    ]
}

/// Decodes explicit (anchor, class, score) candidates, thresholds and runs NMS.
pub fn decode_candidates<T: Scalar>(
    pred: &Predictions<T>,
    candidates: impl IntoIterator<Item = (usize, usize, f64)>,
    score_thresh: f64,
    iou_thresh: f64,
) -> Vec<Detection> {
    let dets = candidates
        .into_iter()
        .filter(|&(_, _, score)| score > score_thresh)
        .map(|(anchor, class_id, score)| Detection {
            bbox: decode_box(pred, anchor),
            class_id,
            score,
            anchor,
            mask_coeffs: pred
                .mask_coeffs
                .row(anchor)
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect(),
        })
        .collect();
    nms(dets, iou_thresh)
}

/// Binary S×S instance mask of one detection: prototypes combined with the
/// detection's coefficients, upsampled to image resolution by nearest
/// neighbour, thresholded at 0.5 and cropped to the box (a pixel belongs
/// to the box when its centre does). Row-major.
pub fn detection_mask<T: Scalar>(det: &Detection, prototypes: &Tensor<T>, image_size: usize) -> Result<Vec<bool>> {
    let coeffs = Tensor::new([1, det.mask_coeffs.len()], det.mask_coeffs.clone())?;
    let probs = assemble_masks(&coeffs, &prototypes.cast::<f64>())?;
    let (hm, wm) = (probs.dim(1), probs.dim(2));
    if hm == 0 || !image_size.is_multiple_of(hm) || hm != wm {
        return Err(Error::shape(
            "detection_mask",
            format!("prototypes {:?} for image {image_size}", prototypes.shape()),
        ));
    }
    let factor = image_size / hm;
    let [x0, y0, x1, y1] = det.bbox;
    let mut out = vec![false; image_size * image_size];
    for y in 0..image_size {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for x in 0..image_size {
            let cx = x as f64 + 0.5;
            if cx >= x0 && cx < x1 {
                out[y * image_size + x] = probs.at(&[0, y / factor, x / factor]) > 0.5;
            }
        }
    }
    Ok(out)
}

/// Run lengths of alternating values starting with `false` (a leading zero
/// run is emitted when the first value is `true`).
pub fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32]) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    out
}

/// Per-anchor best class from N×C logits (ties → lowest class), sigmoid
/// scores, score threshold and class-agnostic NMS.
pub fn decode_and_nms<T: Scalar>(
    pred: &Predictions<T>,
    logits: &Tensor<T>,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if logits.rank() != 2 || logits.dim(0) != pred.num_anchors() {
        return Err(Error::shape(
            "decode_and_nms",
            format!("logits {:?} for {} anchors", logits.shape(), pred.num_anchors()),
        ));
    }
    let candidates = (0..logits.dim(0)).map(|n| {
        let row = logits.row(n);
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        (n, best, sigmoid_scalar(row[best]).to_f64().unwrap())
    });
    Ok(decode_candidates(pred, candidates, score_thresh, iou_thresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn fake_predictions(offsets: Vec<f32>) -> Predictions<f32> {
        let cfg = ModelConfig::tiny();
        let (centers, strides) = cfg.anchors();
        let n = centers.len();
        let mut data = offsets;
        data.resize(n * 4, 1.0);
        Predictions {
            embeddings: None,
            fused_logits: None,
            box_offsets: Tensor::new([n, 4], data).unwrap(),
            mask_coeffs: Tensor::zeros([n, 2]),
            prototypes: Tensor::zeros([2, 8, 8]),
            anchor_centers: centers,
            anchor_strides: strides,
            image_size: 32,
        }
    }

    #[test]
    fn contrast_self_similarity_and_orthogonality() {
        let p = Tensor::<f64>::new([2, 2], vec![1., 0., 0., 1.]).unwrap();
        let o = Tensor::<f64>::new([1, 2], vec![1., 0.]).unwrap();
        assert_eq!(contrast(&o, &p).unwrap().data(), &[1., 0.]);
        assert!(contrast(&o, &Tensor::ones([1, 3])).is_err());
    }

    #[test]
    fn zero_coefficients_give_half_masks() {
        let coeffs = Tensor::<f32>::zeros([2, 3]);
        let protos = Tensor::<f32>::from_fn([3, 4, 4], |i| i as f32 - 20.0);
        let masks = assemble_masks(&coeffs, &protos).unwrap();
        assert_eq!(masks.shape(), &[2, 4, 4]);
        assert!(masks.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_coefficient_follows_prototype_sign() {
        let coeffs = Tensor::<f64>::full([1, 1], 50.0);
        let protos = Tensor::<f64>::from_fn([1, 2, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let masks = assemble_masks(&coeffs, &protos).unwrap();
        assert!(masks.data()[0] > 1.0 - 1e-12);
        assert!(masks.data()[1] < 1e-12);
        assert!(assemble_masks(&Tensor::<f64>::zeros([1, 2]), &protos).is_err());
    }

    #[test]
    fn identical_boxes_keep_highest() {
        let pred = fake_predictions(vec![]);
        let dets = decode_candidates(&pred, [(0, 0, 0.8), (0, 1, 0.9)], 0.25, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
        assert_eq!(dets[0].class_id, 1);
    }

    #[test]
    fn nothing_above_threshold() {
        let pred = fake_predictions(vec![]);
        let logits = Tensor::<f32>::full([21, 3], -5.0);
        assert!(decode_and_nms(&pred, &logits, 0.25, 0.5).unwrap().is_empty());
    }

    #[test]
    fn boxes_are_clipped() {
        let pred = fake_predictions(vec![10.0, 10.0, 0.5, 0.5]);
        let dets = decode_candidates(&pred, [(0, 0, 0.9)], 0.25, 0.5);
        assert_eq!(dets[0].bbox, [0.0, 0.0, 8.0, 8.0]);
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((box_iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rle_round_trip_and_leading_ones() {
        assert_eq!(rle_encode(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(rle_encode(&[false, false, true]), vec![2, 1]);
        assert_eq!(rle_encode(&[]), vec![0]);
        let bits = [false, true, true, false, true, false, false];
        assert_eq!(rle_decode(&rle_encode(&bits)), bits);
    }

    #[test]
    fn mask_is_cropped_to_box() {
        // a single prototype that is strongly positive everywhere
        let protos = Tensor::<f32>::full([1, 8, 8], 10.0);
        let det = Detection {
            bbox: [4.0, 8.0, 12.0, 10.0],
            class_id: 0,
            score: 0.9,
            anchor: 0,
            mask_coeffs: vec![1.0],
        };
        let m = detection_mask(&det, &protos, 32).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 8 * 2);
        assert!(m[8 * 32 + 4] && !m[8 * 32 + 3] && !m[10 * 32 + 4]);
        let neg = Detection {
            mask_coeffs: vec![-1.0],
            ..det
        };
        assert!(detection_mask(&neg, &protos, 32).unwrap().iter().all(|&b| !b));
    }
}
