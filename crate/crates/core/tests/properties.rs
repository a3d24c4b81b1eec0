//! Property tests for the library invariants.

use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use yoloe_core::autodiff::ParamStore;
use yoloe_core::io::{decode, AnyTensor, Archive};
use yoloe_core::lrpc::{brute_force_full, filter_anchors, retrieve, DotCounter, Vocabulary};
use yoloe_core::model::{box_iou, init_weights, nms, rle_decode, rle_encode, Detection, Detector, ModelConfig};
use yoloe_core::reprta::{fuse_weights, verify_equivalence, W_DOWN};
use yoloe_core::savpe::{aggregate, mask_pool_baseline};
use yoloe_core::tensor::{conv2d, l2_normalize_rows, masked_softmax, matmul, matmul_nt, transpose2d, Tensor, NORM_EPS};
use yoloe_core::train::{assign_targets, gen_sample, synthetic_embeddings, Object};

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

fn unit_rows(rows: usize, dim: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    l2_normalize_rows(&uniform(&[rows, dim], r), NORM_EPS).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_sum(
        seed in any::<u64>(),
        cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3]),
        extra_h in 0usize..6, extra_w in 0usize..6, stride in 1usize..3,
    ) {
        let mut r = seeded(seed);
        let (h, w) = (k + extra_h, k + extra_w);
        let pad = k / 2;
        let x = uniform(&[cin, h, w], &mut r);
        let kern = uniform(&[cout, cin, k, k], &mut r);
        let y = conv2d(&x, &kern, stride, pad).unwrap();
        for o in 0..cout {
            for i in 0..y.dim(1) {
                for j in 0..y.dim(2) {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (row, col) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if row >= 0 && col >= 0 && (row as usize) < h && (col as usize) < w {
                                    acc += x.at(&[c, row as usize, col as usize]) * kern.at(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    prop_assert!((acc - y.at(&[o, i, j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_nt_is_matmul_with_transpose(seed in any::<u64>(), m in 1usize..12, k in 1usize..12, n in 1usize..12) {
        let mut r = seeded(seed);
        let a = uniform(&[m, k], &mut r);
        let b = uniform(&[n, k], &mut r);
        let direct = matmul_nt(&a, &b).unwrap();
        let via = matmul(&a, &transpose2d(&b).unwrap()).unwrap();
        prop_assert!(direct.max_abs_diff(&via) < 1e-12);
    }

    #[test]
    fn region_softmax_is_a_distribution_on_the_region(
        seed in any::<u64>(), groups in 1usize..4, h in 1usize..7, w in 1usize..7, shift in -50.0f64..50.0,
    ) {
        let mut r = seeded(seed);
        let mut region: Tensor<f64> = Tensor::from_fn([h, w], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        region.set(&[r.gen_range(0..h), r.gen_range(0..w)], 1.0);
        let logits = uniform(&[groups, h, w], &mut r).map(|v| v * 30.0);
        let p = masked_softmax(&logits, &region).unwrap();
        let shifted = masked_softmax(&logits.map(|v| v + shift), &region).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
        for g in 0..groups {
            let mut total = 0.0;
            for i in 0..h * w {
                let v = p.data()[g * h * w + i];
                if region.data()[i] > 0.5 {
                    prop_assert!(v >= 0.0);
                    total += v;
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_weights_reproduce_mask_pooling(seed in any::<u64>(), d in prop::sample::select(vec![2usize, 4, 8])) {
        let mut r = seeded(seed);
        let size = 32;
        let mut mask: Tensor<f64> = Tensor::zeros([size, size]);
        let (x0, y0) = (r.gen_range(0..28), r.gen_range(0..28));
        for y in y0..r.gen_range(y0 + 1..=size) {
            for x in x0..r.gen_range(x0 + 1..=size) {
                mask.set(&[y, x], 1.0);
            }
        }
        let semantic = uniform(&[d, size / 8, size / 8], &mut r);
        let region = yoloe_core::savpe::downsample_region(&mask).unwrap().1;
        let groups = [1, 2][r.gen_range(0..2)];
        let constant = Tensor::full([groups, size / 8, size / 8], r.gen_range(-5.0..5.0));
        let weights = masked_softmax(&constant, &region).unwrap();
        let pooled = aggregate(&semantic, &weights).unwrap();
        let baseline = mask_pool_baseline(&semantic, &mask).unwrap();
        prop_assert!(pooled.max_abs_diff(&baseline) < 1e-12);
    }

    #[test]
    fn rle_round_trips(bits in vec(any::<bool>(), 0..300)) {
        let counts = rle_encode(&bits);
        prop_assert_eq!(rle_decode(&counts), bits.clone());
        prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), bits.len());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in vec(0.0f64..64.0, 4), b in vec(0.0f64..64.0, 4)) {
        let a = [a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]), a[1].max(a[3])];
        let b = [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])];
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, box_iou(&b, &a));
    }

    #[test]
    fn nms_output_is_sorted_and_separated(seed in any::<u64>(), n in 0usize..30, thresh in 0.1f64..0.9) {
        let mut r = seeded(seed);
        let dets: Vec<Detection> = (0..n)
            .map(|anchor| {
                let (x, y) = (r.gen_range(0.0..50.0), r.gen_range(0.0..50.0));
                Detection {
                    bbox: [x, y, x + r.gen_range(1.0..14.0), y + r.gen_range(1.0..14.0)],
                    class_id: r.gen_range(0..3),
                    score: r.gen_range(0.0..1.0),
                    anchor,
                    mask_coeffs: vec![],
                }
            })
            .collect();
        let kept = nms(dets.clone(), thresh);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(box_iou(&a.bbox, &b.bbox) <= thresh);
            }
        }
        // the best candidate always survives
        if let Some(best) = dets.iter().max_by(|a, b| a.score.total_cmp(&b.score).then(b.anchor.cmp(&a.anchor))) {
            prop_assert_eq!(kept[0].anchor, best.anchor);
        }
    }

    #[test]
    fn assignment_picks_the_smallest_containing_box(seed in any::<u64>(), count in 0usize..5) {
        let mut r = seeded(seed);
        let objects: Vec<Object> = (0..count)
            .map(|i| {
                let (x, y) = (r.gen_range(0.0..56.0), r.gen_range(0.0..56.0));
                Object { bbox: [x, y, (x + r.gen_range(4.0..40.0)).min(64.0), (y + r.gen_range(4.0..40.0)).min(64.0)], class_id: i % 3 }
            })
            .collect();
        let (centers, strides) = ModelConfig::toy().anchors();
        let t = assign_targets(&centers, &strides, &objects);
        let area = |b: &[f64; 4]| (b[2] - b[0]) * (b[3] - b[1]);
        let inside = |b: &[f64; 4], c: [f64; 2]| b[0] <= c[0] && c[0] < b[2] && b[1] <= c[1] && c[1] < b[3];
        for (a, &c) in centers.iter().enumerate() {
            let containing: Vec<usize> = (0..objects.len()).filter(|&i| inside(&objects[i].bbox, c)).collect();
            match t.object[a] {
                None => prop_assert!(containing.is_empty()),
                Some(i) => {
                    prop_assert!(containing.contains(&i));
                    prop_assert!(containing.iter().all(|&j| area(&objects[j].bbox) >= area(&objects[i].bbox)));
                    prop_assert_eq!(t.class[a], Some(objects[i].class_id));
                    prop_assert!(t.boxes[a].iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn lazy_retrieval_matches_brute_force(
        seed in any::<u64>(), n in 1usize..80, d in 2usize..12, v in 1usize..60, delta in -1.0f64..1.0,
    ) {
        let mut r = seeded(seed);
        let o = uniform(&[n, d], &mut r);
        let ps = unit_rows(1, d, &mut r);
        let vocab = Vocabulary::new((0..v).map(|i| format!("n{i}")).collect(), unit_rows(v, d, &mut r)).unwrap();
        let counter = DotCounter::new();
        let kept = filter_anchors(&o, &ps, delta, &counter).unwrap();
        let lazy = retrieve(&o, &kept, &vocab, &counter).unwrap();
        prop_assert_eq!(counter.get(), (kept.len() * v + n) as u64);
        let full = brute_force_full(&o, &vocab, &DotCounter::new()).unwrap();
        for hit in &lazy {
            prop_assert_eq!(*hit, full[hit.anchor]);
        }
        // raising the threshold only removes anchors
        let stricter = filter_anchors(&o, &ps, delta + 0.25, &DotCounter::new()).unwrap();
        prop_assert!(stricter.iter().all(|i| kept.contains(i)));
    }

    #[test]
    fn archives_round_trip(seed in any::<u64>(), count in 0usize..12) {
        let mut r = seeded(seed);
        let mut a = Archive::new();
        for i in 0..count {
            let shape: Vec<usize> = (0..r.gen_range(1..4)).map(|_| r.gen_range(1..5)).collect();
            if r.gen_bool(0.5) {
                a.insert(format!("t{i}"), Tensor::<f32>::from_fn(shape, |_| r.gen_range(-1e6..1e6)));
            } else {
                a.insert(format!("t{i}"), Tensor::<f64>::from_fn(shape, |_| r.gen_range(-1e6..1e6)));
            }
        }
        a.metadata.insert("k".into(), format!("{}", r.gen::<u32>()));
        let bytes = a.to_bytes().unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for t in back.tensors.values() {
            prop_assert!(matches!(t, AnyTensor::F32(_) | AnyTensor::F64(_)));
        }
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(bytes in vec(any::<u8>(), 0..256), with_magic in any::<bool>()) {
        let mut b = bytes;
        if with_magic && b.len() >= 16 {
            b[..4].copy_from_slice(b"YOLE");
            b[4..8].copy_from_slice(&1u32.to_le_bytes());
        }
        let _ = decode(&b);
    }

    #[test]
    fn synthetic_data_is_deterministic(seed in any::<u64>()) {
        let a = gen_sample(seed, 64, 4);
        let b = gen_sample(seed, 64, 4);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fusion_matches_eager_contrast(seed in any::<u64>(), classes in 1usize..20) {
        let cfg = ModelConfig::tiny();
        let mut store: ParamStore<f64> = init_weights(&cfg, seed).unwrap();
        let mut r = seeded(seed);
        let shape = store.get(W_DOWN).unwrap().shape().to_vec();
        store.set_value(W_DOWN, uniform(&shape, &mut r)).unwrap();
        let text = synthetic_embeddings::<f64>(r.gen(), classes, cfg.embed_dim, 0.4).unwrap();
        let image = Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0..1.0));
        prop_assert!(verify_equivalence(&store, &cfg, &text, &image).unwrap() <= 1e-10);
        let fused = fuse_weights(&store, &text).unwrap();
        prop_assert!(Detector::is_fused(&fused));
        prop_assert!(!fused.names().any(|n| n.starts_with("reprta.") || n.starts_with("savpe.") || n.starts_with("lrpc.")));
    }

    #[test]
    fn forward_pass_is_deterministic(seed in any::<u64>()) {
        let cfg = ModelConfig::tiny();
        let store: ParamStore<f32> = init_weights(&cfg, seed).unwrap();
        let det = Detector::new(cfg.clone()).unwrap();
        let mut r = seeded(seed);
        let image = Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0f32..1.0));
        let a = det.predict(&store, &image).unwrap();
        let b = det.predict(&store, &image).unwrap();
        prop_assert_eq!(a.embeddings, b.embeddings);
        prop_assert_eq!(a.box_offsets, b.box_offsets);
        prop_assert_eq!(a.mask_coeffs, b.mask_coeffs);
    }
}
