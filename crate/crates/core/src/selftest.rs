//! Invariant suite run by the `selftest` subcommand: a quick pass over the
//! kernel oracles, fusion exactness, gradients, visual prompt encoder
//! degeneracies, lazy retrieval, archive robustness and freeze masks.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::Result;
use crate::io::{decode, encode, Archive};
use crate::lrpc::{brute_force_full, filter_anchors, retrieve, DotCounter, Vocabulary};
use crate::model::{init_weights, Detector, ModelConfig};
use crate::reprta::{fuse, fuse_weights, verify_equivalence, W_DOWN};
use crate::savpe::{aggregate, mask_pool_baseline, rasterize, semantic_branch, VisualPrompt};
use crate::tensor::{conv2d, l2_normalize_rows, masked_softmax, matmul, Tensor, NORM_EPS};
use crate::train::{
    bce_loss, gen_dataset, run_stage, stage_grad_check, synthetic_embeddings, FreezeSpec, PromptBank, Stage,
    StageOptions,
};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 12] = [
    ("conv2d_oracle", conv_oracle),
    ("matmul_oracle", matmul_oracle),
    ("masked_softmax", softmax_region),
    ("bce_formula", bce_formula),
    ("fusion_exactness", fusion_exactness),
    ("zero_adapter_identity", zero_adapter_identity),
    ("stage_gradients", stage_gradients),
    ("savpe_degeneracy", savpe_degeneracy),
    ("lrpc_equivalence", lrpc_equivalence),
    ("archive_robustness", archive_robustness),
    ("forward_determinism", forward_determinism),
    ("freeze_masks", freeze_masks),
];

/// Runs every check. A check that errors or panics counts as failed.
pub fn run_selftest(seed: u64) -> SelftestReport {
    let mut report = SelftestReport::default();
    for (name, check) in CHECKS {
        let outcome = catch_unwind(AssertUnwindSafe(|| check(seed)));
        let (passed, detail) = match outcome {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        report.checks.push(CheckResult { name, passed, detail });
    }
    report
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (cin, cout, k) = (rng.gen_range(1..4), rng.gen_range(1..4), [1, 3][rng.gen_range(0..2)]);
        let (h, w) = (rng.gen_range(k..9), rng.gen_range(k..9));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2));
        let x = uniform(&[cin, h, w], &mut rng);
        let kern = uniform(&[cout, cin, k, k], &mut rng);
        let y = conv2d(&x, &kern, stride, pad)?;
        let (oh, ow) = (y.dim(1), y.dim(2));
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, q) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                    acc += x.at(&[c, r as usize, q as usize]) * kern.at(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    worst = worst.max((acc - y.at(&[o, i, j])).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

fn matmul_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a = uniform(&[m, k], &mut rng);
        let b = uniform(&[k, n], &mut rng);
        let c = matmul(&a, &b)?;
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.at(&[i, t]) * b.at(&[t, j])).sum();
                worst = worst.max((want - c.at(&[i, j])).abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
}

fn softmax_region(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng(seed, 3);
    let mut worst = 0.0f64;
    let mut leaks = 0;
    for _ in 0..20 {
        let (a, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let mut region: Tensor<f64> = Tensor::from_fn([h, w], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        region.set(&[0, 0], 1.0);
        let x: Tensor<f64> = Tensor::from_fn([a, h, w], |_| rng.gen_range(-20.0..20.0));
        let p = masked_softmax(&x, &region)?;
        for g in 0..a {
            let mut total = 0.0;
            for i in 0..h * w {
                let v = p.data()[g * h * w + i];
                if region.data()[i] > 0.5 {
                    total += v;
                } else if v != 0.0 {
                    leaks += 1;
                }
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok((
        worst <= 1e-12 && leaks == 0,
        format!("max |Σ−1| {worst:.2e}, leaks {leaks}"),
    ))
}

fn bce_formula(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng(seed, 4);
    let x = Tensor::from_fn([40], |_| rng.gen_range(-10.0..10.0));
    let t = Tensor::from_fn([40], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let want = x
        .data()
        .iter()
        .zip(t.data())
        .map(|(&xi, &ti): (&f64, &f64)| {
            let p = 1.0 / (1.0 + (-xi).exp());
            -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 40.0;
    let got = bce_loss(&x, &t)?;
    let err = (got - want).abs();
    Ok((err <= 1e-10, format!("deviation {err:.2e}")))
}

fn random_state(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut store: ParamStore<f64> = init_weights(cfg, seed)?;
    let mut r = rng(seed, 5);
    let shape = store.get(W_DOWN)?.shape().to_vec();
    store.set_value(W_DOWN, uniform(&shape, &mut r).map(|v| v * 0.3))?;
    Ok(store)
}

fn fusion_exactness(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for (i, c) in [1usize, 7, 64].into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let store = random_state(&cfg, s)?;
        let mut r = rng(s, 6);
        let text = synthetic_embeddings::<f64>(r.gen(), c, cfg.embed_dim, 0.3)?;
        let image = Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0..1.0));
        worst64 = worst64.max(verify_equivalence(&store, &cfg, &text, &image)?);
        let dev32 = verify_equivalence(&store.cast::<f32>(), &cfg, &text.cast(), &image.cast())?;
        worst32 = worst32.max(dev32 as f64);
    }
    Ok((
        worst64 <= 1e-10 && worst32 <= 1e-5,
        format!("f64 {worst64:.2e}, f32 {worst32:.2e}"),
    ))
}

fn zero_adapter_identity(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_weights(&cfg, seed)?;
    let text = synthetic_embeddings::<f64>(seed, 5, cfg.embed_dim, 0.3)?;
    let fused = fuse_weights(&store, &text)?;
    let want = fuse(&text, store.get("head.embed.p3.proj.w")?)?;
    let dev = fused.get("head.cls.p3.w")?.max_abs_diff(&want);
    Ok((dev == 0.0, format!("deviation {dev:.2e}")))
}

fn stage_gradients(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for stage in [Stage::Text, Stage::Savpe, Stage::Specialized] {
        let mut stage_worst = 0.0f64;
        for k in 0..2 {
            let r = stage_grad_check(stage, &cfg, seed.wrapping_add(k), Some(3))?;
            stage_worst = stage_worst.max(r.max_error());
        }
        detail.push(format!("{} {stage_worst:.2e}", stage.as_str()));
        worst = worst.max(stage_worst);
    }
    Ok((worst <= 1e-4, detail.join(", ")))
}

fn savpe_degeneracy(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let mut store = random_state(&cfg, seed)?;
    // constant activation logits: zero fusion kernel, equal bias
    let shape = store.get("savpe.act.fuse.w")?.shape().to_vec();
    store.set_value("savpe.act.fuse.w", Tensor::zeros(shape))?;
    let bias = store.get("savpe.act.fuse.b")?.shape().to_vec();
    store.set_value("savpe.act.fuse.b", Tensor::full(bias, 0.7))?;
    let det = Detector::new(cfg.clone())?;
    let mut r = rng(seed, 8);
    let image = Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0..1.0));
    let pyramid = det.pyramid(&store, &image)?;
    let mut g = crate::autodiff::Graph::inference();
    let pyr = pyramid.to_graph(&mut g);
    let s = semantic_branch(&mut g, &store, &cfg, pyr)?;
    let semantic = g.value(s).clone();
    let mask = rasterize(&VisualPrompt::<f64>::Box([3.0, 5.0, 20.0, 17.0]), cfg.image_size)?;
    let enc = crate::savpe::encode_prompts(&store, &cfg, &pyramid, &[VisualPrompt::Mask(mask.clone())])?;
    let base = mask_pool_baseline(&semantic, &mask)?;
    let dev = enc.max_abs_diff(&base);

    // out-of-region perturbation of S under arbitrary weights
    let (_, region) = crate::savpe::downsample_region(&mask)?;
    let logits = uniform(&[cfg.savpe_groups, region.dim(0), region.dim(1)], &mut r);
    let weights = masked_softmax(&logits, &region)?;
    let before = aggregate(&semantic, &weights)?;
    let hw = region.numel();
    let mut perturbed = semantic.clone();
    for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
        if region.data()[i % hw] <= 0.5 {
            *v += r.gen_range(-100.0..100.0);
        }
    }
    let after = aggregate(&perturbed, &weights)?;
    let exact = before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        dev <= 1e-6 && exact,
        format!("mask-pool deviation {dev:.2e}, out-of-region exact {exact}"),
    ))
}

fn lrpc_equivalence(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 9);
    let mut mismatches = 0;
    let mut bad_counts = 0;
    let mut non_monotone = 0;
    for _ in 0..20 {
        let (n, d, v) = (r.gen_range(1..60), r.gen_range(2..9), r.gen_range(1..40));
        let o = uniform(&[n, d], &mut r);
        let ps = l2_normalize_rows(&uniform(&[1, d], &mut r), NORM_EPS)?;
        let names = (0..v).map(|i| format!("v{i}")).collect();
        let vocab = Vocabulary::new(names, l2_normalize_rows(&uniform(&[v, d], &mut r), NORM_EPS)?)?;
        let counter = DotCounter::new();
        let kept = filter_anchors(&o, &ps, 0.001, &counter)?;
        let lazy = retrieve(&o, &kept, &vocab, &counter)?;
        if counter.get() != (kept.len() * v + n) as u64 {
            bad_counts += 1;
        }
        let full = brute_force_full(&o, &vocab, &DotCounter::new())?;
        mismatches += lazy.iter().filter(|h| full[h.anchor] != **h).count();
        let mut prev = n + 1;
        for delta in [-1.0, -0.1, 0.0, 0.001, 0.1, 0.5, 1.0] {
            let k = filter_anchors(&o, &ps, delta, &DotCounter::new())?.len();
            if k > prev {
                non_monotone += 1;
            }
            prev = k;
        }
    }
    Ok((
        mismatches == 0 && bad_counts == 0 && non_monotone == 0,
        format!("mismatches {mismatches}, bad counts {bad_counts}, non-monotone {non_monotone}"),
    ))
}

fn archive_robustness(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 10);
    let mut archive = Archive::new();
    for i in 0..8 {
        let shape: Vec<usize> = (0..r.gen_range(1..4)).map(|_| r.gen_range(1..5)).collect();
        let t: Tensor<f32> = Tensor::from_fn(shape, |_| r.gen());
        archive.insert(format!("t{i}"), t);
    }
    archive.metadata.insert("note".into(), "selftest".into());
    let bytes = archive.to_bytes()?;
    let round = decode(&bytes)?;
    let exact = round.to_bytes()? == bytes && encode(&round.tensors, &round.metadata)? == bytes;
    let mut panics = 0;
    for _ in 0..500 {
        let mut b = bytes.clone();
        match r.gen_range(0..3) {
            0 => b.truncate(r.gen_range(0..bytes.len())),
            1 => {
                for _ in 0..r.gen_range(1..4) {
                    let i = r.gen_range(0..b.len());
                    b[i] = r.gen();
                }
            }
            _ => {
                let i = r.gen_range(0..4);
                b[i] ^= 0xff;
            }
        }
        if catch_unwind(|| {
            let _ = decode(&b);
        })
        .is_err()
        {
            panics += 1;
        }
    }
    Ok((
        exact && panics == 0,
        format!("round-trip exact {exact}, panics {panics}"),
    ))
}

fn forward_determinism(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f32> = init_weights(&cfg, seed)?;
    let det = Detector::new(cfg.clone())?;
    let mut r = rng(seed, 11);
    let image = Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| r.gen_range(0.0f32..1.0));
    let a = det.predict(&store, &image)?;
    let b = det.predict(&store, &image)?;
    let same = a.embeddings == b.embeddings && a.box_offsets == b.box_offsets && a.prototypes == b.prototypes;
    Ok((same, format!("bit-identical {same}")))
}

fn freeze_masks(seed: u64) -> Result<(bool, String)> {
    let mut cfg = ModelConfig::tiny();
    cfg.image_size = 64;
    let mut store: ParamStore<f32> = init_weights(&cfg, seed)?;
    let before = store.values();
    let data = gen_dataset(seed, 4, cfg.image_size, 3)?;
    let names = (0..5).map(|i| format!("p{i}")).collect();
    let bank = PromptBank::new(names, synthetic_embeddings(seed, 5, cfg.embed_dim, 0.5)?, 3)?;
    let opts = StageOptions {
        epochs: 1,
        batch_size: 2,
        seed,
        freeze: FreezeSpec::StageDefault,
        ..Default::default()
    };
    run_stage(Stage::Savpe, &mut store, &cfg, &data, &bank, &opts)?;
    let after = store.values();
    let mut leaked = 0;
    let mut moved = 0;
    for (name, t) in &before {
        let changed = t
            .data()
            .iter()
            .zip(after[name].data())
            .any(|(a, b)| a.to_bits() != b.to_bits());
        if name.starts_with("savpe.") {
            moved += changed as usize;
        } else {
            leaked += changed as usize;
        }
    }
    Ok((
        leaked == 0 && moved > 0,
        format!("frozen tensors changed {leaked}, savpe tensors changed {moved}"),
    ))
}
