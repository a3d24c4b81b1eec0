//! Latency harness: closed-set, fused and eager classification paths over a
//! range of class counts, and brute-force versus lazy prompt-free retrieval
//! over a range of vocabulary sizes.
//!
//! Timings are whole forward passes (backbone, neck and all heads) so the
//! numbers reflect end-to-end inference. Variants are interleaved within each
//! iteration to spread clock drift evenly.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::lrpc::{brute_force_detect, prompt_free_detect, DotCounter, Vocabulary, DEFAULT_DELTA};
use crate::model::{contrast, init_weights, Detector, ModelConfig, LEVELS};
use crate::reprta::{enhance, fuse_weights, AuxNetParams};
use crate::tensor::{l2_normalize_rows, Tensor, NORM_EPS};
use crate::train::synthetic_embeddings;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
    pub class_counts: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    pub delta: f64,
    pub model: ModelConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            iterations: 100,
            seed: 0,
            class_counts: vec![16, 256, 1024],
            vocab_sizes: vec![512, 4585],
            delta: DEFAULT_DELTA,
            model: ModelConfig::toy(),
        }
    }
}

/// One measured variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    /// `head` or `prompt_free`.
    pub group: &'static str,
    /// `closed_set`, `fused`, `eager`, `brute_force` or `lrpc`.
    pub variant: &'static str,
    /// C for head rows, V for prompt-free rows.
    pub size: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Instrumented dot products per call (prompt-free rows only).
    pub dot_products: Option<u64>,
    /// Anchors kept by the filter (lrpc rows only).
    pub kept_anchors: Option<usize>,
}

/// Nearest-rank percentile of an unsorted sample, `q` in [0, 1].
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn time_ms(f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Runs every closure `warmup + iterations` times, round-robin with the
/// starting closure rotated each round, and returns the timed samples per
/// closure.
fn interleaved(warmup: usize, iterations: usize, fns: &mut [&mut dyn FnMut() -> Result<()>]) -> Result<Vec<Vec<f64>>> {
    let n = fns.len();
    let mut samples = vec![Vec::with_capacity(iterations); n];
    for it in 0..warmup + iterations {
        for j in 0..n {
            let k = (it + j) % n;
            let ms = time_ms(&mut *fns[k])?;
            if it >= warmup {
                samples[k].push(ms);
            }
        }
    }
    Ok(samples)
}

/// A from-scratch closed-set store with `classes` outputs: the embedding
/// projections and prompt machinery are replaced by random `head.cls.*`
/// kernels of the same shape a fused store would carry.
pub fn closed_set_store(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    classes: usize,
    seed: u64,
) -> Result<ParamStore<f32>> {
    let mut closed = fuse_weights(store, &unit_rows(classes, cfg.embed_dim, seed)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bound = (1.0 / cfg.head_channels as f32).sqrt();
    for level in LEVELS {
        let kernel = Tensor::from_fn([classes, cfg.head_channels, 1, 1], |_| rng.gen_range(-bound..bound));
        closed.set_value(&format!("head.cls.{level}.w"), kernel)?;
    }
    Ok(closed)
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn([rows, dim], |_| rng.gen_range(-1.0f32..1.0));
    l2_normalize_rows(&r, NORM_EPS as f32)
}

fn random_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, size, size], |_| rng.gen_range(0.0f32..1.0))
}

fn summarize(group: &'static str, variant: &'static str, size: usize, samples: &[f64]) -> BenchRow {
    BenchRow {
        group,
        variant,
        size,
        median_ms: median(samples),
        p95_ms: percentile(samples, 0.95),
        dot_products: None,
        kept_anchors: None,
    }
}

/// Closed-set, fused and eager inference for each class count.
pub fn bench_heads(store: &ParamStore<f32>, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let cfg = &opts.model;
    let det = Detector::new(cfg.clone())?;
    let image = random_image(cfg.image_size, opts.seed);
    let aux = AuxNetParams::from_store(store)?;
    let mut rows = Vec::new();
    for &c in &opts.class_counts {
        if c == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        let text = unit_rows(c, cfg.embed_dim, opts.seed.wrapping_add(c as u64))?;
        let fused = fuse_weights(store, &text)?;
        let closed = closed_set_store(store, cfg, c, opts.seed)?;
        let mut run_closed = || -> Result<()> {
            let p = det.predict(&closed, &image)?;
            std::hint::black_box(p.fused_logits);
            Ok(())
        };
        let mut run_fused = || -> Result<()> {
            let p = det.predict(&fused, &image)?;
            std::hint::black_box(p.fused_logits);
            Ok(())
        };
        let mut run_eager = || -> Result<()> {
            let p = det.predict(store, &image)?;
            let prompts = enhance(&text, &aux)?;
            std::hint::black_box(contrast(p.embeddings()?, &prompts)?);
            Ok(())
        };
        let samples = interleaved(
            opts.warmup,
            opts.iterations,
            &mut [&mut run_closed, &mut run_fused, &mut run_eager],
        )?;
        for (variant, s) in ["closed_set", "fused", "eager"].into_iter().zip(&samples) {
            rows.push(summarize("head", variant, c, s));
        }
    }
    Ok(rows)
}

/// Brute-force versus filtered retrieval for each vocabulary size, on the
/// predictions of one image. `specialized` is the unit-norm P_s.
pub fn bench_prompt_free(
    store: &ParamStore<f32>,
    specialized: &Tensor<f32>,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    let cfg = &opts.model;
    let det = Detector::new(cfg.clone())?;
    let pred = det.predict(store, &random_image(cfg.image_size, opts.seed))?;
    let mut rows = Vec::new();
    for &v in &opts.vocab_sizes {
        let emb = synthetic_embeddings(opts.seed.wrapping_add(v as u64), v, cfg.embed_dim, 0.0)?;
        let names = (0..v).map(|i| format!("entry {i}")).collect();
        let vocab = Vocabulary::new(names, emb)?;
        let brute_counter = DotCounter::new();
        let lazy_counter = DotCounter::new();
        let mut kept = 0;
        let mut run_brute = || -> Result<()> {
            brute_counter.reset();
            std::hint::black_box(brute_force_detect(&pred, &vocab, 0.25, 0.5, &brute_counter)?);
            Ok(())
        };
        let mut run_lazy = || -> Result<()> {
            lazy_counter.reset();
            std::hint::black_box(prompt_free_detect(
                &pred,
                specialized,
                &vocab,
                opts.delta,
                0.25,
                0.5,
                &lazy_counter,
            )?);
            Ok(())
        };
        let samples = interleaved(opts.warmup, opts.iterations, &mut [&mut run_brute, &mut run_lazy])?;
        let n = pred.num_anchors() as u64;
        let lazy_dots = lazy_counter.get();
        if lazy_dots >= n {
            kept = ((lazy_dots - n) / v as u64) as usize;
        }
        let mut brute = summarize("prompt_free", "brute_force", v, &samples[0]);
        brute.dot_products = Some(brute_counter.get());
        let mut lazy = summarize("prompt_free", "lrpc", v, &samples[1]);
        lazy.dot_products = Some(lazy_dots);
        lazy.kept_anchors = Some(kept);
        rows.push(brute);
        rows.push(lazy);
    }
    Ok(rows)
}

/// Both benchmarks on `store`, or on a freshly initialized model when none
/// is given. A store without a specialized prompt gets a random unit one.
pub fn run_bench(store: Option<&ParamStore<f32>>, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let owned;
    let store = match store {
        Some(s) => s,
        None => {
            owned = init_weights::<f32>(&opts.model, opts.seed)?;
            &owned
        }
    };
    let specialized = match store.get(crate::lrpc::SPECIALIZED) {
        Ok(ps) => l2_normalize_rows(ps, NORM_EPS as f32)?,
        Err(_) => unit_rows(1, opts.model.embed_dim, opts.seed ^ 0x1)?,
    };
    let mut rows = bench_heads(store, opts)?;
    rows.extend(bench_prompt_free(store, &specialized, opts)?);
    Ok(rows)
}

pub const CSV_HEADER: &str = "group,variant,size,median_ms,p95_ms,dot_products,kept_anchors";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{}\n",
            r.group,
            r.variant,
            r.size,
            r.median_ms,
            r.p95_ms,
            opt(r.dot_products),
            opt(r.kept_anchors.map(|k| k as u64)),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(median(&s), 3.0);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
        assert_eq!(percentile(&s, 0.95), 5.0);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn counts_follow_laziness_formula() {
        let opts = BenchOptions {
            warmup: 0,
            iterations: 1,
            class_counts: vec![2],
            vocab_sizes: vec![10],
            model: ModelConfig::tiny(),
            ..Default::default()
        };
        let rows = run_bench(None, &opts).unwrap();
        assert_eq!(rows.len(), 5);
        let n = opts.model.num_anchors() as u64;
        let brute = rows.iter().find(|r| r.variant == "brute_force").unwrap();
        let lazy = rows.iter().find(|r| r.variant == "lrpc").unwrap();
        assert_eq!(brute.dot_products, Some(n * 10));
        let kept = lazy.kept_anchors.unwrap() as u64;
        assert_eq!(lazy.dot_products, Some(kept * 10 + n));
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with(CSV_HEADER));
    }

    #[test]
    fn closed_set_store_matches_fused_layout() {
        let cfg = ModelConfig::tiny();
        let store = init_weights::<f32>(&cfg, 3).unwrap();
        let closed = closed_set_store(&store, &cfg, 5, 1).unwrap();
        let text = unit_rows(5, cfg.embed_dim, 2).unwrap();
        let fused = fuse_weights(&store, &text).unwrap();
        assert_eq!(closed.len(), fused.len());
        for (name, e) in fused.iter() {
            assert_eq!(closed.get(name).unwrap().shape(), e.value.shape(), "{name}");
        }
    }
}
