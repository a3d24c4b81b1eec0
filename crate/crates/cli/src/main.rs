//! `yoloe`: detection under text, visual and prompt-free modes, offline
//! fusion, toy training, benchmarks and the invariant self-test.
//!
//! stdout carries only the machine-readable payload; diagnostics go to
//! stderr. Exit codes: 0 success, 1 runtime or IO error, 2 usage error.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use yoloe_core::autodiff::ParamStore;
use yoloe_core::bench::{run_bench, to_csv, BenchOptions};
use yoloe_core::io::{load_image, load_vocab, save_vocab, Archive, WeightsFile, CONFIG_META};
use yoloe_core::lrpc::{prompt_free_detect, DotCounter, SPECIALIZED};
use yoloe_core::model::{contrast, decode_and_nms, detection_mask, rle_encode, Detection, Detector, ModelConfig};
use yoloe_core::reprta::{enhance, fuse_weights, verify_equivalence, AuxNetParams, CachedTextEmbeddings};
use yoloe_core::savpe::{encode_prompts, VisualPrompt};
use yoloe_core::selftest::run_selftest;
use yoloe_core::tensor::{l2_normalize_rows, Tensor, NORM_EPS};
use yoloe_core::train::{run_toy, StageEpochs, ToyConfig};

/// Maximum eager/fused logit deviation accepted by `fuse`.
const FUSE_TOLERANCE: f32 = 1e-5;

#[derive(Parser)]
#[command(name = "yoloe", version, about = "Open-prompt detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect objects in one image and print JSON detections.
    Detect(DetectArgs),
    /// Fold text prompts into the classification head.
    Fuse(FuseArgs),
    /// Time the classification paths and prompt-free retrieval (CSV).
    Bench(BenchArgs),
    /// Run the three-stage toy training and write its artifacts.
    TrainToy(TrainArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Model configuration (JSON); overrides the one stored in the archive.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// Cached text embeddings archive (text prompt mode).
    #[arg(long)]
    text_embeds: Option<PathBuf>,
    /// JSON list of prompt names matching --text-embeds.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Box prompt x0,y0,x1,y1 in input pixels; repeat for several prompts.
    #[arg(long = "visual-box", value_parser = parse_box)]
    visual_box: Vec<[f64; 4]>,
    /// Binary mask image prompt (PPM); repeatable.
    #[arg(long = "visual-mask")]
    visual_mask: Vec<PathBuf>,
    #[arg(long)]
    prompt_free: bool,
    #[arg(long)]
    vocab_names: Option<PathBuf>,
    #[arg(long)]
    vocab_embeds: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    #[arg(long, default_value_t = 0.25)]
    score_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    iou_thresh: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    text_embeds: PathBuf,
    #[arg(long)]
    names: PathBuf,
    /// Image used for the deviation check; a seeded random image otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Weights to benchmark; a freshly initialized toy model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 256, 1024])]
    classes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [512, 4585])]
    vocab_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs for every stage (default: 30 text, 2 visual, 1 specialized).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Invalid flag combinations; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c, d] if parts.iter().all(|v| v.is_finite()) => Ok([*a, *b, *c, *d]),
        _ => Err(format!("expected x0,y0,x1,y1, got `{s}`")),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("YOLOE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("YOLOE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_weights(model: &Path, config: Option<&Path>) -> Result<WeightsFile<f32>> {
    let mut archive = Archive::load(model).with_context(|| format!("loading {}", model.display()))?;
    if let Some(path) = config {
        let cfg = load_config(path)?;
        archive
            .metadata
            .insert(CONFIG_META.into(), serde_json::to_string(&cfg)?);
    }
    WeightsFile::from_archive(&archive).with_context(|| format!("reading weights from {}", model.display()))
}

fn write_payload(out: Option<&Path>, payload: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, payload).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(payload.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (v * scale).round() / scale
}

enum PromptMode {
    Fused,
    Text { embeds: PathBuf, names: PathBuf },
    Visual,
    PromptFree { names: PathBuf, embeds: PathBuf },
}

fn prompt_mode(args: &DetectArgs, fused: bool) -> Result<PromptMode> {
    let text = args.text_embeds.is_some() || args.names.is_some();
    let visual = !args.visual_box.is_empty() || !args.visual_mask.is_empty();
    let free = args.prompt_free || args.vocab_names.is_some() || args.vocab_embeds.is_some();
    let chosen = [text, visual, free].iter().filter(|&&m| m).count();
    if fused {
        if chosen > 0 {
            return Err(usage("a fused model carries its own prompts; drop the prompt flags"));
        }
        return Ok(PromptMode::Fused);
    }
    if chosen != 1 {
        return Err(usage(
            "exactly one prompt mode is required: --text-embeds/--names, --visual-box/--visual-mask, or --prompt-free",
        ));
    }
    if text {
        match (&args.text_embeds, &args.names) {
            (Some(e), Some(n)) => Ok(PromptMode::Text {
                embeds: e.clone(),
                names: n.clone(),
            }),
            _ => Err(usage("text prompts need both --text-embeds and --names")),
        }
    } else if visual {
        Ok(PromptMode::Visual)
    } else {
        match (args.prompt_free, &args.vocab_names, &args.vocab_embeds) {
            (true, Some(n), Some(e)) => Ok(PromptMode::PromptFree {
                names: n.clone(),
                embeds: e.clone(),
            }),
            (false, _, _) => Err(usage("vocabulary flags require --prompt-free")),
            _ => Err(usage("--prompt-free needs --vocab-names and --vocab-embeds")),
        }
    }
}

fn visual_prompts(args: &DetectArgs, size: usize) -> Result<Vec<VisualPrompt<f32>>> {
    let mut prompts: Vec<VisualPrompt<f32>> = args.visual_box.iter().map(|b| VisualPrompt::Box(*b)).collect();
    for path in &args.visual_mask {
        let img: Tensor<f32> = load_image(path, size).with_context(|| format!("loading mask {}", path.display()))?;
        let plane = size * size;
        let mask = Tensor::from_fn([size, size], |i| {
            let mean = (img.data()[i] + img.data()[plane + i] + img.data()[2 * plane + i]) / 3.0;
            if mean > 0.5 {
                1.0
            } else {
                0.0
            }
        });
        prompts.push(VisualPrompt::Mask(mask));
    }
    Ok(prompts)
}

fn detections_json(dets: &[Detection], names: &[String], prototypes: &Tensor<f32>, size: usize) -> Result<String> {
    let mut rows = Vec::with_capacity(dets.len());
    for d in dets {
        let bbox = d.bbox.map(|v| round_to(v, 2));
        let mask = rle_encode(&detection_mask(d, prototypes, size)?);
        rows.push((round_to(d.score, 4), bbox, names[d.class_id].clone(), mask));
    }
    rows.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let items: Vec<_> = rows
        .into_iter()
        .map(|(score, bbox, name, counts)| {
            json!({
                "box": bbox,
                "name": name,
                "score": score,
                "mask": { "size": [size, size], "counts": counts },
            })
        })
        .collect();
    if items.is_empty() {
        return Ok("[]\n".into());
    }
    let lines: Vec<String> = items.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    Ok(format!("[\n  {}\n]\n", lines.join(",\n  ")))
}

fn detect(args: DetectArgs) -> Result<()> {
    let weights = load_weights(&args.model, args.config.as_deref())?;
    let fused = Detector::is_fused(&weights.store);
    let mode = prompt_mode(&args, fused)?;
    let cfg = weights.config.clone();
    let det = Detector::new(cfg.clone())?;
    let store = &weights.store;
    let image: Tensor<f32> =
        load_image(&args.image, cfg.image_size).with_context(|| format!("loading {}", args.image.display()))?;
    let (dets, names, pred) = match mode {
        PromptMode::Fused => {
            let names = weights
                .prompt_names
                .clone()
                .context("fused model archive has no prompt names")?;
            let pred = det.predict(store, &image)?;
            let logits = pred.fused_logits.as_ref().context("fused model produced no logits")?;
            if logits.dim(1) != names.len() {
                bail!("fused model has {} classes but {} names", logits.dim(1), names.len());
            }
            (
                decode_and_nms(&pred, logits, args.score_thresh, args.iou_thresh)?,
                names,
                pred,
            )
        }
        PromptMode::Text { embeds, names } => {
            let text = CachedTextEmbeddings::<f32>::load(&embeds, &names)
                .with_context(|| format!("loading text embeddings {}", embeds.display()))?;
            if text.renormalized_rows > 0 {
                eprintln!(
                    "warning: {} text embedding rows were not unit-norm",
                    text.renormalized_rows
                );
            }
            let prompts = enhance(&text.embeddings, &AuxNetParams::from_store(store)?)?;
            let pred = det.predict(store, &image)?;
            let logits = contrast(pred.embeddings()?, &prompts)?;
            (
                decode_and_nms(&pred, &logits, args.score_thresh, args.iou_thresh)?,
                text.names,
                pred,
            )
        }
        PromptMode::Visual => {
            let prompts = visual_prompts(&args, cfg.image_size)?;
            let pyramid = det.pyramid(store, &image)?;
            let embeddings = encode_prompts(store, &cfg, &pyramid, &prompts)?;
            let pred = det.predict_from_pyramid(store, &pyramid)?;
            let logits = contrast(pred.embeddings()?, &embeddings)?;
            let names = (0..prompts.len()).map(|i| format!("visual {i}")).collect();
            (
                decode_and_nms(&pred, &logits, args.score_thresh, args.iou_thresh)?,
                names,
                pred,
            )
        }
        PromptMode::PromptFree { names, embeds } => {
            let vocab = load_vocab::<f32>(&names, &embeds)
                .with_context(|| format!("loading vocabulary {}", embeds.display()))?;
            let ps = l2_normalize_rows(store.get(SPECIALIZED)?, NORM_EPS as f32)?;
            let pred = det.predict(store, &image)?;
            let counter = DotCounter::new();
            let named = prompt_free_detect(
                &pred,
                &ps,
                &vocab,
                args.delta,
                args.score_thresh,
                args.iou_thresh,
                &counter,
            )?;
            eprintln!(
                "prompt-free: {} dot products (full contrast would need {})",
                counter.get(),
                pred.num_anchors() * vocab.len()
            );
            let dets = named.into_iter().map(|n| n.detection).collect();
            (dets, vocab.names().to_vec(), pred)
        }
    };
    let payload = detections_json(&dets, &names, &pred.prototypes, cfg.image_size)?;
    write_payload(args.out.as_deref(), &payload)
}

fn fuse(args: FuseArgs) -> Result<()> {
    let weights = load_weights(&args.model, args.config.as_deref())?;
    if Detector::is_fused(&weights.store) {
        bail!("{} is already fused", args.model.display());
    }
    let cfg = weights.config.clone();
    let text = CachedTextEmbeddings::<f32>::load(&args.text_embeds, &args.names)
        .with_context(|| format!("loading text embeddings {}", args.text_embeds.display()))?;
    if text.embeddings.dim(1) != cfg.embed_dim {
        bail!(
            "text embeddings have dimension {} but the model expects {}",
            text.embeddings.dim(1),
            cfg.embed_dim
        );
    }
    let image: Tensor<f32> = match &args.image {
        Some(p) => load_image(p, cfg.image_size).with_context(|| format!("loading {}", p.display()))?,
        None => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            Tensor::from_fn([3, cfg.image_size, cfg.image_size], |_| rng.gen_range(0.0..1.0))
        }
    };
    let fused_store = fuse_weights(&weights.store, &text.embeddings)?;
    let deviation = verify_equivalence(&weights.store, &cfg, &text.embeddings, &image)?;
    let out = WeightsFile {
        store: fused_store,
        config: cfg,
        prompt_names: Some(text.names.clone()),
    };
    out.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let report = json!({
        "out": args.out.display().to_string(),
        "classes": text.names.len(),
        "max_deviation": deviation,
        "tolerance": FUSE_TOLERANCE,
    });
    println!("{report}");
    if deviation.is_nan() || deviation > FUSE_TOLERANCE {
        bail!("eager/fused deviation {deviation:e} exceeds {FUSE_TOLERANCE:e}");
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let loaded = match &args.model {
        Some(p) => Some(load_weights(p, args.config.as_deref())?),
        None => None,
    };
    let model = match (&loaded, &args.config) {
        (Some(w), _) => w.config.clone(),
        (None, Some(p)) => load_config(p)?,
        (None, None) => ModelConfig::toy(),
    };
    if let Some(w) = &loaded {
        if Detector::is_fused(&w.store) {
            return Err(usage("bench needs an unfused model"));
        }
    }
    let opts = BenchOptions {
        warmup: args.warmup,
        iterations: args.iterations.max(1),
        seed: args.seed,
        class_counts: args.classes,
        vocab_sizes: args.vocab_sizes,
        delta: args.delta,
        model,
    };
    // one worker keeps timings comparable across variants
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let store: Option<&ParamStore<f32>> = loaded.as_ref().map(|w| &w.store);
    let rows = pool.install(|| run_bench(store, &opts))?;
    for r in &rows {
        eprintln!(
            "{:<12} {:<12} {:>6}  median {:>9.3} ms  p95 {:>9.3} ms{}",
            r.group,
            r.variant,
            r.size,
            r.median_ms,
            r.p95_ms,
            r.dot_products.map(|d| format!("  dots {d}")).unwrap_or_default()
        );
    }
    write_payload(args.out.as_deref(), &to_csv(&rows))
}

fn train_toy(args: TrainArgs) -> Result<()> {
    let mut cfg = ToyConfig {
        seed: args.seed,
        ..ToyConfig::default()
    };
    if let Some(e) = args.epochs {
        cfg.epochs = StageEpochs::all(e);
    }
    if let Some(n) = args.samples {
        if n == 0 {
            return Err(usage("--samples must be positive"));
        }
        cfg.samples = n;
    }
    if let Some(p) = &args.config {
        cfg.model = load_config(p)?;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let run = run_toy(&cfg, |r| {
        eprintln!(
            "stage {}: {} epochs, final loss {}",
            r.stage.as_str(),
            r.epoch_losses.len(),
            r.epoch_losses
                .last()
                .map(|l| format!("{l:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    })?;
    let dir = &args.out;
    WeightsFile {
        store: run.store.clone(),
        config: cfg.model.clone(),
        prompt_names: None,
    }
    .save(dir.join("weights.yole"))?;
    run.text.save(dir.join("text_embeds.yole"), dir.join("names.json"))?;
    save_vocab(&run.vocab, dir.join("vocab_names.json"), dir.join("vocab_embeds.yole"))?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.ndjson"))?);
    for report in &run.reports {
        for rec in &report.records {
            writeln!(metrics, "{}", serde_json::to_string(rec)?)?;
        }
    }
    metrics.flush()?;
    fs::write(dir.join("toy_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let summary = json!({
        "out": dir.display().to_string(),
        "stages": run.reports.iter().map(|r| json!({
            "stage": r.stage.as_str(),
            "epoch_losses": r.epoch_losses,
        })).collect::<Vec<_>>(),
    });
    println!("{summary}");
    Ok(())
}

fn selftest(args: SelftestArgs) -> Result<()> {
    let report = run_selftest(args.seed);
    for c in &report.checks {
        println!("{}", serde_json::to_string(c)?);
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !report.all_passed() {
        bail!("self-test failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Detect(a) => detect(a),
        Command::Fuse(a) => fuse(a),
        Command::Bench(a) => bench(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
