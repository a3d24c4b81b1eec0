//! End-to-end tests of the `yoloe` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn yoloe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yoloe"))
        .args(args)
        .env_remove("YOLOE_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 64×64 PPM: dark background with a red square and a green disk.
fn write_scene(path: &Path) {
    let size = 64;
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    for y in 0..size {
        for x in 0..size {
            let px = if (8..28).contains(&x) && (10..30).contains(&y) {
                [242, 38, 38]
            } else if (x - 46i32).pow(2) + (y - 44i32).pow(2) <= 100 {
                [38, 230, 51]
            } else {
                [20, 20, 25]
            };
            bytes.extend_from_slice(&px);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

/// A small toy run shared by the tests that need trained artifacts.
fn artifacts() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = yoloe(&[
            "train-toy",
            "--seed",
            "3",
            "--epochs",
            "1",
            "--samples",
            "16",
            "--out",
            s(dir.path()),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        write_scene(&dir.path().join("scene.ppm"));
        dir
    })
    .path()
}

fn parse_detections(text: &str) -> Vec<Value> {
    let v: Value = serde_json::from_str(text).expect("detect prints a JSON array");
    v.as_array().unwrap().clone()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&yoloe(&[])), 2);
    assert_eq!(code(&yoloe(&["detect", "--bogus"])), 2);
    assert_eq!(
        code(&yoloe(&[
            "detect",
            "--model",
            "m",
            "--image",
            "i",
            "--visual-box",
            "1,2,3"
        ])),
        2
    );

    let dir = artifacts();
    let model = dir.join("weights.yole");
    let image = dir.join("scene.ppm");
    // no prompt mode on an eager model
    let out = yoloe(&["detect", "--model", s(&model), "--image", s(&image)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    // two prompt modes at once
    let out = yoloe(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&image),
        "--visual-box",
        "0,0,10,10",
        "--prompt-free",
        "--vocab-names",
        s(&dir.join("vocab_names.json")),
        "--vocab-embeds",
        s(&dir.join("vocab_embeds.yole")),
    ]);
    assert_eq!(code(&out), 2);
    // text prompts need both files
    let out = yoloe(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&image),
        "--names",
        s(&dir.join("names.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).is_empty());

    let out = Command::new(env!("CARGO_BIN_EXE_yoloe"))
        .args(["selftest"])
        .env("YOLOE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.yole");
    let image = dir.path().join("scene.ppm");
    write_scene(&image);
    let out = yoloe(&[
        "detect",
        "--model",
        s(&missing),
        "--image",
        s(&image),
        "--visual-box",
        "0,0,8,8",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.yole"));

    let garbage = dir.path().join("garbage.yole");
    std::fs::write(&garbage, b"not an archive").unwrap();
    let out = yoloe(&[
        "detect",
        "--model",
        s(&garbage),
        "--image",
        s(&image),
        "--visual-box",
        "0,0,8,8",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).is_empty());
}

#[test]
fn text_visual_and_prompt_free_modes_print_detections() {
    let dir = artifacts();
    let model = dir.join("weights.yole");
    let image = dir.join("scene.ppm");

    let out = yoloe(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&image),
        "--text-embeds",
        s(&dir.join("text_embeds.yole")),
        "--names",
        s(&dir.join("names.json")),
        "--score-thresh",
        "0.0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dets = parse_detections(&stdout(&out));
    assert!(!dets.is_empty());
    for d in &dets {
        assert_eq!(d["box"].as_array().unwrap().len(), 4);
        assert_eq!(d["mask"]["size"], serde_json::json!([64, 64]));
        let counts: u64 = d["mask"]["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum();
        assert_eq!(counts, 64 * 64);
    }
    let scores: Vec<f64> = dets.iter().map(|d| d["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    // a box covering the whole image is a valid prompt
    let out = yoloe(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&image),
        "--visual-box",
        "0,0,64,64",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for d in parse_detections(&stdout(&out)) {
        assert_eq!(d["name"], "visual 0");
    }

    let out = yoloe(&[
        "detect",
        "--model",
        s(&model),
        "--image",
        s(&image),
        "--prompt-free",
        "--vocab-names",
        s(&dir.join("vocab_names.json")),
        "--vocab-embeds",
        s(&dir.join("vocab_embeds.yole")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    parse_detections(&stdout(&out));
    assert!(stderr(&out).contains("dot products"));
}

#[test]
fn fused_model_reproduces_eager_text_detections() {
    let dir = artifacts();
    let work = TempDir::new().unwrap();
    let fused = work.path().join("fused.yole");
    let (embeds, names) = (dir.join("text_embeds.yole"), dir.join("names.json"));
    let out = yoloe(&[
        "fuse",
        "--model",
        s(&dir.join("weights.yole")),
        "--text-embeds",
        s(&embeds),
        "--names",
        s(&names),
        "--out",
        s(&fused),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report["max_deviation"].as_f64().unwrap() <= 1e-5);

    let image = dir.join("scene.ppm");
    let eager = yoloe(&[
        "detect",
        "--model",
        s(&dir.join("weights.yole")),
        "--image",
        s(&image),
        "--text-embeds",
        s(&embeds),
        "--names",
        s(&names),
        "--score-thresh",
        "0.05",
    ]);
    let folded = yoloe(&[
        "detect",
        "--model",
        s(&fused),
        "--image",
        s(&image),
        "--score-thresh",
        "0.05",
    ]);
    assert_eq!(code(&eager), 0);
    assert_eq!(code(&folded), 0, "{}", stderr(&folded));
    assert_eq!(stdout(&eager), stdout(&folded));

    // prompts are baked in: prompt flags are rejected, and fusing again fails
    let out = yoloe(&[
        "detect",
        "--model",
        s(&fused),
        "--image",
        s(&image),
        "--text-embeds",
        s(&embeds),
        "--names",
        s(&names),
    ]);
    assert_eq!(code(&out), 2);
    let out = yoloe(&[
        "fuse",
        "--model",
        s(&fused),
        "--text-embeds",
        s(&embeds),
        "--names",
        s(&names),
        "--out",
        s(&work.path().join("again.yole")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn toy_training_is_deterministic() {
    let run = |dir: &Path| {
        let out = yoloe(&[
            "train-toy",
            "--seed",
            "7",
            "--epochs",
            "1",
            "--samples",
            "8",
            "--out",
            s(dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(dir.join("weights.yole")).unwrap()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
    let metrics = std::fs::read_to_string(a.path().join("metrics.ndjson")).unwrap();
    assert!(metrics.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn zero_epoch_training_writes_loadable_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = yoloe(&["train-toy", "--epochs", "0", "--samples", "4", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 3);
    for f in [
        "weights.yole",
        "text_embeds.yole",
        "names.json",
        "vocab_names.json",
        "vocab_embeds.yole",
        "toy_config.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let image = dir.path().join("scene.ppm");
    write_scene(&image);
    let out = yoloe(&[
        "detect",
        "--model",
        s(&dir.path().join("weights.yole")),
        "--image",
        s(&image),
        "--text-embeds",
        s(&dir.path().join("text_embeds.yole")),
        "--names",
        s(&dir.path().join("names.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn selftest_passes() {
    let out = yoloe(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|c| c["passed"] == Value::Bool(true)));
}

#[test]
fn bench_reports_dot_product_counts() {
    let dir = TempDir::new().unwrap();
    let csv: PathBuf = dir.path().join("bench.csv");
    let out = yoloe(&[
        "bench",
        "--warmup",
        "0",
        "--iterations",
        "2",
        "--classes",
        "4,8",
        "--vocab-sizes",
        "32",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("group,variant,size,median_ms,p95_ms,dot_products,kept_anchors")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 2 + 2);
    // 84 anchors in the toy model: brute force needs N·V, lazy |O'|·V + N
    let brute = rows.iter().find(|r| r[1] == "brute_force").unwrap();
    assert_eq!(brute[5], (84 * 32).to_string());
    let lazy = rows.iter().find(|r| r[1] == "lrpc").unwrap();
    let kept: u64 = lazy[6].parse().unwrap();
    assert_eq!(lazy[5], (kept * 32 + 84).to_string());
}
