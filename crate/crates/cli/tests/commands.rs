use std::path::{Path, PathBuf};

use mfds_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use mfds_core::checkpoint;
use mfds_core::train::{read_log, predict_logits, BEST_FILE, LAST_FILE, LOG_FILE};
use mfds_data::io::{load_dataset, mask_image, save_png};

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv: Vec<&str> = std::iter::once("mfds").chain(args.iter().copied()).collect();
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    out
}

fn generate(dir: &Path, count: usize, size: usize, seed: u64) {
    ok(&["generate", "--out", p(dir), "--count", &count.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string()]);
}

fn train(data: &Path, out: &Path, epochs: usize, resume: Option<&Path>) -> String {
    let e = epochs.to_string();
    let mut args = vec!["--set", "train.batch_size=2", "train", "--data", p(data), "--out", p(out), "--epochs", &e, "--seed", "5"];
    if let Some(r) = resume {
        args.extend(["--resume", p(r)]);
    }
    ok(&args)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn generate_is_deterministic_and_reports_change_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = ok(&["generate", "--out", p(&a), "--count", "16", "--size", "32", "--seed", "4"]);
    ok(&["generate", "--out", p(&b), "--count", "16", "--size", "32", "--seed", "4"]);
    for sub in ["A", "B", "label"] {
        let (fa, fb) = (files(&a.join(sub)), files(&b.join(sub)));
        assert_eq!(fa.len(), 16);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
    let reported: f64 = out.lines().find_map(|l| l.strip_prefix("change_fraction ")).unwrap().parse().unwrap();
    let ds = load_dataset(&a, "").unwrap();
    let changed: usize = ds.iter().map(|s| s.unwrap().changed_pixels()).sum();
    assert_eq!(reported, changed as f64 / (16.0 * 32.0 * 32.0));
}

#[test]
fn train_logs_epochs_and_resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4, 64, 2);

    let straight = tmp.path().join("straight");
    let out = train(&data, &straight, 3, None);
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 3);
    assert!(out.contains("best val F1"));
    for f in [BEST_FILE, LAST_FILE, LOG_FILE] {
        assert!(straight.join(f).exists(), "{f}");
    }

    let split = tmp.path().join("split");
    train(&data, &split, 2, None);
    train(&data, &split, 1, Some(&split.join(LAST_FILE)));
    let a = read_log(&straight.join(LOG_FILE)).unwrap();
    let b = read_log(&split.join(LOG_FILE)).unwrap();
    assert_eq!(b.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_loss, y.train_loss);
    }
    let x = checkpoint::load::<f32>(&straight.join(LAST_FILE)).unwrap();
    let y = checkpoint::load::<f32>(&split.join(LAST_FILE)).unwrap();
    assert_eq!(x.meta.epoch, y.meta.epoch);
    assert_eq!(x.meta.adam_step, y.meta.adam_step);
    for ((_, e), (_, f)) in x.model.store.iter().zip(y.model.store.iter()) {
        assert_eq!(e.name, f.name);
        assert!(e.value == f.value, "{} differs", e.name);
    }
    assert!(x.adam.as_ref().map(|a| &a.moments) == y.adam.as_ref().map(|a| &a.moments), "optimizer state differs");
}

#[test]
fn eval_fold_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4, 64, 8);
    let run_dir = tmp.path().join("run");
    train(&data, &run_dir, 1, None);
    let ckpt = run_dir.join(BEST_FILE);

    // Relabel with the model's own decisions so the score is exactly 100%.
    let model = checkpoint::load::<f32>(&ckpt).unwrap().model;
    let samples = load_dataset(&data, "").unwrap().load_all().unwrap();
    let logits = predict_logits(&model, &samples, 2).unwrap();
    let mut all: Vec<f32> = logits.iter().flat_map(|l| l.data().to_vec()).collect();
    all.sort_by(f32::total_cmp);
    let z = all[all.len() / 2];
    let thr = 1.0 / (1.0 + (-(z as f64)).exp());
    for (s, l) in samples.iter().zip(&logits) {
        let mask = mfds_core::metrics::binarize(l, thr);
        save_png(&data.join("label").join(format!("{}.png", s.id)), &mask_image(&mask)).unwrap();
    }
    let t = thr.to_string();
    let overlays = tmp.path().join("overlays");
    let records = tmp.path().join("records");
    let out = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--threshold", &t, "--overlay-dir", p(&overlays), "--out", p(&records)]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, vec!["100.000"; 5], "{out}");
    assert_eq!(files(&overlays).len(), 4);
    assert_eq!(std::fs::read_to_string(records.join(mfds_cli::METRICS_FILE)).unwrap().lines().count(), 1);

    let folded = tmp.path().join("folded.safetensors");
    let out = ok(&["fold", "--checkpoint", p(&ckpt), "--out", p(&folded)]);
    let dev: f64 = out.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(dev < 1e-4, "{out}");
    let twice = tmp.path().join("twice.safetensors");
    ok(&["fold", "--checkpoint", p(&folded), "--out", p(&twice)]);
    assert_eq!(std::fs::read(&folded).unwrap(), std::fs::read(&twice).unwrap());

    let metrics = |c: &Path| -> Vec<f64> {
        let out = ok(&["eval", "--checkpoint", p(c), "--data", p(&data), "--threshold", "0.5"]);
        out.lines().nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect()
    };
    for (x, y) in metrics(&ckpt).iter().zip(metrics(&folded)) {
        assert!((x - y).abs() <= 0.001, "{x} vs {y}");
    }

    let id = &samples[0].id;
    let pred_dir = tmp.path().join("pred");
    let a = data.join("A").join(format!("{id}.png"));
    let b = data.join("B").join(format!("{id}.png"));
    ok(&["predict", "--checkpoint", p(&folded), "--image-a", p(&a), "--image-b", p(&b), "--out", p(&pred_dir)]);
    let mask = image::open(pred_dir.join("mask.png")).unwrap().to_luma8();
    let heat = image::open(pred_dir.join("heatmap.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (64, 64));
    assert_eq!(heat.dimensions(), (64, 64));
    for (m, h) in mask.pixels().zip(heat.pixels()) {
        assert!(m[0] == 0 || m[0] == 255);
        assert_eq!(m[0] == 255, h[0] >= 128);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
    assert_eq!(cli(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(cli(&["--set", "train.nope=1", "print-config"]).0, EXIT_USAGE);
    assert_eq!(cli(&["--set", "novalue", "print-config"]).0, EXIT_USAGE);
    let missing = tmp.path().join("missing.safetensors");
    let (code, _, err) = cli(&["fold", "--checkpoint", p(&missing), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code, EXIT_RUNTIME, "{err}");
    let (code, _, _) = cli(&["train", "--data", p(&tmp.path().join("nothing")), "--out", p(tmp.path())]);
    assert_eq!(code, EXIT_RUNTIME);
    assert_eq!(cli(&["train", "--out", p(tmp.path())]).0, EXIT_USAGE);
}

#[test]
fn print_config_round_trips_through_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dumped = ok(&["--set", "train.theta=0.3", "--set", "synth.size=128", "print-config"]);
    assert!(dumped.contains("train.theta = 0.3"));
    let path = tmp.path().join("run.cfg");
    std::fs::write(&path, &dumped).unwrap();
    assert_eq!(ok(&["--config", p(&path), "print-config"]), dumped);
    let overridden = ok(&["--config", p(&path), "--set", "train.theta=0.25", "print-config"]);
    assert!(overridden.contains("train.theta = 0.25"));
}
