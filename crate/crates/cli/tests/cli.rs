use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn warpreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpreg"))
        .args(args)
        .env("WARPREG_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = warpreg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: &str, seed: &str) {
    ok(&["synth", "--out-dir", s(dir), "--count", count, "--size", "32", "--control-grid", "8", "--amplitude", "3", "--seed", seed]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_complete() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "3", "5");
    synth(&b, "3", "5");
    synth(&c, "3", "6");
    let (fa, fb, fc) = (dir_bytes(&a), dir_bytes(&b), dir_bytes(&c));
    assert_eq!(fa.len(), 9);
    assert!(fa.iter().any(|(n, _)| n == "pair_0002_dvf.dvf"));
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn train_register_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4", "3");
    let ck = tmp.path().join("model.c2wp");
    let csv = tmp.path().join("loss.csv");
    ok(&[
        "train", "--data-dir", s(&data), "--out", s(&ck), "--loss-csv", s(&csv), "--levels", "2", "--iters", "6",
        "--batch", "2", "--width-divisor", "8", "--log-every", "0",
    ]);
    let log = fs::read_to_string(&csv).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,data,reg,level1,total");
    assert_eq!(log.lines().count(), 7);
    assert_eq!(&fs::read(&ck).unwrap()[..4], b"C2WP");

    let dvf = tmp.path().join("u.dvf");
    let warped = tmp.path().join("w.pgm");
    let overlay = tmp.path().join("o.ppm");
    ok(&[
        "register",
        "--checkpoint", s(&ck),
        "--source", s(&data.join("pair_0000_source.imgf")),
        "--target", s(&data.join("pair_0000_target.imgf")),
        "--out-dvf", s(&dvf),
        "--out-warped", s(&warped),
        "--overlay", s(&overlay),
    ]);
    let dvf_bytes = fs::read(&dvf).unwrap();
    assert_eq!(&dvf_bytes[..4], b"DVF2");
    assert_eq!(dvf_bytes.len(), 12 + 32 * 32 * 2 * 4);
    assert!(fs::read(&warped).unwrap().starts_with(b"P5\n32 32\n255\n"));
    assert!(fs::read(&overlay).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let metrics = tmp.path().join("metrics.json");
    let out = ok(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&data), "--out", s(&metrics)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("4 pairs"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    let rows = json.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for key in ["dice", "jaccard", "epe_mean", "epe_max", "loss_breakdown"] {
        assert!(rows[0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "9");
    let run = |tag: &str| {
        let ck = tmp.path().join(format!("{tag}.c2wp"));
        ok(&["train", "--data-dir", s(&data), "--out", s(&ck), "--levels", "2", "--iters", "4", "--batch", "2", "--width-divisor", "8"]);
        let csv = tmp.path().join(format!("{tag}.c2wp.loss.csv"));
        (fs::read(&ck).unwrap(), fs::read(csv).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(warpreg(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(warpreg(&[]).status.code(), Some(1));
    let out = warpreg(&["synth", "--out-dir", s(tmp.path()), "--control-grid", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let bad = tmp.path().join("bad.c2wp");
    fs::write(&bad, b"NOPE0000").unwrap();
    let img = tmp.path().join("x.imgf");
    let out = warpreg(&["register", "--checkpoint", s(&bad), "--source", s(&img), "--target", s(&img), "--out-dvf", "u", "--out-warped", "w"]);
    assert_eq!(out.status.code(), Some(1));

    synth(&tmp.path().join("d"), "1", "1");
    let out = warpreg(&["train", "--data-dir", s(&tmp.path().join("d")), "--out", s(&tmp.path().join("m")), "--levels", "6"]);
    assert_eq!(out.status.code(), Some(1), "32 px is not divisible by 2^6");
}

#[test]
fn non_finite_training_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let shape = warpreg::Shape::new(1, 8, 8).unwrap();
    let target = warpreg::Tensor::make(shape, 0.5);
    let mut source = target.clone();
    source.values_mut()[10] = f64::NAN;
    warpreg::io::write_pair(&data, "pair_0000", &source, &target, None).unwrap();
    let out = warpreg(&["train", "--data-dir", s(&data), "--out", s(&tmp.path().join("m")), "--levels", "2", "--iters", "3", "--batch", "1", "--width-divisor", "8"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("non-finite value in") && msg.contains("at iteration 0"), "{msg}");
}

#[test]
fn registering_a_training_pair_reduces_dissimilarity() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", "2");
    let ck = tmp.path().join("m.c2wp");
    ok(&[
        "train", "--data-dir", s(&data), "--out", s(&ck), "--levels", "2", "--iters", "150", "--batch", "1",
        "--width-divisor", "8", "--lr", "3e-3",
    ]);
    let (src, tgt) = (data.join("pair_0000_source.imgf"), data.join("pair_0000_target.imgf"));
    let warped = tmp.path().join("w.imgf");
    let dvf = tmp.path().join("u.dvf");
    ok(&["register", "--checkpoint", s(&ck), "--source", s(&src), "--target", s(&tgt), "--out-dvf", s(&dvf), "--out-warped", s(&warped)]);
    let read = |p: &Path| warpreg::io::read_image(p).unwrap();
    let eps = warpreg::LossConfig::default().eps;
    let before = warpreg::loss::ncc_ssd(&read(&src), &read(&tgt), eps).unwrap();
    let after = warpreg::loss::ncc_ssd(&read(&warped), &read(&tgt), eps).unwrap();
    assert!(after < before, "before {before}, after {after}");
}
