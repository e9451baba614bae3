use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tripledit_core::audio::{read_wav_native, write_wav};
use tripledit_core::metrics::EvalReport;
use tripledit_core::Waveform;

/// Short clips keep the end-to-end runs quick.
const SHORT: &[&str] = &["--set", "dataset.clip_s=2", "--set", "dataset.event_max_s=1"];

fn tripledit(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tripledit"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("TRIPLEDIT_") {
            cmd.env_remove(k);
        }
    }
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tripledit(dir, args);
    assert!(
        out.status.success(),
        "tripledit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn short(args: &[&str]) -> Vec<String> {
    args.iter().chain(SHORT).map(|s| s.to_string()).collect()
}

fn ok_short(dir: &Path, args: &[&str]) -> String {
    let v = short(args);
    ok(dir, &v.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Corpus of 6 clips and a 10-example dataset of 2 s clips.
fn dataset(dir: &Path) -> PathBuf {
    ok_short(dir, &["synth-corpus", "--out", "corpus", "--count", "6"]);
    let summary = ok_short(dir, &["build-dataset", "--corpus", "corpus/corpus.tsv", "--out", "ds", "--per-task", "2"]);
    assert!(summary.contains("total: 10 examples"), "{summary}");
    assert!(summary.contains("digest: "));
    dir.join("ds")
}

fn sine(seconds: f64, hz: f64, sr: u32) -> Waveform {
    let n = (seconds * sr as f64).round() as usize;
    let samples = (0..n)
        .map(|i| (0.3 * (std::f64::consts::TAU * hz * i as f64 / sr as f64).sin()) as f32)
        .collect();
    Waveform::new(samples, sr).unwrap()
}

#[test]
fn config_layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "seed = 3\n[train]\nlr = 0.2\nsteps = 7\n[mel]\nhop = 128\n").unwrap();
    let shown = ok(dir.path(), &["--config", "run.conf", "show-config"]);
    assert!(shown.contains("seed = 3\n") && shown.contains("train.lr = 0.2\n") && shown.contains("mel.hop = 128\n"));

    let out = Command::new(env!("CARGO_BIN_EXE_tripledit"))
        .current_dir(dir.path())
        .args(["--config", "run.conf", "--set", "train.lr=0.5", "--seed", "11", "show-config"])
        .env("TRIPLEDIT_TRAIN_STEPS", "9")
        .env("TRIPLEDIT_TRAIN_LR", "0.3")
        .env("TRIPLEDIT_SEED", "5")
        .output()
        .unwrap();
    let shown = String::from_utf8(out.stdout).unwrap();
    assert!(shown.contains("train.steps = 9\n"), "{shown}");
    assert!(shown.contains("train.lr = 0.5\n"));
    assert!(shown.contains("seed = 11\n"));

    let bad = tripledit(dir.path(), &["--set", "mel.hop=zero", "show-config"]);
    assert!(!bad.status.success());
    let bad = tripledit(dir.path(), &["--set", "no.such.key=1", "show-config"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown configuration key"));
}

#[test]
fn missing_corpus_fails_without_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = tripledit(dir.path(), &["build-dataset", "--corpus", "nowhere.tsv", "--out", "ds", "--total", "5"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("ds/manifest.jsonl").exists());
}

#[test]
fn workflow_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ds = dataset(dir);
    let manifest = std::fs::read_to_string(ds.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);

    let trained = ok_short(dir, &["train", "--dataset", "ds", "--out", "m.ckpt", "--steps", "4"]);
    assert!(trained.contains("final loss"), "{trained}");
    assert!(dir.join("m.loss.tsv").exists());

    assert!(ok(dir, &["inspect", "m.ckpt"]).contains("tiny denoiser"));
    assert!(ok(dir, &["inspect", "m.loss.tsv"]).contains("4 steps"));
    assert!(ok(dir, &["inspect", "ds"]).contains("dataset: 10 examples"));
    let input = "ds/audio/00000_add_in.wav";
    assert!(ok(dir, &["inspect", input]).contains("16000 Hz, 32000 samples"));

    std::fs::write(dir.join("mask.txt"), "# middle\ntime 0.5 1.0\n").unwrap();
    let runs: [&[&str]; 4] = [
        &["--instruction", "add a bell", "--sampler", "ddpm"],
        &["--instruction", "add a bell", "--sampler", "sdedit", "--sdedit-steps", "20"],
        &["--instruction", "add a bell", "--sampler", "inpaint", "--mask", "mask.txt", "--variant", "rough"],
        &["--sampler", "inpaint", "--mask", "mask.txt", "--variant", "wo-text"],
    ];
    for (i, extra) in runs.iter().enumerate() {
        let out = format!("edit{i}.wav");
        let mut args = vec!["edit", "--checkpoint", "m.ckpt", "--input", input, "--out", &out];
        args.extend_from_slice(extra);
        ok_short(dir, &args);
        let w = read_wav_native(&dir.join(&out)).unwrap();
        assert_eq!((w.len(), w.sample_rate()), (32_000, 16_000));
    }

    ok_short(
        dir,
        &["edit", "--checkpoint", "m.ckpt", "--input", input, "--instruction", "add a bell", "--out", "d.wav", "--sampler", "inpaint", "--mask", "mask.txt", "--dump-dir", "dump"],
    );
    for f in ["mel_in.tgrd", "mel_out.tgrd", "z_in.tgrd", "z_out.tgrd", "mask.tgrd"] {
        assert!(dir.join("dump").join(f).exists(), "{f}");
    }
    let shown = ok(dir, &["inspect", "dump/z_out.tgrd"]);
    assert!(shown.contains("dims [4, 10, 15]"), "{shown}");

    let empty = tripledit(dir, &short(&["edit", "--checkpoint", "m.ckpt", "--input", input, "--out", "x.wav"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!empty.status.success());
    assert!(String::from_utf8_lossy(&empty.stderr).contains("instruction is empty"));
    let nomask = tripledit(dir, &short(&["edit", "--checkpoint", "m.ckpt", "--input", input, "--instruction", "x", "--out", "x.wav", "--sampler", "inpaint"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(String::from_utf8_lossy(&nomask.stderr).contains("--mask"));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    ok_short(dir, &["train", "--dataset", "ds", "--out", "full.ckpt", "--steps", "6"]);
    ok_short(dir, &["train", "--dataset", "ds", "--out", "half.ckpt", "--steps", "6", "--until", "3"]);
    assert!(ok(dir, &["inspect", "half.ckpt"]).contains("trained steps 3"));
    ok_short(dir, &["train", "--dataset", "ds", "--out", "resumed.ckpt", "--steps", "6", "--resume", "half.ckpt"]);
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
    assert_eq!(read("full.ckpt"), read("resumed.ckpt"));
    assert_eq!(read("full.loss.tsv"), read("resumed.loss.tsv"));
}

#[test]
fn oracle_checkpoint_needs_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &["--set", "model.arch=gaussian-oracle", "--set", "model.oracle_var=0.5", "train", "--out", "o.ckpt"],
    );
    assert!(out.contains("nothing to train"));
    assert!(ok(dir.path(), &["inspect", "o.ckpt"]).contains("gaussian-oracle denoiser, 0 parameters"));
}

#[test]
fn mismatched_input_needs_conform() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--set", "model.arch=gaussian-oracle", "train", "--out", "o.ckpt"]);
    write_wav(&dir.join("odd.wav"), &sine(1.5, 440.0, 8_000)).unwrap();
    let base = ["edit", "--checkpoint", "o.ckpt", "--input", "odd.wav", "--instruction", "add a bell", "--out", "e.wav"];
    let args = short(&base);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = tripledit(dir, &args);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("8000 Hz") && err.contains("--conform"), "{err}");

    write_wav(&dir.join("odd.wav"), &sine(1.5, 440.0, 16_000)).unwrap();
    let err = String::from_utf8_lossy(&tripledit(dir, &args).stderr).to_string();
    assert!(err.contains("--conform to pad or trim"), "{err}");

    let mut conform = args.clone();
    conform.push("--conform");
    ok(dir, &conform);
    assert_eq!(read_wav_native(&dir.join("e.wav")).unwrap().len(), 32_000);
}

fn eval_fixture_dirs(dir: &Path) {
    std::fs::create_dir_all(dir.join("out")).unwrap();
    std::fs::create_dir_all(dir.join("ref")).unwrap();
    let sr = 16_000;
    for (i, (a, b)) in [(440.0, 440.0), (440.0, 660.0), (1000.0, 1500.0)].iter().enumerate() {
        write_wav(&dir.join(format!("out/c{i}.wav")), &sine(1.0, *a, sr)).unwrap();
        write_wav(&dir.join(format!("ref/c{i}.wav")), &sine(1.0, *b, sr)).unwrap();
    }
}

#[test]
fn eval_pairs_by_name_and_skips_strays() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    eval_fixture_dirs(dir);
    write_wav(&dir.join("out/stray.wav"), &sine(1.0, 300.0, 16_000)).unwrap();
    let out = tripledit(dir, &["eval", "--outputs", "out", "--references", "ref", "--out", "report.json"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stray.wav has no counterpart"));
    let report = EvalReport::from_json(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.pairs.len(), 3);
    assert_eq!(report.skipped, vec!["stray.wav".to_string()]);
    assert_eq!(report.pairs[0].lsd, 0.0);

    std::fs::create_dir_all(dir.join("empty")).unwrap();
    let out = tripledit(dir, &["eval", "--outputs", "out", "--references", "empty"]);
    assert!(!out.status.success());
}

/// Fixed inputs, fixed report. Set `BLESS_GOLDEN=1` to rewrite the fixture
/// after an intentional change to the metrics.
#[test]
fn eval_matches_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    eval_fixture_dirs(dir);
    let got = ok(dir, &["eval", "--outputs", "out", "--references", "ref"]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval_golden.json");
    if std::env::var_os("BLESS_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    let want = EvalReport::from_json(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    let got = EvalReport::from_json(&got).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    assert!(close(got.lsd.value, want.lsd.value), "lsd {} vs {}", got.lsd.value, want.lsd.value);
    assert!(close(got.fd.value, want.fd.value), "fd {} vs {}", got.fd.value, want.fd.value);
    assert!(close(got.kl.value, want.kl.value), "kl {} vs {}", got.kl.value, want.kl.value);
    assert!(close(got.is.value, want.is.value), "is {} vs {}", got.is.value, want.is.value);
    for (g, w) in got.pairs.iter().zip(&want.pairs) {
        assert_eq!(g.name, w.name);
        assert!(close(g.lsd, w.lsd));
    }
}
