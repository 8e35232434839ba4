//! End-to-end checks of the `pnsc` binary: exit codes, prerequisite
//! ordering, and a miniature corpus-to-audio pipeline.

use std::path::Path;
use std::process::Command;

fn pnsc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pnsc"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn pnsc");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "group_count = 0\n").unwrap();
    let out = pnsc()
        .args(["--config", conf.to_str().unwrap(), "gen-corpus", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_prerequisite_exits_3_and_names_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = pnsc()
        .args(["train-embedder", "--manifest"])
        .arg(dir.path().join("nope.tsv"))
        .arg("--out")
        .arg(dir.path().join("e.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pnsc gen-corpus"), "stderr: {}", stderr);
}

#[test]
fn decode_before_training_names_train_bank() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("x.pns");
    std::fs::write(&stream, b"junk").unwrap();
    let out = pnsc()
        .args(["decode", "--input"])
        .arg(&stream)
        .arg("--bank")
        .arg(dir.path().join("bank.bin"))
        .arg("--clusters")
        .arg(dir.path().join("clusters.bin"))
        .arg("--out")
        .arg(dir.path().join("y.wav"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pnsc train-bank"), "stderr: {}", stderr);
}

#[test]
fn mini_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("pipeline.conf");
    std::fs::write(
        &conf,
        "group_count = 2\nseed = 5\nembed_steps = 4\nembed_batch = 8\n\
         decoder_steps = 2\ndecoder_batch_chunks = 1\n",
    )
    .unwrap();
    let conf = conf.to_str().unwrap().to_string();
    let p = |name: &str| dir.path().join(name);
    let corpus = p("corpus");
    let manifest = corpus.join("manifest.tsv");

    run_ok(pnsc().args(["--config", &conf, "gen-corpus", "--groups", "2"]).args([
        "--speakers-per-group",
        "2",
        "--utterances",
        "2",
        "--seconds",
        "0.4",
        "--out",
        corpus.to_str().unwrap(),
    ]));
    assert!(manifest.is_file());

    run_ok(
        pnsc()
            .args(["--config", &conf, "train-embedder"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(p("embedder.ckpt")),
    );
    // a JSON-lines log appears next to the checkpoint
    let log = std::fs::read_to_string(p("embedder.ckpt.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["loss"].is_f64() && first["step"] == 0);

    run_ok(
        pnsc()
            .args(["--config", &conf, "cluster"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--embedder")
            .arg(p("embedder.ckpt"))
            .arg("--out")
            .arg(p("clusters.bin")),
    );
    run_ok(
        pnsc()
            .args(["--config", &conf, "train-bank"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--clusters")
            .arg(p("clusters.bin"))
            .arg("--out")
            .arg(p("bank.bin")),
    );

    let wav = corpus.join("spk00_u00.wav");
    let stdout = run_ok(
        pnsc()
            .args(["--config", &conf, "encode"])
            .arg("--input")
            .arg(&wav)
            .arg("--embedder")
            .arg(p("embedder.ckpt"))
            .arg("--clusters")
            .arg(p("clusters.bin"))
            .arg("--out")
            .arg(p("utt.pns")),
    );
    assert!(stdout.contains("1600 bps"), "stdout: {}", stdout);

    run_ok(
        pnsc()
            .args(["--config", &conf, "decode"])
            .arg("--input")
            .arg(p("utt.pns"))
            .arg("--bank")
            .arg(p("bank.bin"))
            .arg("--clusters")
            .arg(p("clusters.bin"))
            .arg("--out")
            .arg(p("decoded.wav")),
    );
    assert!(wav_duration(&p("decoded.wav")) > 0.3);

    // a foreign cluster model must be refused at decode time
    run_ok(
        pnsc()
            .env("PNSC_GROUP_COUNT", "1")
            .args(["--config", &conf, "cluster"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--embedder")
            .arg(p("embedder.ckpt"))
            .arg("--out")
            .arg(p("other.bin")),
    );
    let out = pnsc()
        .args(["--config", &conf, "decode"])
        .arg("--input")
        .arg(p("utt.pns"))
        .arg("--bank")
        .arg(p("bank.bin"))
        .arg("--clusters")
        .arg(p("other.bin"))
        .arg("--out")
        .arg(p("d2.wav"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

fn wav_duration(path: &Path) -> f64 {
    let bytes = std::fs::read(path).unwrap();
    // 16-bit mono at 16 kHz with a 44-byte canonical header
    (bytes.len().saturating_sub(44)) as f64 / 2.0 / 16_000.0
}
