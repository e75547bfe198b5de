use std::path::Path;
use std::process::{Command, Output};

fn segrobust(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segrobust"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SRST_SEED")
        .env("SRST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = segrobust(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["toygen", "features", "segment", "resegment", "train", "evaluate", "experiment", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }

    let bad = segrobust(&["frobnicate"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("Usage"));

    assert_eq!(code(&segrobust(&[], dir.path())), 2);
    assert_eq!(code(&segrobust(&["segment", "--in", "x.wav"], dir.path())), 2);
    assert_eq!(code(&segrobust(&["experiment", "--plan", "nope", "--scale", "smoke"], dir.path())), 2);
    assert_eq!(code(&segrobust(&["experiment", "--scale", "huge"], dir.path())), 2);
    assert_eq!(code(&segrobust(&["segment", "--in", "x.wav", "--out", "s.jsonl", "--frame-ms", "15"], dir.path())), 2);
}

#[test]
fn bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = segrobust(&["features", "--in", "absent.wav", "--out", "f"], dir.path());
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("absent.wav"));

    std::fs::write(dir.path().join("junk.wav"), b"not a wav file").unwrap();
    let corrupt = segrobust(&["features", "--in", "junk.wav", "--out", "f"], dir.path());
    assert_eq!(code(&corrupt), 1);
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn seed_flag_and_environment_agree() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{"documents": 6}"#).unwrap();
    let flag = segrobust(&["toygen", "--spec", "spec.json", "--out", "a", "--seed", "5"], dir.path());
    assert_eq!(code(&flag), 0, "{}", stderr(&flag));
    let env = Command::new(env!("CARGO_BIN_EXE_segrobust"))
        .args(["toygen", "--spec", "spec.json", "--out", "b"])
        .current_dir(dir.path())
        .env("SRST_SEED", "5")
        .env("SRST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    let other = segrobust(&["toygen", "--spec", "spec.json", "--out", "c", "--seed", "6"], dir.path());
    assert_eq!(code(&other), 0);
    let manifest = |d: &str| read(&dir.path().join(d).join("train.jsonl"));
    assert_eq!(manifest("a"), manifest("b"));
    assert_ne!(manifest("a"), manifest("c"));
    assert_eq!(read(&dir.path().join("a/audio/doc00000.wav")), read(&dir.path().join("b/audio/doc00000.wav")));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.json"), r#"{"documents": 12, "max_sentences": 3}"#).unwrap();
    std::fs::write(
        p.join("train.json"),
        r#"{"model": {"d_model": 16, "heads": 2, "ffn_dim": 16, "encoder_layers": 1, "decoder_layers": 1, "conv_channels": 2},
            "train": {"steps": 6, "batch_pairs": 4, "warmup_steps": 2}}"#,
    )
    .unwrap();

    let run = |args: &[&str]| {
        let o = segrobust(args, p);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["toygen", "--spec", "spec.json", "--out", "data", "--seed", "2"]);
    let wav = read(&p.join("data/audio/doc00000.wav"));
    assert_eq!(&wav[..4], b"RIFF");
    assert_eq!(u16::from_le_bytes([wav[22], wav[23]]), 1, "mono");
    assert_eq!(u32::from_le_bytes([wav[24], wav[25], wav[26], wav[27]]), 16_000);
    assert_eq!(u16::from_le_bytes([wav[34], wav[35]]), 16, "PCM16");
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "merges.txt", "vocab.tsv"] {
        assert!(p.join("data").join(f).exists(), "{f}");
    }
    let first = String::from_utf8(read(&p.join("data/train.jsonl"))).unwrap();
    let entry: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["audio", "start_s", "end_s", "src", "tgt", "ctx", "doc_id", "idx"] {
        assert!(entry.get(key).is_some(), "manifest field {key}");
    }

    run(&["features", "--in", "data/audio/doc00000.wav", "--out", "feats"]);
    assert_eq!(&read(&p.join("feats/doc00000.feat"))[..8], b"SRSTFEAT");

    run(&["segment", "--in", "data/audio", "--out", "vad.jsonl", "--seed", "2"]);
    let segs = String::from_utf8(read(&p.join("vad.jsonl"))).unwrap();
    let seg: serde_json::Value = serde_json::from_str(segs.lines().next().unwrap()).unwrap();
    assert!(seg["end_s"].as_f64().unwrap() > seg["start_s"].as_f64().unwrap());

    run(&["resegment", "--in", "data/train.jsonl", "--out", "reseg.jsonl", "--seed", "2"]);
    assert!(!read(&p.join("reseg.jsonl")).is_empty());

    run(&["train", "--config", "train.json", "--data", "data", "--out", "m.ckpt", "--seed", "2"]);
    assert_eq!(&read(&p.join("m.ckpt"))[..8], b"SRSTCKPT");
    let log = String::from_utf8(read(&p.join("m.ckpt.log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 6);
    let step: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(step["step"], 6);

    run(&["evaluate", "--ckpt", "m.ckpt", "--manifest", "data/test.jsonl", "--beam", "2", "--report", "rep.json"]);
    let rep: serde_json::Value = serde_json::from_slice(&read(&p.join("rep.json"))).unwrap();
    assert!(rep["bleu"].as_f64().unwrap() >= 0.0);
    assert!(rep["ter"].as_f64().unwrap() >= 0.0);
    assert!(p.join("rep.hyps.jsonl").exists());

    run(&[
        "evaluate", "--ckpt", "m.ckpt", "--manifest", "data/test.jsonl", "--segments", "vad.jsonl", "--report", "vad.json",
    ]);
    let wrong = segrobust(
        &["evaluate", "--ckpt", "m.ckpt", "--manifest", "data/test.jsonl", "--context", "text", "--report", "x.json"],
        p,
    );
    assert_eq!(code(&wrong), 2);
}

#[test]
fn report_lists_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = segrobust(&["experiment", "--plan", "core", "--scale", "smoke", "--seed", "3", "--out", "ex"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("TGT PAR + REG"));

    let ok = segrobust(&["report", "--in", "ex"], p);
    assert_eq!(code(&ok), 0);
    assert_eq!(ok.stdout, table.as_bytes());
    let csv = String::from_utf8(read(&p.join("ex/results.csv"))).unwrap();
    assert!(csv.starts_with("system,segmentation,bleu,ter,best_bleu,best_ter"));
    assert_eq!(csv.lines().count(), 4);

    std::fs::remove_file(p.join("ex/cells/fine-tune.vad.json")).unwrap();
    let missing = segrobust(&["report", "--in", "ex"], p);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("FINE-TUNE / vad"), "{}", stderr(&missing));

    // resuming recomputes exactly the missing cell
    let again = segrobust(&["experiment", "--plan", "core", "--scale", "smoke", "--seed", "3", "--out", "ex"], p);
    assert_eq!(code(&again), 0);
    assert_eq!(again.stdout, table.as_bytes());

    let clash = segrobust(&["experiment", "--plan", "core", "--scale", "smoke", "--seed", "4", "--out", "ex"], p);
    assert_eq!(code(&clash), 2);
}
