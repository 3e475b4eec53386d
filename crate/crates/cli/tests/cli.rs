use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctkt")).args(args).output().expect("spawn ctkt")
}

fn ok(args: &[&str]) -> String {
    let out = ctkt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a tiny experiment config whose output dir is `dir/<name without .cfg>`.
fn tiny_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let body = format!(
        "output.dir = {}\ncorpus.train = 40\ncorpus.dev = 6\ncorpus.test = 6\nmodel.d_model = 16\nmodel.heads = 2\n\
         model.enc_layers = 1\nmodel.d_ff = 32\ntrain.epochs = 2\ntrain.batch_size = 8\ntrain.warmup = 10\n\
         teacher.fit_epochs = 1\ndecode.beam = 3\n{extra}",
        dir.join(name.replace(".cfg", "")).display()
    );
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_output_dir_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "corpus.train = 4\n").unwrap();
    let out = ctkt(&["gen-data", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("output.dir"), "{}", stderr(&out));
}

#[test]
fn unknown_key_and_bad_usage_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "output.dir = x\ntrain.bogus = 1\n").unwrap();
    let out = ctkt(&["train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"));
    assert_eq!(ctkt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ctkt(&["train", s(&tmp.path().join("absent.cfg"))]).status.code(), Some(2));
}

#[test]
fn defaults_round_trip_through_the_parser() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["defaults", "--output-dir", "runs/x"]);
    let cfg = tmp.path().join("d.cfg");
    fs::write(&cfg, &text).unwrap();
    let parsed = ctkt::config::ExperimentConfig::load(&cfg).unwrap();
    assert_eq!(parsed.serialize(), text);
    assert_eq!(parsed, ctkt::config::ExperimentConfig::defaults("runs/x"));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny_config(tmp.path(), "a.cfg", "");
    let b = tiny_config(tmp.path(), "b.cfg", "");
    ok(&["gen-data", s(&a)]);
    ok(&["gen-data", s(&b)]);
    for f in ["train.bin", "dev.bin", "test.bin", "train.manifest.txt", "test.stats.json"] {
        let x = fs::read(tmp.path().join("a/corpus").join(f)).unwrap();
        let y = fs::read(tmp.path().join("b/corpus").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let manifest = fs::read_to_string(tmp.path().join("a/corpus/dev.manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn train_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "run.cfg", "train.variant = kt-cl\n");
    let out_dir = tmp.path().join("run");
    ok(&["gen-data", s(&cfg)]);
    ok(&["build-teacher", s(&cfg)]);
    assert!(out_dir.join("teacher-unidirectional.ckpt").exists());
    ok(&["train", s(&cfg)]);
    for f in ["epoch-001.ckpt", "epoch-002.ckpt", "model.ckpt", "metrics.jsonl"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["kind"], "epoch");
    assert_eq!(lines[2]["kind"], "summary");
    assert_eq!(lines[2]["variant"], "kt-cl");

    // checkpoint save→load→save is byte-identical
    let model = out_dir.join("model.ckpt");
    let params = ctkt::checkpoint::load(&model).unwrap();
    let again = tmp.path().join("again.ckpt");
    ctkt::checkpoint::save(&again, &params).unwrap();
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());

    let model_s = s(&model);
    let greedy = ok(&["eval", model_s, "--config", s(&cfg), "--split", "dev"]);
    assert!(greedy.starts_with("dev CER"), "{greedy}");
    let per_utt = fs::read_to_string(out_dir.join("eval-dev.jsonl")).unwrap();
    assert_eq!(per_utt.lines().count(), 6);
    ok(&["eval", model_s, "--config", s(&cfg), "--beam", "3", "--lm-weight", "0.3"]);
    ok(&["eval", model_s, "--config", s(&cfg), "--beam", "3", "--joint-gamma", "0.3"]);
    let bad_split = ctkt(&["eval", model_s, "--config", s(&cfg), "--split", "holdout"]);
    assert_eq!(bad_split.status.code(), Some(2));

    let report = tmp.path().join("report.txt");
    let table = ok(&["report", s(&out_dir.join("metrics.jsonl")), "--out", s(&report)]);
    assert!(table.contains("kt-cl"));
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn training_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checksums = Vec::new();
    for name in ["x.cfg", "y.cfg"] {
        let cfg = tiny_config(tmp.path(), name, "train.variant = kt-rl-cif\n");
        ok(&["gen-data", s(&cfg)]);
        ok(&["train", s(&cfg)]);
        let dir = tmp.path().join(name.replace(".cfg", ""));
        checksums.push(fs::read(dir.join("model.ckpt")).unwrap());
    }
    assert_eq!(checksums[0], checksums[1]);
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "c.cfg", "");
    ok(&["gen-data", s(&cfg)]);
    let params = ctkt::model::init_params(
        &ctkt::config::ExperimentConfig::load(&cfg).unwrap().train.model,
        ctkt::model::Variant::Vanilla,
        1,
    )
    .unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    ctkt::checkpoint::save(&ckpt, &params).unwrap();
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, &bytes).unwrap();
    let out = ctkt(&["eval", s(&ckpt), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("checksum"));

    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(ctkt(&["eval", s(&ckpt), "--config", s(&cfg)]).status.code(), Some(3));
}

#[test]
fn malformed_metrics_exit_2_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("metrics.jsonl");
    fs::write(&m, "\n{ not json\n").unwrap();
    let out = ctkt(&["report", s(&m), "--out", s(&tmp.path().join("r.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("metrics.jsonl:2:"), "{}", stderr(&out));
}

#[test]
fn report_sorts_by_test_cer_and_csv_reparses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (run, cer) in [("slow", 0.4), ("best", 0.1), ("mid", 0.25)] {
        let dir = tmp.path().join(run);
        fs::create_dir_all(&dir).unwrap();
        let line = serde_json::json!({
            "kind": "summary", "variant": "vanilla", "aux": "cosine", "teacher": "none", "seed": 1,
            "epochs": 3, "averaged_epochs": [1, 2, 3], "dev_cer": cer, "test_cer": cer,
            "dev_cer_lm": cer, "test_cer_lm": cer, "forward_secs_per_iter": 0.01,
            "backward_secs_per_iter": 0.02, "checksum": "00"
        });
        fs::write(dir.join("metrics.jsonl"), format!("{line}\n")).unwrap();
        paths.push(dir.join("metrics.jsonl"));
    }
    let out = tmp.path().join("cmp.txt");
    let mut args = vec!["report", "--out", s(&out)];
    args.extend(paths.iter().map(|p| s(p)));
    ok(&args);
    let csv = fs::read_to_string(tmp.path().join("cmp.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let col = |name: &str| rows[0].iter().position(|h| *h == name).unwrap();
    let runs: Vec<&str> = rows[1..].iter().map(|r| r[col("run")]).collect();
    assert_eq!(runs, ["best", "mid", "slow"]);
    let cers: Vec<f64> = rows[1..].iter().map(|r| r[col("test_cer")].parse().unwrap()).collect();
    assert_eq!(cers, [0.1, 0.25, 0.4]);
    let table = fs::read_to_string(&out).unwrap();
    assert!(table.find("best").unwrap() < table.find("slow").unwrap());

    let missing = tmp.path().join("empty.jsonl");
    fs::write(&missing, "").unwrap();
    assert_eq!(ctkt(&["report", s(&missing), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn verify_exits_0_and_flags_injected_errors() {
    let out = ok(&["verify"]);
    assert!(out.contains("all suites passed"));
    let broken = ctkt(&["verify", "--inject-ctc-sign-error"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stdout).contains("first failure in finite-difference"));
}
