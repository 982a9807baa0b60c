use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "corpus.n_dialogues=24",
    "corpus.pretrain_dialogues=24",
    "corpus.heldout_dialogues=8",
    "model.d_model=8",
    "model.n_heads=2",
    "model.n_layers=1",
    "train.epochs=1",
    "train.batch_size=8",
];

fn sdplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdplab")).args(args).env_remove("SDPLAB_OUT").output().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in TINY {
        args.extend(["--set", s]);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn models_lists_four_sets_with_one_tutor() {
    let o = sdplab(&["models"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("set ")).count(), 4);
    assert_eq!(text.matches("[tutor]").count(), 1);
    assert!(text.contains("n_models = 4"));
    assert!(text.starts_with("# tool_version="));
}

#[test]
fn existential_models_differ() {
    let o = sdplab(&["models", "--set", "consistency.relation=existential"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("n_models = "));
}

#[test]
fn gradcheck_passes() {
    let o = sdplab(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("max relative error = ")).unwrap().to_string();
    let err: f64 = line.trim_start_matches("max relative error = ").parse().unwrap();
    assert!(err <= 1e-4, "{line}");
}

#[test]
fn negative_learning_rate_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = -0.001\n").unwrap();
    let o = sdplab(&["models", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));

    let o = sdplab(&["gen-corpus", "--set", "train.learning_rate=-1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.learning_rate"));
}

#[test]
fn unknown_keys_and_bad_flags_are_validation_errors() {
    let o = sdplab(&["models", "--set", "model.depth=3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("depth"));
    let o = sdplab(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sdplab(&["models", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergent_training_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("baseline.sdpx");
    let mut args = with_tiny(vec!["train", "--mode", "baseline", "--out", out.to_str().unwrap()]);
    args.extend(["--set", "train.learning_rate=1e300", "--set", "train.clip_norm=1e300"]);
    let o = sdplab(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn gen_corpus_writes_stamped_files_and_respects_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = sdplab(&with_tiny(vec!["gen-corpus", "--out", d]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["pretrain.jsonl", "student.jsonl", "heldout.jsonl", "probes.jsonl"] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.contains("\"config_hash\""), "{f}: {header}");
        assert!(header.contains("\"tool_version\""), "{f}");
    }
    assert!(!dir.path().join(".sdplab.lock").exists());

    fs::write(dir.path().join(".sdplab.lock"), "").unwrap();
    let o = sdplab(&with_tiny(vec!["gen-corpus", "--out", d]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sdplab"))
        .args(with_tiny(vec!["gen-corpus"]))
        .env("SDPLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("student.jsonl").exists());
}

fn train(dir: &Path, mode: &str, init: Option<&str>) -> Output {
    let out = dir.join(format!("{mode}.sdpx"));
    let mut args = vec!["train", "--mode", mode, "--out", out.to_str().unwrap()];
    if let Some(i) = init {
        args.extend(["--init", i]);
    }
    let owned: Vec<String> = with_tiny(args).into_iter().map(String::from).collect();
    sdplab(&owned.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn train_then_eval_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    fs::create_dir(&ck).unwrap();
    let o = train(&ck, "baseline", None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(ck.join("baseline.loss.csv").exists());
    let base = ck.join("baseline.sdpx");
    for mode in ["tutor", "student", "student-hal"] {
        let o = train(&ck, mode, Some(base.to_str().unwrap()));
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", stderr(&o));
    }
    let o = train(&ck, "student", None);
    assert_eq!(o.status.code(), Some(1), "fine-tuning without --init");

    let out = dir.path().join("eval");
    let o = sdplab(&with_tiny(vec![
        "eval",
        "--checkpoints",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    for regime in ["baseline", "tutor", "student", "student-hal"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{regime},"))), "{csv}");
    }
    assert!(stdout(&o).contains("documentation only"));
}
