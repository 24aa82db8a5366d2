use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
num_examples = 60
dim = 8
min_len = 20
max_len = 30
cue_len = 3
cue_amplitude = 2.0
num_speakers = 4

[model]
lstm_units = 8
heads = 2
head_dim = 4
mlp_hidden = [16]

[train]
lr = 0.003
batch_size = 8
max_steps = 30
eval_interval = 10

[augment]
warp_w = 2
freq_f = 2
time_t = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_speechsent"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    Workspace {
        _dir: dir,
        root,
        config,
    }
}

fn synth_and_train(w: &Workspace, out: &str) -> (PathBuf, PathBuf) {
    let data = w.root.join("data");
    if !data.join("manifest.tsv").exists() {
        let o = run(&["synth", "--config", s(&w.config), "--out", s(&data), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = data.join("manifest.tsv");
    let out = w.root.join(out);
    let o = run(&[
        "train",
        "--config",
        s(&w.config),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (manifest, out.join("model.sntc"))
}

#[test]
fn synth_train_eval_is_reproducible() {
    let w = workspace();
    let (manifest, ckpt_a) = synth_and_train(&w, "run_a");
    let (_, ckpt_b) = synth_and_train(&w, "run_b");
    assert_eq!(fs::read(&ckpt_a).unwrap(), fs::read(&ckpt_b).unwrap());
    for f in ["model.sntc.json", "train_log.csv", "metrics.json", "run.json"] {
        assert!(ckpt_a.parent().unwrap().join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(ckpt_a.parent().unwrap().join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,split,loss,WA,UA\n"));

    let mut reports = Vec::new();
    for (ckpt, out) in [(&ckpt_a, "eval_a"), (&ckpt_b, "eval_b")] {
        let out = w.root.join(out);
        let o = run(&[
            "eval",
            "--checkpoint",
            s(ckpt),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        assert!(out.join("run.json").is_file());
        reports.push(v);
    }
    assert_eq!(reports[0]["wa"], reports[1]["wa"]);
    assert_eq!(reports[0], reports[1]);

    let run_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.root.join("data/run.json")).unwrap()).unwrap();
    assert_eq!(run_json["command"], "synth");
    assert_eq!(run_json["seeds"]["synth"], 3);
}

#[test]
fn predict_and_viz_on_a_trained_model() {
    let w = workspace();
    let (manifest, ckpt) = synth_and_train(&w, "run");
    let feat = w.root.join("data/features");
    let first = fs::read_dir(&feat).unwrap().next().unwrap().unwrap().path();
    let o = run(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--features",
        s(&first),
        "--out",
        s(&w.root.join("p")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 3);
    let total: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);

    let viz_dir = w.root.join("viz");
    let o = run(&[
        "viz",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--index",
        "2",
        "--out",
        s(&viz_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let html = fs::read_to_string(viz_dir.join("viz_2.html")).unwrap();
    assert!(html.contains("<span class=\"att-high\">"));
    let o = run(&[
        "viz",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--index",
        "2",
        "--format",
        "ansi",
        "--out",
        s(&viz_dir),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\x1b[48;5;196m"));
}

#[test]
fn gradcheck_passes_and_reports_numerical_failure() {
    let w = workspace();
    let out = w.root.join("gc");
    let o = run(&[
        "gradcheck",
        "--config",
        s(&w.config),
        "--coords",
        "50",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert!(out.join("run.json").is_file());

    // nothing passes a zero tolerance, which is a numerical failure
    let o = run(&[
        "gradcheck",
        "--config",
        s(&w.config),
        "--coords",
        "50",
        "--tolerance",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let w = workspace();
    let data = w.root.join("data");
    assert_eq!(code(&run(&["synth", "--config", s(&w.config), "--out", s(&data)])), 0);
    let o = run(&[
        "train",
        "--config",
        s(&w.config),
        "--set",
        "train.lr=1e38",
        "--set",
        "train.clip_norm=1e38",
        "--manifest",
        s(&data.join("manifest.tsv")),
        "--out",
        s(&w.root.join("t")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_with_one() {
    let w = workspace();
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train", "--manifest", "x"])), 1);
    assert_eq!(code(&run(&["synth", "--out", s(&w.root), "--set", "nonsense"])), 1);
    assert_eq!(
        code(&run(&["gradcheck", "--variant", "transformer", "--out", s(&w.root)])),
        1
    );
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn bad_inputs_exit_with_two() {
    let w = workspace();
    let (manifest, ckpt) = synth_and_train(&w, "run");

    let bad = manifest.with_file_name("bad.tsv");
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replacen("\tneutral\t", "\tjubilant\t", 1);
    let text = if text.contains("jubilant") {
        text
    } else {
        fs::read_to_string(&manifest)
            .unwrap()
            .replacen("\tpositive\t", "\tjubilant\t", 1)
    };
    fs::write(&bad, text).unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&bad),
        "--out",
        s(&w.root),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("jubilant"));

    let missing = w.root.join("nope.tsv");
    assert_eq!(
        code(&run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&missing)])),
        2
    );

    let garbage = w.root.join("garbage.asrf");
    fs::write(&garbage, b"not features").unwrap();
    assert_eq!(
        code(&run(&["predict", "--checkpoint", s(&ckpt), "--features", s(&garbage)])),
        2
    );

    let broken_cfg = w.root.join("broken.toml");
    fs::write(&broken_cfg, "[train\nlr = ").unwrap();
    assert_eq!(
        code(&run(&["synth", "--config", s(&broken_cfg), "--out", s(&w.root)])),
        2
    );

    let unknown_key = w.root.join("unknown.toml");
    fs::write(&unknown_key, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(
        code(&run(&["synth", "--config", s(&unknown_key), "--out", s(&w.root)])),
        2
    );
}
