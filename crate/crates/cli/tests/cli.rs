use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_txpattern"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn txpattern")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
output_dir = "out"

[seeds]
master = 11

[synth]
per_pattern = 8
windows = 2
noise_edges = 30

[datasets]
train_target = 40

[train]
variants = ["gcn", "sage"]

[train.hyper]
max_epochs = 2
"#;

fn tiny_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    dir
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["dissect", "--rho", "7q"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--variant", "mlp"])), 1);
    fs::write(dir.path().join("bad.toml"), "[communities]\nmin_size = 0\n").unwrap();
    let o = run(dir.path(), &["--config", "bad.toml", "run"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = run(dir.path(), &["--config", "missing.toml", "run"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn stage_before_its_prerequisite_is_a_data_error() {
    let dir = tiny_project();
    let o = run(dir.path(), &["--config", "cfg.toml", "dissect"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("dissect") && err.contains("ingest"), "{err}");
    assert!(!dir.path().join("out/dissect").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tiny_project();
    let o = run(dir.path(), &["--config", "cfg.toml", "--dry-run", "run", "--from", "label"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let stages: Vec<&str> = text.lines().map(|l| l.split_whitespace().nth(2).unwrap()).collect();
    assert_eq!(stages, ["label", "features", "datasets", "train", "evaluate", "report"]);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn full_run_is_reproducible_and_resumable() {
    let dir = tiny_project();
    let o = run(dir.path(), &["--config", "cfg.toml", "run", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = dir.path().join("out/report");
    for f in ["matrix_gcn.csv", "matrix_sage.csv", "report.txt", "long.csv", "best.csv", "manifest.json", "resolved-config.toml"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let first = read_tree(&dir.path().join("out"));

    let o = run(dir.path(), &["--config", "cfg.toml", "run", "--from", "label"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_tree(&dir.path().join("out")), first);

    // Same config in a second tree: every artifact and manifest matches.
    let o = run(dir.path(), &["--config", "cfg.toml", "--output-dir", "again", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        t.into_iter().filter(|(p, _)| !p.ends_with("resolved-config.toml")).collect()
    };
    assert_eq!(strip(read_tree(&dir.path().join("again"))), strip(first));
}

#[test]
fn changed_config_is_refused_downstream() {
    let dir = tiny_project();
    assert_eq!(code(&run(dir.path(), &["--config", "cfg.toml", "run"])), 0);
    let o = run(dir.path(), &["--config", "cfg.toml", "--master-seed", "12", "run", "--from", "label"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("label") && err.contains("different configuration"), "{err}");
}

#[test]
fn single_model_training_and_external_evaluation() {
    let dir = tiny_project();
    let o = run(dir.path(), &["--config", "cfg.toml", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before = fs::read(dir.path().join("out/train/models/gcn-collector.gae")).unwrap();

    let o = run(
        dir.path(),
        &["--config", "cfg.toml", "train", "--variant", "gat", "--pattern", "sink", "--seed", "5"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let models = dir.path().join("out/train/models");
    assert!(models.join("gat-sink.gae").is_file());
    // A different train seed invalidates the earlier models.
    assert!(!models.join("gcn-collector.gae").exists());

    let o = run(dir.path(), &["--config", "cfg.toml", "train", "--variant", "gcn", "--pattern", "collector"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(models.join("gcn-collector.gae")).unwrap(), before);
    let o = run(dir.path(), &["--config", "cfg.toml", "train", "--variant", "gcn", "--pattern", "sink"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(models.join("gcn-collector.gae").is_file() && models.join("gcn-sink.gae").is_file());

    let o = run(
        dir.path(),
        &["--config", "cfg.toml", "evaluate", "--models", "out/train/models", "--out", "bundle"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let long = fs::read_to_string(dir.path().join("bundle/long.csv")).unwrap();
    assert!(long.starts_with("variant,train_pattern,eval_pattern,mean_error,n\n"));
    assert!(long.contains("gcn,collector,sink,"));
    assert!(long.contains("gcn,branching,sink,NA,0"));
    assert!(!dir.path().join("bundle/matrix_sage.csv").exists());
}

#[test]
fn external_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("Time,Date,Sender_account,Receiver_account,Amount\n");
    for leaf in 0..6 {
        csv.push_str(&format!("10:00:0{leaf},2023-01-02,L{leaf},HUB,5.0\n"));
    }
    csv.push_str("not a time,2023-01-02,X,Y,1\n");
    csv.push_str("11:00:00,2023-01-03,Z,Z,1\n");
    fs::write(dir.path().join("tx.csv"), csv).unwrap();
    fs::write(
        dir.path().join("cfg.toml"),
        "output_dir = \"out\"\n[input]\npath = \"tx.csv\"\n",
    )
    .unwrap();
    let o = run(dir.path(), &["--config", "cfg.toml", "synth", "--dry-run"]);
    assert_eq!(code(&o), 0);
    for stage in ["ingest", "dissect", "communities", "label"] {
        let o = run(dir.path(), &["--config", "cfg.toml", stage]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let report = fs::read_to_string(dir.path().join("out/ingest/load_report.json")).unwrap();
    assert!(report.contains("\"rows_read\": 8"), "{report}");
    assert!(report.contains("\"self_transfers\": 1"), "{report}");
    assert!(report.contains("\"transactions\": 6"), "{report}");
    let labels = fs::read_to_string(dir.path().join("out/label/labels.json")).unwrap();
    assert!(labels.contains("\"pattern\": \"collector\""), "{labels}");

    // Editing the input file changes the ingest fingerprint.
    fs::write(dir.path().join("tx.csv"), "Time,Date,Sender_account,Receiver_account\n10:00:00,2023-01-02,A,B\n").unwrap();
    let o = run(dir.path(), &["--config", "cfg.toml", "dissect"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("different configuration"));
}
