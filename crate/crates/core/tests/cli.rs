use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
n_users = 150
n_stores = 60
n_orders_per_user = 16
n_locations = 12
n_brands = 20
n_cuisines = 8
n_clusters = 4
trend_pool = 10
span_days = 40

[data]
test_days = 5
valid_days = 5

[sonly]
dim = 8

[reprec]
dim = 8
history_limit = 10

[exprec]
dim = 8
history_limit = 5
neighbors = 5

[ensemble]
dim = 8
attn_dim = 8
history_limit = 5
max_train_instances = 300

[train]
lr = 0.01
max_epochs = 2
patience = 2
valid_cases = 50
"#;

fn fdrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdrec"))
        .args(args)
        .env("FDREC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesize the small dataset into `dir`; returns its config path.
fn small_dataset(dir: &Path) -> PathBuf {
    let seed_cfg = dir.join("small.toml");
    fs::write(&seed_cfg, SMALL).unwrap();
    let data = dir.join("d");
    let o = fdrec(&["synth", "--config", s(&seed_cfg), "--seed", "7", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data.join("fdrec.toml")
}

fn run_dir(cfg: &Path) -> PathBuf {
    let runs = cfg.parent().unwrap().join("runs");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&fdrec(&["frobnicate"])), 2);
    assert_eq!(code(&fdrec(&[])), 2);
    assert_eq!(code(&fdrec(&["train", "--config", "x.toml"])), 2);
    let o = fdrec(&["eval", "--config", "missing.toml", "--model", "hispop", "--protocol", "exploration"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hispop cannot score exploration"), "{}", stderr(&o));
    assert_eq!(code(&fdrec(&["eval", "--config", "missing.toml", "--model", "exprec", "--protocol", "repeat"])), 2);
    assert_eq!(code(&fdrec(&["train", "--config", "missing.toml", "--model", "hispop"])), 2);
    assert_eq!(code(&fdrec(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = fdrec(&["ingest", "--config", s(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
    let o = Command::new(env!("CARGO_BIN_EXE_fdrec"))
        .args(["ingest", "--config", s(&bad)])
        .env("FDREC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\ninteractions = \"nope.tsv\"\n").unwrap();
    let o = fdrec(&["ingest", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.tsv"), "{}", stderr(&o));
}

#[test]
fn synth_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    let o = fdrec(&["analyze", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = run_dir(&cfg).join("analysis");
    for f in ["repeat_ratio.csv", "explored.csv", "cdf_users.csv", "cdf_stores.csv", "inf_his.csv", "inf_col.csv", "summary.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let o = fdrec(&["ingest", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir(&cfg).join("split.json")).unwrap()).unwrap();
    assert_eq!(manifest["users"], 150);
    assert_eq!(manifest["interactions"], 150 * 16);
}

#[test]
fn locked_run_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    assert_eq!(code(&fdrec(&["ingest", "--config", s(&cfg)])), 0);
    let lock = run_dir(&cfg).join("run.lock");
    fs::write(&lock, "").unwrap();
    let o = fdrec(&["ingest", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
    fs::remove_file(&lock).unwrap();
    assert_eq!(code(&fdrec(&["ingest", "--config", s(&cfg)])), 0);
}

#[test]
fn train_eval_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_dataset(dir.path());
    let c = s(&cfg);

    let o = fdrec(&["train", "--config", c, "--model", "ensemble"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("reprec checkpoint"), "{}", stderr(&o));
    let o = fdrec(&["eval", "--config", c, "--model", "sonly"]);
    assert_eq!(code(&o), 1);

    let pipeline = || -> Vec<(String, Vec<u8>)> {
        for m in ["sonly", "reprec", "exprec", "ensemble"] {
            let o = fdrec(&["train", "--config", c, "--model", m]);
            assert_eq!(code(&o), 0, "{m}: {}", stderr(&o));
        }
        for m in ["hispop", "sonly", "reprec", "exprec", "ensemble", "concat"] {
            let o = fdrec(&["eval", "--config", c, "--model", m, "--protocol", "all"]);
            assert_eq!(code(&o), 0, "{m}: {}", stderr(&o));
        }
        let o = fdrec(&["report", "--config", c]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let run = run_dir(&cfg);
        let mut files = Vec::new();
        for sub in ["checkpoints", "reports", "logs"] {
            let mut paths: Vec<PathBuf> = fs::read_dir(run.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            paths.sort();
            for p in paths {
                files.push((p.display().to_string(), fs::read(&p).unwrap()));
            }
        }
        files.push(("summary".into(), fs::read(run.join("summary.tsv")).unwrap()));
        files
    };
    let first = pipeline();
    assert_eq!(first.len(), 4 + 6 + 4 + 1);
    let summary = String::from_utf8(first.last().unwrap().1.clone()).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 7, "{summary}");
    let hispop = rows.iter().find(|r| r.starts_with("hispop\t")).unwrap();
    assert!(hispop.ends_with("\t-\t-\t-\t-\t-\t-"), "{hispop}");
    assert_eq!(first, pipeline());
}
