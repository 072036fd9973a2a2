use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11
out = "run"
[backtest]
max_windows = 1
models = ["HAR_M", "GHAR_M", "HAR_Q", "GNNHAR1L_Q"]
[train]
ensemble_size = 1
hidden_dim_grid = [3]
max_epochs = 15
patience_epochs = 5
[glasso]
grid_size = 6
[evaluate]
mcs_bootstrap_reps = 100
"#;

fn volgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = volgraph(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {s:?}");
    lines[0].to_string()
}

fn pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL).unwrap();
    for cmd in ["synth", "backtest", "evaluate"] {
        ok(dir, &["--config", "run.toml", cmd]);
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_is_byte_identical_across_reruns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());

    let table = fs::read_to_string(a.path().join("run/report/loss_table.csv")).unwrap();
    let baseline = table.lines().nth(1).unwrap();
    assert!(baseline.starts_with("HAR_M,"), "{table}");
    assert!(baseline.split(',').skip(1).all(|x| x == "1.000000"), "{baseline}");
    assert_eq!(table.lines().count(), 5);

    for sub in ["data", "backtest", "report"] {
        let fa = files(&a.path().join("run").join(sub));
        let fb = files(&b.path().join("run").join(sub));
        assert_eq!(fa.len(), fb.len());
        assert!(fa.iter().any(|p| p.ends_with("manifest.json")));
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
        }
    }
}

#[test]
fn missing_input_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = volgraph(
        d.path(),
        &[
            "--seed",
            "1",
            "backtest",
            "--rv",
            "no_such_rv.csv",
            "--graph",
            "edges_gone.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let line = stderr_line(&o);
    assert!(
        line.contains("no_such_rv.csv") && line.contains("edges_gone.csv"),
        "{line}"
    );
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "seed = 1\nbogus = 3\n").unwrap();
    let o = volgraph(d.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("bogus"));

    let o = volgraph(d.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("seed"));

    fs::write(
        d.path().join("multi.toml"),
        "seed = 1\n[synth]\nnoise = -1.0\nspace = \"cubic\"\n",
    )
    .unwrap();
    let o = volgraph(d.path(), &["--config", "multi.toml", "synth"]);
    let line = stderr_line(&o);
    assert!(line.contains("synth.noise") && line.contains("synth.space"), "{line}");
}

#[test]
fn malformed_data_exits_3() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("rv.csv"), "date,asset,rv\n2020-01-02,A,oops\n").unwrap();
    fs::write(d.path().join("edges.csv"), "i,j\n").unwrap();
    let o = volgraph(
        d.path(),
        &["--seed", "1", "backtest", "--rv", "rv.csv", "--graph", "edges.csv"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("error[data]"));
}

fn manifest_input(dir: &Path, role: &str) -> String {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["inputs"][role].as_str().unwrap().to_string()
}

#[test]
fn manifest_digest_tracks_input_bytes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(
        p.join("s.toml"),
        "[synth]\nn_days = 300\nn_assets = 5\ngraph = \"path\"\n",
    )
    .unwrap();
    ok(p, &["--config", "s.toml", "--seed", "1", "--out", "a", "synth"]);
    ok(p, &["--config", "s.toml", "--seed", "2", "--out", "b", "synth"]);
    let (ra, rb) = (p.join("a/data/returns.csv"), p.join("b/data/returns.csv"));
    ok(p, &["--out", "g1", "estimate-graph", "--returns", ra.to_str().unwrap()]);
    ok(p, &["--out", "g2", "estimate-graph", "--returns", ra.to_str().unwrap()]);
    ok(p, &["--out", "g3", "estimate-graph", "--returns", rb.to_str().unwrap()]);
    let g = |s: &str| manifest_input(&p.join(s).join("graph"), "returns");
    assert_eq!(g("g1"), g("g2"));
    assert_ne!(g("g1"), g("g3"));
    for f in ["edges.csv", "spd.csv", "cv.csv"] {
        assert!(p.join("g1/graph").join(f).exists());
    }
    let m1 = fs::read(p.join("g1/graph/manifest.json")).unwrap();
    assert_eq!(m1, fs::read(p.join("g2/graph/manifest.json")).unwrap());
}

#[test]
fn compute_rv_builds_a_panel() {
    let d = tempfile::tempdir().unwrap();
    let mut text = String::from("date,asset,minute,price\n");
    for day in ["2020-01-02", "2020-01-03"] {
        for asset in ["X", "Y"] {
            for m in 0..=30u32 {
                let price = 100.0 + ((m * 7 + asset.len() as u32) % 5) as f64 * 0.1;
                text.push_str(&format!("{day},{asset},{m},{price}\n"));
            }
        }
    }
    fs::write(d.path().join("intraday.csv"), text).unwrap();
    ok(
        d.path(),
        &[
            "--out",
            "o",
            "compute-rv",
            "--intraday",
            "intraday.csv",
            "--delta",
            "5",
            "--base",
            "1",
        ],
    );
    let rv = fs::read_to_string(d.path().join("o/rv/rv.csv")).unwrap();
    assert_eq!(rv.lines().next(), Some("date,asset,rv"));
    assert_eq!(rv.lines().count(), 5);

    let o = volgraph(d.path(), &["compute-rv", "--intraday", "intraday.csv", "--delta", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
