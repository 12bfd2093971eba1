//! End-to-end runs of the `magvec` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn magvec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magvec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = magvec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    magvec(dir, args).status.code().expect("exit code")
}

/// Every file under `root` with its bytes, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path) {
    ok(
        dir,
        &["--seed", "11", "synth", "--out", "ds", "--count", "3", "--width", "32", "--height", "32", "--blocks", "4"],
    );
}

/// Runs one pipeline of every command inside `dir`, returning stdout of each step.
fn pipeline(dir: &Path) -> Vec<Vec<u8>> {
    small_dataset(dir);
    let img = "ds/images/synth_0000.png";
    std::fs::create_dir_all(dir.join("pred")).unwrap();
    let mut outs = vec![
        ok(dir, &["mag", img, "mag.csv", "--method", "dense"]),
        ok(dir, &["mag", img, "patched.json", "--method", "patched", "--patch", "12", "12"]),
        ok(dir, &["mag", img, "mag.pgm", "--method", "indep"]),
        ok(dir, &["--seed", "4", "analytic1d", "--random", "--ppu", "40", "--out", "a.csv"]),
        ok(dir, &["edges", img, "sobel.png", "--method", "sobel"]),
        ok(dir, &["edges", img, "canny.png", "--method", "canny"]),
        ok(
            dir,
            &["--seed", "2", "train", "--data", "ds", "--out", "ck.json", "--epochs", "2", "--patch", "12"],
        ),
        ok(dir, &["edges", img, "model.png", "--method", "model", "--model", "ck.json"]),
    ];
    for i in 0..3 {
        let name = format!("synth_000{i}");
        outs.push(ok(
            dir,
            &[
                "edges",
                &format!("ds/images/{name}.png"),
                &format!("pred/{name}.png"),
                "--patch",
                "16",
            ],
        ));
    }
    outs.push(ok(dir, &["eval", "--pred", "pred", "--gt", "ds", "--out", "report.json", "--thresholds", "20"]));
    outs.push(ok(dir, &["topo", "pred/synth_0000.png", "--levels", "16", "--out", "curve.csv"]));
    outs.push(ok(
        dir,
        &["bench", "--images", "ds/images", "--size", "24", "--patch-sizes", "8,12", "--repeats", "1", "--no-timing", "--out", "bench.csv"],
    ));
    outs
}

#[test]
fn every_command_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let out_a = pipeline(a.path());
    let out_b = pipeline(b.path());
    assert_eq!(out_a, out_b);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    assert!(sa.contains_key(Path::new("report.csv")));
    assert!(sa.contains_key(Path::new("sobel.csv")));
}

#[test]
fn bench_schema_and_error_rows() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    std::fs::write(d.join("ds/images/broken.png"), b"not a png").unwrap();
    ok(
        d,
        &["bench", "--images", "ds/images", "--size", "20", "--patch-sizes", "10", "--repeats", "3", "--out", "b.csv"],
    );
    let text = std::fs::read_to_string(d.join("b.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "image,method,patch_h,patch_w,overlap,linf,frob,corr,runtime_ms");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 9));
    assert_eq!(rows[0][..2], ["broken", "error"]);
    // one row per method: dense, patched 10, indep, rank1, for each of 3 images
    assert_eq!(rows.len(), 1 + 3 * 4);
    for r in &rows[1..] {
        assert!(r[8].parse::<f64>().unwrap() >= 0.0);
        assert!(r[7].parse::<f64>().is_ok());
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    let img = "ds/images/synth_0001.png";
    std::fs::write(d.join("cfg.json"), r#"{"mag": {"method": "rank1"}}"#).unwrap();
    ok(d, &["mag", img, "default.csv"]);
    ok(d, &["mag", img, "rank1.csv", "--method", "rank1"]);
    ok(d, &["--config", "cfg.json", "mag", img, "file.csv"]);
    ok(d, &["--config", "cfg.json", "mag", img, "flag.csv", "--method", "dense"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("file.csv"), read("rank1.csv"));
    assert_eq!(read("flag.csv"), read("default.csv"));
    assert_ne!(read("file.csv"), read("default.csv"));

    std::fs::write(d.join("bad.json"), r#"{"mag": {"methd": "rank1"}}"#).unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "mag", img, "x.csv"]), 2);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    let img = "ds/images/synth_0000.png";
    assert_eq!(code(d, &["mag", img, "ok.json"]), 0);
    assert_eq!(code(d, &["mag", "missing.png", "x.csv"]), 2);
    assert_eq!(code(d, &["mag", img, "x.csv", "--patch", "3"]), 2);
    assert_eq!(code(d, &["mag", img, "x.csv", "--method", "fourier"]), 2);
    assert_eq!(code(d, &["--jobs", "0", "mag", img, "x.csv"]), 2);
    assert_eq!(code(d, &["analytic1d"]), 2);
    assert_eq!(code(d, &["edges", img, "x.png", "--method", "model"]), 2);
    assert_eq!(code(d, &["eval", "--pred", "nowhere", "--gt", "ds", "--out", "r.json"]), 2);
    // a million-point dense solve cannot fit in memory
    assert_eq!(code(d, &["mag", img, "x.csv", "--resize", "1000"]), 3);

    // an embedding that collapses every pixel to one point has a singular similarity matrix
    ok(d, &["train", "--data", "ds", "--out", "ck.json", "--epochs", "1", "--patch", "12"]);
    let mut ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ck.json")).unwrap()).unwrap();
    fn zero_floats(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Number(n) if n.is_f64() => *v = serde_json::json!(0.0),
            serde_json::Value::Array(a) => a.iter_mut().for_each(zero_floats),
            serde_json::Value::Object(o) => o.values_mut().for_each(zero_floats),
            _ => {}
        }
    }
    zero_floats(&mut ck["model"]);
    std::fs::write(d.join("zero.json"), ck.to_string()).unwrap();
    let out = magvec(d, &["edges", img, "x.png", "--method", "model", "--model", "zero.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not invertible"));
}

#[test]
fn jobs_do_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    let img = "ds/images/synth_0002.png";
    ok(d, &["--jobs", "1", "mag", img, "one.csv", "--method", "patched", "--patch", "8"]);
    ok(d, &["--jobs", "3", "mag", img, "three.csv", "--method", "patched", "--patch", "8"]);
    assert_eq!(std::fs::read(d.join("one.csv")).unwrap(), std::fs::read(d.join("three.csv")).unwrap());
}
