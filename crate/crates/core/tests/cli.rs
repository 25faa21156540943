mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathway_cl::harness::Method;

use common::{config, disjoint, quick, rotated_stream};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathway-cl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, method: Method, k: usize, seed: u64) -> String {
    let cfg = quick(config(method, rotated_stream(2, 3), disjoint(16), k, seed));
    let p = dir.join(name);
    fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_reports_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "papi.json", Method::Papi, 2, 1);
    let out = tmp.path().join("out");
    let o = cli(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("task 0:") && stdout.contains("task 1:"));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for suffix in ["-ledger.csv", "-metrics.csv", "-series.csv", "-summary.json"] {
        assert!(names.iter().any(|n| n.starts_with("papi-") && n.ends_with(suffix)), "{names:?}");
    }

    let r = cli(&["report", "--in", out.to_str().unwrap()]);
    assert!(r.status.success());
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert!(index.starts_with("file,method,k,"));
    assert_eq!(index.lines().count(), 2);
}

#[test]
fn sweep_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o_dir = out.to_str().unwrap();
    let papi = write_config(tmp.path(), "papi.json", Method::PapiOracleRouting, 1, 2);
    let s = cli(&["sweep-k", "--config", &papi, "--k", "4,1,2", "--out", o_dir]);
    assert!(s.status.success(), "{}", stderr(&s));
    let table = String::from_utf8_lossy(&s.stdout);
    let ks: Vec<&str> = table.lines().skip(1).take(3).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, vec!["1", "2", "4"]);

    let naive = write_config(tmp.path(), "naive.json", Method::Naive, 1, 2);
    let c = cli(&["compare", "--configs", &papi, &naive, "--out", o_dir]);
    assert!(c.status.success(), "{}", stderr(&c));
    assert!(String::from_utf8_lossy(&c.stdout).starts_with("check,left,right,"));
    assert!(fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_str().unwrap().starts_with("compare-")));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o_dir = out.to_str().unwrap();

    let missing = tmp.path().join("nope.json");
    let o = cli(&["run", "--config", missing.to_str().unwrap(), "--out", o_dir]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:") && stderr(&o).contains("nope.json"));

    let good = write_config(tmp.path(), "good.json", Method::Naive, 1, 0);
    let text = fs::read_to_string(&good).unwrap().replacen('{', "{\"bogus\": 1,", 1);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, text).unwrap();
    let o = cli(&["run", "--config", bad.to_str().unwrap(), "--out", o_dir]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));

    let mono_k = tmp.path().join("k2.json");
    let mut cfg = quick(config(Method::Naive, rotated_stream(1, 0), disjoint(8), 1, 0));
    cfg.k = 2;
    fs::write(&mono_k, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert!(!cli(&["run", "--config", mono_k.to_str().unwrap()]).status.success());

    let other = write_config(tmp.path(), "other.json", Method::Naive, 1, 9);
    let o = cli(&["compare", "--configs", &good, &other, "--out", o_dir]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seed"));

    assert!(!cli(&["sweep-k", "--config", &good, "--k", "1,2", "--out", o_dir]).status.success());
    assert!(!cli(&["report", "--in", tmp.path().join("absent").to_str().unwrap()]).status.success());
    assert!(!cli(&["frobnicate"]).status.success());
    assert!(!out.exists());
}
