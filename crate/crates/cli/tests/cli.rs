use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stoic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoic"))
        .args(args)
        .output()
        .expect("spawn stoic")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stoic failed: {}", stderr(&o));
    o
}

/// Writes the tiny synthetic panel and a config that trains on it.
fn setup(dir: &Path) -> (String, String) {
    let data = dir.join("synth");
    ok(stoic(&[
        "synth", "--n", "5", "--t", "200", "--density", "0.3", "--noise", "0.1", "--seed", "3", "--out",
        data.to_str().unwrap(),
    ]));
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny run\ndata = {}\nwindow = 6\nhorizon = 2\nstride = 2\nhidden = 8\nreferences = 5\ns_eval = 2\nbatch = 16\nmax_epochs = 2\n",
            data.join("data.csv").display()
        ),
    )
    .unwrap();
    (cfg.to_str().unwrap().to_string(), data.to_str().unwrap().to_string())
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (cfg, data) = setup(dir);
    for f in ["data.csv", "adjacency.csv", "spec.txt"] {
        assert!(Path::new(&data).join(f).exists(), "{f}");
    }
    let csv = format!("{data}/data.csv");
    let adj = format!("{data}/adjacency.csv");

    let train = path(dir, "train");
    let o = ok(stoic(&["train", "--config", &cfg, "--out", &train]));
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let log = fs::read_to_string(format!("{train}/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,total,nll,kl_z,kl_g,valid_crps\n"));
    assert_eq!(log.lines().count(), 3);
    let metrics = fs::read_to_string(format!("{train}/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,name,value\n") && metrics.contains("crps,test,"));
    let rel = fs::read_to_string(format!("{train}/reliability.csv")).unwrap();
    assert_eq!(rel.lines().count(), 20);
    let ckpt = format!("{train}/checkpoint.stoic");
    assert!(fs::read_to_string(&ckpt).unwrap().starts_with("STOIC-CKPT v1\n"));

    let eval = path(dir, "eval");
    ok(stoic(&["eval", "--ckpt", &ckpt, "--data", &csv, "--out", &eval]));
    assert!(fs::read_to_string(format!("{eval}/metrics.csv")).unwrap().contains("crps,eval,"));

    let rob = path(dir, "rob");
    ok(stoic(&["robustness", "--ckpt", &ckpt, "--data", &csv, "--rho", "0,0.1,0.2", "--out", &rob]));
    let table = fs::read_to_string(format!("{rob}/robustness.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rho,crps,pct_increase");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));

    let graph = path(dir, "graph");
    ok(stoic(&[
        "export-graph", "--ckpt", &ckpt, "--data", &csv, "--reference", &adj, "--samples", "20", "--out", &graph,
    ]));
    let ep = fs::read_to_string(format!("{graph}/edgeprob.csv")).unwrap();
    assert_eq!(ep.lines().next().unwrap(), "s0,s1,s2,s3,s4");
    assert_eq!(ep.lines().count(), 6);
    let edges = fs::read_to_string(format!("{graph}/confident_edges.csv")).unwrap();
    assert!(edges.starts_with("i,j,name_i,name_j,prob\n"));
    assert!(fs::read_to_string(format!("{graph}/correlation.csv")).unwrap().starts_with("correlation,degenerate\n"));

    let base = path(dir, "base");
    ok(stoic(&["baseline", "--config", &cfg, "--k", "2", "--out", &base]));
    assert!(fs::read_to_string(format!("{base}/metrics.csv")).unwrap().contains("confidence_score,baseline,"));
    assert_eq!(fs::read_to_string(format!("{base}/members.csv")).unwrap().lines().count(), 3);
}

fn assert_code(o: &Output, code: i32, tag: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let last = err.lines().last().unwrap_or("");
    assert!(last.starts_with(tag), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = path(tmp.path(), "bad.cfg");
    fs::write(&cfg, "window = 6\nwindw = 3\n").unwrap();
    let o = stoic(&["train", "--config", &cfg, "--out", &path(tmp.path(), "o")]);
    assert_code(&o, 2, "E_CONFIG");
    assert!(stderr(&o).contains("line 2"));

    let o = stoic(&["train", "--config", &path(tmp.path(), "missing.cfg"), "--out", "x"]);
    assert_code(&o, 2, "E_CONFIG");

    let o = stoic(&["train", "--bogus"]);
    assert_code(&o, 2, "E_USAGE");
    assert_eq!(stderr(&o).lines().count(), 1);

    let (cfg, _) = setup(tmp.path());
    let o = stoic(&["baseline", "--config", &cfg, "--k", "1", "--out", &path(tmp.path(), "b")]);
    assert_code(&o, 2, "E_CONFIG");
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bad = path(dir, "bad.csv");
    fs::write(&bad, "a,b\n1,2\n3,oops\n").unwrap();
    let cfg = path(dir, "run.cfg");
    fs::write(&cfg, format!("data = {bad}\n")).unwrap();
    let o = stoic(&["train", "--config", &cfg, "--out", &path(dir, "o")]);
    assert_code(&o, 3, "E_DATA");
    assert!(stderr(&o).contains("row"));

    let o = stoic(&["eval", "--ckpt", &path(dir, "nope.stoic"), "--data", &bad, "--out", &path(dir, "e")]);
    assert_code(&o, 3, "E_CHECKPOINT");

    let ckpt = path(dir, "v2.stoic");
    fs::write(&ckpt, "STOIC-CKPT v2\n").unwrap();
    let o = stoic(&["eval", "--ckpt", &ckpt, "--data", &bad, "--out", &path(dir, "e")]);
    assert_code(&o, 3, "E_CHECKPOINT");
}

#[test]
fn series_count_mismatch_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (cfg, _) = setup(dir);
    let train = path(dir, "t");
    ok(stoic(&["train", "--config", &cfg, "--out", &train]));
    let other = path(dir, "other");
    ok(stoic(&["synth", "--n", "4", "--t", "100", "--out", &other]));
    let o = stoic(&[
        "eval", "--ckpt", &format!("{train}/checkpoint.stoic"), "--data", &format!("{other}/data.csv"), "--out",
        &path(dir, "e"),
    ]);
    assert_code(&o, 3, "E_DATA");
}

#[test]
fn non_finite_training_exits_4_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (cfg, _) = setup(dir);
    // a huge learning rate drives the parameters to overflow
    let text = fs::read_to_string(&cfg).unwrap() + "lr = 1e300\nmax_epochs = 5\n";
    fs::write(&cfg, text).unwrap();
    let out = path(dir, "o");
    let o = stoic(&["train", "--config", &cfg, "--out", &out]);
    assert_code(&o, 4, "E_");
    assert!(Path::new(&out).join("checkpoint.stoic").exists());
}

#[test]
fn help_exits_0() {
    let o = stoic(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("export-graph"));
}
