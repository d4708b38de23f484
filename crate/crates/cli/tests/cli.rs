use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_choicekit");

fn configs(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthesize a travel-mode dataset into `dir`.
fn synth(dir: &Path, n: usize, seed: u64) {
    let dgp = configs("dgp_travel_linear.json");
    ok(&["synth", "--dgp", p(&dgp), "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(dir)]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Manifests record the output directory; compare everything else.
fn without_manifest(files: Vec<(String, Vec<u8>)>) -> Vec<(String, Vec<u8>)> {
    files.into_iter().filter(|(n, _)| n != "manifest.json").collect()
}

#[test]
fn synth_writes_data_schema_and_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 300, 1);
    for f in ["data.csv", "schema.json", "dgp.json", "summary.json", "manifest.json"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(tmp.path().join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);
    assert!(csv.starts_with("walk_walk_time,bus_cost"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 200, 7);
    synth(b.path(), 200, 7);
    assert_eq!(without_manifest(dir_bytes(a.path())), without_manifest(dir_bytes(b.path())));
    let c = tempfile::tempdir().unwrap();
    synth(c.path(), 200, 8);
    assert_ne!(
        fs::read(a.path().join("data.csv")).unwrap(),
        fs::read(c.path().join("data.csv")).unwrap()
    );
}

#[test]
fn synth_shares_converge_to_the_logit_probability() {
    let tmp = tempfile::tempdir().unwrap();
    let dgp = tmp.path().join("binary.json");
    fs::write(
        &dgp,
        r#"{
          "alternatives": ["a", "b"],
          "attributes": ["x"],
          "x_dist": [[{"dist": "normal", "mean": 0.0, "sd": 1.0}], [{"dist": "normal", "mean": 0.0, "sd": 1.0}]],
          "form": "linear",
          "coefficients": {"asc": [1.0, 0.0], "beta": [[0.0], [0.0]], "gamma": [[], []]},
          "noise_scale": 1.0
        }"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    ok(&["synth", "--dgp", p(&dgp), "--n", "100000", "--seed", "3", "--out", p(&out)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let share = summary["shares"][0].as_f64().unwrap();
    let p1 = 1f64.exp() / (1.0 + 1f64.exp());
    assert!((share - p1).abs() < 3.0 * (p1 * (1.0 - p1) / 1e5).sqrt(), "share {share}");
}

#[test]
fn train_smoke_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 600, 2);
    let csv = data.join("data.csv");
    let schema = data.join("schema.json");
    // shrink the preset so the test stays quick
    let small = tmp.path().join("small.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs("train_asudnn.json")).unwrap()).unwrap();
    cfg["arch"]["pre_depth"] = 1.into();
    cfg["arch"]["pre_width"] = 8.into();
    cfg["arch"]["post_width"] = 8.into();
    cfg["arch"]["post_depth"] = 1.into();
    cfg["num_iterations"] = 100.into();
    cfg["batch_size"] = 50.into();
    fs::write(&small, cfg.to_string()).unwrap();
    let train = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "train", "--data", p(&csv), "--schema", p(&schema), "--config", p(&small), "--seed", "5", "--out",
            p(&out),
        ]);
        out
    };
    let a = train("a");
    let b = train("b");
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    let acc = eval["test"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["family"], "asudnn");
    assert_eq!(fs::read(a.join("model.bin")).unwrap(), fs::read(b.join("model.bin")).unwrap());
    assert_eq!(without_manifest(dir_bytes(&a)), without_manifest(dir_bytes(&b)));
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("iteration,train_loss,penalty,val_accuracy"));
}

#[test]
fn train_default_mnl() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 400, 4);
    let out = tmp.path().join("mnl");
    let o = ok(&[
        "train", "--data", p(&data.join("data.csv")), "--schema", p(&data.join("schema.json")), "--family", "mnl",
        "--seed", "1", "--out", p(&out),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("test"));
    assert!(out.join("model.bin").is_file());
}

#[test]
fn missing_schema_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 50, 1);
    let missing = tmp.path().join("nope_schema.json");
    let out = run(&[
        "train", "--data", p(&data.join("data.csv")), "--schema", p(&missing), "--family", "mnl", "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope_schema.json"), "{err}");
    assert!(err.contains("schema"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data", "a", "--schema", "b", "--family", "svm", "--out", "c"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 200, 4);
    let cfg = tmp.path().join("wild.json");
    fs::write(
        &cfg,
        r#"{"arch": {"family": "fdnn", "depth": 1, "width": 4}, "l1": 0.0, "l2": 10.0, "dropout": 0.0,
            "batch_norm": false, "learning_rate": 10.0, "num_iterations": 1000, "batch_size": 20}"#,
    )
    .unwrap();
    let out = run(&[
        "train", "--data", p(&data.join("data.csv")), "--schema", p(&data.join("schema.json")), "--config",
        p(&cfg), "--out", p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training"));
}

fn tiny_space(dir: &Path) -> PathBuf {
    let path = dir.join("space.json");
    fs::write(
        &path,
        r#"{"fdnn_depth": [1, 2], "fdnn_width": [4, 8], "asu_pre_depth": [0, 1], "asu_post_depth": [0, 1],
            "asu_pre_width": [4], "asu_post_width": [4], "l1": [1e-5, 1e-10], "l2": [1e-5], "dropout": [1e-3],
            "batch_norm": [true, false], "learning_rate": [0.1, 0.01], "num_iterations": [40, 80],
            "batch_size": [32]}"#,
    )
    .unwrap();
    path
}

#[test]
fn search_outputs_and_parallel_invariance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 300, 6);
    let space = tiny_space(tmp.path());
    let search = |name: &str, parallel: &str, trials: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "search", "--data", p(&data.join("data.csv")), "--schema", p(&data.join("schema.json")), "--family",
            "asudnn,fdnn", "--space", p(&space), "--trials", trials, "--folds", "3", "--parallel", parallel,
            "--seed", "2", "--refit-top", "1", "--out", p(&out),
        ]);
        out
    };
    let one = search("one", "1", "4");
    let four = search("four", "4", "4");
    assert_eq!(without_manifest(dir_bytes(&one)), without_manifest(dir_bytes(&four)));
    let summary = fs::read_to_string(one.join("asudnn_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let curves = fs::read_to_string(one.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 9);
    assert!(one.join("fdnn_top1.bin").is_file());
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(one.join("fdnn_reports.json")).unwrap()).unwrap();
    assert!(reports.as_array().unwrap().iter().any(|r| r["name"] == "depth"));

    let single = search("single", "1", "1");
    assert_eq!(fs::read_to_string(single.join("fdnn_summary.csv")).unwrap().lines().count(), 2);
}

#[test]
fn interpret_sweep_elasticity_and_iia() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 500, 9);
    let csv = data.join("data.csv");
    let schema = data.join("schema.json");
    let model_dir = tmp.path().join("m");
    ok(&[
        "train", "--data", p(&csv), "--schema", p(&schema), "--family", "mnl", "--seed", "3", "--out", p(&model_dir),
    ]);
    let model = model_dir.join("model.bin");
    let interp = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "interpret", "--model", p(&model), "--data", p(&csv), "--schema", p(&schema), "--split-seed", "3",
            "--out", p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let s = interp("sweep", &["--sweep", "drive:cost:0:40:5"]);
    assert_eq!(fs::read_to_string(s.join("sweep.csv")).unwrap().lines().count(), 6);
    let plot: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(plot["series"].as_array().unwrap().len(), 5);

    let e1 = interp("e1", &["--elasticity"]);
    let e2 = interp("e2", &["--elasticity"]);
    assert_eq!(without_manifest(dir_bytes(&e1)), without_manifest(dir_bytes(&e2)));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(e1.join("elasticity.json")).unwrap()).unwrap();
    assert!(m["rows"].as_array().unwrap().iter().filter(|r| r["present"] == true).all(|r| r["cross_equal"] == true));

    let i = interp("iia", &["--iia", "--probes", "200"]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(i.join("iia.json")).unwrap()).unwrap();
    assert_eq!(r["iia_consistent"], true);

    // two models: per-model files plus the average
    let out = tmp.path().join("avg");
    ok(&[
        "interpret", "--model", p(&model), "--model", p(&model), "--data", p(&csv), "--schema", p(&schema),
        "--elasticity", "--out", p(&out),
    ]);
    assert!(out.join("elasticity_2.csv").is_file());
    assert_eq!(
        fs::read_to_string(out.join("elasticity_1.csv")).unwrap(),
        fs::read_to_string(out.join("elasticity_mean.csv")).unwrap()
    );
}

#[test]
fn interpret_rejects_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 100, 1);
    let csv = data.join("data.csv");
    let schema = data.join("schema.json");
    let missing = run(&[
        "interpret", "--model", p(&tmp.path().join("none.bin")), "--data", p(&csv), "--schema", p(&schema),
        "--iia", "--out", p(&tmp.path().join("o")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.bin"));
    let no_analysis = run(&[
        "interpret", "--model", "m.bin", "--data", p(&csv), "--schema", p(&schema), "--out", "o",
    ]);
    assert_eq!(no_analysis.status.code(), Some(1));
    let bad_sweep = run(&[
        "interpret", "--model", "m.bin", "--data", p(&csv), "--schema", p(&schema), "--sweep", "drive:cost",
        "--out", "o",
    ]);
    assert_eq!(bad_sweep.status.code(), Some(1));
}

#[test]
fn shipped_configs_load() {
    for name in ["train_mnl.json", "train_nl_travel.json", "train_fdnn.json", "train_asudnn.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(configs(name)).unwrap()).unwrap();
        assert!(v["arch"]["family"].is_string(), "{name}");
    }
    let presets: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs("presets_top5.json")).unwrap()).unwrap();
    assert_eq!(presets["fdnn"].as_array().unwrap().len(), 5);
    assert_eq!(presets["asudnn"].as_array().unwrap().len(), 5);
}
