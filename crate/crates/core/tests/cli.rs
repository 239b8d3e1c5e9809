use semifreddo::cli::run_with;
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("semifreddo").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(text: &str) -> Value {
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn describe_default_ratio() {
    let (code, out, _) = run(&["describe"]);
    assert_eq!(code, 0);
    let v = json(&out);
    let r = v["single_core_ratio"].as_f64().unwrap();
    assert!((r - 0.77).abs() <= 0.05, "{r}");
    assert_eq!(v["effective_ratio"]["one_trainable_core"].as_f64().unwrap(), r);
    assert!(v["two_core_ratio"].as_f64().unwrap() < r);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).0, 2);
    assert_eq!(run(&["plan-freeze", "--scheme", "uniform:1.5", "--bundle", "x"]).0, 2);
    assert_eq!(run(&["fit-activation", "sigmoid", "0"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("m.sfrd");
    let missing = dir.path().join("nothing");
    let (code, _, err) = run(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn fit_activation_sigmoid() {
    let (code, out, err) = run(&["fit-activation", "sigmoid", "16"]);
    assert_eq!(code, 0);
    let max_error: f64 = err.trim().strip_prefix("max_error=").unwrap().parse().unwrap();
    assert!(max_error <= 0.01);
    let mut rows = csv::Reader::from_reader(out.as_bytes());
    assert_eq!(rows.headers().unwrap(), vec!["breakpoint", "slope", "intercept"]);
    // one row per breakpoint
    assert_eq!(rows.records().count(), 17);
}

#[test]
fn sweep_freeze_csv_shape() {
    let (code, out, err) = run(&["sweep-freeze", "--epochs", "1", "--synthetic", "96"]);
    assert_eq!(code, 0, "{err}");
    let mut rows = csv::Reader::from_reader(out.as_bytes());
    assert_eq!(rows.headers().unwrap(), vec!["ratio", "accuracy", "total_mm2"]);
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.len() == 3));
    let areas: Vec<f64> = records.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(areas.windows(2).all(|w| w[1] <= w[0]), "{areas:?}");
}

#[test]
fn train_quantize_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (bundle, data) = (p("m.sfrd"), p("data"));
    assert_eq!(run(&["make-dataset", "--out", &data, "--train", "120", "--test", "30"]).0, 0);
    let (code, out, err) = run(&["plan-freeze", "--scheme", "ramp-down:0.9,0.3", "--bundle", &bundle]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(json(&out)["scheme"]["scheme"], "ramp_down");

    let (code, out, err) = run(&["train", "--bundle", &bundle, "--epochs", "2", "--data", &data]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert_eq!(lines[0]["samples"], 120);

    let (code, out, _) = run(&["eval", "--bundle", &bundle, "--data", &data]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["samples"], 30);

    assert_eq!(run(&["eval", "--bundle", &bundle, "--data", &data, "--quantized"]).0, 3);
    let (code, out, err) = run(&["quantize", "--bundle", &bundle, "--data", &data, "--calibration", "64"]);
    assert_eq!(code, 0, "{err}");
    assert!(json(&out)["census"]["scalers"].as_u64().unwrap() > 0);
    let (code, out, _) = run(&["eval", "--bundle", &bundle, "--data", &data, "--quantized"]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["quantized"], true);

    let input = format!("{data}/t10k-images-idx3-ubyte");
    let (code, out, _) = run(&["infer", "--bundle", &bundle, "--input", &input, "--quantized", "--limit", "3"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 3);
    let (code, out, _) = run(&["estimate-area", "--bundle", &bundle]);
    assert_eq!(code, 0);
    assert!(json(&out)["total_mm2"].as_f64().unwrap() > 0.0);

    // a bundle for one spec cannot be reused with another
    let (code, _, err) = run(&["plan-freeze", "--scheme", "core-partition", "--bundle", &bundle, "--spec", "default"]);
    assert_eq!(code, 4, "{err}");
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let (code, out, err) = run(&[
            "train",
            "--bundle",
            path.to_str().unwrap(),
            "--synthetic",
            "64",
            "--scheme",
            "uniform:0.5",
            "--seed",
            seed,
        ]);
        assert_eq!(code, 0, "{err}");
        (std::fs::read(path).unwrap(), out)
    };
    let (a, out_a) = train("a.sfrd", "7");
    let (b, out_b) = train("b.sfrd", "7");
    let (c, _) = train("c.sfrd", "8");
    assert_eq!(a, b);
    assert_eq!(out_a, out_b);
    assert_ne!(a, c);
}

#[test]
fn estimate_fps_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("fps.csv");
    let (code, out, _) = run(&["estimate-fps", "--repeats", "1,3", "--csv", csv_path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["fps"], 200.0);
    let text = std::fs::read_to_string(csv_path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("repeats,width,height,fps"));
    assert_eq!(run(&["estimate-fps", "--repeats", "0"]).0, 4);
}
