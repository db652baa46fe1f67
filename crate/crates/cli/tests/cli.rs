use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use threetconv::filter::{self, FilterBank};
use threetconv::network::{load_checkpoint, ConvMode, Model, ModelSpec};
use threetconv::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_threetconv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn small_data(root: &Path, name: &str, seed: u64) -> PathBuf {
    let dir = root.join(name);
    let seed = seed.to_string();
    ok(&[
        "gen",
        "--classes",
        "motion6",
        "--n",
        "12",
        "--seed",
        &seed,
        "--width",
        "12",
        "--height",
        "12",
        "--translate-px",
        "0.5",
        "--out",
        s(&dir),
    ]);
    dir
}

fn train_zero(root: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(name);
    let mut args = vec!["train", "--data", s(data), "--epochs", "0", "--out", s(&dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

#[test]
fn gen_writes_the_requested_clips_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let args = [
        "gen",
        "--classes",
        "motion6",
        "--n",
        "30",
        "--seed",
        "7",
        "--width",
        "12",
        "--height",
        "12",
        "--translate-px",
        "0.5",
        "--out",
        s(&out),
    ];
    ok(&args);
    let first = manifest(&out);
    assert_eq!(first["summary"]["clips"], 30);
    assert_eq!(
        first["summary"]["class_counts"],
        serde_json::json!([5, 5, 5, 5, 5, 5])
    );
    assert_eq!(first["seeds"]["data"], 7);
    assert_eq!(first["status"], "ok");
    ok(&args);
    assert_eq!(manifest(&out)["hash"], first["hash"]);

    // replaying the manifest as a config file gives the same run
    let saved = tmp.path().join("saved.json");
    fs::copy(out.join("run.json"), &saved).unwrap();
    ok(&["gen", "--config", s(&saved)]);
    assert_eq!(manifest(&out)["hash"], first["hash"]);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let r = run(&["gen", "--n", "0", "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(manifest(&out)["status"]
        .as_str()
        .unwrap()
        .starts_with("usage error"));
    assert_eq!(code(&run(&["gen", "--bogus"])), 2);
    assert_eq!(code(&run(&["gen", "--classes", "motion7", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--out", s(&out)])), 2);

    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"n": 3, "colour": "red"}"#).unwrap();
    assert_eq!(code(&run(&["gen", "--config", s(&cfg), "--out", s(&out)])), 2);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"n": 4, "seed": 2, "width": 28, "height": 28}"#).unwrap();
    let out = tmp.path().join("d");
    ok(&["gen", "--config", s(&cfg), "--n", "6", "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["summary"]["clips"], 6);
    assert_eq!(m["config"]["seed"], 2);
}

#[test]
fn factorized_training_uses_fewer_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 1);
    let mut counts = Vec::new();
    for mode in ["3t", "3d"] {
        let out = tmp.path().join(mode);
        ok(&[
            "train",
            "--data",
            s(&data),
            "--val",
            s(&data),
            "--mode",
            mode,
            "--epochs",
            "1",
            "--out",
            s(&out),
        ]);
        assert!(out.join("checkpoint/state.json").exists());
        assert!(out.join("loss.svg").exists());
        let m = manifest(&out);
        counts.push(m["summary"]["params_model"].as_u64().unwrap());
        let ratio = m["summary"]["param_ratio"].as_f64().unwrap();
        assert!(ratio < 1.0, "{ratio}");
        let params = fs::read_to_string(out.join("params.csv")).unwrap();
        assert!(params.starts_with("mode,trainable\n3t,"));
    }
    assert!(counts[0] < counts[1], "{counts:?}");

    let eval = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&tmp.path().join("3t/checkpoint")),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    let acc = manifest(&eval)["summary"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let confusion = fs::read_to_string(eval.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 1 + 36);
}

#[test]
fn zero_epochs_keep_the_initialization_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 2);
    let out = train_zero(tmp.path(), &data, "t", &["--seed", "5"]);
    let (trained, state) = load_checkpoint(&out.join("checkpoint")).unwrap();
    assert_eq!(state.steps, 0);
    let fresh = Model::new(ModelSpec::tinyt_for([1, 8, 12, 12], ConvMode::Factorized, 6, 5)).unwrap();
    for (a, b) in trained.layers.iter().zip(&fresh.layers) {
        for (p, q) in a.params.iter().zip(&b.params) {
            assert!(p.value.bitwise_eq(&q.value));
        }
    }
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 3);
    let out = tmp.path().join("t");
    let r = run(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--lr",
        "1e300",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(manifest(&out)["status"]
        .as_str()
        .unwrap()
        .starts_with("numerical failure"));
}

#[test]
fn imported_2d_banks_start_at_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut flat = |shape: &[usize]| {
        let base = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        FilterBank::identity(base, 1).unwrap()
    };
    let src = tmp.path().join("bank2d");
    filter::write_banks(
        &src,
        &[
            ("conv1".into(), flat(&[8, 1, 5, 5])),
            ("conv2".into(), flat(&[16, 8, 3, 3])),
        ],
    )
    .unwrap();
    let imported = tmp.path().join("bank3t");
    ok(&[
        "import2d",
        "--bank",
        s(&src),
        "--depths",
        "4,3",
        "--out",
        s(&imported),
    ]);
    let banks = filter::read_banks(&imported).unwrap();
    assert_eq!(banks[0].1.depth, 4);
    assert_eq!(banks[1].1.depth, 3);

    let data = small_data(tmp.path(), "d", 4);
    let trained = train_zero(
        tmp.path(),
        &data,
        "t",
        &["--init", "import2d", "--bank", s(&imported)],
    );
    let export = tmp.path().join("export");
    ok(&[
        "export",
        "--checkpoint",
        s(&trained.join("checkpoint")),
        "--out",
        s(&export),
    ]);
    let display = fs::read_to_string(export.join("display.csv")).unwrap();
    let mut rows = 0;
    for line in display.lines().skip(1) {
        let fields: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields, [1.0, 0.0, 0.0, 0.0], "{line}");
        rows += 1;
    }
    assert_eq!(rows, 8 * 3 + 16 * 2);

    let dense = tmp.path().join("dense");
    ok(&[
        "export",
        "--checkpoint",
        s(&trained.join("checkpoint")),
        "--dense",
        "--out",
        s(&dense),
    ]);
    let conv1 = Tensor::read_tsr(dense.join("conv1.dense.tsr")).unwrap();
    assert_eq!(conv1.shape(), &[8, 1, 4, 5, 5]);
}

#[test]
fn analysis_of_an_identity_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 5);
    let trained = train_zero(tmp.path(), &data, "t", &[]);
    let ck = trained.join("checkpoint");
    let out = tmp.path().join("a");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--trajectory",
        "conv1:3",
        "--out",
        s(&out),
    ]);

    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    let mut lines = stats.lines();
    assert_eq!(lines.next().unwrap(), "model,param,mean_e3,std_e3,count,std_kind");
    let params: Vec<&str> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[2].parse::<f64>().unwrap(), 0.0, "{l}");
            assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{l}");
            f[1]
        })
        .collect();
    assert_eq!(params, ["s", "r", "p_x", "p_y"]);

    let svg = fs::read_to_string(out.join("trajectories.svg")).unwrap();
    assert!(svg.contains(r#"class="start""#) && svg.contains(r#"class="end""#));
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 4);
    assert!(out.join("histograms.svg").exists() && out.join("joint.svg").exists());
}

#[test]
fn analysis_compares_models_on_shared_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 6);
    let a = tmp.path().join("moved");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--lr",
        "0.5",
        "--temporal-lr-mult",
        "1",
        "--out",
        s(&a),
    ]);
    let b = train_zero(tmp.path(), &data, "still", &[]);
    let out = tmp.path().join("report");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&a.join("checkpoint")),
        "--compare",
        s(&b.join("checkpoint")),
        "--data",
        s(&data),
        "--saliency",
        "conv1:0",
        "--actmax",
        "conv2:1",
        "--actmax-steps",
        "5",
        "--recovery",
        "--out",
        s(&out),
    ]);
    let svg = fs::read_to_string(out.join("histograms.svg")).unwrap();
    for param in ["s-1", "r", "tx", "ty"] {
        let ranges: Vec<&str> = svg
            .split("<g class=\"panel\"")
            .skip(1)
            .filter(|p| p.contains(&format!("data-param=\"{param}\"")))
            .map(|p| {
                p.split("data-ymax")
                    .next()
                    .unwrap()
                    .split("data-lo")
                    .nth(1)
                    .unwrap()
            })
            .collect();
        assert_eq!(ranges.len(), 2, "{param}");
        assert_eq!(ranges[0], ranges[1], "{param}");
    }
    let stats = fs::read_to_string(out.join("stats.txt")).unwrap();
    assert!(stats.contains("moved") && stats.contains("still"));
    for f in [
        "saliency_conv1_0.svg",
        "saliency_frames.csv",
        "actmax_conv2_1.svg",
        "actmax_trace.csv",
        "recovery.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn unknown_channels_and_layers_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "d", 7);
    let ck = train_zero(tmp.path(), &data, "t", &[]).join("checkpoint");
    let out = tmp.path().join("a");
    for spec in ["conv1:8", "conv9:0", "head:0", "conv1"] {
        let r = run(&[
            "analyze",
            "--checkpoint",
            s(&ck),
            "--trajectory",
            spec,
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&r), 2, "{spec}");
    }
    let r = run(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--actmax",
        "conv2:16",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);
    let r = run(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--saliency",
        "conv1:0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2, "saliency without data");
}

#[test]
fn gradient_checks_of_fresh_models_pass() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in ["3t", "3d"] {
        let out = tmp.path().join(mode);
        ok(&[
            "gradcheck",
            "--mode",
            mode,
            "--width",
            "12",
            "--height",
            "12",
            "--seed",
            "1",
            "--out",
            s(&out),
        ]);
        let m = manifest(&out);
        assert_eq!(m["summary"]["failed"], 0);
        let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",false")));
    }

    let data = small_data(tmp.path(), "d", 8);
    let ck = train_zero(tmp.path(), &data, "t", &[]).join("checkpoint");
    let out = tmp.path().join("a");
    ok(&["analyze", "--checkpoint", s(&ck), "--gradcheck", "--out", s(&out)]);
    assert_eq!(manifest(&out)["summary"]["gradcheck_failed"], 0);
}
