use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use xmoco::sampling::{random_simplex_columns, stream_rng};
use xmoco::Mat;

const SMALL: &str = "classes = 2\nper_class = 40\nd_in = 4\nbank_size = 32\nbatch_size = 16\n\
                     epochs = 2\nhidden = 8\nout_dim = 4\nknn_k = 3\nprobe_steps = 50\n";

fn xmoco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmoco"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) -> &'static str {
    fs::write(dir.join("small.conf"), SMALL).unwrap();
    "small.conf"
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&xmoco(d, &["gen-data", "--seed", "7", "--out", "a.csv"]));
    ok(&xmoco(d, &["gen-data", "--seed", "7", "--out", "b.csv"]));
    ok(&xmoco(d, &["gen-data", "--seed", "8", "--out", "c.csv"]));
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("# data_seed = 7\n"));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 3 * 400);
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = small_config(d);
    let summary = ok(&xmoco(d, &["train", "--config", conf, "--out", "run"]));
    assert!(summary.contains("\"epochs\":2"), "{summary}");
    for name in [
        "config.conf",
        "metrics.jsonl",
        "epoch-0000.ckpt",
        "epoch-0002.ckpt",
    ] {
        assert!(d.join("run").join(name).exists(), "{name}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert!(metrics.starts_with("{\"config\":"));

    ok(&xmoco(
        d,
        &[
            "eval-knn",
            "--config",
            conf,
            "--checkpoint",
            "run/epoch-0002.ckpt",
            "--out",
            "knn.json",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("knn.json")).unwrap()).unwrap();
    let acc = report["knn_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["k"], 3);
    assert_eq!(report["config"]["epochs"], "2");

    ok(&xmoco(
        d,
        &[
            "eval-linear",
            "--config",
            conf,
            "--checkpoint",
            "run/epoch-0002.ckpt",
            "--out",
            "lin.json",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("lin.json")).unwrap()).unwrap();
    assert!(report["linear_accuracy"].as_f64().is_some());
    assert!(report["knn_accuracy"].is_null());
}

#[test]
fn training_outputs_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = small_config(d);
    ok(&xmoco(
        d,
        &[
            "train",
            "--config",
            conf,
            "--epochs",
            "4",
            "--checkpoint-every",
            "1",
            "--out",
            "a",
        ],
    ));
    ok(&xmoco(
        d,
        &[
            "train",
            "--config",
            conf,
            "--epochs",
            "4",
            "--checkpoint-every",
            "1",
            "--out",
            "b",
        ],
    ));
    for name in ["metrics.jsonl", "epoch-0002.ckpt", "epoch-0004.ckpt"] {
        assert_eq!(
            fs::read(d.join("a").join(name)).unwrap(),
            fs::read(d.join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    fs::create_dir(d.join("c")).unwrap();
    fs::copy(d.join("a/epoch-0002.ckpt"), d.join("c/start.ckpt")).unwrap();
    ok(&xmoco(
        d,
        &[
            "train",
            "--resume",
            "c/start.ckpt",
            "--config",
            conf,
            "--epochs",
            "4",
            "--checkpoint-every",
            "1",
            "--out",
            "c",
        ],
    ));
    assert_eq!(
        fs::read(d.join("a/epoch-0004.ckpt")).unwrap(),
        fs::read(d.join("c/epoch-0004.ckpt")).unwrap()
    );

    let out = xmoco(
        d,
        &[
            "train",
            "--resume",
            "c/start.ckpt",
            "--xi",
            "1",
            "--out",
            "c",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sinkhorn_columns_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = random_simplex_columns(&mut stream_rng(3, 0), 9, 6);
    let mut buf = Vec::new();
    p.write_xmc1(&mut buf).unwrap();
    fs::write(d.join("p.xmc1"), buf).unwrap();
    ok(&xmoco(
        d,
        &[
            "sinkhorn", "--input", "p.xmc1", "--out", "y.xmc1", "--xi", "0.8",
        ],
    ));
    let y = Mat::read_xmc1(&mut BufReader::new(
        fs::File::open(d.join("y.xmc1")).unwrap(),
    ))
    .unwrap();
    assert_eq!(y.shape(), (9, 6));
    for s in y.col_sums() {
        assert!((s - 1.0).abs() <= 4.0 * f64::EPSILON, "{s}");
    }
    assert!(y.row(0).iter().all(|&v| v == 0.8));
    assert!(fs::read_to_string(d.join("y.xmc1.conf"))
        .unwrap()
        .contains("xi = 0.8"));

    fs::write(d.join("bad.xmc1"), b"not a matrix\n").unwrap();
    assert_eq!(
        xmoco(d, &["sinkhorn", "--input", "bad.xmc1"]).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_passes_and_detects_a_sign_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&xmoco(d, &["gradcheck", "--out", "gc.json"]));
    assert!(out.contains("PASS"), "{out}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("gc.json")).unwrap()).unwrap();
    assert!(report["report"]["worst_rel_error"].as_f64().unwrap() < 1e-5);

    let bad = xmoco(d, &["gradcheck", "--inject-sign-error"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = small_config(d);
    ok(&xmoco(
        d,
        &[
            "ablate",
            "--config",
            conf,
            "--axis",
            "loss-switches",
            "--no-timing",
            "--out",
            "a.csv",
        ],
    ));
    ok(&xmoco(
        d,
        &[
            "ablate",
            "--config",
            conf,
            "--axis",
            "loss-switches",
            "--no-timing",
            "--out",
            "b.csv",
        ],
    ));
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    let rows: Vec<&str> = a.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "value,knn_accuracy,wall_time,error");
    assert_eq!(rows.len(), 5);
    assert!(a.contains("# axis = loss-switches\n"));

    ok(&xmoco(
        d,
        &[
            "ablate", "--config", conf, "--axis", "xi", "--values", "1.0", "--out", "xi.csv",
        ],
    ));
    let xi = fs::read_to_string(d.join("xi.csv")).unwrap();
    let rows: Vec<&str> = xi.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    let cells: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(cells[0], "1.0");
    assert!(cells[2].parse::<f64>().is_ok(), "wall_time is recorded");

    // invalid values are rejected before any run starts
    let out = xmoco(
        d,
        &[
            "ablate", "--config", conf, "--axis", "K", "--values", "8,32", "--out", "k.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K = 8"));
    assert!(!d.join("k.csv").exists());
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        xmoco(d, &["train", "--no-such-flag"]).status.code(),
        Some(1)
    );
    assert_eq!(xmoco(d, &["train", "--xi", "2"]).status.code(), Some(1));
    assert_eq!(
        xmoco(d, &["ablate", "--axis", "depth"]).status.code(),
        Some(1)
    );
    fs::write(d.join("broken.conf"), "tau = 0.2\nnot a pair\n").unwrap();
    let out = xmoco(d, &["train", "--config", "broken.conf"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!d.join("run").exists(), "nothing written before validation");
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&xmoco(dir.path(), &["train", "--help"]));
    for needle in [
        "--config",
        "--seed",
        "--out",
        "--xi <VALUE>",
        "[default: 0.9]",
        "[default: 256]",
        "[default: 64,64]",
    ] {
        assert!(help.contains(needle), "{needle} missing");
    }
    for cmd in [
        "gen-data",
        "eval-knn",
        "eval-linear",
        "sinkhorn",
        "gradcheck",
        "ablate",
    ] {
        let help = ok(&xmoco(dir.path(), &[cmd, "--help"]));
        assert!(help.contains("--out"), "{cmd}");
    }
}

#[test]
fn shipped_configs_parse() {
    use xmoco::config::RunConfig;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(
        RunConfig::load(&root.join("default.conf")).unwrap(),
        RunConfig::default()
    );
    let mut seen = Vec::new();
    for name in ["uniform-xsim", "uniform", "xsim", "one-hot"] {
        let cfg = RunConfig::load(&root.join(format!("switches-{name}.conf"))).unwrap();
        cfg.validate().unwrap();
        seen.push(cfg.train.switches);
    }
    assert_eq!(seen, xmoco::loss::LossSwitches::grid());
}
