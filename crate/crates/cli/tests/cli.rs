use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confgen_core::flow::FlowConfig;
use confgen_core::geometry::centroid;
use confgen_core::model::{ModelConfig, Variant};
use confgen_core::molgraph::parse_molecule;
use confgen_core::train::{load_checkpoint, periodic_checkpoint_path, OptimizerConfig, RunConfig};
use confgen_core::Error;
use tempfile::TempDir;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/c3h8o")
}

fn confgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confgen")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, steps: u64, every: u64) -> PathBuf {
    let config = RunConfig {
        version: 1,
        model: ModelConfig::tiny(Variant::Ape),
        flow: FlowConfig::small_molecule(),
        optimizer: OptimizerConfig::default(),
        train: vec![data_dir()],
        seed: 3,
        steps,
        batch_size: 2,
        checkpoint: dir.join(format!("{name}.ckpt")),
        checkpoint_every: every,
        log: Some(dir.join(format!("{name}.csv"))),
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, config.to_json().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&confgen(&["--help"])), 0);
    assert_eq!(code(&confgen(&["--version"])), 0);
    assert_eq!(code(&confgen(&["sample", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&confgen(&["no-such-command"])), 1);
    assert_eq!(code(&confgen(&["train"])), 1);
    assert_eq!(code(&confgen(&["eval", "--generated", "x", "--reference", "y", "--curve", "1:2"])), 1);
}

#[test]
fn missing_input_exits_one() {
    let out = confgen(&["sample", "--checkpoint", "/definitely/not/here.ckpt", "--graphs", s(&data_dir())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.ckpt"));
}

#[test]
fn non_finite_errors_map_to_exit_three() {
    let err = anyhow::Error::from(Error::NonFinite("loss".into())).context("training");
    assert_eq!(confgen_cli::exit_code(&err), confgen_cli::EXIT_NUMERIC);
    let err = anyhow::Error::from(Error::Config("bad".into()));
    assert_eq!(confgen_cli::exit_code(&err), confgen_cli::EXIT_USAGE);
}

#[test]
fn zero_step_training_writes_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "zero", 0, 0);
    let out = confgen(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = load_checkpoint(&dir.path().join("zero.ckpt")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.model.config, ModelConfig::tiny(Variant::Ape));
}

#[test]
fn resumed_training_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "full", 6, 3);
    assert_eq!(code(&confgen(&["train", "--config", s(&cfg)])), 0);
    let midway = periodic_checkpoint_path(&dir.path().join("full.ckpt"), 3);
    assert!(midway.exists());

    let cfg2 = write_config(dir.path(), "resumed", 6, 3);
    let out = confgen(&["train", "--config", s(&cfg2), "--resume", s(&midway)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let a = load_checkpoint(&dir.path().join("full.ckpt")).unwrap();
    let b = load_checkpoint(&dir.path().join("resumed.ckpt")).unwrap();
    assert_eq!(a.step, 6);
    assert_eq!(b.step, 6);
    for ((_, name, pa), (_, _, pb)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(pa.data(), pb.data(), "parameter {name} differs after resume");
    }
    let log_full = fs::read_to_string(dir.path().join("full.csv")).unwrap();
    let log_resumed = fs::read_to_string(dir.path().join("resumed.csv")).unwrap();
    let tail: Vec<_> = log_full.lines().skip(4).collect();
    let resumed: Vec<_> = log_resumed.lines().skip(1).collect();
    assert_eq!(tail, resumed);
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a", 2, 0);
    assert_eq!(code(&confgen(&["train", "--config", s(&cfg)])), 0);
    let other = write_config(dir.path(), "b", 5, 0);
    let out = confgen(&["train", "--config", s(&other), "--resume", s(&dir.path().join("a.ckpt"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sampling_is_reproducible_and_centered() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "m", 2, 0);
    assert_eq!(code(&confgen(&["train", "--config", s(&cfg)])), 0);
    let ck = dir.path().join("m.ckpt");
    let run = |seed: &str, out: &Path| {
        let o = confgen(&[
            "sample", "--checkpoint", s(&ck), "--graphs", s(&data_dir()), "--num", "3", "--steps", "5", "--seed", seed,
            "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run("11", &a);
    run("11", &b);
    run("12", &c);
    for name in ["1-propanol.json", "2-propanol.json", "ethyl-methyl-ether.json"] {
        let ta = fs::read_to_string(a.join(name)).unwrap();
        assert_eq!(ta, fs::read_to_string(b.join(name)).unwrap());
        assert_ne!(ta, fs::read_to_string(c.join(name)).unwrap());
        let mol = parse_molecule(&ta).unwrap();
        assert_eq!(mol.conformers.len(), 3);
        for conf in &mol.conformers {
            let com = centroid(conf.points());
            assert!(com.iter().all(|v| v.abs() < 1e-10), "center of mass {com:?}");
        }
    }
}

#[test]
fn sampling_in_place_appends_and_num_zero_is_a_no_op() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "m", 1, 0);
    assert_eq!(code(&confgen(&["train", "--config", s(&cfg)])), 0);
    let graphs = dir.path().join("graphs");
    fs::create_dir(&graphs).unwrap();
    let target = graphs.join("2-propanol.json");
    fs::copy(data_dir().join("2-propanol.json"), &target).unwrap();
    let before = fs::read_to_string(&target).unwrap();

    let ck = dir.path().join("m.ckpt");
    let o = confgen(&["sample", "--checkpoint", s(&ck), "--graphs", s(&target), "--num", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&target).unwrap(), before);

    let o = confgen(&["sample", "--checkpoint", s(&ck), "--graphs", s(&graphs), "--steps", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mol = parse_molecule(&fs::read_to_string(&target).unwrap()).unwrap();
    let original = parse_molecule(&before).unwrap();
    assert_eq!(mol.conformers.len(), 3);
    assert_eq!(mol.conformers[0], original.conformers[0]);
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.json");
    let curve = dir.path().join("curve.csv");
    let o = confgen(&[
        "eval", "--generated", s(&data_dir()), "--reference", s(&data_dir()), "--threshold", "0.5", "--symmetry",
        "--curve", "0.1:0.5:3", "--curve-out", s(&curve), "--out", s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["per_molecule"].as_array().unwrap().len(), 3);
    assert_eq!(v["aggregate"]["cov_r_mean"], 1.0);
    assert_eq!(v["aggregate"]["cov_p_mean"], 1.0);
    assert!(v["aggregate"]["amr_r_mean"].as_f64().unwrap() < 1e-6);
    let csv = fs::read_to_string(&curve).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn example_config_round_trips() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/c3h8o-ape-s.json");
    let config = RunConfig::load(&path).unwrap();
    assert_eq!(config.model, ModelConfig::ape_s());
    let again = RunConfig::from_json(&config.to_json().unwrap()).unwrap();
    assert_eq!(config, again);
    assert!(RunConfig::from_json(&fs::read_to_string(&path).unwrap().replace("\"seed\"", "\"sead\"")).is_err());
}

#[test]
fn classify_smoke_reports_accuracy() {
    let o = confgen(&["classify-smoke", "--layers", "0", "--epochs", "20"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["layers"], 0);
    assert!(v["accuracy"].as_f64().unwrap() <= 1.0 / 3.0 + 1e-12);
}

#[test]
fn perturbed_coupling_fails_the_property_suites() {
    let o = confgen(&["check-equivariance", "--seed", "1", "--perturb-cg", "1e-3"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
