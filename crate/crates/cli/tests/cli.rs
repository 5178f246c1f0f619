use std::fs;
use std::path::Path;
use std::process::{Command as Proc, Output};

use fedp3_cli::config::{AggregationName, SchemeName, Split};
use fedp3_cli::{run, CliError, Command, ExperimentConfig, RunOptions};

const SMOKE: &str =
    "[train]\nrounds = 1\nlocal_steps = 2\n[data]\nsamples = 200\nclients = 2\n[model]\nhidden = [8, 8, 8]\n";

fn bin(args: &[&str], dir: &Path) -> Output {
    Proc::new(env!("CARGO_BIN_EXE_fedp3"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn opts(out: &Path) -> RunOptions {
    RunOptions {
        out: out.to_path_buf(),
        ..RunOptions::default()
    }
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn empty_config_is_all_defaults() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.train.rounds, 200);
    assert_eq!(cfg.train.local_steps, 10);
    assert_eq!(cfg.train.batch_size, 48);
    assert_eq!(cfg.plans.scheme, SchemeName::Full);
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    for text in ["foo = 1\n", "[train]\nfoo = 1\n", "[privacy]\nepsilon = 1.0\nfoo = 2\n"] {
        match ExperimentConfig::parse(text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("`foo`"), "{msg}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[data]\nfoo = 3\n").unwrap();
    let out = bin(&["fedp3", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("foo") && err.contains("line 2"), "{err}");
}

#[test]
fn out_of_range_values_name_their_key() {
    match ExperimentConfig::parse("[plans]\nkeep_ratio = 1.5\n") {
        Err(CliError::Config(msg)) => assert!(msg.contains("plans.keep_ratio"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(ExperimentConfig::parse("[privacy]\nm = 5\nbatch = 6\n").is_err());
    assert!(ExperimentConfig::parse("[plans]\nscheme = \"opu9\"\n").is_err());
}

#[test]
fn serialization_is_a_fixpoint() {
    let text = "[plans]\nscheme = \"opu_range\"\nopu_max = 2\naggregation = \"attention\"\n\
                [data]\nsplit = \"classwise\"\n[train]\ngamma = 0.01\n[model]\ninstance = \"x.txt\"\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.plans.aggregation, AggregationName::Attention);
    assert_eq!(cfg.data.split, Split::Classwise);
    let once = cfg.to_toml();
    let again = ExperimentConfig::parse(&once).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_toml(), once);
}

#[test]
fn smoke_run_writes_one_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SMOKE).unwrap();
    let summary = run(&Command::Fedp3, cfg, &opts(tmp.path())).unwrap();
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "round,loss,accuracy,up_scalars_cum,down_scalars_cum");
    assert!(lines[1].starts_with("0,"));
    assert!(summary.violations.is_empty());

    let names: Vec<String> = dir_contents(tmp.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["config.toml", "manifest.json", "metrics.csv", "report.json"]);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"], report["config_sha256"]);
    assert_eq!(
        manifest["config_sha256"].as_str().unwrap(),
        fedp3_cli::output::sha256_hex(&fs::read(tmp.path().join("config.toml")).unwrap())
    );
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 3);
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("smoke.toml"), SMOKE.replace("rounds = 1", "rounds = 3")).unwrap();
    let a = bin(
        &["fedp3", "--config", "smoke.toml", "--out", "a", "--seed", "7"],
        tmp.path(),
    );
    let b = bin(
        &[
            "fedp3",
            "--config",
            "smoke.toml",
            "--out",
            "b",
            "--seed",
            "7",
            "--threads",
            "2",
        ],
        tmp.path(),
    );
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(dir_contents(&tmp.path().join("a")), dir_contents(&tmp.path().join("b")));

    let c = bin(
        &["fedp3", "--config", "smoke.toml", "--out", "c", "--seed", "8"],
        tmp.path(),
    );
    assert!(c.status.success());
    assert_ne!(
        fs::read(tmp.path().join("a/metrics.csv")).unwrap(),
        fs::read(tmp.path().join("c/metrics.csv")).unwrap()
    );
}

#[test]
fn verify_passes_on_bundled_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["verify", "--out", "v", "--fail-on-violation"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("v/report.json")).unwrap()).unwrap();
    let certs = report["certificates"].as_array().unwrap();
    assert_eq!(certs.len(), 5);
    for c in certs {
        assert_eq!(c["pass"], true, "{c}");
        assert!(c["constants"].is_object() && c["ci_half_width"].is_number());
    }
}

#[test]
fn account_prints_layer_table() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("p.toml"), "[plans]\nkeep_ratio = 0.5\n").unwrap();
    let out = bin(&["account", "--config", "p.toml", "--out", "acc"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,params,deployed_at_p,upload");
    assert_eq!(lines.len(), 6);
    assert!(lines.contains(&"conv1,4864,1409824,15104"), "{text}");
    // only the output layer trained: 10240 + 0.5 (2804544 - 10240)
    assert!(lines.contains(&"fc3,10240,1407392,10240"), "{text}");
}

#[test]
fn divergence_and_violations_set_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("hot.toml"),
        SMOKE.replace("rounds = 1", "rounds = 5\nlr = 1e200"),
    )
    .unwrap();
    let out = bin(&["fedp3", "--config", "hot.toml", "--out", "hot"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("hot").exists());

    let args = ["ldp", "--seeds", "5", "--clip", "0.01", "--out", "l"];
    let lenient = bin(&args, tmp.path());
    assert_eq!(lenient.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("certificate ldp failed"));
    let strict = bin(&[&args[..], &["--fail-on-violation"]].concat(), tmp.path());
    assert_eq!(strict.status.code(), Some(4));

    let zero = bin(&["account", "--threads", "0", "--out", "z"], tmp.path());
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn quadratic_subcommands_write_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("q.toml"), "[train]\nrounds = 20\ncert_seeds = 20\n").unwrap();
    for cmd in ["ist", "dgd"] {
        let out = bin(&[cmd, "--config", "q.toml", "--out", cmd], tmp.path());
        assert!(out.status.success(), "{cmd}");
        let csv = fs::read_to_string(tmp.path().join(cmd).join("trajectory.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("k,grad_norm_sq,value"));
        assert_eq!(csv.lines().count(), 22);
    }
    let ist: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("ist/report.json")).unwrap()).unwrap();
    assert_eq!(ist["upload_scalars"], 8 * 20);
    assert_eq!(ist["certificate"]["pass"], true);
    let dgd: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("dgd/report.json")).unwrap()).unwrap();
    assert_eq!(dgd["upload_scalars"], 4 * 8 * 20);
}
