use std::fs;

use clap::Parser;
use serde_json::{json, Value};

use sgvqa_cli::config::{leaves, parse_config, ExperimentConfig};
use sgvqa_cli::error::exit;
use sgvqa_cli::{Cli, CliError};
use sgvqa_core::losses::Variant;
use sgvqa_core::model::Preset;
use sgvqa_core::synth::{CorpusConfig, Split};
use sgvqa_core::train::TrainConfig;

fn sets(pairs: &[&str]) -> Vec<String> {
    pairs.iter().map(|s| s.to_string()).collect()
}

fn config_error(r: Result<ExperimentConfig, CliError>) -> (String, String) {
    match r {
        Err(CliError::Config { path, reason }) => (path, reason),
        Err(CliError::Core(sgvqa_core::Error::Config { path, reason })) => (path, reason),
        other => panic!("expected a config error, got {other:?}"),
    }
}

/// Leaves that differ between two configs.
fn diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let (la, lb) = (leaves(&serde_json::to_value(a).unwrap()), leaves(&serde_json::to_value(b).unwrap()));
    assert_eq!(la.len(), lb.len());
    la.iter().filter(|(k, v)| lb.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

#[test]
fn empty_file_gives_desk_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    fs::write(&path, "").unwrap();
    let cfg = parse_config(Some(&path), &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.train, TrainConfig::desk());
    assert_eq!(cfg.corpus, CorpusConfig::default());
    assert_eq!(cfg.train.preset, Preset::Desk);
    assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.corpus.n_scenes), (15, 64, 2000));
    fs::write(&path, "{}").unwrap();
    assert_eq!(parse_config(Some(&path), &[]).unwrap(), cfg);
    assert_eq!(parse_config(None, &[]).unwrap(), cfg);
}

#[test]
fn override_changes_only_its_field() {
    let base = parse_config(None, &[]).unwrap();
    let cfg = parse_config(None, &sets(&["train.loss.variant=global"])).unwrap();
    assert_eq!(cfg.train.loss.variant, Variant::Global);
    assert_eq!(diff(&base, &cfg), vec!["train.loss.variant".to_string()]);

    let cfg = parse_config(None, &sets(&["train.lr=0.01", "options.split=val", "options.fractions=[0.5,1.0]"])).unwrap();
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.options.split, Split::Val);
    assert_eq!(cfg.options.fractions, vec![0.5, 1.0]);
    assert_eq!(diff(&base, &cfg).len(), 3);
    // list elements are addressable by index
    let cfg = parse_config(None, &sets(&["options.fractions.1=0.6"])).unwrap();
    assert_eq!(cfg.options.fractions, vec![0.2, 0.6, 1.0]);
}

#[test]
fn later_overrides_win() {
    let cfg = parse_config(None, &sets(&["train.epochs=3", "train.epochs=4"])).unwrap();
    assert_eq!(cfg.train.epochs, 4);
}

#[test]
fn file_values_merge_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, json!({ "train": { "lr": 0.005, "loss": { "tau": 0.2 } }, "corpus": { "n_scenes": 300 } }).to_string())
        .unwrap();
    let base = parse_config(None, &[]).unwrap();
    let cfg = parse_config(Some(&path), &[]).unwrap();
    let mut d = diff(&base, &cfg);
    d.sort();
    assert_eq!(d, vec!["corpus.n_scenes", "train.loss.tau", "train.lr"]);
    // overrides apply after the file
    let cfg = parse_config(Some(&path), &sets(&["train.lr=0.002"])).unwrap();
    assert_eq!(cfg.train.lr, 0.002);
    assert_eq!(cfg.train.loss.tau, 0.2);
}

#[test]
fn baseline_with_beta_is_rejected() {
    let (path, _) = config_error(parse_config(None, &sets(&["train.loss.variant=baseline", "train.loss.beta=1"])));
    assert_eq!(path, "train.loss.beta");
    let ok = parse_config(None, &sets(&["train.loss.variant=baseline", "train.loss.beta=0"])).unwrap();
    assert_eq!(ok.train.loss.variant, Variant::Baseline);
}

#[test]
fn unknown_keys_are_reported_with_their_path() {
    assert_eq!(config_error(parse_config(None, &sets(&["train.loss.bogus=1"]))).0, "train.loss.bogus");
    assert_eq!(config_error(parse_config(None, &sets(&["nope=1"]))).0, "nope");
    assert_eq!(config_error(parse_config(None, &sets(&["train.lr.x=1"]))).0, "train.lr.x");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"corpus": {"noise": {"sigma": 1}}}"#).unwrap();
    assert_eq!(config_error(parse_config(Some(&path), &[])).0, "corpus.noise.sigma");
}

#[test]
fn type_mismatches_are_reported_with_their_path() {
    let (path, reason) = config_error(parse_config(None, &sets(&["train.lr=fast"])));
    assert_eq!(path, "train.lr");
    assert!(reason.contains("f64"), "{reason}");
    assert_eq!(config_error(parse_config(None, &sets(&["train.loss.variant=sideways"]))).0, "train.loss.variant");
    assert_eq!(config_error(parse_config(None, &sets(&["train.epochs=-1"]))).0, "train.epochs");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"train": {"loss": {"stop_gradient": "yes"}}}"#).unwrap();
    assert_eq!(config_error(parse_config(Some(&path), &[])).0, "train.loss.stop_gradient");
}

#[test]
fn invariant_violations_are_reported_with_their_path() {
    for (set, want) in [
        ("corpus.n_scenes=0", "corpus.n_scenes"),
        ("train.preset=tiny", "corpus.node_dim"),
        ("corpus.node_dim=16", "corpus.node_dim"),
        ("options.fractions=[0.5,0.2]", "options.fractions"),
        ("options.fractions=[]", "options.fractions"),
        ("options.question_noise_fraction=2", "options.question_noise_fraction"),
        ("options.gradcheck.eps=0", "options.gradcheck.eps"),
        ("options.gradcheck.items=0", "options.gradcheck.items"),
    ] {
        assert_eq!(config_error(parse_config(None, &sets(&[set]))).0, want, "{set}");
    }
    // the tiny preset goes with six-dimensional node features
    parse_config(None, &sets(&["train.preset=tiny", "corpus.node_dim=6"])).unwrap();
}

#[test]
fn malformed_input_is_rejected() {
    assert!(matches!(parse_config(None, &sets(&["train.lr"])), Err(CliError::Usage(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, "{ not json").unwrap();
    let (p, _) = config_error(parse_config(Some(&path), &[]));
    assert_eq!(p, path.display().to_string());
    let missing = dir.path().join("absent.json");
    let err = parse_config(Some(&missing), &[]).unwrap_err();
    assert_eq!(err.path().unwrap(), missing.display().to_string());
}

#[test]
fn flags_become_overrides() {
    let cli = Cli::parse_from(["sgvqa", "train", "--seed", "9", "--out", "elsewhere", "--set", "train.seed=3"]);
    let cfg = parse_config(None, &cli.overrides()).unwrap();
    assert_eq!(cfg.corpus.seed, 9);
    assert_eq!(cfg.train.seed, 3);
    assert_eq!(cfg.out, std::path::PathBuf::from("elsewhere"));
    let cli = Cli::parse_from(["sgvqa", "--force", "--seed", "4", "eval"]);
    assert!(cli.force);
    assert_eq!(parse_config(None, &cli.overrides()).unwrap().train.seed, 4);
}

#[test]
fn config_hash_ignores_the_output_root() {
    let a = parse_config(None, &[]).unwrap();
    let b = parse_config(None, &sets(&["out=\"other\""])).unwrap();
    assert_ne!(a.out, b.out);
    assert_eq!(a.hash(), b.hash());
    let c = parse_config(None, &sets(&["train.lr=0.002"])).unwrap();
    assert_ne!(a.hash(), c.hash());
    assert!(a.recorded().get("out").is_none());
    // the recorded form reads back as the same experiment
    let back: ExperimentConfig = serde_json::from_value(a.recorded()).unwrap();
    assert_eq!(back.hash(), a.hash());
}

#[test]
fn error_envelopes_and_exit_codes() {
    let e = CliError::Missing { what: "checkpoint", path: "x/final.json".into(), hint: "train first" };
    let env = e.envelope();
    assert_eq!(env["error"]["kind"], "missing_prerequisite");
    assert_eq!(env["error"]["path"], "x/final.json");
    assert!(env["error"]["message"].as_str().unwrap().contains("x/final.json"));
    assert_eq!(e.exit_code(), exit::ERROR);
    let d = CliError::Core(sgvqa_core::Error::Diverged { epoch: 1, step: 2, what: "nan".into() });
    assert_eq!((d.kind(), d.exit_code()), ("diverged", exit::DIVERGED));
    assert!(d.envelope()["error"].get("path").is_none());
    let c = CliError::CheckFailed { max_rel_err: 1.0, tolerance: 1e-4, report: "r.json".into() };
    assert_eq!((c.kind(), c.exit_code()), ("check_failed", exit::CHECK_FAILED));
    assert_eq!(CliError::Usage("x".into()).exit_code(), exit::USAGE);
    let codes = [exit::ERROR, exit::USAGE, exit::CHECK_FAILED, exit::DIVERGED];
    assert!(codes.iter().all(|&c| c != 0));
    let v: Value = serde_json::from_str(&env.to_string()).unwrap();
    assert_eq!(v, env);
}
