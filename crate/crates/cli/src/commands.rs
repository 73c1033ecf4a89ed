//! The seven commands. Each writes into its own directory under the output
//! root and finishes with a run manifest.

use std::path::{Path, PathBuf};

use serde_json::json;

use sgvqa_core::model::{Checkpoint, ModelConfig, ModelParams, RngState};
use sgvqa_core::synth::{build_corpus, load_corpus, write_corpus, Corpus, CorpusConfig, QType, Split};
use sgvqa_core::train::{
    check_batch, check_objectives, evaluate, fraction_sweep, perturbation_report, spread_params, train_with, Perturbation,
    PerturbationRow, Setup,
};

use crate::artifacts::{epoch_row, metrics_header, metrics_row, read_json, sha256_file, step_row, steps_header, Prepared, Stage};
use crate::config::{model_dims, ExperimentConfig};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train a model; writes per-epoch checkpoints and logs.
    Train,
    /// Score a checkpoint on one split.
    Eval,
    /// Accuracy change under disruptive augmentations.
    Ablate,
    /// Accuracy under graph and question noise.
    Probe,
    /// Retrain at several labeled fractions.
    Sweep,
    /// Finite-difference check of every loss configuration.
    Gradcheck,
    /// Print the resolved config.
    Config,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Probe => "probe",
            Command::Sweep => "sweep",
            Command::Gradcheck => "gradcheck",
            Command::Config => "config",
        }
    }
}

/// Runs `cmd`, sending progress lines to `log`. Returns the summary line.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, force: bool, log: &mut dyn FnMut(&str)) -> Result<String> {
    match cmd {
        Command::GenData => gen_data(cfg, force),
        Command::Train => train(cfg, force, log),
        Command::Eval => eval(cfg, force),
        Command::Ablate => perturb(cfg, force, Command::Ablate),
        Command::Probe => perturb(cfg, force, Command::Probe),
        Command::Sweep => sweep(cfg, force),
        Command::Gradcheck => gradcheck(cfg, force),
        Command::Config => Ok(serde_json::to_string_pretty(cfg).expect("config serializes")),
    }
}

fn up_to_date(cmd: &str, dir: &Path) -> String {
    format!("{cmd}: outputs in {} are up to date (pass --force to rebuild)", dir.display())
}

fn corpus_manifest(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = cfg.corpus_dir().join("manifest.json");
    if !path.exists() {
        return Err(CliError::Missing { what: "corpus", path: path.display().to_string(), hint: "run `sgvqa gen-data` first" });
    }
    let manifest: serde_json::Value = read_json(&path)?;
    if manifest["config"] != serde_json::to_value(&cfg.corpus).expect("config serializes") {
        return Err(CliError::config(
            "corpus",
            format!(
                "the corpus in {} was generated from another corpus config; rerun gen-data with --force",
                cfg.corpus_dir().display()
            ),
        ));
    }
    Ok(path)
}

fn open_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = load_corpus(&cfg.corpus_dir())?;
    if corpus.config != cfg.corpus {
        return Err(CliError::config("corpus", "corpus files changed while loading"));
    }
    Ok(corpus)
}

fn checkpoint_path(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = cfg.checkpoint();
    if !path.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path: path.display().to_string(),
            hint: "run `sgvqa train` first or set options.checkpoint",
        });
    }
    Ok(path)
}

fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let mut stage = match Stage::prepare(cfg.corpus_dir(), "gen-data", cfg, &["corpus"], &[], force)? {
        Prepared::UpToDate(dir) => return Ok(up_to_date("gen-data", &dir)),
        Prepared::Run(s) => s,
    };
    let corpus = build_corpus(&cfg.corpus)?;
    write_corpus(&corpus, &stage.dir)?;
    for name in ["scenes.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "manifest.json"] {
        stage.record(stage.path(name));
    }
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    let n: Vec<usize> = Split::ALL.iter().map(|&s| corpus.items(s).len()).collect();
    Ok(format!("gen-data: {} scenes, {}/{}/{} train/val/test items -> {}", corpus.scenes.len(), n[0], n[1], n[2], dir.display()))
}

fn train(cfg: &ExperimentConfig, force: bool, log: &mut dyn FnMut(&str)) -> Result<String> {
    let inputs = [corpus_manifest(cfg)?];
    let mut stage = match Stage::prepare(cfg.out.join("train"), "train", cfg, &["corpus", "train"], &inputs, force)? {
        Prepared::UpToDate(dir) => return Ok(up_to_date("train", &dir)),
        Prepared::Run(s) => s,
    };
    let corpus = open_corpus(cfg)?;
    let hash = cfg.hash();
    let total = cfg.train.epochs;
    let mut saved: Vec<PathBuf> = Vec::new();
    let out = train_with(&cfg.train, &corpus, &mut |e, params| {
        let path = stage.path(&format!("checkpoints/epoch_{:03}.json", e.epoch));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|err| sgvqa_core::Error::Io { path: parent.display().to_string(), source: err })?;
        }
        Checkpoint::from_params(params, RngState { seed: cfg.train.seed, epoch: e.epoch }).with_config_hash(&hash).save(&path)?;
        saved.push(path);
        log(&format!(
            "epoch {}/{}: L_sup {:.4} L_prime {:.4} J_e {:.4} val {:.3} repr_std {:.3}",
            e.epoch, total, e.sup, e.prime, e.link, e.val.overall, e.repr_std
        ));
        Ok(())
    })?;
    for p in saved {
        stage.record(p);
    }
    let last = out.epochs.last().map_or(0, |e| e.epoch);
    let final_path = stage.path("final.json");
    Checkpoint::from_params(&out.params, RngState { seed: cfg.train.seed, epoch: last })
        .with_config_hash(&hash)
        .save(&final_path)?;
    stage.record(final_path);

    let test = evaluate(&out.params, &corpus, Split::Test)?;
    let mut rows: Vec<Vec<String>> = out.epochs.iter().map(epoch_row).collect();
    rows.push(metrics_row(last, "test", &test, None));
    stage.csv("metrics.csv", &metrics_header(), &rows)?;
    let steps: Vec<Vec<String>> = out.steps.iter().map(step_row).collect();
    stage.csv("steps.csv", &steps_header(), &steps)?;
    stage.json(
        "report.json",
        &json!({
            "config_hash": hash,
            "variant": cfg.train.loss.variant,
            "train_scenes": out.train_scenes.len(),
            "initial_repr_std": out.initial_repr_std,
            "epochs": out.epochs,
            "test": test,
        }),
    )?;
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    let val = out.epochs.last().map_or(0.0, |e| e.val.overall);
    Ok(format!(
        "train: {} epochs of {}, val {:.3}, test {:.3} -> {}",
        last,
        cfg.train.loss.variant.name(),
        val,
        test.overall,
        dir.display()
    ))
}

fn load_params(path: &Path) -> Result<(ModelParams, usize)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_params()?, ck.rng.epoch))
}

fn eval(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let ck = checkpoint_path(cfg)?;
    let inputs = [corpus_manifest(cfg)?, ck.clone()];
    let mut stage = match Stage::prepare(cfg.out.join("eval"), "eval", cfg, &["corpus", "options.split"], &inputs, force)? {
        Prepared::UpToDate(dir) => return Ok(up_to_date("eval", &dir)),
        Prepared::Run(s) => s,
    };
    let corpus = open_corpus(cfg)?;
    let (params, epoch) = load_params(&ck)?;
    let split = cfg.options.split;
    let report = evaluate(&params, &corpus, split)?;
    stage.csv("metrics.csv", &metrics_header(), &[metrics_row(epoch, split.name(), &report, None)])?;
    stage.json(
        "report.json",
        &json!({
            "config_hash": cfg.hash(),
            "checkpoint_sha256": sha256_file(&ck)?,
            "split": split,
            "metrics": report,
        }),
    )?;
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    Ok(format!(
        "eval: {} accuracy {:.3} (binary {:.3}, open {:.3}, consistency {:.3}) on {} items -> {}",
        split.name(),
        report.overall,
        report.binary,
        report.open,
        report.consistency,
        report.count,
        dir.display()
    ))
}

/// Probe rows with the configured noise levels.
pub fn probe_setups(cfg: &ExperimentConfig) -> Vec<Setup> {
    let (sigma, fraction) = (cfg.options.graph_noise_sigma, cfg.options.question_noise_fraction);
    vec![
        Setup::new("noise_sg", None, Perturbation::GraphNoise { sigma }),
        Setup::new("question_noise", None, Perturbation::QuestionNoise { fraction }),
        Setup::new("noise_noise", None, Perturbation::Both { sigma, fraction }),
    ]
}

fn perturb(cfg: &ExperimentConfig, force: bool, cmd: Command) -> Result<String> {
    let name = cmd.name();
    let ck = checkpoint_path(cfg)?;
    let inputs = [corpus_manifest(cfg)?, ck.clone()];
    let (setups, fields): (Vec<Setup>, &[&str]) = match cmd {
        Command::Ablate => (Setup::augmentation_suite(), &["corpus", "train.seed", "options.split"]),
        _ => (
            probe_setups(cfg),
            &["corpus", "train.seed", "options.split", "options.graph_noise_sigma", "options.question_noise_fraction"],
        ),
    };
    let mut stage = match Stage::prepare(cfg.out.join(name), name, cfg, fields, &inputs, force)? {
        Prepared::UpToDate(dir) => return Ok(up_to_date(name, &dir)),
        Prepared::Run(s) => s,
    };
    let corpus = open_corpus(cfg)?;
    let (params, _) = load_params(&ck)?;
    let split = cfg.options.split;
    let rows = perturbation_report(&params, &corpus, split, &setups, cfg.train.seed)?;
    let header: Vec<String> = ["setup", "qtype", "count", "clean", "perturbed", "delta"].map(String::from).to_vec();
    let csv_rows: Vec<Vec<String>> = rows.iter().map(perturbation_row).collect();
    stage.csv("deltas.csv", &header, &csv_rows)?;
    stage.json(
        "report.json",
        &json!({
            "config_hash": cfg.hash(),
            "checkpoint_sha256": sha256_file(&ck)?,
            "split": split,
            "setups": setups,
            "rows": rows,
        }),
    )?;
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    let parts: Vec<String> = rows.iter().map(|r| format!("{} {:+.3}", r.setup, r.delta)).collect();
    Ok(format!("{name}: {} -> {}", parts.join(", "), dir.display()))
}

fn perturbation_row(r: &PerturbationRow) -> Vec<String> {
    vec![
        r.setup.clone(),
        r.qtype.map_or("all", QType::name).to_string(),
        r.count.to_string(),
        r.clean.to_string(),
        r.perturbed.to_string(),
        r.delta.to_string(),
    ]
}

fn sweep(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let inputs = [corpus_manifest(cfg)?];
    let fields = ["corpus", "train", "options.fractions"];
    let mut stage = match Stage::prepare(cfg.out.join("sweep"), "sweep", cfg, &fields, &inputs, force)? {
        Prepared::UpToDate(dir) => return Ok(up_to_date("sweep", &dir)),
        Prepared::Run(s) => s,
    };
    let corpus = open_corpus(cfg)?;
    let points = fraction_sweep(&cfg.train, &corpus, &cfg.options.fractions)?;
    let mut header: Vec<String> =
        ["fraction", "train_scenes", "overall", "binary", "open", "consistency", "validity"].map(String::from).to_vec();
    header.extend(QType::ALL.iter().map(|q| q.name().to_string()));
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let m = &p.test;
            let mut r = vec![p.fraction.to_string(), p.train_scenes.to_string()];
            r.extend([m.overall, m.binary, m.open, m.consistency, m.validity].map(|x| x.to_string()));
            r.extend(QType::ALL.iter().map(|&q| m.qtype(q).accuracy.to_string()));
            r
        })
        .collect();
    stage.csv("curve.csv", &header, &rows)?;
    stage.json("report.json", &json!({ "config_hash": cfg.hash(), "variant": cfg.train.loss.variant, "points": points }))?;
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    let parts: Vec<String> = points.iter().map(|p| format!("{:.0}% {:.3}", 100.0 * p.fraction, p.test.overall)).collect();
    Ok(format!("sweep: {} -> {}", parts.join(", "), dir.display()))
}

fn gradcheck(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let g = &cfg.options.gradcheck;
    let dir = cfg.out.join("gradcheck");
    let fields = ["corpus", "train", "options.gradcheck"];
    let mut stage = match Stage::prepare(dir, "gradcheck", cfg, &fields, &[], force)? {
        Prepared::UpToDate(dir) => {
            let report: serde_json::Value = read_json(&dir.join("report.json"))?;
            return gradcheck_verdict(&report, &dir.join("report.json"), up_to_date("gradcheck", &dir));
        }
        Prepared::Run(s) => s,
    };
    let preset = cfg.gradcheck_preset();
    let seed = cfg.train.seed;
    let corpus = build_corpus(&CorpusConfig {
        n_scenes: g.scenes,
        max_objects: g.max_objects,
        node_dim: model_dims(preset).node_dim,
        ..cfg.corpus.clone()
    })?;
    let mc = ModelConfig::for_preset(preset, corpus.vocab.n_tokens(), corpus.vocab.n_answers());
    let mut params = ModelParams::init(mc, seed, corpus.vocab.fingerprint())?;
    spread_params(&mut params, g.spread, seed);
    let (items, anchors, aug) = check_batch(&corpus, g.items, seed)?;
    let checks = check_objectives(&params, &items, &anchors, &aug, g.eps)?;
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let scalars: usize = params.store.iter().map(|(_, p)| p.tensor.len()).sum();
    let report = json!({
        "config_hash": cfg.hash(),
        "preset": preset,
        "eps": g.eps,
        "tolerance": g.tolerance,
        "items": items.len(),
        "scalars": scalars,
        "max_rel_err": max_rel_err,
        "pass": max_rel_err <= g.tolerance,
        "checks": checks,
    });
    let path = stage.json("report.json", &report)?;
    let dir = stage.dir.clone();
    stage.finish(cfg)?;
    let summary = format!(
        "gradcheck: {} preset, {} configs over {scalars} parameters, max relative error {max_rel_err:.2e} (tolerance {:.0e}) -> {}",
        preset.name(),
        checks.iter().filter(|c| c.valid).count(),
        g.tolerance,
        dir.display()
    );
    gradcheck_verdict(&report, &path, summary)
}

fn gradcheck_verdict(report: &serde_json::Value, path: &Path, summary: String) -> Result<String> {
    if report["pass"].as_bool() == Some(true) {
        return Ok(summary);
    }
    Err(CliError::CheckFailed {
        max_rel_err: report["max_rel_err"].as_f64().unwrap_or(f64::NAN),
        tolerance: report["tolerance"].as_f64().unwrap_or(f64::NAN),
        report: path.display().to_string(),
    })
}
