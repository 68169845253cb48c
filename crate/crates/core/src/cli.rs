//! Command-line driver: one TOML config, one run directory per config and seed.
//!
//! Outputs of `ingest`, `analyze`, `train`, `eval` and `report` go under
//! `<runs_dir>/run-<hash>-s<seed>/`, where the hash covers the whole parsed
//! config. A `run.lock` file guards the directory while a command runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{emit_analysis_report, run_analysis, AnalysisConfig};
use crate::baselines::{HisPop, SOnly};
use crate::dataio::{
    filter_users, generate_synthetic, parse_catalog, parse_interactions, split_global_timeline, write_catalog, write_interactions, DatasetSplit,
    Partition, SynthConfig, SECONDS_PER_DAY,
};
use crate::diffcore::Checkpoint;
use crate::ensemble::{Concat, Ensemble, EnsembleParams};
use crate::evalharness::{build_cases, evaluate, MetricsReport, Protocol, Scorer};
use crate::exprec::{ExpRec, ExpRecParams};
use crate::features::Encoded;
use crate::reprec::{RepRec, RepRecParams};
use crate::training::{FitReport, TrainConfig};

pub const CONFIG_FILE: &str = "fdrec.toml";
const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    pub tz_offset_minutes: i32,
    pub min_orders: usize,
    pub test_days: i64,
    pub valid_days: i64,
    /// Parent of the run directories.
    pub runs_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: "interactions.tsv".into(),
            catalog: "catalog.tsv".into(),
            tz_offset_minutes: 0,
            min_orders: 10,
            test_days: 14,
            valid_days: 7,
            runs_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SOnlyParams {
    pub dim: usize,
}

impl Default for SOnlyParams {
    fn default() -> Self {
        SOnlyParams { dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 3, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub analysis: AnalysisConfig,
    pub sonly: SOnlyParams,
    pub reprec: RepRecParams,
    pub exprec: ExpRecParams,
    pub ensemble: EnsembleParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> crate::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| crate::Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config and resolve its relative paths against its directory.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.interactions, &mut cfg.data.catalog, &mut cfg.data.runs_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let d = &self.data;
        if d.min_orders == 0 || d.test_days <= 0 || d.valid_days <= 0 {
            return Err(crate::Error::Config("min_orders, test_days and valid_days must be positive".into()));
        }
        if self.sonly.dim == 0 || self.reprec.dim == 0 || self.reprec.history_limit == 0 {
            return Err(crate::Error::Config("model dimensions must be positive".into()));
        }
        if self.eval.k == 0 {
            return Err(crate::Error::Config("eval k must be positive".into()));
        }
        self.synth.validate()?;
        self.exprec.mask()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical config text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.data.runs_dir.join(format!("run-{}-s{}", self.hash(), self.train.seed))
    }
}

/// Exclusive hold on a run directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another run (remove {} if stale)", run_dir.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum ModelKind {
    Hispop,
    Sonly,
    Reprec,
    Exprec,
    Ensemble,
    Concat,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hispop => "hispop",
            ModelKind::Sonly => "sonly",
            ModelKind::Reprec => "reprec",
            ModelKind::Exprec => "exprec",
            ModelKind::Ensemble => "ensemble",
            ModelKind::Concat => "concat",
        }
    }

    pub fn trainable(self) -> bool {
        matches!(self, ModelKind::Sonly | ModelKind::Reprec | ModelKind::Exprec | ModelKind::Ensemble)
    }

    pub fn supports(self, p: Protocol) -> bool {
        match self {
            ModelKind::Hispop | ModelKind::Reprec => p == Protocol::Repeat,
            ModelKind::Exprec => p == Protocol::Exploration,
            ModelKind::Sonly | ModelKind::Ensemble | ModelKind::Concat => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Repeat,
    Exploration,
    Combined,
    All,
}

#[derive(Parser, Debug)]
#[command(name = "fdrec", version, about = "Situation-aware repeat and exploration recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, filter and split the interaction log; write a split manifest.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Parent of the run directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic log, its catalog and a matching config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavioral analyses of the filtered log as CSV files.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model on the test partition and write a metrics report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, value_enum, default_value = "all")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect every metrics report of the run into one table.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Misuse of the command line or config; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("error: {e}");
                eprintln!("run `fdrec --help` for usage");
                2
            } else {
                eprintln!("error: {e:#}");
                1
            }
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("FDREC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("FDREC_THREADS must be a positive integer, got {v:?}")))?;
    // A global pool may already exist when the CLI runs inside a test process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(path: &Path, out: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    if !path.exists() {
        return Err(usage(format!("config {} does not exist", path.display())));
    }
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        crate::Error::Config(_) => usage(format!("{}: {e}", path.display())),
        e => anyhow::Error::new(e),
    })?;
    if let Some(o) = out {
        cfg.data.runs_dir = o;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { config, seed, out } => synth(config.as_deref(), seed, &out),
        Command::Ingest { config, out } => {
            let cfg = load_config(&config, out)?;
            with_run(&cfg, |dir| ingest(&cfg, dir))
        }
        Command::Analyze { config, out } => {
            let cfg = load_config(&config, out)?;
            with_run(&cfg, |dir| analyze(&cfg, dir))
        }
        Command::Train { config, model, out } => {
            if !model.trainable() {
                return Err(usage(format!("{} has no trainable parameters", model.name())));
            }
            let cfg = load_config(&config, out)?;
            with_run(&cfg, |dir| train(&cfg, dir, model))
        }
        Command::Eval {
            config,
            model,
            protocol,
            out,
        } => {
            let protocols = protocols_for(model, protocol)?;
            let cfg = load_config(&config, out)?;
            with_run(&cfg, |dir| eval(&cfg, dir, model, &protocols))
        }
        Command::Report { config, out } => {
            let cfg = load_config(&config, out)?;
            with_run(&cfg, |dir| report(dir))
        }
    }
}

fn protocols_for(model: ModelKind, arg: ProtocolArg) -> anyhow::Result<Vec<Protocol>> {
    let one = |p: Protocol| -> anyhow::Result<Vec<Protocol>> {
        if model.supports(p) {
            Ok(vec![p])
        } else {
            Err(usage(format!("{} cannot score {} cases", model.name(), p.name())))
        }
    };
    match arg {
        ProtocolArg::Repeat => one(Protocol::Repeat),
        ProtocolArg::Exploration => one(Protocol::Exploration),
        ProtocolArg::Combined => one(Protocol::Combined),
        ProtocolArg::All => Ok(Protocol::ALL.into_iter().filter(|&p| model.supports(p)).collect()),
    }
}

fn with_run(cfg: &RunConfig, f: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    write(&cfg_path, cfg.to_toml())?;
    f(&dir)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p, None)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    let (log, catalog) = generate_synthetic(&cfg.synth, cfg.train.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_interactions(out.join("interactions.tsv"), &log)?;
    write_catalog(out.join("catalog.tsv"), &catalog)?;
    cfg.data.interactions = "interactions.tsv".into();
    cfg.data.catalog = "catalog.tsv".into();
    cfg.data.runs_dir = "runs".into();
    cfg.data.tz_offset_minutes = 0;
    // Every synthetic user has n_orders_per_user orders.
    cfg.data.min_orders = cfg.data.min_orders.min(cfg.synth.n_orders_per_user.max(1));
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    println!("wrote {} interactions and {} stores to {}", log.len(), catalog.len(), out.display());
    Ok(())
}

/// Parse, attach the catalog, filter users and split.
pub fn load_split(cfg: &RunConfig) -> anyhow::Result<DatasetSplit> {
    let d = &cfg.data;
    let log = parse_interactions(&d.interactions, d.tz_offset_minutes)?;
    let catalog = parse_catalog(&d.catalog)?;
    let log = filter_users(&log.with_catalog(catalog)?, d.min_orders)?;
    Ok(split_global_timeline(log, d.test_days * SECONDS_PER_DAY, d.valid_days * SECONDS_PER_DAY)?)
}

fn ingest(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let split = load_split(cfg)?;
    let log = split.log();
    let flags = split.repeat_flags();
    let repeats = flags.iter().filter(|&&f| f).count();
    let (valid_start, test_start) = split.boundaries();
    let mut parts = serde_json::Map::new();
    for p in [Partition::Train, Partition::Valid, Partition::Test] {
        let r = split.range(p);
        let rep = flags[r.clone()].iter().filter(|&&f| f).count();
        parts.insert(p.name().into(), json!({ "interactions": r.len(), "repeat": rep }));
    }
    let manifest = json!({
        "interactions": log.len(),
        "users": log.n_users(),
        "stores": log.referenced_stores().len(),
        "catalog_stores": log.catalog().len(),
        "repeat_fraction": repeats as f64 / log.len().max(1) as f64,
        "valid_start": valid_start,
        "test_start": test_start,
        "partitions": parts,
    });
    let path = dir.join("split.json");
    write(&path, format!("{}\n", serde_json::to_string_pretty(&manifest)?))?;
    println!("{}", path.display());
    Ok(())
}

fn analyze(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let split = load_split(cfg)?;
    let out = run_analysis(split.log(), &cfg.analysis)?;
    let target = dir.join("analysis");
    emit_analysis_report(&out, &target)?;
    println!("{}", target.display());
    Ok(())
}

fn checkpoint_path(dir: &Path, model: ModelKind) -> PathBuf {
    dir.join("checkpoints").join(format!("{}.ckpt", model.name()))
}

fn load_checkpoint(dir: &Path, model: ModelKind) -> anyhow::Result<Checkpoint> {
    let p = checkpoint_path(dir, model);
    if !p.exists() {
        bail!("no {} checkpoint at {}; run `fdrec train --model {}` first", model.name(), p.display(), model.name());
    }
    Ok(Checkpoint::load(&p)?)
}

fn fit_json(model: &str, reports: &[(&str, &FitReport)], parameter_count: usize) -> String {
    let stages: Vec<_> = reports
        .iter()
        .map(|(name, r)| {
            json!({
                "stage": name,
                "best_epoch": r.best_epoch,
                "best_valid": r.best_valid_hr,
                "epochs": r.epochs.iter().map(|e| json!({"epoch": e.epoch, "mean_loss": e.mean_loss, "valid": e.valid_hr})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let v = json!({ "model": model, "parameter_count": parameter_count, "stages": stages });
    format!("{}\n", serde_json::to_string_pretty(&v).expect("json values serialize"))
}

fn train(cfg: &RunConfig, dir: &Path, model: ModelKind) -> anyhow::Result<()> {
    let split = load_split(cfg)?;
    let enc = Encoded::new(&split)?;
    let tc = &cfg.train;
    let (ck, log) = match model {
        ModelKind::Sonly => {
            let (m, r) = SOnly::train(&enc, cfg.sonly.dim, tc)?;
            (m.checkpoint(&enc), fit_json("sonly", &[("bpr", &r)], m.parameter_count()))
        }
        ModelKind::Reprec => {
            let (m, r) = RepRec::train(&enc, &cfg.reprec, tc)?;
            (m.checkpoint(&enc), fit_json("reprec", &[("bpr", &r)], m.parameter_count()))
        }
        ModelKind::Exprec => {
            let (m, r) = ExpRec::train(&enc, &cfg.exprec, tc)?;
            (m.checkpoint(&enc), fit_json("exprec", &[("bpr", &r)], m.parameter_count()))
        }
        ModelKind::Ensemble => {
            let (reprec, exprec) = load_bases(dir, &enc)?;
            let (m, r) = Ensemble::train(&enc, &cfg.ensemble, tc, reprec, exprec)?;
            (
                m.checkpoint(&enc),
                fit_json("ensemble", &[("intent", &r.intent), ("combine", &r.combine)], m.parameter_count()),
            )
        }
        ModelKind::Hispop | ModelKind::Concat => unreachable!("rejected before loading"),
    };
    let path = checkpoint_path(dir, model);
    write(&path, ck.to_text())?;
    write(&dir.join("logs").join(format!("train-{}.json", model.name())), log)?;
    println!("{}", path.display());
    Ok(())
}

fn load_bases(dir: &Path, enc: &Encoded) -> anyhow::Result<(RepRec, ExpRec)> {
    let reprec = RepRec::from_checkpoint(&load_checkpoint(dir, ModelKind::Reprec)?, enc)?;
    let exprec = ExpRec::from_checkpoint(&load_checkpoint(dir, ModelKind::Exprec)?, enc)?;
    Ok((reprec, exprec))
}

/// A scorer restored from the run directory with its parameter count.
fn load_scorer(dir: &Path, enc: &Encoded, model: ModelKind) -> anyhow::Result<(Box<dyn Scorer>, Option<usize>)> {
    Ok(match model {
        ModelKind::Hispop => (Box::new(HisPop), None),
        ModelKind::Sonly => {
            let m = SOnly::from_checkpoint(&load_checkpoint(dir, model)?, enc)?;
            let n = m.parameter_count();
            (Box::new(m), Some(n))
        }
        ModelKind::Reprec => {
            let m = RepRec::from_checkpoint(&load_checkpoint(dir, model)?, enc)?;
            let n = m.parameter_count();
            (Box::new(m), Some(n))
        }
        ModelKind::Exprec => {
            let m = ExpRec::from_checkpoint(&load_checkpoint(dir, model)?, enc)?;
            let n = m.parameter_count();
            (Box::new(m), Some(n))
        }
        ModelKind::Ensemble => {
            let (r, x) = load_bases(dir, enc)?;
            let m = Ensemble::from_checkpoint(&load_checkpoint(dir, model)?, enc, r, x)?;
            let n = m.parameter_count() + m.reprec.parameter_count() + m.exprec.parameter_count();
            (Box::new(m), Some(n))
        }
        ModelKind::Concat => {
            let (r, x) = load_bases(dir, enc)?;
            let n = r.parameter_count() + x.parameter_count();
            (Box::new(OwnedConcat { reprec: r, exprec: x }), Some(n))
        }
    })
}

struct OwnedConcat {
    reprec: RepRec,
    exprec: ExpRec,
}

impl Scorer for OwnedConcat {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> crate::Result<Vec<f64>> {
        Concat {
            reprec: &self.reprec,
            exprec: &self.exprec,
        }
        .score(enc, pos, candidates)
    }
}

fn report_path(dir: &Path, model: ModelKind, protocols: &[Protocol]) -> PathBuf {
    let tag = if protocols.len() == 1 { protocols[0].name() } else { "all" };
    dir.join("reports").join(format!("{}-{tag}.json", model.name()))
}

fn eval(cfg: &RunConfig, dir: &Path, model: ModelKind, protocols: &[Protocol]) -> anyhow::Result<()> {
    let split = load_split(cfg)?;
    let enc = Encoded::new(&split)?;
    let (scorer, parameter_count) = load_scorer(dir, &enc, model)?;
    let mut out = BTreeMap::new();
    for &p in protocols {
        let cases = build_cases(&enc, p, cfg.eval.seed)?;
        out.insert(p, evaluate(scorer.as_ref(), &enc, &cases, cfg.eval.k)?);
    }
    let report = MetricsReport {
        model: model.name().into(),
        seed: cfg.eval.seed,
        k: cfg.eval.k,
        protocols: out,
        parameter_count,
    };
    let path = report_path(dir, model, protocols);
    write(&path, report.to_json())?;
    print!("{}", report.to_json());
    Ok(())
}

/// Aggregate every report under `dir/reports` into a TSV table, one row per
/// model. Later files of the same model fill in protocols the earlier ones
/// lack.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut rows: BTreeMap<&str, (Option<usize>, usize, BTreeMap<Protocol, (f64, f64, usize)>)> = BTreeMap::new();
    for r in reports {
        let row = rows.entry(r.model.as_str()).or_insert((None, r.k, BTreeMap::new()));
        row.0 = row.0.or(r.parameter_count);
        for (p, m) in &r.protocols {
            row.2.entry(*p).or_insert((m.hr, m.ndcg, m.n));
        }
    }
    let k = reports.first().map_or(3, |r| r.k);
    let mut s = String::from("model\tparameters");
    for p in Protocol::ALL {
        s.push_str(&format!("\t{0}_hr@{k}\t{0}_ndcg@{k}\t{0}_n", p.name()));
    }
    s.push('\n');
    for (model, (params, _, ms)) in rows {
        s.push_str(model);
        s.push('\t');
        s.push_str(&params.map_or("-".into(), |n| n.to_string()));
        for p in Protocol::ALL {
            match ms.get(&p) {
                Some((hr, ndcg, n)) => s.push_str(&format!("\t{hr:.4}\t{ndcg:.4}\t{n}")),
                None => s.push_str("\t-\t-\t-"),
            }
        }
        s.push('\n');
    }
    s
}

fn report(dir: &Path) -> anyhow::Result<()> {
    let rdir = dir.join("reports");
    let mut files: Vec<PathBuf> = match fs::read_dir(&rdir) {
        Ok(it) => it.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect(),
        Err(_) => Vec::new(),
    };
    if files.is_empty() {
        bail!("no metrics reports under {}; run `fdrec eval` first", rdir.display());
    }
    files.sort();
    let reports = files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            MetricsReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = summary_table(&reports);
    write(&dir.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::ProtocolMetrics;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.sonly.dim, 64);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.eval.k, 3);
        assert_eq!(cfg.exprec.neighbors, 10);
        assert!(RunConfig::parse("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
        assert!(RunConfig::parse("[data]\nmin_orders = 0\n").is_err());
        assert!(RunConfig::parse("[exprec]\nablate = [\"situation\", \"history\", \"user\", \"collab\"]\n").is_err());
        let cfg = RunConfig::parse("[exprec]\nablate = [\"situation\"]\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn run_dir_tracks_config_and_seed() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.reprec.dim = 32;
        assert_ne!(a.run_dir(), b.run_dir());
        let mut c = a.clone();
        c.train.seed = 9;
        assert!(c.run_dir().to_string_lossy().ends_with("-s9"));
        assert_eq!(a.run_dir(), RunConfig::default().run_dir());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[data]\ninteractions = \"x/i.tsv\"\ncatalog = \"/abs/c.tsv\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.interactions, dir.path().join("x/i.tsv"));
        assert_eq!(cfg.data.catalog, PathBuf::from("/abs/c.tsv"));
        assert_eq!(cfg.data.runs_dir, dir.path().join("runs"));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn compatibility_matrix() {
        use Protocol::*;
        assert!(protocols_for(ModelKind::Hispop, ProtocolArg::Exploration).is_err());
        assert!(protocols_for(ModelKind::Exprec, ProtocolArg::Repeat).is_err());
        assert_eq!(protocols_for(ModelKind::Reprec, ProtocolArg::All).unwrap(), vec![Repeat]);
        assert_eq!(protocols_for(ModelKind::Exprec, ProtocolArg::All).unwrap(), vec![Exploration]);
        assert_eq!(protocols_for(ModelKind::Ensemble, ProtocolArg::All).unwrap(), Protocol::ALL.to_vec());
        assert_eq!(protocols_for(ModelKind::Sonly, ProtocolArg::Combined).unwrap(), vec![Combined]);
    }

    #[test]
    fn summary_merges_reports_per_model() {
        let m = |hr| ProtocolMetrics { hr, ndcg: hr / 2.0, n: 10 };
        let r = |model: &str, p: Protocol, hr: f64, params| MetricsReport {
            model: model.into(),
            seed: 1,
            k: 3,
            protocols: [(p, m(hr))].into_iter().collect(),
            parameter_count: params,
        };
        let t = summary_table(&[
            r("reprec", Protocol::Repeat, 0.5, Some(100)),
            r("hispop", Protocol::Repeat, 0.25, None),
            r("sonly", Protocol::Exploration, 0.125, Some(7)),
            r("sonly", Protocol::Combined, 0.0625, Some(7)),
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("model\tparameters\trepeat_hr@3\trepeat_ndcg@3\trepeat_n"));
        assert_eq!(lines[1], "hispop\t-\t0.2500\t0.1250\t10\t-\t-\t-\t-\t-\t-");
        assert_eq!(lines[3], "sonly\t7\t-\t-\t-\t0.1250\t0.0625\t10\t0.0625\t0.0312\t10");
    }
}
