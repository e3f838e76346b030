//! Command-line front end: configuration file, subcommand dispatch and run
//! artifacts.
//!
//! Every run writes its outputs under `--out`, together with the effective
//! configuration (`effective_config.toml`) and a `manifest.json` listing
//! each written file with its size and SHA-256. Exit codes: 0 success,
//! 1 invalid input or configuration, 2 execution failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{run_experiment_with, sweep, ExperimentConfig, RunReport, SweepGrid, SweepReport};
use crate::feature_model::{generate_ood, generate_paircad, EditMode, FeatureModelSpec, OodShift};
use crate::theorems::{gradcheck_suite, run_theorems, GradcheckConfig, GradcheckReport, TheoremConfig, TheoremReport};
use crate::text_ingest::{build_text_dataset, parse_cad_table, CadSchema, HashFeaturizer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_EXECUTION: i32 = 2;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "PAIRCFR_SEED";

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "paircfr", version, about = "Counterfactual augmentation lab: data, training, theorem checks and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Seed; takes precedence over PAIRCFR_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic CAD dataset and optional shifted test sets.
    Generate,
    /// Featurize a CAD text table into a dataset.
    Ingest {
        /// Input table; overrides `ingest.path`.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Run the configured experiment over its seeds.
    Train,
    /// Run the experiment over the configured grid.
    Sweep,
    /// Run the numerical theorem suite.
    VerifyTheorems {
        /// Absolute tolerance replacing the standard-error rule on Monte-Carlo checks.
        #[arg(long)]
        mc_tolerance: Option<f64>,
        /// Temperature used by the contrastive checks.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Finite-difference checks of every loss variant.
    Gradcheck,
    /// Render stored JSON reports into markdown and plot data.
    Report {
        /// Directory searched for reports; defaults to `--out`.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Ingest { .. } => "ingest",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::VerifyTheorems { .. } => "verify-theorems",
            Command::Gradcheck => "gradcheck",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub spec: FeatureModelSpec,
    pub n_pairs: usize,
    pub k: usize,
    pub edit_mode: EditMode,
    pub seed: u64,
    /// Shifted test sets written next to the dataset.
    pub ood: Vec<OodShift>,
    pub ood_size: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: FeatureModelSpec::canonical(),
            n_pairs: 1000,
            k: 1,
            edit_mode: EditMode::ExactOpposite,
            seed: 0,
            ood: Vec::new(),
            ood_size: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub path: Option<PathBuf>,
    pub schema: CadSchema,
    pub featurizer: HashFeaturizer,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            path: None,
            schema: CadSchema::sentiment(),
            featurizer: HashFeaturizer::default(),
        }
    }
}

/// Configuration file schema. Every section is optional.
///
/// ```toml
/// seed = 3            # applied to every section when set
/// threads = 1
/// [generate]          # spec, n_pairs, k, edit_mode, seed, ood, ood_size
/// [ingest]            # path, schema, featurizer
/// [experiment]        # name, data, split, train_on, model, train, ood, ood_size, seeds
/// [experiment.train]  # loss, batch_size, strategy, optimizer, ...
/// [experiment.train.loss]  # lambda, tau, similarity, neutral_excluded, no_positive_policy
/// [sweep]             # lambda, tau, batch_size, n_pairs, k
/// [theorems]          # seed, n_pairs, n_mc, tau, lambda, mc_sigmas, mc_tolerance, ...
/// [gradcheck]         # instances, epsilon, tolerance, lambda, tau
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub threads: usize,
    pub generate: GenerateConfig,
    pub ingest: IngestConfig,
    pub experiment: ExperimentConfig,
    pub sweep: SweepGrid,
    pub theorems: TheoremConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: 1,
            generate: GenerateConfig::default(),
            ingest: IngestConfig::default(),
            experiment: ExperimentConfig::default(),
            sweep: SweepGrid::default(),
            theorems: TheoremConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config echo: {e}")))
    }

    /// Applies overrides in precedence order flag > environment > file and
    /// propagates the resulting seed to every section.
    pub fn resolve(mut self, seed_flag: Option<u64>, seed_env: Option<&str>, threads_flag: Option<usize>) -> Result<Self> {
        let env_seed = match seed_env {
            Some(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Parse(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        if let Some(seed) = seed_flag.or(env_seed).or(self.seed) {
            if seed > i64::MAX as u64 {
                return Err(Error::InvalidSpec(vec![format!("seed {seed} exceeds the config integer range")]));
            }
            self.seed = Some(seed);
            self.generate.seed = seed;
            self.theorems.seed = seed;
            self.experiment.seeds = vec![seed];
        }
        if let Some(t) = threads_flag {
            self.threads = t;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::InvalidSpec(vec!["threads must be at least 1".into()]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub exit_code: i32,
    pub files: Vec<ManifestEntry>,
}

/// Output directory that records every file written through it.
struct RunDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        self.record(p);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn record(&mut self, p: PathBuf) {
        if !self.written.contains(&p) {
            self.written.push(p);
        }
    }

    fn finish(self, command: &str, exit_code: i32) -> Result<()> {
        let mut files = Vec::new();
        for p in &self.written {
            let bytes = fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            files.push(ManifestEntry {
                path: rel.to_string_lossy().into_owned(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            exit_code,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let p = self.root.join(MANIFEST);
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }
}

struct Printer {
    level: i32,
}

impl Printer {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            println!("{}", msg.as_ref());
        }
    }

    fn detail(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match execute(&cli, env_seed.as_deref()) {
        Ok(code) => code,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
        Err(Failure::Execution(e)) => {
            eprintln!("error: {e}");
            EXIT_EXECUTION
        }
    }
}

enum Failure {
    Validation(Error),
    Execution(Error),
}

fn validation(e: Error) -> Failure {
    Failure::Validation(e)
}

fn classify(e: Error) -> Failure {
    if e.is_validation() {
        Failure::Validation(e)
    } else {
        Failure::Execution(e)
    }
}

fn execute(cli: &Cli, env_seed: Option<&str>) -> std::result::Result<i32, Failure> {
    let out = Printer {
        level: if cli.quiet { 0 } else { 1 + cli.verbose as i32 },
    };
    if let Command::Report { from } = &cli.command {
        let from = from.clone().unwrap_or_else(|| cli.out.clone());
        return cmd_report(&from, &cli.out, &out);
    }
    let file = match &cli.config {
        Some(p) => CliConfig::load(p).map_err(validation)?,
        None => CliConfig::default(),
    };
    let cfg = file.resolve(cli.seed, env_seed, cli.threads).map_err(validation)?;
    cfg.validate().map_err(validation)?;
    let mut cfg = cfg;
    match &cli.command {
        Command::VerifyTheorems { mc_tolerance, tau } => {
            if mc_tolerance.is_some() {
                cfg.theorems.mc_tolerance = *mc_tolerance;
            }
            if let Some(t) = tau {
                cfg.theorems.tau = *t;
            }
            cfg.theorems.validate().map_err(validation)?;
        }
        Command::Ingest { input } => {
            if input.is_some() {
                cfg.ingest.path = input.clone();
            }
            let path = cfg
                .ingest
                .path
                .as_ref()
                .ok_or_else(|| validation(Error::NotFound("ingest needs an input table (--input or ingest.path)".into())))?;
            if !path.is_file() {
                return Err(validation(Error::NotFound(format!("input table {} not found", path.display()))));
            }
            cfg.ingest.featurizer.validate().map_err(validation)?;
        }
        Command::Train | Command::Sweep => {
            cfg.experiment.validate().map_err(validation)?;
            if let crate::eval::DataSource::Text { path, ood_paths, .. } = &cfg.experiment.data {
                for p in std::iter::once(path).chain(ood_paths) {
                    if !p.is_file() {
                        return Err(validation(Error::NotFound(format!("input table {} not found", p.display()))));
                    }
                }
            }
        }
        Command::Gradcheck => cfg.gradcheck.validate().map_err(validation)?,
        Command::Generate => crate::feature_model::validate_spec(&cfg.generate.spec).map_err(validation)?,
        Command::Report { .. } => unreachable!("handled above"),
    }

    let mut dir = RunDir::create(&cli.out).map_err(Failure::Execution)?;
    dir.write(EFFECTIVE_CONFIG, cfg.to_toml().map_err(Failure::Execution)?.as_bytes())
        .map_err(Failure::Execution)?;
    let result = match &cli.command {
        Command::Generate => cmd_generate(&cfg, &mut dir, &out),
        Command::Ingest { .. } => cmd_ingest(&cfg, &mut dir, &out),
        Command::Train => cmd_train(&cfg, &mut dir, &out),
        Command::Sweep => cmd_sweep(&cfg, &mut dir, &out),
        Command::VerifyTheorems { .. } => cmd_verify_theorems(&cfg, &mut dir, &out),
        Command::Gradcheck => cmd_gradcheck(&cfg, &mut dir, &out),
        Command::Report { .. } => unreachable!("handled above"),
    };
    let code = match &result {
        Ok(c) => *c,
        Err(e) if e.is_validation() => EXIT_VALIDATION,
        Err(_) => EXIT_EXECUTION,
    };
    dir.finish(cli.command.name(), code).map_err(Failure::Execution)?;
    result.map_err(classify)
}

fn cmd_generate(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let g = &cfg.generate;
    let ds = generate_paircad(&g.spec, g.n_pairs, g.k, g.edit_mode, g.seed)?;
    let path = dir.path("dataset.tsv");
    ds.save(&path)?;
    dir.record(path.clone());
    dir.record(crate::feature_model::PairedDataset::sidecar_path(&path));
    for (i, &shift) in g.ood.iter().enumerate() {
        let seed = crate::rng::derive_seed(g.seed, &[0x4F4F_4447, i as u64]);
        let set = generate_ood(&g.spec, g.ood_size, shift, seed)?;
        let p = dir.path(&format!("ood_{}.tsv", shift.name()));
        set.save(&p)?;
        dir.record(p.clone());
        dir.record(crate::feature_model::PairedDataset::sidecar_path(&p));
    }
    for d in g.spec.diagnostics() {
        out.detail(format!("spec: {d}"));
    }
    out.info(format!(
        "generated {} samples in {} groups (hash {})",
        ds.len(),
        ds.groups().len(),
        ds.content_hash()
    ));
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    input: String,
    records: usize,
    samples: usize,
    groups: usize,
    originals: usize,
    dim: usize,
    content_hash: String,
}

fn cmd_ingest(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let ing = &cfg.ingest;
    let input = ing.path.as_ref().expect("checked before execution");
    let records = parse_cad_table(input, &ing.schema)?;
    let ds = build_text_dataset(&records, &ing.featurizer, ing.schema.num_classes())?;
    let path = dir.path("dataset.tsv");
    ds.save(&path)?;
    dir.record(path.clone());
    dir.record(crate::feature_model::PairedDataset::sidecar_path(&path));
    let summary = IngestSummary {
        input: input.display().to_string(),
        records: records.len(),
        samples: ds.len(),
        groups: ds.groups().len(),
        originals: ds.groups().len(),
        dim: ds.layout().total(),
        content_hash: ds.content_hash(),
    };
    dir.write_json("ingest_summary.json", &summary)?;
    out.info(format!(
        "ingested {} records into {} groups, {} features",
        summary.records, summary.groups, summary.dim
    ));
    Ok(EXIT_OK)
}

fn cmd_train(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let mut files: Vec<(String, String)> = Vec::new();
    let report = run_experiment_with(&cfg.experiment, |run| {
        let seed = run.result.seed;
        files.push((format!("history_{seed}.json"), serde_json::to_string_pretty(&run.history)? + "\n"));
        files.push((format!("model_{seed}.json"), serde_json::to_string_pretty(&run.model)? + "\n"));
        out.detail(format!(
            "seed {seed}: id {:.4}, epochs {}",
            run.result.id_accuracy, run.result.stopping_epoch
        ));
        Ok(())
    })?;
    for (name, text) in &files {
        dir.write(name, text.as_bytes())?;
    }
    dir.write_json("report.json", &report)?;
    for f in &report.failures {
        eprintln!("seed {} failed: {}", f.seed, f.error);
    }
    if let Some(a) = report.aggregate.get("id_accuracy") {
        out.info(format!("id_accuracy {:.4} ± {:.4} over {} seeds", a.mean, a.std, a.n));
    }
    if report.per_seed.is_empty() {
        return Err(Error::Undefined("every seed failed".into()));
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let rep = sweep(&cfg.experiment, &cfg.sweep, cfg.threads)?;
    dir.write_json("sweep.json", &rep)?;
    dir.write("sweep.csv", rep.to_csv_string()?.as_bytes())?;
    let mut plot = Vec::new();
    rep.write_plot_data(&mut plot)?;
    dir.write("plot_data.tsv", &plot)?;
    let failed = rep.entries.iter().filter(|e| e.report.is_none()).count();
    out.info(format!("swept {} cells ({failed} failed)", rep.entries.len()));
    Ok(EXIT_OK)
}

fn cmd_verify_theorems(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let rep = run_theorems(&cfg.theorems)?;
    dir.write_json("theorems.json", &rep)?;
    let table = rep.table();
    dir.write("theorems.txt", table.as_bytes())?;
    out.info(table.trim_end());
    if rep.all_passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed theorems: {}", rep.failed().join(", "));
        Ok(EXIT_EXECUTION)
    }
}

fn cmd_gradcheck(cfg: &CliConfig, dir: &mut RunDir, out: &Printer) -> Result<i32> {
    let rep = gradcheck_suite(&cfg.gradcheck, cfg.seed.unwrap_or(0))?;
    dir.write_json("gradcheck.json", &rep)?;
    let table = rep.table();
    dir.write("gradcheck.txt", table.as_bytes())?;
    out.info(table.trim_end());
    if rep.all_passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check exceeded tolerance {:e}", rep.tolerance);
        Ok(EXIT_EXECUTION)
    }
}

enum StoredReport {
    Run(Box<RunReport>),
    Sweep(SweepReport),
    Theorems(TheoremReport),
    Gradcheck(GradcheckReport),
}

fn json_files(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            json_files(&p, acc)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            acc.push(p);
        }
    }
    Ok(())
}

fn load_report(path: &Path) -> Option<StoredReport> {
    let text = fs::read_to_string(path).ok()?;
    if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
        return Some(StoredReport::Run(Box::new(r)));
    }
    if let Ok(r) = serde_json::from_str::<SweepReport>(&text) {
        return Some(StoredReport::Sweep(r));
    }
    if let Ok(r) = serde_json::from_str::<TheoremReport>(&text) {
        return Some(StoredReport::Theorems(r));
    }
    serde_json::from_str::<GradcheckReport>(&text).ok().map(StoredReport::Gradcheck)
}

fn run_markdown(md: &mut String, r: &RunReport) {
    let _ = writeln!(md, "| metric | mean | std | n |\n|---|---|---|---|");
    for (k, a) in &r.aggregate {
        let _ = writeln!(md, "| {k} | {:.4} | {:.4} | {} |", a.mean, a.std, a.n);
    }
    if !r.failures.is_empty() {
        let _ = writeln!(md, "\nFailed seeds:");
        for f in &r.failures {
            let _ = writeln!(md, "- seed {}: {}", f.seed, f.error);
        }
    }
    if !r.comparisons.is_empty() {
        let _ = writeln!(md, "\n| metric | against | t | p | mean diff |\n|---|---|---|---|---|");
        for c in &r.comparisons {
            match &c.test {
                Some(t) => {
                    let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} | {:.4} |", c.metric, c.against, t.t, t.p, t.mean_diff);
                }
                None => {
                    let _ = writeln!(md, "| {} | {} | | | {} |", c.metric, c.against, c.note.as_deref().unwrap_or(""));
                }
            }
        }
    }
}

fn sweep_markdown(md: &mut String, r: &SweepReport) {
    let metrics: Vec<String> = r
        .entries
        .iter()
        .filter_map(|e| e.report.as_ref())
        .flat_map(|r| r.aggregate.keys().cloned())
        .filter(|k| k == "id_accuracy" || k.starts_with("ood_"))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let _ = write!(md, "| λ | τ | batch | n_pairs | k |");
    for m in &metrics {
        let _ = write!(md, " {m} |");
    }
    let _ = write!(md, "\n|---|---|---|---|---|");
    for _ in &metrics {
        let _ = write!(md, "---|");
    }
    md.push('\n');
    let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    for e in &r.entries {
        let c = &e.cell;
        let _ = write!(md, "| {} | {} | {} | {} | {} |", c.lambda, c.tau, c.batch_size, opt(c.n_pairs), opt(c.k));
        for m in &metrics {
            let cell = e
                .report
                .as_ref()
                .and_then(|r| r.aggregate.get(m))
                .map_or_else(|| e.error.clone().unwrap_or_default(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
            let _ = write!(md, " {cell} |");
        }
        md.push('\n');
    }
}

fn cmd_report(from: &Path, to: &Path, out: &Printer) -> std::result::Result<i32, Failure> {
    let mut paths = Vec::new();
    if from.is_dir() {
        json_files(from, &mut paths).map_err(Failure::Execution)?;
    }
    let reports: Vec<(PathBuf, StoredReport)> = paths
        .into_iter()
        .filter_map(|p| load_report(&p).map(|r| (p, r)))
        .collect();
    if reports.is_empty() {
        return Err(validation(Error::NotFound(format!("no reports found in {}", from.display()))));
    }
    let mut dir = RunDir::create(to).map_err(Failure::Execution)?;
    let mut md = String::from("# Report\n");
    let mut plots = BTreeMap::new();
    for (path, rep) in &reports {
        let rel = path.strip_prefix(from).unwrap_or(path).display().to_string();
        let _ = writeln!(md, "\n## {rel}\n");
        match rep {
            StoredReport::Run(r) => {
                if !r.name.is_empty() {
                    let _ = writeln!(md, "Experiment `{}`\n", r.name);
                }
                run_markdown(&mut md, r);
            }
            StoredReport::Sweep(r) => {
                sweep_markdown(&mut md, r);
                let mut buf = Vec::new();
                r.write_plot_data(&mut buf).map_err(Failure::Execution)?;
                let stem = rel.trim_end_matches(".json").replace(['/', '\\'], "_");
                plots.insert(format!("plot_{stem}.tsv"), buf);
            }
            StoredReport::Theorems(r) => {
                let _ = writeln!(md, "| theorem | status | measured | tolerance |\n|---|---|---|---|");
                for t in &r.results {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {:.3e} | {:.3e} |",
                        t.name,
                        if t.passed { "PASS" } else { "FAIL" },
                        t.measured,
                        t.tolerance
                    );
                }
            }
            StoredReport::Gradcheck(r) => {
                let _ = writeln!(md, "```\n{}```", r.table());
            }
        }
    }
    for (name, data) in &plots {
        dir.write(name, data).map_err(Failure::Execution)?;
    }
    dir.write("report.md", md.as_bytes()).map_err(Failure::Execution)?;
    dir.finish("report", EXIT_OK).map_err(Failure::Execution)?;
    out.info(format!("rendered {} reports", reports.len()));
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = CliConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(CliConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn seed_precedence_is_flag_env_file() {
        let file = CliConfig::from_toml("seed = 5").unwrap();
        assert_eq!(file.clone().resolve(None, None, None).unwrap().seed, Some(5));
        assert_eq!(file.clone().resolve(None, Some("9"), None).unwrap().seed, Some(9));
        let r = file.resolve(Some(11), Some("9"), None).unwrap();
        assert_eq!(r.seed, Some(11));
        assert_eq!(r.experiment.seeds, vec![11]);
        assert_eq!(r.theorems.seed, 11);
        assert!(CliConfig::default().resolve(None, Some("x"), None).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(CliConfig::from_toml("sed = 1").is_err());
    }

    #[test]
    fn resolved_echo_is_a_fixed_point() {
        let r = CliConfig::default().resolve(Some(4), None, Some(2)).unwrap();
        let again = CliConfig::from_toml(&r.to_toml().unwrap()).unwrap().resolve(None, None, None).unwrap();
        assert_eq!(again, r);
    }
}
