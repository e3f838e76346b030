//! Accuracy evaluation, multi-seed experiments, sweeps and weight
//! diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{block_mass, r1_reference_direction};
use crate::error::{Error, Result};
use crate::feature_model::{generate_ood, generate_paircad, BlockLayout, EditMode, FeatureModelSpec, OodShift, PairedDataset};
use crate::linalg::{cosine, Matrix};
use crate::model::{init_identity_model, init_model, Init, LinearModel};
use crate::rng;
use crate::stats::{paired_ttest, MeanStd, TTest};
use crate::text_ingest::{build_text_dataset, parse_cad_table, CadSchema, HashFeaturizer};
use crate::trainer::{accuracy, train, TrainConfig, TrainHistory};

const STREAM_DATA: u64 = 0x4441_5441;
const STREAM_SPLIT: u64 = 0x5350_4C54;
const STREAM_MODEL: u64 = 0x4D4F_444C;
const STREAM_TRAIN: u64 = 0x5452_4E00;
const STREAM_OOD: u64 = 0x4F4F_4400;

/// Fraction of samples whose argmax logit equals the label. Ties go to the
/// lowest class id.
pub fn evaluate(model: &LinearModel, dataset: &PairedDataset) -> Result<f64> {
    accuracy(model, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "FeatureModelSpec::canonical")]
        spec: FeatureModelSpec,
        #[serde(default = "default_n_pairs")]
        n_pairs: usize,
        #[serde(default = "one")]
        k: usize,
        #[serde(default = "exact_opposite")]
        edit_mode: EditMode,
    },
    Text {
        path: PathBuf,
        schema: CadSchema,
        featurizer: HashFeaturizer,
        /// Held-out tables evaluated as OOD sets, keyed by file stem.
        #[serde(default)]
        ood_paths: Vec<PathBuf>,
    },
}

fn default_n_pairs() -> usize {
    500
}
fn one() -> usize {
    1
}
fn exact_opposite() -> EditMode {
    EditMode::ExactOpposite
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOn {
    /// Originals with their counterfactuals.
    Cad,
    /// Originals only, for training and ID evaluation.
    OriginalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width `d`; ignored with an identity encoder.
    pub embed_dim: usize,
    pub init: Init,
    pub identity_encoder: bool,
    pub head_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            init: Init::ScaledNormal { std: 0.1 },
            identity_encoder: false,
            head_bias: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_data")]
    pub data: DataSource,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_train_on")]
    pub train_on: TrainOn,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_ood")]
    pub ood: Vec<OodShift>,
    #[serde(default = "default_ood_size")]
    pub ood_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_data() -> DataSource {
    DataSource::Synthetic {
        spec: FeatureModelSpec::canonical(),
        n_pairs: default_n_pairs(),
        k: 1,
        edit_mode: EditMode::ExactOpposite,
    }
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn default_train_on() -> TrainOn {
    TrainOn::Cad
}
fn default_ood() -> Vec<OodShift> {
    OodShift::ALL.to_vec()
}
fn default_ood_size() -> usize {
    2000
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// The canonical synthetic benchmark with 500 pairs and default training.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::synthetic(FeatureModelSpec::canonical(), 500, TrainConfig::default())
    }
}

impl ExperimentConfig {
    /// Canonical synthetic benchmark with the given training mode.
    pub fn synthetic(spec: FeatureModelSpec, n_pairs: usize, train: TrainConfig) -> Self {
        Self {
            name: String::new(),
            data: DataSource::Synthetic {
                spec,
                n_pairs,
                k: 1,
                edit_mode: EditMode::ExactOpposite,
            },
            split: default_split(),
            train_on: TrainOn::Cad,
            model: ModelConfig::default(),
            train,
            ood: default_ood(),
            ood_size: default_ood_size(),
            seeds: default_seeds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.split.iter().any(|r| !(*r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            problems.push(format!("split ratios must be positive and sum to 1, got {:?}", self.split));
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".into());
        }
        if !self.model.identity_encoder && self.model.embed_dim == 0 {
            problems.push("embed_dim must be positive".into());
        }
        match &self.data {
            DataSource::Synthetic { spec, n_pairs, k, .. } => {
                problems.extend(spec.diagnostics());
                if *n_pairs == 0 || *k == 0 {
                    problems.push("n_pairs and k must be positive".into());
                }
                if !self.ood.is_empty() && self.ood_size == 0 {
                    problems.push("ood_size must be positive".into());
                }
            }
            DataSource::Text { featurizer, .. } => {
                if let Err(e) = featurizer.validate() {
                    problems.push(e.to_string());
                }
            }
        }
        if let Err(Error::InvalidSpec(p)) = self.train.validate() {
            problems.extend(p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    /// Effective feature-space direction: `W(U_1 − U_0)` for two classes,
    /// otherwise the row norms of `W·U`.
    pub discriminant: Vec<f64>,
    pub block_masses: [f64; 3],
    /// `‖w_r2‖ / ‖w_r1‖`, 0 when `‖w_r1‖ = 0`.
    pub r2_over_r1: f64,
    pub s_over_r1: f64,
    /// Cosine between the r1 block and a reference direction, if given.
    pub r1_alignment: Option<f64>,
}

pub fn weight_diagnostics(model: &LinearModel, layout: BlockLayout, reference_r1: Option<&[f64]>) -> Result<WeightDiagnostics> {
    if layout.total() != model.input_dim() {
        return Err(Error::Shape(format!(
            "layout has {} features, model {}",
            layout.total(),
            model.input_dim()
        )));
    }
    let w = if model.identity_encoder {
        Matrix::identity(model.input_dim())
    } else {
        model.encoder.clone()
    };
    let effective = w.matmul(&model.head)?;
    let discriminant: Vec<f64> = if model.num_classes() == 2 {
        (0..effective.rows()).map(|r| effective[(r, 1)] - effective[(r, 0)]).collect()
    } else {
        (0..effective.rows())
            .map(|r| effective.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let block_masses = block_mass(&discriminant, layout)?;
    let ratio = |a: f64| if block_masses[0] > 0.0 { a / block_masses[0] } else { 0.0 };
    let r1_alignment = match reference_r1 {
        Some(r) if r.len() == layout.dim_r1 => Some(cosine(&discriminant[layout.r1()], r)),
        Some(_) => return Err(Error::Shape("reference direction does not match r1".into())),
        None => None,
    };
    Ok(WeightDiagnostics {
        r2_over_r1: ratio(block_masses[1]),
        s_over_r1: ratio(block_masses[2]),
        discriminant,
        block_masses,
        r1_alignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub id_accuracy: f64,
    pub ood_accuracy: BTreeMap<String, f64>,
    pub block_masses: [f64; 3],
    pub r2_over_r1: f64,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub against: String,
    pub test: Option<TTest>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    /// Mean and std per metric over successful seeds.
    pub aggregate: BTreeMap<String, MeanStd>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl SeedResult {
    /// Named scalar metrics, in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = vec![("id_accuracy".to_string(), self.id_accuracy)];
        m.extend(self.ood_accuracy.iter().map(|(k, v)| (format!("ood_{k}"), *v)));
        m.extend([
            ("mass_r1".to_string(), self.block_masses[0]),
            ("mass_r2".to_string(), self.block_masses[1]),
            ("mass_s".to_string(), self.block_masses[2]),
            ("r2_over_r1".to_string(), self.r2_over_r1),
            ("stopping_epoch".to_string(), self.stopping_epoch as f64),
            ("valid_loss".to_string(), self.valid_loss),
            ("valid_accuracy".to_string(), self.valid_accuracy),
        ]);
        m
    }
}

impl RunReport {
    /// Per-seed values of `metric` in seed order.
    pub fn metric(&self, metric: &str) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter_map(|s| s.metrics().into_iter().find(|(k, _)| k == metric).map(|(_, v)| v))
            .collect()
    }

    fn recompute_aggregate(per_seed: &[SeedResult]) -> BTreeMap<String, MeanStd> {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in per_seed {
            for (k, v) in s.metrics() {
                columns.entry(k).or_default().push(v);
            }
        }
        columns.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect()
    }

    /// Paired t-test of `self − other` on `metric` over shared seeds, stored
    /// in `comparisons`.
    pub fn compare(&mut self, other: &RunReport, metric: &str) -> Comparison {
        let mine: BTreeMap<u64, f64> = self
            .per_seed
            .iter()
            .zip(self.metric(metric))
            .map(|(s, v)| (s.seed, v))
            .collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (s, v) in other.per_seed.iter().zip(other.metric(metric)) {
            if let Some(x) = mine.get(&s.seed) {
                a.push(*x);
                b.push(v);
            }
        }
        let (test, note) = match paired_ttest(&a, &b) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let c = Comparison {
            metric: metric.to_string(),
            against: other.name.clone(),
            test,
            note,
        };
        self.comparisons.push(c.clone());
        c
    }
}

fn load_text(path: &Path, schema: &CadSchema, featurizer: &HashFeaturizer) -> Result<PairedDataset> {
    let records = parse_cad_table(path, schema)?;
    build_text_dataset(&records, featurizer, schema.num_classes().max(2))
}

fn build_model(cfg: &ExperimentConfig, layout: BlockLayout, k: usize, seed: u64) -> Result<LinearModel> {
    let model_seed = rng::derive_seed(seed, &[STREAM_MODEL]);
    let model = if cfg.model.identity_encoder {
        init_identity_model(layout, k, cfg.model.init, model_seed)?
    } else {
        init_model(layout, cfg.model.embed_dim, k, cfg.model.init, model_seed)?
    };
    Ok(if cfg.model.head_bias { model.with_head_bias() } else { model })
}

/// One seed's outcome together with the selected model and its history.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub result: SeedResult,
    pub model: LinearModel,
    pub history: TrainHistory,
}

/// Generates and splits data, trains and evaluates for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (full, ood_sets, reference) = match &cfg.data {
        DataSource::Synthetic {
            spec,
            n_pairs,
            k,
            edit_mode,
        } => {
            let full = generate_paircad(spec, *n_pairs, *k, *edit_mode, rng::derive_seed(seed, &[STREAM_DATA]))?;
            let ood = cfg
                .ood
                .iter()
                .enumerate()
                .map(|(i, &shift)| {
                    generate_ood(spec, cfg.ood_size, shift, rng::derive_seed(seed, &[STREAM_OOD, i as u64]))
                        .map(|d| (shift.name().to_string(), d))
                })
                .collect::<Result<Vec<_>>>()?;
            let reference = if spec.classes == 2 { Some(r1_reference_direction(spec)?) } else { None };
            (full, ood, reference)
        }
        DataSource::Text {
            path,
            schema,
            featurizer,
            ood_paths,
        } => {
            let full = load_text(path, schema, featurizer)?;
            let ood = ood_paths
                .iter()
                .map(|p| {
                    let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    load_text(p, schema, featurizer).map(|d| (name, d.originals_only()))
                })
                .collect::<Result<Vec<_>>>()?;
            (full, ood, None)
        }
    };
    let [train_set, valid_set, test_set] = full.split_groups(cfg.split, rng::derive_seed(seed, &[STREAM_SPLIT]))?;
    let (train_set, valid_set, test_set) = match cfg.train_on {
        TrainOn::Cad => (train_set, valid_set, test_set),
        TrainOn::OriginalOnly => (
            train_set.originals_only(),
            valid_set.originals_only(),
            test_set.originals_only(),
        ),
    };
    let model = build_model(cfg, full.layout(), full.num_classes(), seed)?;
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(seed, &[STREAM_TRAIN]),
        ..cfg.train
    };
    let (best, history) = train(&model, &train_set, &valid_set, &train_cfg)?;
    let mut ood_accuracy = BTreeMap::new();
    for (name, set) in &ood_sets {
        ood_accuracy.insert(name.clone(), evaluate(&best, set)?);
    }
    let diag = weight_diagnostics(&best, full.layout(), reference.as_deref())?;
    let best_idx = history.best_epoch.max(1) - 1;
    let result = SeedResult {
        seed,
        id_accuracy: evaluate(&best, &test_set)?,
        ood_accuracy,
        block_masses: diag.block_masses,
        r2_over_r1: diag.r2_over_r1,
        stopping_epoch: history.stopping_epoch,
        best_epoch: history.best_epoch,
        valid_loss: history.valid_loss[best_idx],
        valid_accuracy: history.valid_accuracy[best_idx],
    };
    Ok(SeedRun {
        result,
        model: best,
        history,
    })
}

/// Runs every seed; failing seeds are recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(cfg, |_| Ok(()))
}

/// [`run_experiment`], handing each successful seed's run to `on_seed`.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_seed: F) -> Result<RunReport>
where
    F: FnMut(&SeedRun) -> Result<()>,
{
    cfg.validate()?;
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed) {
            Ok(r) => {
                on_seed(&r)?;
                per_seed.push(r.result);
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(RunReport {
        name: cfg.name.clone(),
        config: cfg.clone(),
        aggregate: RunReport::recompute_aggregate(&per_seed),
        per_seed,
        failures,
        comparisons: Vec::new(),
    })
}

/// Recomputes the aggregates from the per-seed rows.
pub fn recompute_aggregate(report: &RunReport) -> BTreeMap<String, MeanStd> {
    RunReport::recompute_aggregate(&report.per_seed)
}

/// Values swept by [`sweep`]; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub n_pairs: Vec<usize>,
    pub k: Vec<usize>,
}

/// `{0.0, 0.1, …, 0.9}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// `{0.1, 0.2, …, 1.0}`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_batch_size_grid() -> Vec<usize> {
    vec![4, 8, 16, 64, 256]
}

pub fn few_shot_grid() -> Vec<usize> {
    vec![16, 32, 64, 256, 512]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub n_pairs: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub cell: SweepCell,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepGrid {
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<SweepCell> {
        let (base_n, base_k) = match &base.data {
            DataSource::Synthetic { n_pairs, k, .. } => (Some(*n_pairs), Some(*k)),
            DataSource::Text { .. } => (None, None),
        };
        let axis = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
        let axis_u = |v: &Vec<usize>, b: Option<usize>| if v.is_empty() { vec![b] } else { v.iter().map(|&x| Some(x)).collect() };
        let mut cells = Vec::new();
        for &lambda in &axis(&self.lambda, base.train.loss.lambda) {
            for &tau in &axis(&self.tau, base.train.loss.tau) {
                for &batch_size in &axis_u(&self.batch_size, Some(base.train.batch_size)) {
                    for &n_pairs in &axis_u(&self.n_pairs, base_n) {
                        for &k in &axis_u(&self.k, base_k) {
                            cells.push(SweepCell {
                                index: cells.len(),
                                lambda,
                                tau,
                                batch_size: batch_size.expect("batch size"),
                                n_pairs,
                                k,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

fn cell_config(base: &ExperimentConfig, cell: &SweepCell) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.name = format!(
        "{}cell{}_lambda{}_tau{}_bs{}",
        if base.name.is_empty() { String::new() } else { format!("{}/", base.name) },
        cell.index,
        cell.lambda,
        cell.tau,
        cell.batch_size
    );
    cfg.train.loss.lambda = cell.lambda;
    cfg.train.loss.tau = cell.tau;
    cfg.train.batch_size = cell.batch_size;
    match &mut cfg.data {
        DataSource::Synthetic { n_pairs, k, .. } => {
            if let Some(n) = cell.n_pairs {
                *n_pairs = n;
            }
            if let Some(kk) = cell.k {
                *k = kk;
            }
        }
        DataSource::Text { .. } => {
            if cell.n_pairs.is_some() || cell.k.is_some() {
                return Err(Error::arg("grid", "n_pairs and k cannot be swept on text data"));
            }
        }
    }
    Ok(cfg)
}

/// Runs the cross product of `grid` over `base`. With `threads > 1` cells
/// run on a dedicated pool; each cell's RNG depends only on its config, so
/// results do not depend on the thread count.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, threads: usize) -> Result<SweepReport> {
    base.validate()?;
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(Error::arg("grid", "empty sweep grid"));
    }
    let run = |cell: &SweepCell| -> SweepEntry {
        match cell_config(base, cell).and_then(|c| run_experiment(&c)) {
            Ok(report) => SweepEntry {
                cell: *cell,
                report: Some(report),
                error: None,
            },
            Err(e) => SweepEntry {
                cell: *cell,
                report: None,
                error: Some(e.to_string()),
            },
        }
    };
    let entries = if threads <= 1 {
        cells.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::arg("threads", e.to_string()))?
            .install(|| cells.par_iter().map(run).collect())
    };
    Ok(SweepReport { entries })
}

impl SweepReport {
    fn metric_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter_map(|e| e.report.as_ref())
            .flat_map(|r| r.per_seed.first())
            .next()
            .map(|s| s.metrics().into_iter().map(|(k, _)| k).collect())
            .unwrap_or_default()
    }

    /// One row per (cell, seed), then `mean` and `std` rows per cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let metrics = self.metric_names();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["cell", "lambda", "tau", "batch_size", "n_pairs", "k", "seed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(metrics.iter().cloned());
        header.push("error".into());
        out.write_record(&header)?;
        let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
        for e in &self.entries {
            let c = &e.cell;
            let prefix = vec![
                c.index.to_string(),
                c.lambda.to_string(),
                c.tau.to_string(),
                c.batch_size.to_string(),
                opt(c.n_pairs),
                opt(c.k),
            ];
            let Some(r) = &e.report else {
                let mut row = prefix.clone();
                row.push(String::new());
                row.extend(metrics.iter().map(|_| String::new()));
                row.push(e.error.clone().unwrap_or_default());
                out.write_record(&row)?;
                continue;
            };
            for s in &r.per_seed {
                let values: BTreeMap<String, f64> = s.metrics().into_iter().collect();
                let mut row = prefix.clone();
                row.push(s.seed.to_string());
                row.extend(metrics.iter().map(|m| values.get(m).map_or_else(String::new, |v| v.to_string())));
                row.push(String::new());
                out.write_record(&row)?;
            }
            for f in &r.failures {
                let mut row = prefix.clone();
                row.push(f.seed.to_string());
                row.extend(metrics.iter().map(|_| String::new()));
                row.push(f.error.clone());
                out.write_record(&row)?;
            }
            for (label, pick) in [("mean", 0), ("std", 1)] {
                let mut row = prefix.clone();
                row.push(label.into());
                row.extend(metrics.iter().map(|m| {
                    r.aggregate
                        .get(m)
                        .map_or_else(String::new, |a| if pick == 0 { a.mean } else { a.std }.to_string())
                }));
                row.push(String::new());
                out.write_record(&row)?;
            }
        }
        out.flush().map_err(|e| Error::io("writing sweep csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    /// Long-format plot data: `lambda tau batch_size n_pairs k metric mean std`,
    /// whitespace separated.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("writing plot data", e);
        writeln!(w, "# lambda tau batch_size n_pairs k metric mean std").map_err(io)?;
        for e in &self.entries {
            let Some(r) = &e.report else { continue };
            let c = &e.cell;
            for (metric, a) in &r.aggregate {
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {}",
                    c.lambda,
                    c.tau,
                    c.batch_size,
                    c.n_pairs.map_or(-1, |v| v as i64),
                    c.k.map_or(-1, |v| v as i64),
                    metric,
                    a.mean,
                    a.std
                )
                .map_err(io)?;
            }
        }
        Ok(())
    }
}
