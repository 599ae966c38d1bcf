//! Config-driven training sweeps with resumable, hash-addressed artifacts.

mod analysis;

pub use analysis::{
    correlation_report, spearman, table_nonmonotone_rate, write_correlation_report, CorrelationReport, GroupKey,
    Table, TableRow,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{corrupt_labels, load_idx, subset, synthetic_blobs, whitened_regression, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{average_gauss_length, GaussOptions};
use crate::interp::{loss_curve, AlphaGrid, InterpOptions, DEFAULT_STEPS};
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::nn::{Activation, Checkpoint, InitScheme, LossKind, NetworkSpec};
use crate::optim::{train, OptimizerConfig, TrainOptions};

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "MLI_WORKERS";
pub const DEFAULT_MONOTONIC_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CLASSIFIER_THRESHOLD: f64 = 0.1;
pub const DEFAULT_AUTOENCODER_THRESHOLD: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Blobs {
        classes: usize,
        n: usize,
        d: usize,
        separation: f64,
        seed: u64,
        /// Size of an independently drawn test set.
        #[serde(default)]
        test_n: Option<usize>,
    },
    /// IDX files in `dir` with the usual MNIST file names (gzipped or not).
    Mnist { dir: PathBuf },
    WhitenedRegression { n: usize, d: usize, m: usize, rank: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Train on a seeded subset of this many rows.
    #[serde(default)]
    pub subset: Option<usize>,
    /// Fraction of training labels resampled at random.
    #[serde(default)]
    pub corrupt: Option<f64>,
    /// Seed for subsetting and label corruption.
    #[serde(default)]
    pub sample_seed: u64,
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::config(format!("{} not found in {}", stem, dir.display())))
}

impl DatasetConfig {
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (mut train, test) = match &self.source {
            DatasetSource::Blobs { classes, n, d, separation, seed, test_n } => {
                let train = synthetic_blobs(*classes, *n, *d, *separation, *seed)?;
                let test = match test_n {
                    Some(t) => Some(synthetic_blobs(*classes, *t, *d, *separation, seed.wrapping_add(0x7e57))?.with_split(Split::Test)),
                    None => None,
                };
                (train, test)
            }
            DatasetSource::Mnist { dir } => {
                let train = load_idx(find_idx(dir, "train-images-idx3-ubyte")?, find_idx(dir, "train-labels-idx1-ubyte")?)?;
                let test = match (find_idx(dir, "t10k-images-idx3-ubyte"), find_idx(dir, "t10k-labels-idx1-ubyte")) {
                    (Ok(i), Ok(l)) => Some(load_idx(i, l)?.with_split(Split::Test)),
                    _ => None,
                };
                (train, test)
            }
            DatasetSource::WhitenedRegression { n, d, m, rank, seed } => {
                (whitened_regression(*n, *d, *m, *rank, *seed)?.dataset, None)
            }
        };
        if let Some(n) = self.subset {
            train = subset(&train, n, self.sample_seed)?;
        }
        if let Some(p) = self.corrupt {
            let k = train.num_classes.ok_or_else(|| Error::config("label corruption needs class labels"))?;
            train = corrupt_labels(&train, p, k, self.sample_seed)?;
        }
        Ok((train, test))
    }

    pub fn default_loss(&self) -> LossKind {
        match self.source {
            DatasetSource::WhitenedRegression { .. } => LossKind::Mse,
            _ => LossKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Hidden-layer widths, one list per architecture.
    pub hidden: Vec<Vec<usize>>,
    #[serde(default = "default_activations")]
    pub activations: Vec<Activation>,
    #[serde(default = "default_batch_norm")]
    pub batch_norm: Vec<bool>,
    pub optimizers: Vec<OptimizerConfig>,
    /// When non-empty, every optimizer is run at each of these rates.
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default = "default_init")]
    pub init: InitScheme,
}

fn default_activations() -> Vec<Activation> {
    vec![Activation::Relu]
}
fn default_batch_norm() -> Vec<bool> {
    vec![false]
}
fn default_init() -> InitScheme {
    InitScheme::KaimingUniform
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default = "default_steps")]
    pub alpha_steps: usize,
    #[serde(default = "default_true")]
    pub bn_warmup: bool,
    /// Also compute the average logit Gauss length.
    #[serde(default)]
    pub gauss: bool,
    #[serde(default = "default_gauss_sample")]
    pub gauss_sample: usize,
    #[serde(default = "default_gauss_steps")]
    pub gauss_fine_steps: usize,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_true() -> bool {
    true
}
fn default_gauss_sample() -> usize {
    100
}
fn default_gauss_steps() -> usize {
    crate::geometry::DEFAULT_FINE_STEPS
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha_steps: DEFAULT_STEPS,
            bn_warmup: true,
            gauss: false,
            gauss_sample: default_gauss_sample(),
            gauss_fine_steps: default_gauss_steps(),
            save_checkpoints: true,
        }
    }
}

/// A TOML experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Runs must end below this training loss to enter tables.
    #[serde(default = "default_threshold")]
    pub loss_threshold: f64,
    #[serde(default = "default_tolerance")]
    pub monotonic_tolerance: f64,
    pub dataset: DatasetConfig,
    pub grid: GridConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_threshold() -> f64 {
    DEFAULT_CLASSIFIER_THRESHOLD
}
fn default_tolerance() -> f64 {
    DEFAULT_MONOTONIC_TOLERANCE
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.hidden.is_empty() || g.activations.is_empty() || g.batch_norm.is_empty() || g.optimizers.is_empty() || g.seeds.is_empty() {
            return Err(Error::config("every grid axis needs at least one value"));
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::config("loss threshold must be positive"));
        }
        if !(self.monotonic_tolerance >= 0.0) {
            return Err(Error::config("monotonic tolerance must be non-negative"));
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.analysis.alpha_steps < 2 {
            return Err(Error::config("need at least two interpolation points"));
        }
        for o in &g.optimizers {
            o.validate()?;
        }
        Ok(())
    }

    /// Every grid cell, in a fixed order.
    pub fn cells(&self, input_dim: usize, output_dim: usize) -> Vec<Cell> {
        let g = &self.grid;
        let loss = g.loss.unwrap_or_else(|| self.dataset.default_loss());
        let lrs: Vec<Option<f64>> = if g.learning_rates.is_empty() {
            vec![None]
        } else {
            g.learning_rates.iter().map(|&l| Some(l)).collect()
        };
        let mut out = Vec::new();
        for hidden in &g.hidden {
            for &act in &g.activations {
                for &bn in &g.batch_norm {
                    for opt in &g.optimizers {
                        for lr in &lrs {
                            for &seed in &g.seeds {
                                let mut sizes = vec![input_dim];
                                sizes.extend(hidden);
                                sizes.push(output_dim);
                                let spec = NetworkSpec::new(sizes, act, loss).with_batch_norm(bn).with_init(g.init);
                                let mut optimizer = opt.clone();
                                if let Some(l) = lr {
                                    optimizer.learning_rate = *l;
                                }
                                out.push(Cell {
                                    spec,
                                    optimizer,
                                    seed,
                                    training: self.training,
                                    dataset: self.dataset.clone(),
                                    analysis: self.analysis.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Everything that determines one run's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub spec: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
    pub analysis: AnalysisConfig,
}

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let text = serde_json::to_string(&v)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

impl Cell {
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config_hash: String,
    pub spec: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub dataset: String,
    pub final_train_loss: Option<f64>,
    pub final_train_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub diverged: bool,
    pub min_delta: Option<f64>,
    pub distance_abs: Option<f64>,
    pub distance_norm: Option<f64>,
    pub avg_gauss_length: Option<f64>,
    pub bn_used: bool,
    pub loss_threshold: f64,
    pub monotonic_tolerance: f64,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
}

impl SweepRecord {
    /// Converged below the threshold with a usable interpolation.
    pub fn included(&self, threshold: f64) -> bool {
        self.error.is_none()
            && !self.diverged
            && self.min_delta.is_some()
            && self.final_train_loss.is_some_and(|l| l < threshold)
    }

    pub fn is_nonmonotone(&self, tolerance: f64) -> bool {
        self.min_delta.is_some_and(|d| d > tolerance)
    }

    fn failed(cell: &Cell, hash: String, cfg: &ExperimentConfig, dataset: String, err: String) -> Self {
        SweepRecord {
            config_hash: hash,
            spec: cell.spec.clone(),
            optimizer: cell.optimizer.clone(),
            seed: cell.seed,
            dataset,
            final_train_loss: None,
            final_train_accuracy: None,
            final_test_loss: None,
            final_test_accuracy: None,
            diverged: false,
            min_delta: None,
            distance_abs: None,
            distance_norm: None,
            avg_gauss_length: None,
            bn_used: cell.spec.batch_norm,
            loss_threshold: cfg.loss_threshold,
            monotonic_tolerance: cfg.monotonic_tolerance,
            error: Some(err),
            wall_clock_secs: 0.0,
        }
    }
}

fn run_cell(cell: &Cell, hash: &str, cfg: &ExperimentConfig, train_set: &Dataset, test: Option<&Dataset>, dir: &Path) -> Result<SweepRecord> {
    let start = Instant::now();
    let opts = TrainOptions::new(cell.training.epochs, cell.training.batch_size, cell.seed);
    let rec = train(&cell.spec, train_set, &cell.optimizer, &opts)?;
    let mut out = SweepRecord::failed(cell, hash.to_string(), cfg, train_set.provenance.clone(), String::new());
    out.error = None;
    if cell.analysis.save_checkpoints {
        let ck = |params: &crate::nn::ParameterVector, bn, history| Checkpoint {
            spec: cell.spec.clone(),
            params: params.clone(),
            bn,
            rng_seed: cell.seed,
            history,
        };
        ck(rec.initial(), crate::nn::BatchNormState::new(&cell.spec), None).save(dir.join("init.json"))?;
        ck(rec.final_params(), rec.bn.clone(), Some(rec.history.clone())).save(dir.join("final.json"))?;
    }
    if let Some(d) = rec.diverged {
        out.diverged = true;
        out.final_train_loss = Some(d.loss);
        out.wall_clock_secs = start.elapsed().as_secs_f64();
        return Ok(out);
    }
    let interp = InterpOptions { bn_warmup: cell.analysis.bn_warmup, warmup_rows: None };
    let grid = AlphaGrid::new(cell.analysis.alpha_steps)?;
    let (theta0, theta_t) = (rec.initial(), rec.final_params());
    let report = loss_curve(&cell.spec, theta0, theta_t, &rec.bn, train_set, test, &grid, &interp)?
        .with_refs("init.json", "final.json");
    report.write_csv(dir.join("interpolation.csv"))?;
    let last = grid.len() - 1;
    out.final_train_loss = Some(report.train_loss[last]);
    out.final_train_accuracy = report.train_accuracy.as_ref().map(|a| a[last]);
    out.final_test_loss = report.test_loss.as_ref().map(|a| a[last]);
    out.final_test_accuracy = report.test_accuracy.as_ref().map(|a| a[last]);
    out.min_delta = report.min_delta;
    out.distance_abs = Some(report.distance_abs);
    out.distance_norm = report.distance_norm;
    if cell.analysis.gauss {
        let g = GaussOptions {
            sample_size: cell.analysis.gauss_sample.min(train_set.len()),
            fine_steps: cell.analysis.gauss_fine_steps,
            seed: cell.seed,
            interp,
            ..GaussOptions::default()
        };
        out.avg_gauss_length = average_gauss_length(&cell.spec, theta0, theta_t, &rec.bn, train_set, &g).ok().map(|a| a.mean);
    }
    out.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub cells: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// In grid order.
    pub records: Vec<SweepRecord>,
    /// Cells trained in this invocation (the rest were already on disk).
    pub executed: usize,
}

fn load_record(path: &Path, hash: &str) -> Option<SweepRecord> {
    let text = fs::read_to_string(path).ok()?;
    let r: SweepRecord = serde_json::from_str(&text).ok()?;
    (r.config_hash == hash).then_some(r)
}

/// Worker count from the environment, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs every missing cell, then rewrites `records.csv` and `manifest.json`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let (train_set, test) = cfg.dataset.load()?;
    let out_dim = train_set.num_classes.unwrap_or_else(|| match &train_set.targets {
        crate::nn::Targets::Dense(t) => t.ncols(),
        crate::nn::Targets::Labels(_) => 1,
    });
    let cells = cfg.cells(train_set.dim(), out_dim);
    let root = &cfg.output_dir;
    fs::create_dir_all(root.join("cells"))?;
    let work = || -> Result<Vec<(SweepRecord, bool)>> {
        cells
            .par_iter()
            .map(|cell| {
                let hash = cell.hash()?;
                let dir = root.join("cells").join(&hash);
                let record_path = dir.join("record.json");
                if let Some(r) = load_record(&record_path, &hash) {
                    return Ok((r, false));
                }
                fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("cell.json"), serde_json::to_string_pretty(cell)?.as_bytes())?;
                let r = run_cell(cell, &hash, cfg, &train_set, test.as_ref(), &dir).unwrap_or_else(|e| {
                    SweepRecord::failed(cell, hash.clone(), cfg, train_set.provenance.clone(), e.to_string())
                });
                write_atomic(&record_path, serde_json::to_string_pretty(&r)?.as_bytes())?;
                Ok((r, true))
            })
            .collect()
    };
    let results = match workers_from_env() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let executed = results.iter().filter(|r| r.1).count();
    let records: Vec<SweepRecord> = results.into_iter().map(|r| r.0).collect();
    write_atomic(&root.join("records.csv"), &records_csv(&records)?)?;
    write_atomic(&root.join("manifest.json"), serde_json::to_string_pretty(&manifest(cfg, &records)?)?.as_bytes())?;
    Ok(SweepOutcome { records, executed })
}

fn manifest(cfg: &ExperimentConfig, records: &[SweepRecord]) -> Result<Manifest> {
    let mut m = Manifest { name: cfg.name.clone(), cells: BTreeMap::new() };
    for r in records {
        let rel = PathBuf::from("cells").join(&r.config_hash);
        let mut artifacts = Vec::new();
        for name in ["cell.json", "init.json", "final.json", "interpolation.csv"] {
            if cfg.output_dir.join(&rel).join(name).exists() {
                artifacts.push(rel.join(name));
            }
        }
        m.cells.insert(r.config_hash.clone(), ManifestEntry { record: rel.join("record.json"), artifacts });
    }
    Ok(m)
}

/// Loads every `record.json` under `<dir>/cells`, sorted by hash.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::new();
    let cells = dir.as_ref().join("cells");
    for entry in fs::read_dir(&cells)? {
        let p = entry?.path().join("record.json");
        if p.exists() {
            out.push(serde_json::from_str::<SweepRecord>(&fs::read_to_string(&p)?)?);
        }
    }
    out.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
    Ok(out)
}

pub const RECORD_COLUMNS: [&str; 22] = [
    "config_hash",
    "optimizer",
    "learning_rate",
    "seed",
    "hidden",
    "activation",
    "batch_norm",
    "dataset",
    "final_train_loss",
    "final_train_acc",
    "final_test_loss",
    "final_test_acc",
    "diverged",
    "min_delta",
    "distance_abs",
    "distance_norm",
    "avg_gauss_length",
    "bn_used",
    "loss_threshold",
    "included",
    "error",
    "wall_clock_secs",
];

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn records_csv(records: &[SweepRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &RECORD_COLUMNS,
        records.iter().map(|r| {
            let sizes = &r.spec.layer_sizes;
            let hidden: Vec<String> = sizes[1..sizes.len() - 1].iter().map(|w| w.to_string()).collect();
            vec![
                r.config_hash.clone(),
                r.optimizer.label(),
                fmt_f64(r.optimizer.learning_rate),
                r.seed.to_string(),
                hidden.join("x"),
                format!("{:?}", r.spec.activation).to_lowercase(),
                (r.spec.batch_norm as u8).to_string(),
                r.dataset.clone(),
                opt_f64(r.final_train_loss),
                opt_f64(r.final_train_accuracy),
                opt_f64(r.final_test_loss),
                opt_f64(r.final_test_accuracy),
                (r.diverged as u8).to_string(),
                opt_f64(r.min_delta),
                opt_f64(r.distance_abs),
                opt_f64(r.distance_norm),
                opt_f64(r.avg_gauss_length),
                (r.bn_used as u8).to_string(),
                fmt_f64(r.loss_threshold),
                (r.included(r.loss_threshold) as u8).to_string(),
                r.error.clone().unwrap_or_default(),
                fmt_f64(r.wall_clock_secs),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
name = "tiny"
output_dir = "unused"
loss_threshold = 0.5

[dataset]
kind = "blobs"
classes = 3
n = 60
d = 4
separation = 6.0
seed = 1

[grid]
hidden = [[8]]
optimizers = [{ kind = { type = "sgd" }, learning_rate = 0.05 }]
learning_rates = [0.01, 0.05]
seeds = [0, 1]

[training]
epochs = 3
batch_size = 16
"#;

    #[test]
    fn parses_and_expands_the_grid() {
        let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
        let cells = cfg.cells(4, 3);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].spec.layer_sizes, vec![4, 8, 3]);
        assert_eq!(cells[0].spec.loss, LossKind::SoftmaxCrossEntropy);
        assert_eq!(cells[3].optimizer.learning_rate, 0.05);
        let hashes: std::collections::HashSet<String> = cells.iter().map(|c| c.hash().unwrap()).collect();
        assert_eq!(hashes.len(), 4);
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = ExperimentConfig::from_toml(CONFIG).unwrap();
        let reordered = CONFIG.replace(
            "classes = 3\nn = 60\nd = 4\nseparation = 6.0\nseed = 1",
            "seed = 1\nseparation = 6.0\nd = 4\nn = 60\nclasses = 3",
        );
        assert_ne!(reordered, CONFIG);
        let b = ExperimentConfig::from_toml(&reordered).unwrap();
        assert_eq!(a.cells(4, 3)[1].hash().unwrap(), b.cells(4, 3)[1].hash().unwrap());
    }

    #[test]
    fn rejects_empty_axes_and_bad_thresholds() {
        assert!(ExperimentConfig::from_toml(&CONFIG.replace("seeds = [0, 1]", "seeds = []")).is_err());
        assert!(ExperimentConfig::from_toml(&CONFIG.replace("loss_threshold = 0.5", "loss_threshold = 0.0")).is_err());
        assert!(ExperimentConfig::from_toml("name = 1").is_err());
    }
}
