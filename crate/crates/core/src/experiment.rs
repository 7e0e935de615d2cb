//! Experiment grid: configuration, execution and CSV/JSON emission.
//!
//! A run trains the original model and builds the retrain + reprune oracle
//! once per `(seed, sparsity)` cell, then un-prunes the original once per
//! configured unlearning method. Every model is compared against the oracle.
//! Each cell also emits an `original` row (original vs oracle) and an `oracle`
//! row (oracle vs itself) as references.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs, split_delete_mode, Dataset, DeletionMode, DeletionSplit};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::metrics::{iom, iou, kl_masked_weights, uom, KlEstimator, MaskPair};
use crate::model::{mlp_specs, LayerSpec, MaskedModel};
use crate::oracle::{retrain_reprune, train_and_prune, OracleCache, OracleConfig, OracleInit, PruneMode};
use crate::prune::neuron_mask;
use crate::rng::{streams, SeededRng};
use crate::train::{accuracy, evaluate, TrainConfig};
use crate::unlearn::{UnlearnConfig, UnlearnMethod};
use crate::unprune::{unprune, unprune_structured, InitStrategy, UnpruneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs regenerated from each run seed; the test set uses its own stream.
    Blobs { n_per_class: usize, classes: usize, dim: usize, spread: f64, test_n_per_class: usize },
    /// IDX image/label files, identical for every seed.
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths including input and output, e.g. `[2, 64, 32, 2]`.
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnpruneSpec {
    pub grow_per_iter: f64,
    pub iterations: usize,
    #[serde(default)]
    pub init_strategy: InitStrategy,
    #[serde(default = "default_random_std")]
    pub random_init_std: f64,
}

fn default_random_std() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default)]
    pub init: OracleInit,
    /// Reuse oracle snapshots under `<output_dir>/oracles`.
    #[serde(default = "yes")]
    pub cache: bool,
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub sparsities: Vec<f64>,
    pub delete_ratio: f64,
    #[serde(default)]
    pub deletion: DeletionMode,
    #[serde(default)]
    pub prune_mode: PruneMode,
    #[serde(default)]
    pub kl_estimator: KlEstimator,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// When false, `wall_time_s` is left empty so reruns are byte-identical.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub unprune: UnpruneSpec,
    #[serde(default = "default_oracle")]
    pub oracle: OracleSpec,
    pub unlearn: Vec<UnlearnConfig>,
}

fn default_oracle() -> OracleSpec {
    OracleSpec { init: OracleInit::SameSeed, cache: true }
}

/// Data for one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub split: DeletionSplit,
}

impl ExperimentConfig {
    /// The desk-scale blobs task used by the acceptance suite.
    pub fn reference() -> Self {
        let unlearn = |method, steps, rate, batch_size| UnlearnConfig {
            method,
            steps,
            rate,
            fisher_noise_scale: 1e-4,
            batch_size,
            fisher_source: Default::default(),
        };
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            sparsities: vec![0.6],
            delete_ratio: 0.1,
            deletion: DeletionMode::Uniform,
            prune_mode: PruneMode::Unstructured,
            kl_estimator: KlEstimator::Gaussian,
            output_dir: default_output_dir(),
            record_wall_time: true,
            dataset: DatasetSpec::Blobs { n_per_class: 100, classes: 2, dim: 2, spread: 1.2, test_n_per_class: 100 },
            model: ModelSpec { widths: vec![2, 64, 32, 2] },
            train: TrainConfig { epochs: 200, lr: 0.1, batch_size: 16 },
            unprune: UnpruneSpec {
                grow_per_iter: 0.05,
                iterations: 3,
                init_strategy: InitStrategy::Original,
                random_init_std: 0.01,
            },
            oracle: default_oracle(),
            unlearn: vec![
                unlearn(UnlearnMethod::GradientAscent, 5, 0.01, 64),
                unlearn(UnlearnMethod::Finetune, 50, 0.1, 16),
                unlearn(UnlearnMethod::FisherForgetting, 1, 0.0, 64),
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        mlp_specs(&self.model.widths)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return bad(format!("sparsities must be nonempty and in [0,1), got {:?}", self.sparsities));
        }
        if !(self.delete_ratio > 0.0 && self.delete_ratio < 1.0) {
            return bad(format!("delete_ratio must be in (0,1), got {}", self.delete_ratio));
        }
        let w = &self.model.widths;
        if w.len() < 2 || w.contains(&0) {
            return bad(format!("model.widths needs at least two positive widths, got {w:?}"));
        }
        if self.prune_mode == PruneMode::Structured && w.len() < 3 {
            return bad("structured pruning needs a hidden layer".into());
        }
        if let DatasetSpec::Blobs { n_per_class, classes, dim, spread, test_n_per_class } = self.dataset {
            if n_per_class == 0 || test_n_per_class == 0 || spread.is_nan() || spread <= 0.0 {
                return bad("blob counts and spread must be positive".into());
            }
            if w[0] != dim || w[w.len() - 1] != classes {
                return bad(format!("model.widths {w:?} do not match dim {dim} and {classes} classes"));
            }
        }
        if self.unlearn.is_empty() {
            return bad("at least one [[unlearn]] method is required".into());
        }
        for (i, u) in self.unlearn.iter().enumerate() {
            if self.unlearn[..i].iter().any(|v| v.method == u.method) {
                return bad(format!("unlearn method '{}' listed twice", u.method));
            }
            u.validate()?;
        }
        for &s in &self.sparsities {
            let units = match self.prune_mode {
                PruneMode::Unstructured => self.specs().iter().map(|l| l.in_dim * l.out_dim).sum(),
                PruneMode::Structured => w[1..w.len() - 1].iter().sum(),
            };
            self.unprune_config(s, self.unlearn[0].clone()).validate(units)?;
        }
        Ok(())
    }

    pub fn unprune_config(&self, sparsity: f64, unlearn: UnlearnConfig) -> UnpruneConfig {
        UnpruneConfig {
            original_sparsity: sparsity,
            grow_per_iter: self.unprune.grow_per_iter,
            iterations: self.unprune.iterations,
            init_strategy: self.unprune.init_strategy,
            random_init_std: self.unprune.random_init_std,
            unlearn,
        }
    }

    pub fn oracle_config(&self, sparsity: f64) -> OracleConfig {
        OracleConfig {
            specs: self.specs(),
            train: self.train.clone(),
            sparsity,
            mode: self.prune_mode,
            init: self.oracle.init,
        }
    }

    pub fn unlearn_for(&self, method: UnlearnMethod) -> Option<&UnlearnConfig> {
        self.unlearn.iter().find(|u| u.method == method)
    }

    /// Train/test data and deletion split for `seed`.
    pub fn seed_data(&self, seed: u64) -> Result<SeedData> {
        let root = SeededRng::new(seed);
        let (train, test) = match &self.dataset {
            DatasetSpec::Blobs { n_per_class, classes, dim, spread, test_n_per_class } => (
                gen_blobs(&mut root.fork(streams::DATA), *n_per_class, *classes, *dim, *spread)?,
                gen_blobs(&mut root.fork(streams::TEST_DATA), *test_n_per_class, *classes, *dim, *spread)?,
            ),
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?)
            }
        };
        let split = split_delete_mode(&train, self.delete_ratio, self.deletion, &mut root.fork(streams::SPLIT))?;
        Ok(SeedData { train, test, split })
    }

    /// Original model: trained on all of the training data, then pruned.
    pub fn original(&self, data: &SeedData, sparsity: f64, seed: u64) -> Result<MaskedModel<f64>> {
        train_and_prune(&data.train, &data.train.all_indices(), &self.specs(), &self.train, sparsity, self.prune_mode, seed)
    }

    /// Runs un-pruning with the configured loop in the configured prune mode.
    pub fn unprune(
        &self,
        original: &MaskedModel<f64>,
        data: &SeedData,
        sparsity: f64,
        unlearn: &UnlearnConfig,
        seed: u64,
    ) -> Result<(MaskedModel<f64>, crate::unprune::UnpruneTrace)> {
        let cfg = self.unprune_config(sparsity, unlearn.clone());
        let rng = SeededRng::new(seed);
        match self.prune_mode {
            PruneMode::Unstructured => unprune(original, &data.train, &data.split, &cfg, Some(&data.test), &rng),
            PruneMode::Structured => unprune_structured(original, &data.train, &data.split, &cfg, Some(&data.test), &rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub iom: f64,
    pub uom: f64,
    /// `None` when both masks are empty.
    pub iou: Option<f64>,
}

/// Mask overlap of `u` against `r`: weight masks, or hidden-neuron masks in
/// structured mode.
pub fn mask_scores(u: &MaskedModel<f64>, r: &MaskedModel<f64>, mode: PruneMode) -> Result<MaskScores> {
    let pair = match mode {
        PruneMode::Unstructured => MaskPair::from_models(u, r)?,
        PruneMode::Structured => MaskPair::new(neuron_mask(u), neuron_mask(r))?,
    };
    Ok(MaskScores { iom: iom(&pair), uom: uom(&pair), iou: iou(&pair).value() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub method: String,
    pub sparsity: f64,
    pub iom: Option<f64>,
    pub uom: Option<f64>,
    pub iou: Option<f64>,
    pub kl: Option<f64>,
    pub ta: Option<f64>,
    pub ua: Option<f64>,
    pub wall_time_s: Option<f64>,
    /// Sparsity actually reached (pruned-neuron fraction in structured mode).
    pub achieved_sparsity: Option<f64>,
    pub kl_floored: bool,
    pub vs_original: Option<MaskScores>,
    /// Trace CSV path relative to the output directory.
    pub trace: Option<String>,
    pub error: Option<String>,
}

impl ExperimentRow {
    fn failed(seed: u64, method: &str, sparsity: f64, err: &Error) -> Self {
        Self {
            seed,
            method: method.to_string(),
            sparsity,
            iom: None,
            uom: None,
            iou: None,
            kl: None,
            ta: None,
            ua: None,
            wall_time_s: None,
            achieved_sparsity: None,
            kl_floored: false,
            vs_original: None,
            trace: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

pub const CSV_HEADER: &str = "seed,method,sparsity,iom,uom,iou,kl,ta,ua,wall_time_s";

impl ExperimentReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ExperimentRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Failed cells keep their identifying columns and leave metrics empty.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{},{},{},{},{},{},{}\n",
                r.seed,
                r.method,
                r.sparsity,
                f(r.iom),
                f(r.uom),
                f(r.iou),
                f(r.kl),
                f(r.ta),
                f(r.ua),
                r.wall_time_s.map(|x| format!("{x:.3}")).unwrap_or_default()
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("bad report JSON: {e}")))
    }
}

pub fn emit_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    write_file(path, report.to_csv().as_bytes())
}

pub fn emit_json(report: &ExperimentReport, path: &Path) -> Result<()> {
    write_file(path, report.to_json().as_bytes())
}

pub fn read_json(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentReport::from_json(&text)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Everything the run writes goes under this directory.
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the pool choose.
    pub jobs: usize,
}

struct Cell {
    seed: u64,
    sparsity: f64,
    data: SeedData,
    original: MaskedModel<f64>,
    original_time: f64,
    oracle: MaskedModel<f64>,
}

/// A built cell with its reference rows, or the error rows that replace it.
type CellBuild = std::result::Result<(Cell, Vec<ExperimentRow>), Vec<ExperimentRow>>;

/// Runs the full grid. Failures are recorded as error rows; only an invalid
/// config or an unusable pool is returned as `Err`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let cache = cfg.oracle.cache.then(|| OracleCache::new(opts.output_dir.join("oracles")));
    let keys: Vec<(u64, f64)> = cfg.seeds.iter().flat_map(|&s| cfg.sparsities.iter().map(move |&p| (s, p))).collect();

    let mut rows = pool.install(|| -> Vec<ExperimentRow> {
        let built: Vec<CellBuild> = keys
            .par_iter()
            .map(|&(seed, sparsity)| build_cell(cfg, cache.as_ref(), seed, sparsity).map_err(|e| {
                let mut names = vec!["original".to_string(), "oracle".to_string()];
                names.extend(cfg.unlearn.iter().map(|u| u.method.to_string()));
                names.iter().map(|m| ExperimentRow::failed(seed, m, sparsity, &e)).collect()
            }))
            .collect();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for b in built {
            match b {
                Ok((cell, reference_rows)) => {
                    rows.extend(reference_rows);
                    cells.push(cell);
                }
                Err(failed) => rows.extend(failed),
            }
        }
        let jobs: Vec<(&Cell, &UnlearnConfig)> = cells.iter().flat_map(|c| cfg.unlearn.iter().map(move |u| (c, u))).collect();
        rows.par_extend(jobs.par_iter().map(|&(cell, u)| {
            method_row(cfg, cell, u, &opts.output_dir)
                .unwrap_or_else(|e| ExperimentRow::failed(cell.seed, u.method.as_str(), cell.sparsity, &e))
        }));
        rows
    });
    if !cfg.record_wall_time {
        rows.iter_mut().for_each(|r| r.wall_time_s = None);
    }
    rows.sort_by(|a, b| {
        a.seed.cmp(&b.seed).then(a.sparsity.total_cmp(&b.sparsity)).then_with(|| a.method.cmp(&b.method))
    });
    Ok(ExperimentReport { rows })
}

fn build_cell(
    cfg: &ExperimentConfig,
    cache: Option<&OracleCache>,
    seed: u64,
    sparsity: f64,
) -> Result<(Cell, Vec<ExperimentRow>)> {
    let data = cfg.seed_data(seed)?;
    let start = Instant::now();
    let original = cfg.original(&data, sparsity, seed)?;
    let original_time = start.elapsed().as_secs_f64();
    let ocfg = cfg.oracle_config(sparsity);
    let oracle = match cache {
        Some(c) => c.get_or_build(&data.train, &data.split, &ocfg, seed)?,
        None => retrain_reprune(&data.train, &data.split, &ocfg, seed)?,
    };
    let cell = Cell { seed, sparsity, data, original, original_time, oracle: oracle.model };
    let rows = vec![
        score_row(cfg, &cell, "original", &cell.original, Some(cell.original_time), None)?,
        score_row(cfg, &cell, "oracle", &cell.oracle, Some(oracle.wall_time_s), None)?,
    ];
    Ok((cell, rows))
}

fn achieved_sparsity(model: &MaskedModel<f64>, mode: PruneMode) -> f64 {
    match mode {
        PruneMode::Unstructured => crate::prune::sparsity_of(model).sparsity,
        PruneMode::Structured => {
            let alive = neuron_mask(model);
            alive.iter().filter(|&&a| !a).count() as f64 / alive.len() as f64
        }
    }
}

fn score_row(
    cfg: &ExperimentConfig,
    cell: &Cell,
    method: &str,
    model: &MaskedModel<f64>,
    wall_time_s: Option<f64>,
    trace: Option<String>,
) -> Result<ExperimentRow> {
    let vs_oracle = mask_scores(model, &cell.oracle, cfg.prune_mode)?;
    let kl = kl_masked_weights(model, &cell.oracle, cfg.kl_estimator)?;
    Ok(ExperimentRow {
        seed: cell.seed,
        method: method.to_string(),
        sparsity: cell.sparsity,
        iom: Some(vs_oracle.iom),
        uom: Some(vs_oracle.uom),
        iou: vs_oracle.iou,
        kl: Some(kl.total),
        ta: Some(accuracy(model, &cell.data.test)?),
        ua: Some(evaluate(model, &cell.data.train, &cell.data.split.forget_indices)?.1),
        wall_time_s,
        achieved_sparsity: Some(achieved_sparsity(model, cfg.prune_mode)),
        kl_floored: kl.floored,
        vs_original: Some(mask_scores(model, &cell.original, cfg.prune_mode)?),
        trace,
        error: None,
    })
}

fn method_row(cfg: &ExperimentConfig, cell: &Cell, u: &UnlearnConfig, out: &Path) -> Result<ExperimentRow> {
    let start = Instant::now();
    let (model, trace) = cfg.unprune(&cell.original, &cell.data, cell.sparsity, u, cell.seed)?;
    let wall = start.elapsed().as_secs_f64();
    let rel = format!("traces/seed{}_s{:.2}_{}.csv", cell.seed, cell.sparsity, u.method);
    write_file(&out.join(&rel), trace.to_csv().as_bytes())?;
    score_row(cfg, cell, u.method.as_str(), &model, Some(wall), Some(rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::reference();
        c.seeds = vec![3];
        c.dataset = DatasetSpec::Blobs { n_per_class: 30, classes: 2, dim: 2, spread: 1.0, test_n_per_class: 20 };
        c.model.widths = vec![2, 8, 2];
        c.train.epochs = 5;
        c.oracle.cache = false;
        c.record_wall_time = false;
        c
    }

    fn opts(dir: &Path) -> RunOptions {
        RunOptions { output_dir: dir.to_path_buf(), jobs: 1 }
    }

    #[test]
    fn reference_config_round_trips_through_toml() {
        let c = ExperimentConfig::reference();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let mut text = ExperimentConfig::reference().to_toml_string();
        text = text.replacen("delete_ratio", "delete_ration", 1);
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        let nested = ExperimentConfig::reference().to_toml_string().replacen("epochs", "epoch", 1);
        assert!(matches!(ExperimentConfig::from_toml_str(&nested), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = small();
        c.unlearn.push(c.unlearn[0].clone());
        assert!(c.validate().is_err());
        let mut c = small();
        c.model.widths = vec![3, 8, 2];
        assert!(c.validate().is_err());
        let mut c = small();
        c.unprune.iterations = 20;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rows_cover_the_grid_and_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.seeds = vec![4, 3];
        c.sparsities = vec![0.6, 0.4];
        let r = run_experiment(&c, &opts(dir.path())).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * (2 + 3));
        assert!(!r.has_errors());
        let keys: Vec<(u64, String)> = r.rows.iter().map(|x| (x.seed, format!("{:.1}{}", x.sparsity, x.method))).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for row in r.rows_for("oracle") {
            assert_eq!(row.iou, Some(1.0));
            assert_eq!(row.kl, Some(0.0));
        }
        let trace = r.rows_for("gradient_ascent").next().unwrap().trace.clone().unwrap();
        assert!(dir.path().join(trace).exists());
    }

    #[test]
    fn noop_with_tiny_growth_keeps_the_original_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.unlearn = vec![UnlearnConfig::noop()];
        c.unprune.grow_per_iter = 1e-6;
        let r = run_experiment(&c, &opts(dir.path())).unwrap();
        let row = r.rows_for("noop").next().unwrap();
        assert_eq!(row.vs_original.unwrap().iou, Some(1.0));
    }

    #[test]
    fn csv_is_stable_and_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let a = run_experiment(&c, &opts(dir.path())).unwrap();
        let b = run_experiment(&c, &RunOptions { jobs: 2, ..opts(dir.path()) }).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("seed,method,sparsity,iom,uom,iou,kl,ta,ua,wall_time_s\n"));
        assert_eq!(ExperimentReport::from_json(&a.to_json()).unwrap(), a);
        emit_json(&a, &dir.path().join("r.json")).unwrap();
        assert_eq!(read_json(&dir.path().join("r.json")).unwrap(), a);
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(ExperimentReport::default().to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn failing_cells_become_error_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.unlearn[0].rate = 1e6;
        c.unlearn[0].steps = 50;
        let r = run_experiment(&c, &opts(dir.path())).unwrap();
        let ga = r.rows_for("gradient_ascent").next().unwrap();
        assert!(ga.error.is_some() && ga.iom.is_none());
        assert!(r.rows_for("finetune").next().unwrap().error.is_none());
        assert!(r.has_errors());
        assert!(r.to_csv().contains("3,gradient_ascent,0.6000,,,,,,,\n"));
    }

    #[test]
    fn wall_time_is_recorded_to_three_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.record_wall_time = true;
        let r = run_experiment(&c, &opts(dir.path())).unwrap();
        assert!(r.rows.iter().all(|x| x.wall_time_s.is_some()));
        let line = r.to_csv().lines().nth(1).unwrap().to_string();
        let wall = line.rsplit(',').next().unwrap();
        assert_eq!(wall.split('.').nth(1).unwrap().len(), 3);
    }

    #[test]
    fn cached_oracle_changes_only_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.oracle.cache = true;
        let a = run_experiment(&c, &opts(dir.path())).unwrap();
        let b = run_experiment(&c, &opts(dir.path())).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(fs::read_dir(dir.path().join("oracles")).unwrap().count(), 1);
    }

    #[test]
    fn structured_mode_scores_neuron_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.prune_mode = PruneMode::Structured;
        c.model.widths = vec![2, 16, 16, 2];
        c.sparsities = vec![0.5];
        let r = run_experiment(&c, &opts(dir.path())).unwrap();
        assert!(!r.has_errors(), "{:?}", r.rows.iter().find(|x| x.error.is_some()));
        for row in &r.rows {
            assert_eq!(row.achieved_sparsity, Some(0.5));
            // 16 of 32 neurons kept.
            assert!(row.iom.unwrap() <= 0.5);
        }
    }
}
