//! Retrain + reprune from scratch on the retained data, with an on-disk
//! snapshot cache keyed by a content hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DeletionSplit};
use crate::error::{Error, Result};
use crate::model::{init_model, LayerSpec, MaskedModel};
use crate::prune::{prune_magnitude, prune_structured_l2, PruneScope};
use crate::rng::{streams, SeededRng};
use crate::scalar::Scalar;
use crate::snapshot::{decode, encode};
use crate::train::{train_sgd, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Unstructured,
    /// Hidden-neuron l2 pruning; sparsity is a fraction of hidden neurons.
    Structured,
}

/// Initialization of the oracle's from-scratch model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleInit {
    /// The original model's seed, so the oracle starts from the same `Θ₀`.
    #[default]
    SameSeed,
    /// An independent initialization stream.
    FreshSeed,
}

const FRESH_INIT_STREAM: u64 = 0x0AC1E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub specs: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub sparsity: f64,
    #[serde(default)]
    pub mode: PruneMode,
    #[serde(default)]
    pub init: OracleInit,
}

/// Initialize with the `INIT` stream of `seed`, train on `rows` with the
/// `TRAIN` stream, then prune. The original model and the oracle both come
/// from here, differing only in `rows`.
pub fn train_and_prune<T: Scalar>(
    dataset: &Dataset<T>,
    rows: &[usize],
    specs: &[LayerSpec],
    train_cfg: &TrainConfig,
    sparsity: f64,
    mode: PruneMode,
    seed: u64,
) -> Result<MaskedModel<T>> {
    let root = SeededRng::new(seed);
    let mut model = init_model(specs, &mut root.fork(streams::INIT))?;
    train_sgd(&mut model, dataset, rows, train_cfg, &mut root.fork(streams::TRAIN))?;
    prune(&mut model, sparsity, mode)?;
    Ok(model)
}

pub fn prune<T: Scalar>(model: &mut MaskedModel<T>, sparsity: f64, mode: PruneMode) -> Result<()> {
    match mode {
        PruneMode::Unstructured => prune_magnitude(model, sparsity, PruneScope::Global),
        PruneMode::Structured => prune_structured_l2(model, sparsity),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<T> {
    pub model: MaskedModel<T>,
    pub wall_time_s: f64,
    pub cached: bool,
}

pub fn retrain_reprune<T: Scalar>(
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    config: &OracleConfig,
    seed: u64,
) -> Result<OracleResult<T>> {
    let start = Instant::now();
    let init_seed = match config.init {
        OracleInit::SameSeed => seed,
        OracleInit::FreshSeed => SeededRng::with_stream(seed, FRESH_INIT_STREAM).next_u64(),
    };
    let mut model = {
        let mut m = init_model(&config.specs, &mut SeededRng::new(init_seed).fork(streams::INIT))?;
        train_sgd(&mut m, dataset, &split.retain_indices, &config.train, &mut SeededRng::new(seed).fork(streams::TRAIN))?;
        m
    };
    prune(&mut model, config.sparsity, config.mode)?;
    model.seed = seed;
    Ok(OracleResult { model, wall_time_s: start.elapsed().as_secs_f64(), cached: false })
}

/// Hex SHA-256 over the dataset contents, the split, the config and the seed.
pub fn cache_key<T: Scalar>(dataset: &Dataset<T>, split: &DeletionSplit, config: &OracleConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(dataset.fingerprint());
    for idx in [&split.forget_indices, &split.retain_indices] {
        h.update((idx.len() as u64).to_le_bytes());
        for &i in idx {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(seed.to_le_bytes());
    h.update(std::any::type_name::<T>().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory of oracle snapshots named `oracle-<key>.snap`.
#[derive(Clone, Debug)]
pub struct OracleCache {
    dir: PathBuf,
}

impl OracleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("oracle-{key}.snap"))
    }

    /// Loads the cached oracle if present, otherwise builds and stores it.
    /// A hit reports the load time as wall time.
    pub fn get_or_build<T: Scalar>(
        &self,
        dataset: &Dataset<T>,
        split: &DeletionSplit,
        config: &OracleConfig,
        seed: u64,
    ) -> Result<OracleResult<T>> {
        let path = self.path_for(&cache_key(dataset, split, config, seed));
        if path.exists() {
            let start = Instant::now();
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let model = decode(&bytes, &path)?;
            return Ok(OracleResult { model, wall_time_s: start.elapsed().as_secs_f64(), cached: true });
        }
        let built = retrain_reprune(dataset, split, config, seed)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        // Write-then-rename so concurrent builders never expose a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, encode(&built.model)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(built)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split_delete};
    use crate::metrics::{iou, kl_masked_weights, Iou, KlEstimator, MaskPair};
    use crate::model::mlp_specs;

    fn setup() -> (Dataset<f64>, DeletionSplit, OracleConfig) {
        let data = gen_blobs::<f64>(&mut SeededRng::new(1), 80, 2, 2, 1.2).unwrap();
        let split = split_delete(&data, 0.1, &mut SeededRng::new(2)).unwrap();
        let cfg = OracleConfig {
            specs: mlp_specs(&[2, 16, 16, 2]),
            train: TrainConfig { epochs: 20, lr: 0.1, batch_size: 16 },
            sparsity: 0.6,
            mode: PruneMode::Unstructured,
            init: OracleInit::SameSeed,
        };
        (data, split, cfg)
    }

    #[test]
    fn oracle_is_deterministic_and_self_similar() {
        let (data, split, cfg) = setup();
        let a = retrain_reprune(&data, &split, &cfg, 5).unwrap();
        let b = retrain_reprune(&data, &split, &cfg, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(iou(&MaskPair::from_models(&a.model, &b.model).unwrap()), Iou::Value(1.0));
        assert_eq!(kl_masked_weights(&a.model, &b.model, KlEstimator::Gaussian).unwrap().total, 0.0);
    }

    #[test]
    fn same_seed_oracle_starts_from_the_original_init() {
        let (data, split, cfg) = setup();
        let oracle = retrain_reprune(&data, &split, &cfg, 5).unwrap();
        let original = train_and_prune(&data, &data.all_indices(), &cfg.specs, &cfg.train, 0.6, PruneMode::Unstructured, 5).unwrap();
        assert_eq!(oracle.model.init_snapshot, original.init_snapshot);
        let fresh = retrain_reprune(&data, &split, &OracleConfig { init: OracleInit::FreshSeed, ..cfg }, 5).unwrap();
        assert_ne!(fresh.model.init_snapshot, original.init_snapshot);
    }

    #[test]
    fn oracle_mask_differs_from_original() {
        let (data, split, cfg) = setup();
        let oracle = retrain_reprune(&data, &split, &cfg, 5).unwrap();
        let original = train_and_prune(&data, &data.all_indices(), &cfg.specs, &cfg.train, 0.6, PruneMode::Unstructured, 5).unwrap();
        let v = iou(&MaskPair::from_models(&oracle.model, &original).unwrap()).value().unwrap();
        assert!(v < 1.0, "IoU {v}");
    }

    #[test]
    fn cache_hit_returns_identical_model() {
        let (data, split, cfg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cache = OracleCache::new(dir.path().join("oracles"));
        let first = cache.get_or_build(&data, &split, &cfg, 3).unwrap();
        let second = cache.get_or_build(&data, &split, &cfg, 3).unwrap();
        assert!(!first.cached && second.cached);
        assert_eq!(first.model, second.model);
        let other = cache.get_or_build(&data, &split, &cfg, 4).unwrap();
        assert!(!other.cached);
        assert_eq!(fs::read_dir(cache.dir()).unwrap().count(), 2);
    }

    #[test]
    fn cache_key_tracks_inputs() {
        let (data, split, cfg) = setup();
        let k = cache_key(&data, &split, &cfg, 1);
        assert_eq!(k.len(), 64);
        assert_eq!(k, cache_key(&data, &split, &cfg, 1));
        assert_ne!(k, cache_key(&data, &split, &cfg, 2));
        assert_ne!(k, cache_key(&data, &split, &OracleConfig { sparsity: 0.5, ..cfg.clone() }, 1));
        let other_split = split_delete(&data, 0.1, &mut SeededRng::new(9)).unwrap();
        assert_ne!(k, cache_key(&data, &other_split, &cfg, 1));
    }

    #[test]
    fn structured_oracle_prunes_neurons() {
        let (data, split, mut cfg) = setup();
        cfg.mode = PruneMode::Structured;
        cfg.sparsity = 0.5;
        let o = retrain_reprune(&data, &split, &cfg, 5).unwrap();
        let dead = crate::prune::neuron_mask(&o.model).iter().filter(|&&a| !a).count();
        assert_eq!(dead, 16);
    }
}
