//! Plain minibatch SGD with masks held fixed, and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MaskedModel;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{:.10},{:.6}\n", r.epoch, r.split, r.loss, r.accuracy));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count()
}

/// Trains on `indices` for `cfg.epochs` passes. Each epoch reshuffles the
/// indices with `rng`; after every step the masks are re-applied so pruned
/// weights stay exactly zero.
pub fn train_sgd<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    if cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    if indices.is_empty() {
        return Err(Error::Input("training indices are empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let lr = T::lit(cfg.lr);
    let mut order = indices.to_vec();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = T::zero();
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.batch(chunk)?;
            let (loss, grads, logits) = model
                .backward_with_logits(&x, &y)
                .map_err(|e| Error::Numeric(format!("training diverged at epoch {epoch}: {e}")))?;
            loss_sum += loss * T::from_usize_lossy(chunk.len());
            correct += count_correct(&logits, &y);
            model
                .step(&grads, -lr)
                .map_err(|e| Error::Numeric(format!("training diverged at epoch {epoch}: {e}")))?;
            model.apply_mask();
        }
        let loss = loss_sum.as_f64() / order.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}: loss {loss}")));
        }
        log.records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss,
            accuracy: correct as f64 / order.len() as f64,
        });
    }
    Ok(log)
}

/// Mean loss and argmax accuracy on `indices`.
pub fn evaluate<T: Scalar>(model: &MaskedModel<T>, dataset: &Dataset<T>, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Input("evaluation indices are empty".into()));
    }
    let (x, y) = dataset.batch(indices)?;
    let logits = model.forward(&x)?;
    let (loss, _) = crate::tensor::softmax_cross_entropy(&logits, &y)?;
    Ok((loss.as_f64(), count_correct(&logits, &y) as f64 / y.len() as f64))
}

/// Accuracy on the whole dataset.
pub fn accuracy<T: Scalar>(model: &MaskedModel<T>, dataset: &Dataset<T>) -> Result<f64> {
    Ok(evaluate(model, dataset, &dataset.all_indices())?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::model::{init_model, mlp_specs};
    use crate::prune::{prune_magnitude, sparsity_of, PruneScope};

    fn xor() -> Dataset<f64> {
        let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        Dataset::new(x, vec![0, 1, 1, 0], 2, "xor").unwrap()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let d = xor();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 8, 2]), &mut SeededRng::new(1)).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { epochs: 5, lr: 0.0, batch_size: 2 };
        let log = train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(2)).unwrap();
        assert_eq!(m, before);
        let first = log.records[0].loss;
        assert!(log.records.iter().all(|r| (r.loss - first).abs() < 1e-12));
    }

    #[test]
    fn learns_xor() {
        let d = xor();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 16, 2]), &mut SeededRng::new(3)).unwrap();
        let cfg = TrainConfig { epochs: 2000, lr: 0.1, batch_size: 4 };
        train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(4)).unwrap();
        assert_eq!(evaluate(&m, &d, &d.all_indices()).unwrap().1, 1.0);
    }

    #[test]
    fn masked_entries_stay_zero_and_sparsity_is_frozen() {
        let d = gen_blobs::<f64>(&mut SeededRng::new(5), 40, 2, 2, 0.7).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 16, 2]), &mut SeededRng::new(6)).unwrap();
        prune_magnitude(&mut m, 0.5, PruneScope::Global).unwrap();
        let before = sparsity_of(&m);
        let masked: Vec<usize> = m.flat_mask().iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i).collect();
        for _ in 0..3 {
            let cfg = TrainConfig { epochs: 1, lr: 0.2, batch_size: 8 };
            train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(7)).unwrap();
            for &i in &masked {
                let (l, o) = m.locate(i);
                assert_eq!(m.weights[l].data()[o], 0.0);
            }
        }
        assert_eq!(sparsity_of(&m), before);
    }

    #[test]
    fn seed_reproducible_log() {
        let d = gen_blobs::<f64>(&mut SeededRng::new(5), 30, 2, 2, 0.7).unwrap();
        let cfg = TrainConfig { epochs: 4, lr: 0.1, batch_size: 7 };
        let run = || {
            let mut m = init_model::<f64>(&mlp_specs(&[2, 8, 2]), &mut SeededRng::new(1)).unwrap();
            let log = train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(9)).unwrap();
            (m, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_names_epoch() {
        let d = gen_blobs::<f64>(&mut SeededRng::new(5), 30, 2, 2, 0.7).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 8, 2]), &mut SeededRng::new(1)).unwrap();
        let cfg = TrainConfig { epochs: 50, lr: 1e200, batch_size: 60 };
        match train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(1)) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn separable_limit_reaches_full_accuracy_with_linear_model() {
        let d = gen_blobs::<f64>(&mut SeededRng::new(11), 50, 3, 2, 1e-3).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 3]), &mut SeededRng::new(12)).unwrap();
        let cfg = TrainConfig { epochs: 200, lr: 0.1, batch_size: 16 };
        train_sgd(&mut m, &d, &d.all_indices(), &cfg, &mut SeededRng::new(13)).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 1.0);
    }

    #[test]
    fn two_layer_model_generalizes_on_blobs() {
        let train = gen_blobs::<f64>(&mut SeededRng::new(21), 500, 2, 2, 0.5).unwrap();
        let test = gen_blobs::<f64>(&mut SeededRng::new(22), 500, 2, 2, 0.5).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 16, 2]), &mut SeededRng::new(23)).unwrap();
        let cfg = TrainConfig { epochs: 20, lr: 0.05, batch_size: 32 };
        train_sgd(&mut m, &train, &train.all_indices(), &cfg, &mut SeededRng::new(24)).unwrap();
        assert!(accuracy(&m, &test).unwrap() > 0.95);
    }

    #[test]
    fn random_binary_model_is_near_chance_on_balanced_data() {
        // Monte Carlo over untrained models: mean accuracy on balanced blobs ≈ 0.5.
        let d = gen_blobs::<f64>(&mut SeededRng::new(31), 500, 2, 2, 1.0).unwrap();
        let accs: Vec<f64> = (0..40)
            .map(|s| {
                let m = init_model::<f64>(&mlp_specs(&[2, 8, 2]), &mut SeededRng::new(100 + s)).unwrap();
                accuracy(&m, &d).unwrap()
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean accuracy {mean}");
    }
}
