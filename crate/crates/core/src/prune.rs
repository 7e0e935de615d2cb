//! Mask construction: unstructured magnitude pruning, structured l2 neuron
//! pruning, and sparsity accounting.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MaskedModel;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::train::{train_sgd, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub total: usize,
    pub zeros: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total_weights: usize,
    pub zero_mask_entries: usize,
    pub sparsity: f64,
    pub per_layer: Vec<LayerSparsity>,
}

pub fn sparsity_of<T: Scalar>(model: &MaskedModel<T>) -> SparsityReport {
    let per_layer: Vec<LayerSparsity> = model
        .masks
        .iter()
        .map(|m| LayerSparsity {
            total: m.len(),
            zeros: m.data().iter().filter(|&&v| v == T::zero()).count(),
        })
        .collect();
    let total_weights = per_layer.iter().map(|l| l.total).sum();
    let zero_mask_entries = per_layer.iter().map(|l| l.zeros).sum();
    SparsityReport {
        total_weights,
        zero_mask_entries,
        sparsity: zero_mask_entries as f64 / total_weights as f64,
        per_layer,
    }
}

/// Ascending `|w|`, ties by ascending index.
fn by_magnitude<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    a.1.abs()
        .partial_cmp(&b.1.abs())
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Masks the `k` smallest-magnitude unmasked entries among `candidates`
/// (`(flat index, weight)` pairs) and returns their flat indices.
fn smallest<T: Scalar>(mut candidates: Vec<(usize, T)>, k: usize) -> Vec<usize> {
    candidates.sort_by(by_magnitude);
    candidates.into_iter().take(k).map(|(i, _)| i).collect()
}

fn unmasked_entries<T: Scalar>(model: &MaskedModel<T>, layer: Option<usize>) -> Vec<(usize, T)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (l, (w, m)) in model.weights.iter().zip(&model.masks).enumerate() {
        if layer.is_none_or(|only| only == l) {
            for (i, (&wv, &mv)) in w.data().iter().zip(m.data()).enumerate() {
                if mv != T::zero() {
                    out.push((offset + i, wv));
                }
            }
        }
        offset += w.len();
    }
    out
}

fn mask_flat<T: Scalar>(model: &mut MaskedModel<T>, flat: &[usize]) {
    for &f in flat {
        let (l, o) = model.locate(f);
        model.masks[l].data_mut()[o] = T::zero();
    }
}

/// Number of entries that `fraction` of `n` rounds to.
pub fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Masks the smallest-magnitude weights until exactly `round(target·N)`
/// entries are zero (globally, or per layer), then hard-zeroes them.
/// Already-masked entries are never revived.
pub fn prune_magnitude<T: Scalar>(model: &mut MaskedModel<T>, target: f64, scope: PruneScope) -> Result<()> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Input(format!("target sparsity must be in [0,1), got {target}")));
    }
    let report = sparsity_of(model);
    let to_mask = match scope {
        PruneScope::Global => {
            let want = round_count(target, report.total_weights);
            if want < report.zero_mask_entries {
                return Err(Error::Input(format!(
                    "target sparsity {target} is below current sparsity {}",
                    report.sparsity
                )));
            }
            smallest(unmasked_entries(model, None), want - report.zero_mask_entries)
        }
        PruneScope::PerLayer => {
            let mut all = Vec::new();
            for (l, ls) in report.per_layer.iter().enumerate() {
                let want = round_count(target, ls.total);
                if want < ls.zeros {
                    return Err(Error::Input(format!(
                        "target sparsity {target} is below layer {l} sparsity {}",
                        ls.zeros as f64 / ls.total as f64
                    )));
                }
                all.extend(smallest(unmasked_entries(model, Some(l)), want - ls.zeros));
            }
            all
        }
    };
    mask_flat(model, &to_mask);
    model.apply_mask();
    Ok(())
}

/// Hidden-layer indices (every layer but the logits layer).
pub fn hidden_layers<T: Scalar>(model: &MaskedModel<T>) -> std::ops::Range<usize> {
    0..model.num_layers().saturating_sub(1)
}

/// A hidden neuron is pruned when its bias mask is zero.
pub fn is_neuron_pruned<T: Scalar>(model: &MaskedModel<T>, layer: usize, unit: usize) -> bool {
    model.bias_masks[layer].data()[unit] == T::zero()
}

/// Liveness of every hidden neuron, hidden layers concatenated.
pub fn neuron_mask<T: Scalar>(model: &MaskedModel<T>) -> Vec<bool> {
    hidden_layers(model)
        .flat_map(|l| (0..model.layers[l].out_dim).map(move |u| (l, u)))
        .map(|(l, u)| !is_neuron_pruned(model, l, u))
        .collect()
}

/// l2 norm of the incoming weight row of `unit` in `layer` (raw weights).
pub fn row_norm<T: Scalar>(model: &MaskedModel<T>, layer: usize, unit: usize) -> T {
    model.weights[layer].row(unit).iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Sets the row mask and bias mask of one neuron.
pub fn set_neuron<T: Scalar>(model: &mut MaskedModel<T>, layer: usize, unit: usize, alive: bool) {
    let v = if alive { T::one() } else { T::zero() };
    for m in model.masks[layer].row_mut(unit) {
        *m = v;
    }
    model.bias_masks[layer].data_mut()[unit] = v;
}

/// Structured pruning: in each hidden layer, brings the number of pruned
/// neurons up to `⌊fraction·units⌋`, removing live neurons with the smallest
/// incoming-row l2 norm (ties by lowest index). Pruned rows and biases are
/// hard-zeroed.
pub fn prune_structured_l2<T: Scalar>(model: &mut MaskedModel<T>, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!("prune fraction must be in (0,1), got {fraction}")));
    }
    let mut plan = Vec::new();
    for l in hidden_layers(model) {
        let units = model.layers[l].out_dim;
        let target = (fraction * units as f64).floor() as usize;
        if target >= units {
            return Err(Error::Input(format!("layer {l} would have no active neurons")));
        }
        let already = (0..units).filter(|&u| is_neuron_pruned(model, l, u)).count();
        if target <= already {
            continue;
        }
        let live: Vec<(usize, T)> = (0..units)
            .filter(|&u| !is_neuron_pruned(model, l, u))
            .map(|u| (u, row_norm(model, l, u)))
            .collect();
        for u in smallest(live, target - already) {
            plan.push((l, u));
        }
    }
    for (l, u) in plan {
        set_neuron(model, l, u, false);
    }
    model.apply_mask();
    Ok(())
}

/// Iterative magnitude pruning with rewinding: `rounds` cycles of
/// train → prune → rewind surviving weights to the initialization snapshot,
/// with a geometric sparsity schedule reaching `target` on the last round.
/// The last round does not rewind, so the result carries trained weights.
pub fn prune_iterative_rewind<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    indices: &[usize],
    train_cfg: &TrainConfig,
    target: f64,
    rounds: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    if rounds == 0 {
        return Err(Error::Config("iterative pruning needs at least one round".into()));
    }
    for r in 1..=rounds {
        train_sgd(model, dataset, indices, train_cfg, rng)?;
        let s = if r == rounds {
            target
        } else {
            1.0 - (1.0 - target).powf(r as f64 / rounds as f64)
        };
        prune_magnitude(model, s.max(sparsity_of(model).sparsity), PruneScope::Global)?;
        if r < rounds {
            for (w, init) in model.weights.iter_mut().zip(&model.init_snapshot) {
                w.data_mut().copy_from_slice(init.data());
            }
            for b in &mut model.biases {
                b.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
            model.apply_mask();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, mlp_specs};
    use crate::tensor::Tensor;

    fn model(widths: &[usize], seed: u64) -> MaskedModel<f64> {
        init_model(&mlp_specs(widths), &mut SeededRng::new(seed)).unwrap()
    }

    fn single(weights: &[f64]) -> MaskedModel<f64> {
        let mut m = model(&[weights.len(), 1], 0);
        m.weights[0] = Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap();
        m
    }

    #[test]
    fn hand_sorted_global_prune() {
        let mut m = single(&[0.1, -0.5, 0.3, -0.2]);
        prune_magnitude(&mut m, 0.5, PruneScope::Global).unwrap();
        assert_eq!(m.masks[0].data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.weights[0].data(), &[0.0, -0.5, 0.3, 0.0]);
    }

    #[test]
    fn target_equal_to_current_is_noop_and_below_is_error() {
        let mut m = model(&[4, 6, 2], 1);
        prune_magnitude(&mut m, 0.5, PruneScope::Global).unwrap();
        let snapshot = m.clone();
        prune_magnitude(&mut m, 0.5, PruneScope::Global).unwrap();
        assert_eq!(m, snapshot);
        assert!(matches!(prune_magnitude(&mut m, 0.3, PruneScope::Global), Err(Error::Input(_))));
        assert!(prune_magnitude(&mut m, 1.0, PruneScope::Global).is_err());
    }

    #[test]
    fn exact_count_on_thousand_weights() {
        let mut m = model(&[10, 100], 2);
        assert_eq!(m.num_weights(), 1000);
        prune_magnitude(&mut m, 0.6, PruneScope::Global).unwrap();
        let r = sparsity_of(&m);
        assert_eq!(r.zero_mask_entries, 600);
        assert!((r.sparsity - 0.6).abs() <= 1.0 / 1000.0);
    }

    #[test]
    fn per_layer_scope_rounds_each_layer() {
        let mut m = model(&[3, 7, 5, 2], 3);
        prune_magnitude(&mut m, 0.4, PruneScope::PerLayer).unwrap();
        for ls in sparsity_of(&m).per_layer {
            assert_eq!(ls.zeros, round_count(0.4, ls.total));
        }
    }

    #[test]
    fn fresh_model_is_dense() {
        let r = sparsity_of(&model(&[3, 5, 2], 4));
        assert_eq!(r.sparsity, 0.0);
        assert_eq!(r.per_layer.iter().map(|l| l.total).sum::<usize>(), r.total_weights);
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let mut m = single(&[0.5, 0.2, 0.2, 0.2, 0.9, 0.2]);
        prune_magnitude(&mut m, 0.5, PruneScope::Global).unwrap();
        assert_eq!(m.masks[0].data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn structured_hand_norms() {
        let mut m = model(&[2, 3, 2], 5);
        m.weights[0] = Tensor::new(vec![3, 2], vec![0.6, 0.8, 0.1, 0.0, 0.3, 0.4]).unwrap();
        prune_structured_l2(&mut m, 1.0 / 3.0 + 1e-9).unwrap();
        assert_eq!(neuron_mask(&m), vec![true, false, true]);
        assert_eq!(m.masks[0].row(1), &[0.0, 0.0]);
        assert_eq!(m.bias_masks[0].data()[1], 0.0);
    }

    #[test]
    fn structured_floor_to_zero_is_noop() {
        let mut m = model(&[2, 3, 2], 6);
        let before = m.clone();
        prune_structured_l2(&mut m, 0.2).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn structured_sparsity_in_two_four_two_net() {
        let mut m = model(&[2, 4, 2], 7);
        prune_structured_l2(&mut m, 0.25).unwrap();
        let r = sparsity_of(&m);
        // One pruned neuron masks its two incoming weights out of 8 + 8.
        assert_eq!(r.zero_mask_entries, 2);
        assert_eq!(r.total_weights, 16);
        assert_eq!(r.per_layer[0].zeros, 2);
        assert_eq!(neuron_mask(&m).iter().filter(|&&a| !a).count(), 1);
    }

    #[test]
    fn structured_rejects_bad_fraction() {
        let mut m = model(&[2, 4, 2], 8);
        assert!(prune_structured_l2(&mut m, 0.0).is_err());
        assert!(prune_structured_l2(&mut m, 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn repeated_pruning_never_resurrects(seed in 0u64..200, a in 0.0f64..0.5, b in 0.0f64..0.45) {
            let mut m = model(&[4, 9, 3], seed);
            prune_magnitude(&mut m, a, PruneScope::Global).unwrap();
            let first = m.flat_mask();
            prune_magnitude(&mut m, a + b, PruneScope::Global).unwrap();
            let second = m.flat_mask();
            for (x, y) in first.iter().zip(&second) {
                proptest::prop_assert!(*x || !*y);
            }
        }

        #[test]
        fn duplicated_magnitudes_prune_in_index_order(vals in proptest::collection::vec(1u8..4, 4..40), t in 0.05f64..0.95) {
            let ws: Vec<f64> = vals.iter().enumerate().map(|(i, &v)| if i % 2 == 0 { v as f64 } else { -(v as f64) }).collect();
            let mut m = single(&ws);
            prune_magnitude(&mut m, t, PruneScope::Global).unwrap();
            let mask = m.flat_mask();
            // Within every magnitude class, pruned entries precede kept ones.
            for mag in 1u8..4 {
                let class: Vec<bool> = vals.iter().zip(&mask).filter(|(&v, _)| v == mag).map(|(_, &k)| k).collect();
                proptest::prop_assert!(class.windows(2).all(|w| !(w[0] && !w[1])));
            }
        }
    }
}
