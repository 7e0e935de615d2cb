//! The un-pruning loop: re-activate pruned weights, unlearn on the dense
//! model, regrow the strongest pruned entries, and finally re-prune to the
//! original sparsity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DeletionSplit};
use crate::error::{Error, Result};
use crate::model::MaskedModel;
use crate::prune::{
    hidden_layers, is_neuron_pruned, prune_magnitude, prune_structured_l2, round_count, row_norm, set_neuron,
    sparsity_of, PruneScope,
};
use crate::rng::{streams, SeededRng};
use crate::scalar::Scalar;
use crate::train::evaluate;
use crate::unlearn::{unlearn, UnlearnConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Restore the saved initialization values.
    #[default]
    Original,
    /// Draw fresh `N(0, random_init_std²)` values.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnpruneConfig {
    pub original_sparsity: f64,
    pub grow_per_iter: f64,
    pub iterations: usize,
    #[serde(default)]
    pub init_strategy: InitStrategy,
    #[serde(default = "default_random_std")]
    pub random_init_std: f64,
    pub unlearn: UnlearnConfig,
}

fn default_random_std() -> f64 {
    0.01
}

impl UnpruneConfig {
    /// Checks the loop invariants for a universe of `n` prunable units.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.grow_per_iter > 0.0 && self.grow_per_iter < 1.0) {
            return Err(Error::Config(format!("grow_per_iter must be in (0,1), got {}", self.grow_per_iter)));
        }
        if !(0.0..1.0).contains(&self.original_sparsity) {
            return Err(Error::Config(format!(
                "original_sparsity must be in [0,1), got {}",
                self.original_sparsity
            )));
        }
        if !(self.random_init_std >= 0.0 && self.random_init_std.is_finite()) {
            return Err(Error::Config("random_init_std must be non-negative".into()));
        }
        let zeros = round_count(self.original_sparsity, n);
        let grown = self.iterations * round_count(self.grow_per_iter, n);
        if grown > zeros {
            return Err(Error::Config(format!(
                "sparsity underflow: {} iterations of {} would grow {grown} entries but only {zeros} are pruned",
                self.iterations, self.grow_per_iter
            )));
        }
        self.unlearn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sparsity: f64,
    pub ua: f64,
    pub ta: Option<f64>,
    pub grown: Vec<usize>,
}

/// Row 0 is the input state; row `t` is the state after iteration `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnpruneTrace {
    pub records: Vec<IterationRecord>,
    pub final_sparsity: f64,
    pub final_ua: f64,
    pub final_ta: Option<f64>,
}

impl UnpruneTrace {
    pub const CSV_HEADER: &'static str = "iteration,sparsity,ua,ta,grown_count";

    pub fn sparsities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sparsity).collect()
    }

    /// The final re-pruned state is the row labelled `final`.
    pub fn to_csv(&self) -> String {
        let ta = |t: Option<f64>| t.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.iteration,
                r.sparsity,
                r.ua,
                ta(r.ta),
                r.grown.len()
            ));
        }
        out.push_str(&format!(
            "final,{:.6},{:.6},{},0\n",
            self.final_sparsity,
            self.final_ua,
            ta(self.final_ta)
        ));
        out
    }
}

/// Fills every masked weight with a fresh value; unmasked weights and all
/// biases are untouched. Masks are not changed.
pub fn reinit_pruned<T: Scalar>(model: &mut MaskedModel<T>, strategy: InitStrategy, std: f64, rng: &mut SeededRng) {
    for l in 0..model.num_layers() {
        let mask = model.masks[l].data().to_vec();
        let init = model.init_snapshot[l].data().to_vec();
        let w = model.weights[l].data_mut();
        for i in 0..w.len() {
            if mask[i] == T::zero() {
                w[i] = match strategy {
                    InitStrategy::Original => init[i],
                    InitStrategy::Random => T::lit(std * rng.standard_normal()),
                };
            }
        }
    }
}

/// Flips the `round(p·N)` masked entries with the largest `|w|` (ties by
/// lowest flat index) to one and returns their flat indices in ascending order.
pub fn grow_mask<T: Scalar>(model: &mut MaskedModel<T>, p: f64) -> Result<Vec<usize>> {
    let n = model.num_weights();
    let k = round_count(p, n);
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<(usize, T)> = Vec::new();
    let mut offset = 0;
    for (w, m) in model.weights.iter().zip(&model.masks) {
        for (i, (&wv, &mv)) in w.data().iter().zip(m.data()).enumerate() {
            if mv == T::zero() {
                candidates.push((offset + i, wv.abs()));
            }
        }
        offset += w.len();
    }
    if k > candidates.len() {
        return Err(Error::Input(format!(
            "cannot grow {k} entries: only {} are masked",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut grown: Vec<usize> = candidates[..k].iter().map(|c| c.0).collect();
    grown.sort_unstable();
    for &f in &grown {
        let (l, o) = model.locate(f);
        model.masks[l].data_mut()[o] = T::one();
    }
    Ok(grown)
}

/// Total number of hidden neurons.
pub fn hidden_units<T: Scalar>(model: &MaskedModel<T>) -> usize {
    hidden_layers(model).map(|l| model.layers[l].out_dim).sum()
}

/// Restores the `round(p_units·H)` pruned hidden neurons with the largest
/// incoming-row l2 norm (ties by layer, then unit). Returns `(layer, unit)`
/// pairs in ascending order.
pub fn grow_mask_structured<T: Scalar>(model: &mut MaskedModel<T>, p_units: f64) -> Result<Vec<(usize, usize)>> {
    let mut pruned: Vec<((usize, usize), T)> = hidden_layers(model)
        .flat_map(|l| (0..model.layers[l].out_dim).map(move |u| (l, u)))
        .filter(|&(l, u)| is_neuron_pruned(model, l, u))
        .map(|(l, u)| ((l, u), row_norm(model, l, u)))
        .collect();
    if pruned.is_empty() {
        return Err(Error::Input("no pruned neurons to restore".into()));
    }
    let k = round_count(p_units, hidden_units(model));
    if k > pruned.len() {
        return Err(Error::Input(format!(
            "cannot restore {k} neurons: only {} are pruned",
            pruned.len()
        )));
    }
    pruned.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut grown: Vec<(usize, usize)> = pruned[..k].iter().map(|p| p.0).collect();
    grown.sort_unstable();
    for &(l, u) in &grown {
        set_neuron(model, l, u, true);
    }
    Ok(grown)
}

fn scores<T: Scalar>(
    model: &MaskedModel<T>,
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    test: Option<&Dataset<T>>,
) -> Result<(f64, Option<f64>)> {
    let ua = evaluate(model, dataset, &split.forget_indices)?.1;
    let ta = match test {
        Some(t) => Some(evaluate(model, t, &t.all_indices())?.1),
        None => None,
    };
    Ok((ua, ta))
}

/// Runs unlearning on a fully unmasked copy and writes the parameters back.
fn unlearn_dense<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    config: &UnlearnConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    let mut dense = model.unmasked();
    unlearn(&mut dense, split, dataset, config, rng)?;
    model.weights = dense.weights;
    model.biases = dense.biases;
    Ok(())
}

/// Unstructured un-pruning. `model` must already be pruned to
/// `config.original_sparsity`; the result has the same sparsity but a mask
/// that may differ. `test`, when given, supplies TA for the trace.
pub fn unprune<T: Scalar>(
    model: &MaskedModel<T>,
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    config: &UnpruneConfig,
    test: Option<&Dataset<T>>,
    rng: &SeededRng,
) -> Result<(MaskedModel<T>, UnpruneTrace)> {
    let n = model.num_weights();
    config.validate(n)?;
    let start = sparsity_of(model);
    if start.zero_mask_entries != round_count(config.original_sparsity, n) {
        return Err(Error::Input(format!(
            "model sparsity {} does not match original_sparsity {}",
            start.sparsity, config.original_sparsity
        )));
    }
    let mut reinit_rng = rng.fork(streams::REINIT);
    let mut unlearn_rng = rng.fork(streams::UNLEARN);
    let mut m = model.clone();
    let mut trace = UnpruneTrace::default();
    let (ua, ta) = scores(&m, dataset, split, test)?;
    trace.records.push(IterationRecord { iteration: 0, sparsity: start.sparsity, ua, ta, grown: Vec::new() });

    for t in 1..=config.iterations {
        reinit_pruned(&mut m, config.init_strategy, config.random_init_std, &mut reinit_rng);
        unlearn_dense(&mut m, dataset, split, &config.unlearn, &mut unlearn_rng)?;
        let grown = grow_mask(&mut m, config.grow_per_iter)?;
        m.apply_mask();
        let (ua, ta) = scores(&m, dataset, split, test)?;
        trace.records.push(IterationRecord { iteration: t, sparsity: sparsity_of(&m).sparsity, ua, ta, grown });
    }

    prune_magnitude(&mut m, config.original_sparsity, PruneScope::Global)?;
    let (ua, ta) = scores(&m, dataset, split, test)?;
    trace.final_sparsity = sparsity_of(&m).sparsity;
    trace.final_ua = ua;
    trace.final_ta = ta;
    Ok((m, trace))
}

/// Structured un-pruning over hidden neurons. `original_sparsity` and
/// `grow_per_iter` are fractions of hidden neurons; the final re-prune is
/// [`prune_structured_l2`] at `original_sparsity`. Trace sparsities are
/// pruned-neuron fractions; grown entries are flattened neuron indices.
pub fn unprune_structured<T: Scalar>(
    model: &MaskedModel<T>,
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    config: &UnpruneConfig,
    test: Option<&Dataset<T>>,
    rng: &SeededRng,
) -> Result<(MaskedModel<T>, UnpruneTrace)> {
    let h = hidden_units(model);
    config.validate(h)?;
    let neuron_sparsity = |m: &MaskedModel<T>| {
        crate::prune::neuron_mask(m).iter().filter(|&&alive| !alive).count() as f64 / h as f64
    };
    let flat_unit = |m: &MaskedModel<T>, l: usize, u: usize| -> usize {
        hidden_layers(m).take_while(|&k| k < l).map(|k| m.layers[k].out_dim).sum::<usize>() + u
    };
    let mut reinit_rng = rng.fork(streams::REINIT);
    let mut unlearn_rng = rng.fork(streams::UNLEARN);
    let mut m = model.clone();
    let mut trace = UnpruneTrace::default();
    let (ua, ta) = scores(&m, dataset, split, test)?;
    trace.records.push(IterationRecord { iteration: 0, sparsity: neuron_sparsity(&m), ua, ta, grown: Vec::new() });

    for t in 1..=config.iterations {
        reinit_pruned(&mut m, config.init_strategy, config.random_init_std, &mut reinit_rng);
        unlearn_dense(&mut m, dataset, split, &config.unlearn, &mut unlearn_rng)?;
        let grown = grow_mask_structured(&mut m, config.grow_per_iter)?;
        m.apply_mask();
        let grown = grown.iter().map(|&(l, u)| flat_unit(&m, l, u)).collect();
        let (ua, ta) = scores(&m, dataset, split, test)?;
        trace.records.push(IterationRecord { iteration: t, sparsity: neuron_sparsity(&m), ua, ta, grown });
    }

    prune_structured_l2(&mut m, config.original_sparsity)?;
    let (ua, ta) = scores(&m, dataset, split, test)?;
    trace.final_sparsity = neuron_sparsity(&m);
    trace.final_ua = ua;
    trace.final_ta = ta;
    Ok((m, trace))
}
