//! Approximate unlearning methods that can be plugged into the un-pruning loop.
//!
//! All methods update every parameter whose mask entry is one; masked entries
//! receive zero gradient (and no Fisher noise), so calling a method on a
//! pruned model without first re-initializing and unmasking leaves the
//! pruned entries untouched.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DeletionSplit};
use crate::error::{Error, Result};
use crate::model::{GradientSet, MaskedModel};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Added to Fisher diagonals before inverting them.
pub const FISHER_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    GradientAscent,
    FisherForgetting,
    Finetune,
    Noop,
}

impl UnlearnMethod {
    pub const ALL: [UnlearnMethod; 4] = [
        UnlearnMethod::GradientAscent,
        UnlearnMethod::FisherForgetting,
        UnlearnMethod::Finetune,
        UnlearnMethod::Noop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnlearnMethod::GradientAscent => "gradient_ascent",
            UnlearnMethod::FisherForgetting => "fisher_forgetting",
            UnlearnMethod::Finetune => "finetune",
            UnlearnMethod::Noop => "noop",
        }
    }
}

impl fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnlearnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown unlearning method '{s}'")))
    }
}

/// Which rows the Fisher diagonal is estimated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FisherSource {
    #[default]
    Retain,
    Forget,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub fisher_noise_scale: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub fisher_source: FisherSource,
}

fn default_batch_size() -> usize {
    64
}

impl UnlearnConfig {
    pub fn noop() -> Self {
        Self {
            method: UnlearnMethod::Noop,
            steps: 0,
            rate: 0.0,
            fisher_noise_scale: 0.0,
            batch_size: default_batch_size(),
            fisher_source: FisherSource::Retain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == UnlearnMethod::Noop {
            return Ok(());
        }
        if self.method != UnlearnMethod::FisherForgetting {
            if !(self.rate > 0.0 && self.rate.is_finite()) {
                return Err(Error::Config(format!("{}: rate must be positive, got {}", self.method, self.rate)));
            }
            if self.steps == 0 {
                return Err(Error::Config(format!("{}: steps must be at least 1", self.method)));
            }
        }
        if !(self.fisher_noise_scale >= 0.0 && self.fisher_noise_scale.is_finite()) {
            return Err(Error::Config("fisher_noise_scale must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Runs the configured method on `model` in place.
pub fn unlearn<T: Scalar>(
    model: &mut MaskedModel<T>,
    split: &DeletionSplit,
    dataset: &Dataset<T>,
    config: &UnlearnConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    config.validate()?;
    match config.method {
        UnlearnMethod::Noop => Ok(()),
        UnlearnMethod::GradientAscent => {
            unlearn_gradient_ascent(model, dataset, &split.forget_indices, config.steps, config.rate)
        }
        UnlearnMethod::FisherForgetting => unlearn_fisher_forgetting(
            model,
            dataset,
            split,
            config.fisher_noise_scale,
            config.fisher_source,
            rng,
        ),
        UnlearnMethod::Finetune => unlearn_finetune(
            model,
            dataset,
            &split.retain_indices,
            config.steps,
            config.rate,
            config.batch_size,
            rng,
        ),
    }
}

/// Full-batch gradient ascent on the forget rows: `Θ ← Θ + η∇l(Θ; D_f)`.
pub fn unlearn_gradient_ascent<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    forget_rows: &[usize],
    steps: usize,
    rate: f64,
) -> Result<()> {
    if steps == 0 || rate == 0.0 {
        return Ok(());
    }
    let (x, y) = dataset.batch(forget_rows)?;
    let rate = T::lit(rate);
    for step in 0..steps {
        let (loss, grads) = model
            .backward(&x, &y)
            .map_err(|e| Error::Numeric(format!("gradient ascent step {step}: {e}")))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("gradient ascent step {step}: loss is not finite")));
        }
        model
            .step(&grads, rate)
            .map_err(|e| Error::Numeric(format!("gradient ascent step {step}: {e}")))?;
    }
    Ok(())
}

/// Diagonal empirical Fisher: the mean over `rows` of squared per-sample
/// gradients. Per-sample gradients are computed in parallel and reduced in
/// row order.
pub fn fisher_diag<T: Scalar>(model: &MaskedModel<T>, dataset: &Dataset<T>, rows: &[usize]) -> Result<GradientSet<T>> {
    if rows.is_empty() {
        return Err(Error::Input("Fisher estimate needs at least one row".into()));
    }
    const CHUNK: usize = 32;
    let partials: Vec<GradientSet<T>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = GradientSet::zeros_like(model);
            for &r in chunk {
                let (x, y) = dataset.batch(&[r])?;
                let (_, g) = model.backward(&x, &y)?;
                acc.add_squared_scaled(&g, T::one());
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(model);
    for p in &partials {
        total.add_scaled(p, T::one());
    }
    let inv = T::one() / T::from_usize_lossy(rows.len());
    let mut out = GradientSet::zeros_like(model);
    out.add_scaled(&total, inv);
    Ok(out)
}

/// Fisher forgetting: every unmasked parameter receives Gaussian noise with
/// variance `σ² / (F_ii + ε)`, so parameters the retained data depends on
/// move least.
pub fn unlearn_fisher_forgetting<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    split: &DeletionSplit,
    sigma: f64,
    source: FisherSource,
    rng: &mut SeededRng,
) -> Result<()> {
    if sigma < 0.0 {
        return Err(Error::Input(format!("noise scale must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let rows: Vec<usize> = match source {
        FisherSource::Retain => split.retain_indices.clone(),
        FisherSource::Forget => split.forget_indices.clone(),
        FisherSource::All => dataset.all_indices(),
    };
    let fisher = fisher_diag(model, dataset, &rows)?;
    let noise = fisher_noise(model, &fisher, sigma, rng);
    model.step(&noise, T::one())
}

/// One draw of the Fisher-scaled noise; masked entries get zero.
pub fn fisher_noise<T: Scalar>(model: &MaskedModel<T>, fisher: &GradientSet<T>, sigma: f64, rng: &mut SeededRng) -> GradientSet<T> {
    let mut noise = GradientSet::zeros_like(model);
    let draw = |f: T, m: T, rng: &mut SeededRng| -> T {
        if m == T::zero() {
            return T::zero();
        }
        let std = sigma / (f.as_f64() + FISHER_EPS).sqrt();
        T::lit(std * rng.standard_normal())
    };
    for l in 0..model.num_layers() {
        for ((n, &f), &m) in noise.weights[l]
            .data_mut()
            .iter_mut()
            .zip(fisher.weights[l].data())
            .zip(model.masks[l].data())
        {
            *n = draw(f, m, rng);
        }
        for ((n, &f), &m) in noise.biases[l]
            .data_mut()
            .iter_mut()
            .zip(fisher.biases[l].data())
            .zip(model.bias_masks[l].data())
        {
            *n = draw(f, m, rng);
        }
    }
    noise
}

/// SGD descent on the retain rows for `steps` minibatch steps. Batches are
/// drawn from successive shuffles of the retain set.
pub fn unlearn_finetune<T: Scalar>(
    model: &mut MaskedModel<T>,
    dataset: &Dataset<T>,
    retain_rows: &[usize],
    steps: usize,
    rate: f64,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if retain_rows.is_empty() {
        return Err(Error::Input("fine-tuning needs retain rows".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let rate = T::lit(rate);
    let mut order = retain_rows.to_vec();
    let mut cursor = order.len();
    for step in 0..steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        let (x, y) = dataset.batch(&order[cursor..end])?;
        cursor = end;
        let (_, grads) = model
            .backward(&x, &y)
            .map_err(|e| Error::Numeric(format!("fine-tune step {step}: {e}")))?;
        model
            .step(&grads, -rate)
            .map_err(|e| Error::Numeric(format!("fine-tune step {step}: {e}")))?;
    }
    Ok(())
}
