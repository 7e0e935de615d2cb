//! Masked multilayer perceptron.
//!
//! Effective parameters are always `weights ⊙ masks`. Biases carry their own
//! mask, which is all ones except for neurons removed by structured pruning;
//! sparsity accounting counts weight entries only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{matmul_a_bt, matmul, matmul_at_b, softmax_cross_entropy, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// ReLU MLP specs for a width chain such as `[2, 64, 32, 2]`.
pub fn mlp_specs(widths: &[usize]) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i + 1 == n { Activation::None } else { Activation::Relu },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel<T> {
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
    pub bias_masks: Vec<Tensor<T>>,
    pub init_snapshot: Vec<Tensor<T>>,
    pub seed: u64,
}

/// Gradients (or any per-parameter quantity) congruent with a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &MaskedModel<T>) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: model.biases.iter().map(|b| Tensor::zeros(b.shape())).collect(),
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.weights.iter().chain(self.biases.iter())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    /// `self += scale · other ⊙ other`.
    pub fn add_squared_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y * y;
            }
        }
    }

    pub fn sum_squares(&self) -> T {
        self.tensors().map(Tensor::sum_squares).sum()
    }

    pub fn max_value(&self) -> T {
        self.tensors()
            .flat_map(|t| t.data().iter().copied())
            .fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

/// Activations kept from a forward pass for backpropagation.
struct ForwardCache<T> {
    /// Input to each layer (`inputs[0]` is the batch).
    inputs: Vec<Tensor<T>>,
    /// Pre-activations of each layer; the last one is the logits.
    pre: Vec<Tensor<T>>,
}

/// Builds a model with Kaiming-uniform weights (`U(±√(6/fan_in))`), zero
/// biases, all-ones masks and an initialization snapshot equal to the weights.
pub fn init_model<T: Scalar>(specs: &[LayerSpec], rng: &mut SeededRng) -> Result<MaskedModel<T>> {
    if specs.is_empty() {
        return Err(Error::Input("model needs at least one layer".into()));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Input(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    if specs.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
        return Err(Error::Input("layer dimensions must be positive".into()));
    }
    if specs.last().map(|s| s.activation) != Some(Activation::None) {
        return Err(Error::Input("last layer must emit raw logits (activation none)".into()));
    }
    let mut weights = Vec::with_capacity(specs.len());
    for s in specs {
        let bound = (6.0 / s.in_dim as f64).sqrt();
        let data = (0..s.in_dim * s.out_dim)
            .map(|_| T::lit(rng.uniform_range(-bound, bound)))
            .collect();
        weights.push(Tensor::new(vec![s.out_dim, s.in_dim], data)?);
    }
    Ok(MaskedModel {
        layers: specs.to_vec(),
        biases: specs.iter().map(|s| Tensor::zeros(&[s.out_dim])).collect(),
        masks: weights.iter().map(|w| Tensor::ones(w.shape())).collect(),
        bias_masks: specs.iter().map(|s| Tensor::ones(&[s.out_dim])).collect(),
        init_snapshot: weights.clone(),
        weights,
        seed: rng.seed(),
    })
}

impl<T: Scalar> MaskedModel<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Total number of weight entries `N` (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Width chain, e.g. `[2, 64, 32, 2]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    /// Weights ⊙ masks.
    pub fn effective_weights(&self, layer: usize) -> Tensor<T> {
        self.weights[layer]
            .hadamard(&self.masks[layer])
            .expect("weights and masks are congruent")
    }

    pub fn effective_bias(&self, layer: usize) -> Tensor<T> {
        self.biases[layer]
            .hadamard(&self.bias_masks[layer])
            .expect("biases and bias masks are congruent")
    }

    /// All masks concatenated in layer order.
    pub fn flat_mask(&self) -> Vec<bool> {
        self.masks
            .iter()
            .flat_map(|m| m.data().iter().map(|&v| v != T::zero()))
            .collect()
    }

    /// Maps a flat weight index to `(layer, offset)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (l, w) in self.weights.iter().enumerate() {
            if flat < w.len() {
                return (l, flat);
            }
            flat -= w.len();
        }
        panic!("flat weight index out of range");
    }

    /// Same model with every weight and bias mask set to one.
    pub fn unmasked(&self) -> Self {
        let mut dense = self.clone();
        dense.masks = self.masks.iter().map(|m| Tensor::ones(m.shape())).collect();
        dense.bias_masks = self.bias_masks.iter().map(|m| Tensor::ones(m.shape())).collect();
        dense
    }

    pub fn check_congruent(&self) -> Result<()> {
        let n = self.layers.len();
        if [self.weights.len(), self.biases.len(), self.masks.len(), self.bias_masks.len(), self.init_snapshot.len()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(Error::Shape("per-layer tensor counts disagree".into()));
        }
        for (l, s) in self.layers.iter().enumerate() {
            let ws = [s.out_dim, s.in_dim];
            if self.weights[l].shape() != ws || self.masks[l].shape() != ws || self.init_snapshot[l].shape() != ws {
                return Err(Error::Shape(format!("layer {l} weight/mask/init shapes disagree")));
            }
            if self.biases[l].shape() != [s.out_dim] || self.bias_masks[l].shape() != [s.out_dim] {
                return Err(Error::Shape(format!("layer {l} bias shapes disagree")));
            }
            let binary = |t: &Tensor<T>| t.data().iter().all(|&v| v == T::zero() || v == T::one());
            if !binary(&self.masks[l]) || !binary(&self.bias_masks[l]) {
                return Err(Error::Input(format!("layer {l} mask is not binary")));
            }
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: &Tensor<T>) -> Result<ForwardCache<T>> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match model input dim {}",
                inputs.shape(),
                self.input_dim()
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.clone();
        for (l, spec) in self.layers.iter().enumerate() {
            let mut z = matmul_a_bt(&x, &self.effective_weights(l))?;
            let b = self.effective_bias(l);
            let out = spec.out_dim;
            for row in z.data_mut().chunks_mut(out) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            let next = match spec.activation {
                Activation::Relu => z.map(|v| v.max(T::zero())),
                Activation::None => z.clone(),
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            x = next;
        }
        Ok(cache)
    }

    /// Logits `b × classes`.
    pub fn forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cache = self.forward_cached(inputs)?;
        Ok(cache.pre.pop().expect("at least one layer"))
    }

    /// Mean cross-entropy and its gradient with respect to the raw weights and
    /// biases. Masked entries get exactly zero gradient.
    pub fn backward(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, GradientSet<T>)> {
        let (loss, grads, _) = self.backward_with_logits(inputs, labels)?;
        Ok((loss, grads))
    }

    /// [`Self::backward`] that also hands back the logits of the forward pass.
    pub fn backward_with_logits(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, GradientSet<T>, Tensor<T>)> {
        let cache = self.forward_cached(inputs)?;
        let logits = cache.pre.last().expect("at least one layer");
        let (loss, mut delta) = softmax_cross_entropy(logits, labels)?;
        let n = self.layers.len();
        let mut gw = vec![None; n];
        let mut gb = vec![None; n];
        for l in (0..n).rev() {
            let mut dw = matmul_at_b(&delta, &cache.inputs[l])?;
            for (g, &m) in dw.data_mut().iter_mut().zip(self.masks[l].data()) {
                *g *= m;
            }
            let out = self.layers[l].out_dim;
            let mut db = vec![T::zero(); out];
            for row in delta.data().chunks(out) {
                for (acc, &d) in db.iter_mut().zip(row) {
                    *acc += d;
                }
            }
            for (g, &m) in db.iter_mut().zip(self.bias_masks[l].data()) {
                *g *= m;
            }
            if l > 0 {
                let mut upstream = matmul(&delta, &self.effective_weights(l))?;
                if self.layers[l - 1].activation == Activation::Relu {
                    for (u, &z) in upstream.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                        if z <= T::zero() {
                            *u = T::zero();
                        }
                    }
                }
                delta = upstream;
            }
            gw[l] = Some(dw);
            gb[l] = Some(Tensor::new(vec![out], db)?);
        }
        let logits = cache.pre.into_iter().last().expect("at least one layer");
        Ok((
            loss,
            GradientSet {
                weights: gw.into_iter().map(|g| g.expect("filled")).collect(),
                biases: gb.into_iter().map(|g| g.expect("filled")).collect(),
            },
            logits,
        ))
    }

    /// Mean loss only.
    pub fn loss(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward(inputs)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// Hard-zeroes masked weights and biases: `Θ ← Θ ⊙ M`.
    pub fn apply_mask(&mut self) {
        for (w, m) in self.weights.iter_mut().zip(&self.masks) {
            for (x, &k) in w.data_mut().iter_mut().zip(m.data()) {
                *x *= k;
            }
        }
        for (b, m) in self.biases.iter_mut().zip(&self.bias_masks) {
            for (x, &k) in b.data_mut().iter_mut().zip(m.data()) {
                *x *= k;
            }
        }
    }

    /// `Θ += scale · g`, then checks that every parameter stayed finite.
    pub fn step(&mut self, grads: &GradientSet<T>, scale: T) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (x, &d) in w.data_mut().iter_mut().zip(g.data()) {
                *x += scale * d;
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (x, &d) in b.data_mut().iter_mut().zip(g.data()) {
                *x += scale * d;
            }
        }
        if self.weights.iter().chain(&self.biases).all(Tensor::is_finite) {
            Ok(())
        } else {
            Err(Error::Numeric("parameter update produced a non-finite value".into()))
        }
    }
}

/// Free-function form of [`MaskedModel::forward`].
pub fn forward<T: Scalar>(model: &MaskedModel<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(inputs)
}

/// Free-function form of [`MaskedModel::backward`].
pub fn backward<T: Scalar>(model: &MaskedModel<T>, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, GradientSet<T>)> {
    model.backward(inputs, labels)
}

/// Returns a copy with `Θ ← Θ ⊙ M` applied.
pub fn apply_mask<T: Scalar>(model: &MaskedModel<T>) -> MaskedModel<T> {
    let mut m = model.clone();
    m.apply_mask();
    m
}
