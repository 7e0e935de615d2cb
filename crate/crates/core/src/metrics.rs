//! Mask similarity (IoM, UoM, IoU), the masked-weight KL divergence, and
//! the un-pruning error-bound proxy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, MaskedModel};
use crate::scalar::Scalar;

/// Variance floor applied to degenerate Gaussian fits.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Two kept-entry masks over the same universe of `N` parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    mask_u: Vec<bool>,
    mask_r: Vec<bool>,
}

impl MaskPair {
    pub fn new(mask_u: Vec<bool>, mask_r: Vec<bool>) -> Result<Self> {
        if mask_u.len() != mask_r.len() {
            return Err(Error::Input(format!(
                "mask lengths differ: {} vs {}",
                mask_u.len(),
                mask_r.len()
            )));
        }
        if mask_u.is_empty() {
            return Err(Error::Input("masks are empty".into()));
        }
        Ok(Self { mask_u, mask_r })
    }

    /// Weight masks of two congruent models.
    pub fn from_models<T: Scalar>(u: &MaskedModel<T>, r: &MaskedModel<T>) -> Result<Self> {
        Self::new(u.flat_mask(), r.flat_mask())
    }

    pub fn len(&self) -> usize {
        self.mask_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_u.is_empty()
    }

    pub fn mask_u(&self) -> &[bool] {
        &self.mask_u
    }

    pub fn mask_r(&self) -> &[bool] {
        &self.mask_r
    }

    /// `(intersection, union)` counts.
    pub fn counts(&self) -> (usize, usize) {
        self.mask_u.iter().zip(&self.mask_r).fold((0, 0), |(i, u), (&a, &b)| {
            (i + usize::from(a && b), u + usize::from(a || b))
        })
    }
}

pub fn iom(pair: &MaskPair) -> f64 {
    pair.counts().0 as f64 / pair.len() as f64
}

pub fn uom(pair: &MaskPair) -> f64 {
    pair.counts().1 as f64 / pair.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Iou {
    Value(f64),
    /// Both masks are all-zero.
    EmptyUnion,
}

impl Iou {
    pub fn value(self) -> Option<f64> {
        match self {
            Iou::Value(v) => Some(v),
            Iou::EmptyUnion => None,
        }
    }
}

pub fn iou(pair: &MaskPair) -> Iou {
    match pair.counts() {
        (_, 0) => Iou::EmptyUnion,
        (i, u) => Iou::Value(i as f64 / u as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Closed-form KL between per-layer Gaussian fits.
    #[default]
    Gaussian,
    /// Discrete KL between per-layer histograms on shared bins.
    Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    /// Set when a variance floor (or histogram smoothing) was needed.
    pub floored: bool,
}

/// Population mean and variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `KL(N(μa, va) ‖ N(μb, vb))`.
pub fn gaussian_kl(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> f64 {
    let d = mean_a - mean_b;
    0.5 * (var_b / var_a).ln() + (var_a + d * d) / (2.0 * var_b) - 0.5
}

const HISTOGRAM_BINS: usize = 64;
const HISTOGRAM_SMOOTHING: f64 = 1e-10;

fn histogram_kl(a: &[f64], b: &[f64]) -> (f64, bool) {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; HISTOGRAM_BINS];
        for &x in v {
            let bin = if width > 0.0 { (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
            h[bin] += 1.0;
        }
        let n = v.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (p, q) = (hist(a), hist(b));
    let mut smoothed = false;
    let kl = p
        .iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let qi = if qi > 0.0 {
                qi
            } else {
                smoothed = true;
                HISTOGRAM_SMOOTHING
            };
            pi * (pi / qi).ln()
        })
        .sum::<f64>();
    (kl.max(0.0), smoothed)
}

fn masked_values<T: Scalar>(model: &MaskedModel<T>, layer: usize) -> Vec<f64> {
    model.weights[layer]
        .data()
        .iter()
        .zip(model.masks[layer].data())
        .map(|(&w, &m)| (w * m).as_f64())
        .collect()
}

/// `KL(P(M_u⊙Θ_u) ‖ P(M_r⊙Θ_r))` summed over layers. Each layer's
/// distribution is fitted to all of its masked weight values, zeros included.
pub fn kl_masked_weights<T: Scalar>(
    model_u: &MaskedModel<T>,
    model_r: &MaskedModel<T>,
    estimator: KlEstimator,
) -> Result<KlReport> {
    if model_u.layers != model_r.layers {
        return Err(Error::Shape("KL needs congruent architectures".into()));
    }
    let mut floored = false;
    let per_layer: Vec<f64> = (0..model_u.num_layers())
        .map(|l| {
            let (a, b) = (masked_values(model_u, l), masked_values(model_r, l));
            match estimator {
                KlEstimator::Gaussian => {
                    let (ma, mut va) = mean_var(&a);
                    let (mb, mut vb) = mean_var(&b);
                    for v in [&mut va, &mut vb] {
                        if *v < VARIANCE_FLOOR {
                            *v = VARIANCE_FLOOR;
                            floored = true;
                        }
                    }
                    gaussian_kl(ma, va, mb, vb).max(0.0)
                }
                KlEstimator::Histogram => {
                    let (kl, smoothed) = histogram_kl(&a, &b);
                    floored |= smoothed;
                    kl
                }
            }
        })
        .collect();
    Ok(KlReport { total: per_layer.iter().sum(), per_layer, floored })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProxyReport {
    pub eta: f64,
    pub t: usize,
    pub masked_weight_norm: f64,
    pub lambda_hat: f64,
    pub proxy: f64,
}

/// `η²·t·‖M⊙Θ‖₂·λ̂` with `λ̂ = max(max diagonal Fisher, 1)`.
pub fn bound_proxy<T: Scalar>(model: &MaskedModel<T>, eta: f64, t: usize, fisher: &GradientSet<T>) -> BoundProxyReport {
    let masked_weight_norm = (0..model.num_layers())
        .flat_map(|l| masked_values(model, l))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let lambda_hat = fisher.max_value().as_f64().max(1.0);
    BoundProxyReport {
        eta,
        t,
        masked_weight_norm,
        lambda_hat,
        proxy: eta * eta * t as f64 * masked_weight_norm * lambda_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, mlp_specs};
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn pair(a: &[u8], b: &[u8]) -> MaskPair {
        MaskPair::new(a.iter().map(|&x| x == 1).collect(), b.iter().map(|&x| x == 1).collect()).unwrap()
    }

    #[test]
    fn hand_counts() {
        let p = pair(&[1, 1, 0, 0], &[1, 0, 1, 0]);
        assert_eq!(iom(&p), 0.25);
        assert_eq!(uom(&p), 0.75);
        assert_eq!(iou(&p), Iou::Value(1.0 / 3.0));
    }

    #[test]
    fn degenerate_cases() {
        let ones = pair(&[1; 6], &[1; 6]);
        assert_eq!((iom(&ones), uom(&ones), iou(&ones)), (1.0, 1.0, Iou::Value(1.0)));
        let disjoint = pair(&[1, 1, 0, 0], &[0, 0, 1, 1]);
        assert_eq!(iom(&disjoint), 0.0);
        assert_eq!(uom(&disjoint), 1.0);
        let half = pair(&[1, 0, 1, 0], &[1, 0, 1, 0]);
        assert_eq!(uom(&half), 0.5);
        assert_eq!(iou(&pair(&[0; 4], &[0; 4])), Iou::EmptyUnion);
        assert!(MaskPair::new(vec![true], vec![true, false]).is_err());
    }

    fn mask_pairs() -> impl Strategy<Value = MaskPair> {
        (1usize..200).prop_flat_map(|n| {
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
                .prop_map(|(a, b)| MaskPair::new(a, b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identities(p in mask_pairs()) {
            let (i, u) = (iom(&p), uom(&p));
            prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&u));
            prop_assert!(i <= u);
            match iou(&p) {
                Iou::Value(v) => {
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!((v * u - i).abs() < 1e-12);
                    prop_assert_eq!(v == 1.0, p.mask_u() == p.mask_r());
                }
                Iou::EmptyUnion => prop_assert!(p.mask_u().iter().chain(p.mask_r()).all(|&b| !b)),
            }
        }

        #[test]
        fn symmetric(p in mask_pairs()) {
            let q = MaskPair::new(p.mask_r().to_vec(), p.mask_u().to_vec()).unwrap();
            prop_assert_eq!(iom(&p), iom(&q));
            prop_assert_eq!(uom(&p), uom(&q));
            prop_assert_eq!(iou(&p), iou(&q));
        }

        #[test]
        fn permutation_equivariant(p in mask_pairs(), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..p.len()).collect();
            SeededRng::new(seed).shuffle(&mut perm);
            let q = MaskPair::new(
                perm.iter().map(|&i| p.mask_u()[i]).collect(),
                perm.iter().map(|&i| p.mask_r()[i]).collect(),
            ).unwrap();
            prop_assert_eq!(iom(&p), iom(&q));
            prop_assert_eq!(uom(&p), uom(&q));
            prop_assert_eq!(iou(&p), iou(&q));
        }
    }

    #[test]
    fn kl_of_model_with_itself_is_zero() {
        let m = init_model::<f64>(&mlp_specs(&[3, 7, 2]), &mut SeededRng::new(1)).unwrap();
        for est in [KlEstimator::Gaussian, KlEstimator::Histogram] {
            let r = kl_masked_weights(&m, &m, est).unwrap();
            assert_eq!(r.total, 0.0);
            assert!(!r.floored);
        }
    }

    #[test]
    fn kl_is_asymmetric_and_nonnegative() {
        let a = init_model::<f64>(&mlp_specs(&[3, 7, 2]), &mut SeededRng::new(1)).unwrap();
        let mut b = init_model::<f64>(&mlp_specs(&[3, 7, 2]), &mut SeededRng::new(2)).unwrap();
        b.weights[0] = b.weights[0].map(|v| 3.0 * v + 0.2);
        let ab = kl_masked_weights(&a, &b, KlEstimator::Gaussian).unwrap().total;
        let ba = kl_masked_weights(&b, &a, KlEstimator::Gaussian).unwrap().total;
        assert!(ab >= 0.0 && ba >= 0.0);
        assert!((ab - ba).abs() > 1e-6);
    }

    #[test]
    fn closed_form_shift_by_one_is_half() {
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        // Layers with exact fits N(0,1) and N(1,1): values ±1 and 0, 2.
        let mut a = init_model::<f64>(&mlp_specs(&[2, 1, 1]), &mut SeededRng::new(1)).unwrap();
        let mut b = a.clone();
        a.weights[0] = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        b.weights[0] = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        a.weights[1] = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        b.weights[1] = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let r = kl_masked_weights(&a, &b, KlEstimator::Gaussian).unwrap();
        assert!((r.per_layer[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.per_layer[1], 0.0);
        assert!(r.floored);
    }

    #[test]
    fn kl_sees_masks() {
        let a = init_model::<f64>(&mlp_specs(&[3, 7, 2]), &mut SeededRng::new(1)).unwrap();
        let mut b = a.clone();
        b.masks[0].data_mut()[0] = 0.0;
        assert!(kl_masked_weights(&a, &b, KlEstimator::Gaussian).unwrap().total > 0.0);
        let c = init_model::<f64>(&mlp_specs(&[3, 8, 2]), &mut SeededRng::new(1)).unwrap();
        assert!(kl_masked_weights(&a, &c, KlEstimator::Gaussian).is_err());
    }

    #[test]
    fn bound_proxy_structure() {
        let m = init_model::<f64>(&mlp_specs(&[3, 7, 2]), &mut SeededRng::new(1)).unwrap();
        let mut fisher = GradientSet::zeros_like(&m);
        assert_eq!(bound_proxy(&m, 0.1, 0, &fisher).proxy, 0.0);
        let one = bound_proxy(&m, 0.1, 1, &fisher);
        assert_eq!(one.lambda_hat, 1.0);
        let three = bound_proxy(&m, 0.1, 3, &fisher);
        assert!((three.proxy / one.proxy - 3.0).abs() < 1e-12);
        let double_eta = bound_proxy(&m, 0.2, 1, &fisher);
        assert!((double_eta.proxy / one.proxy - 4.0).abs() < 1e-12);
        fisher.weights[0].data_mut()[0] = 5.0;
        assert_eq!(bound_proxy(&m, 0.1, 1, &fisher).lambda_hat, 5.0);
    }
}
