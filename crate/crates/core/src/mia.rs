//! Membership-inference attacks used as an unlearning check, and the
//! shadow-ratio sweep that exposes how easily their verdict moves.
//!
//! Five per-sample channels are computed from the softmax output: the
//! correctness bit, the max confidence, the prediction entropy, the modified
//! (label-aware) entropy and the true-class probability. Each channel gets its
//! own one-dimensional attacker fit on a stratified held-in half of the attack
//! set. A channel's headline score is the fraction of held-out members the
//! attacker flags as members; balanced held-out accuracy is reported beside it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MaskedModel;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::softmax;
use crate::train::argmax;

/// Floor inside logarithms so saturated probabilities stay finite.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaFeatures {
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub entropy: f64,
    pub m_entropy: f64,
    pub probability: f64,
    pub correct: bool,
}

/// Features of one softmax output `probs` with true label `label`.
pub fn features_from_probs(probs: &[f64], label: usize) -> MiaFeatures {
    let ln = |p: f64| p.max(LOG_FLOOR).ln();
    let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    let py = probs[label];
    let m_entropy = -(1.0 - py) * ln(py)
        - probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, &p)| p * ln(1.0 - p))
            .sum::<f64>();
    MiaFeatures {
        probs: probs.to_vec(),
        confidence: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        entropy,
        m_entropy,
        probability: py,
        correct: argmax(probs) == label,
    }
}

pub fn mia_features<T: Scalar>(model: &MaskedModel<T>, dataset: &Dataset<T>, rows: &[usize]) -> Result<Vec<MiaFeatures>> {
    if rows.is_empty() {
        return Err(Error::Input("membership features need at least one row".into()));
    }
    let (x, y) = dataset.batch(rows)?;
    let probs = softmax(&model.forward(&x)?)?;
    Ok((0..rows.len())
        .map(|i| {
            let p: Vec<f64> = probs.row(i).iter().map(|v| v.as_f64()).collect();
            features_from_probs(&p, y[i])
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Correctness,
    Confidence,
    Entropy,
    MEntropy,
    Probability,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Correctness,
        Channel::Confidence,
        Channel::Entropy,
        Channel::MEntropy,
        Channel::Probability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Correctness => "correctness",
            Channel::Confidence => "confidence",
            Channel::Entropy => "entropy",
            Channel::MEntropy => "m_entropy",
            Channel::Probability => "probability",
        }
    }

    /// Channel value oriented so that larger means "more member-like".
    pub fn score(self, f: &MiaFeatures) -> f64 {
        match self {
            Channel::Correctness => f64::from(u8::from(f.correct)),
            Channel::Confidence => f.confidence,
            Channel::Entropy => -f.entropy,
            Channel::MEntropy => -f.m_entropy,
            Channel::Probability => f.probability,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attacker {
    /// Member iff the oriented channel value reaches a fitted threshold.
    #[default]
    Threshold,
    /// One-feature logistic regression, member iff the fitted probability exceeds 1/2.
    Logistic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    #[serde(default)]
    pub attacker: Attacker,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub correctness: f64,
    pub confidence: f64,
    pub entropy: f64,
    pub m_entropy: f64,
    pub probability: f64,
}

impl ChannelScores {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Correctness => self.correctness,
            Channel::Confidence => self.confidence,
            Channel::Entropy => self.entropy,
            Channel::MEntropy => self.m_entropy,
            Channel::Probability => self.probability,
        }
    }

    fn set(&mut self, c: Channel, v: f64) {
        match c {
            Channel::Correctness => self.correctness = v,
            Channel::Confidence => self.confidence = v,
            Channel::Entropy => self.entropy = v,
            Channel::MEntropy => self.m_entropy = v,
            Channel::Probability => self.probability = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub ratio: f64,
    /// Held-out member rate per channel.
    pub scores: ChannelScores,
    /// Held-out balanced attack accuracy per channel.
    pub balanced: ChannelScores,
    pub n_member: usize,
    pub n_nonmember: usize,
    /// Members were drawn with replacement because `ratio` asked for more than exist.
    pub resampled: bool,
}

/// Rows of `dataset` that play one side of the attack set.
#[derive(Clone, Copy, Debug)]
pub struct RowSet<'a, T> {
    pub dataset: &'a Dataset<T>,
    pub rows: &'a [usize],
}

impl<'a, T> RowSet<'a, T> {
    pub fn new(dataset: &'a Dataset<T>, rows: &'a [usize]) -> Self {
        Self { dataset, rows }
    }
}

/// Held-out outcome of one channel's attacker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackOutcome {
    pub member_rate: f64,
    pub balanced: f64,
}

/// Fits the attacker on the held-in values and scores it on the held-out ones.
/// Inputs are oriented channel values; every slice must be nonempty.
pub fn attack(
    attacker: Attacker,
    in_members: &[f64],
    in_nonmembers: &[f64],
    out_members: &[f64],
    out_nonmembers: &[f64],
) -> AttackOutcome {
    let outcome = |flag: &dyn Fn(f64) -> bool| {
        let rate = |vals: &[f64]| vals.iter().filter(|&&v| flag(v)).count() as f64 / vals.len() as f64;
        let tpr = rate(out_members);
        AttackOutcome { member_rate: tpr, balanced: 0.5 * (tpr + 1.0 - rate(out_nonmembers)) }
    };
    match attacker {
        Attacker::Threshold => {
            let mut candidates: Vec<f64> = in_members.iter().chain(in_nonmembers).copied().collect();
            candidates.sort_by(f64::total_cmp);
            candidates.dedup();
            candidates.push(f64::INFINITY);
            let correct = |t: f64| {
                in_members.iter().filter(|&&v| v >= t).count() + in_nonmembers.iter().filter(|&&v| v < t).count()
            };
            let hits: Vec<usize> = candidates.iter().map(|&t| correct(t)).collect();
            let best = *hits.iter().max().expect("candidates nonempty");
            // Accuracy ties are averaged so a perfectly balanced set has no arbitrary winner.
            let tied: Vec<AttackOutcome> = candidates
                .iter()
                .zip(&hits)
                .filter(|&(_, &h)| h == best)
                .map(|(&t, _)| outcome(&|v| v >= t))
                .collect();
            let k = tied.len() as f64;
            AttackOutcome {
                member_rate: tied.iter().map(|o| o.member_rate).sum::<f64>() / k,
                balanced: tied.iter().map(|o| o.balanced).sum::<f64>() / k,
            }
        }
        Attacker::Logistic => {
            let all: Vec<f64> = in_members.iter().chain(in_nonmembers).copied().collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let z = |v: f64| if sd > 0.0 { (v - mean) / sd } else { 0.0 };
            let (mut w, mut b) = (0.0, 0.0);
            for _ in 0..500 {
                let (mut gw, mut gb) = (0.0, 0.0);
                let samples = in_members.iter().map(|&v| (v, 1.0)).chain(in_nonmembers.iter().map(|&v| (v, 0.0)));
                for (v, y) in samples {
                    let x = z(v);
                    let p = 1.0 / (1.0 + (-(w * x + b)).exp());
                    gw += (p - y) * x;
                    gb += p - y;
                }
                w -= 0.5 * gw / n;
                b -= 0.5 * gb / n;
            }
            outcome(&|v| w * z(v) + b > 0.0)
        }
    }
}

/// Attack with `round(ratio × |nonmembers|)` members drawn from `members`.
pub fn mia_evaluate<T: Scalar>(
    model: &MaskedModel<T>,
    members: RowSet<'_, T>,
    nonmembers: RowSet<'_, T>,
    ratio: f64,
    cfg: &MiaConfig,
    rng: &mut SeededRng,
) -> Result<MiaReport> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Input(format!("shadow ratio must be positive, got {ratio}")));
    }
    let fm = mia_features(model, members.dataset, members.rows)?;
    let fn_ = mia_features(model, nonmembers.dataset, nonmembers.rows)?;
    let n_member = (ratio * fn_.len() as f64).round() as usize;
    if n_member < 2 || fn_.len() < 2 {
        return Err(Error::Input(format!(
            "attack set needs at least 2 members and 2 non-members, got {n_member} and {}",
            fn_.len()
        )));
    }
    let resampled = n_member > fm.len();
    let member_ids: Vec<usize> = if resampled {
        (0..n_member).map(|_| rng.below(fm.len())).collect()
    } else {
        let mut ids: Vec<usize> = (0..fm.len()).collect();
        rng.shuffle(&mut ids);
        ids.truncate(n_member);
        ids
    };
    let mut nonmember_ids: Vec<usize> = (0..fn_.len()).collect();
    rng.shuffle(&mut nonmember_ids);
    let (m_in, m_out) = member_ids.split_at(n_member / 2);
    let (n_in, n_out) = nonmember_ids.split_at(fn_.len() / 2);

    let mut scores = ChannelScores::default();
    let mut balanced = ChannelScores::default();
    for c in Channel::ALL {
        let vals = |feats: &[MiaFeatures], ids: &[usize]| -> Vec<f64> { ids.iter().map(|&i| c.score(&feats[i])).collect() };
        let o = attack(cfg.attacker, &vals(&fm, m_in), &vals(&fn_, n_in), &vals(&fm, m_out), &vals(&fn_, n_out));
        scores.set(c, o.member_rate);
        balanced.set(c, o.balanced);
    }
    Ok(MiaReport { ratio, scores, balanced, n_member, n_nonmember: fn_.len(), resampled })
}

/// `lo, lo+step, …` up to `hi` inclusive, rounded to 1e-9 to absorb float drift.
pub fn ratio_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && lo > 0.0 && hi >= lo) {
        return Err(Error::Input(format!("bad ratio grid {lo}..{hi} step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// One report per ratio. Each point draws from a stream keyed by its ratio, so
/// a ratio's report does not depend on which other ratios are swept.
pub fn ratio_sweep<T: Scalar>(
    model: &MaskedModel<T>,
    members: RowSet<'_, T>,
    nonmembers: RowSet<'_, T>,
    ratios: &[f64],
    cfg: &MiaConfig,
    rng: &SeededRng,
) -> Result<Vec<MiaReport>> {
    if ratios.is_empty() {
        return Err(Error::Input("ratio sweep needs at least one ratio".into()));
    }
    ratios
        .par_iter()
        .map(|&r| mia_evaluate(model, members, nonmembers, r, cfg, &mut rng.fork(r.to_bits())))
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "ratio,correctness,confidence,entropy,m_entropy,probability";

pub fn sweep_csv(reports: &[MiaReport]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in reports {
        let s = &r.scores;
        out.push_str(&format!(
            "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.ratio, s.correctness, s.confidence, s.entropy, s.m_entropy, s.probability
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split_delete};
    use crate::model::{init_model, mlp_specs};
    use crate::train::{train_sgd, TrainConfig};
    use proptest::prelude::*;

    #[test]
    fn uniform_softmax_has_entropy_ln_c() {
        for c in [2usize, 3, 10] {
            let f = features_from_probs(&vec![1.0 / c as f64; c], 0);
            assert!((f.entropy - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_m_entropy() {
        let f = features_from_probs(&[1.0 - 1e-9, 1e-9], 0);
        assert!(f.m_entropy < 1e-7, "{}", f.m_entropy);
        assert!(f.correct);
        let wrong = features_from_probs(&[1.0 - 1e-9, 1e-9], 1);
        assert!(wrong.m_entropy > 10.0 && !wrong.correct);
    }

    #[test]
    fn saturated_probabilities_stay_finite() {
        let f = features_from_probs(&[1.0, 0.0, 0.0], 1);
        assert!(f.m_entropy.is_finite() && f.entropy == 0.0);
    }

    #[test]
    fn zero_weight_model_gives_uniform_features() {
        let data = gen_blobs::<f64>(&mut SeededRng::new(1), 5, 3, 2, 1.0).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 4, 3]), &mut SeededRng::new(1)).unwrap();
        m.weights.iter_mut().for_each(|w| w.data_mut().fill(0.0));
        let f = mia_features(&m, &data, &[0, 7]).unwrap();
        assert!((f[0].entropy - 3f64.ln()).abs() < 1e-12);
        assert_eq!(f[0], mia_features(&m, &data, &[0]).unwrap()[0]);
        assert!(mia_features(&m, &data, &[]).is_err());
    }

    /// Well-separated blobs: every member and non-member is classified
    /// correctly, so the correctness channel carries no membership signal.
    fn perfect_setup() -> (Dataset<f64>, Dataset<f64>, Vec<usize>, MaskedModel<f64>) {
        let train = gen_blobs::<f64>(&mut SeededRng::new(11), 200, 2, 2, 0.5).unwrap();
        let test = gen_blobs::<f64>(&mut SeededRng::new(12), 50, 2, 2, 0.5).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 16, 2]), &mut SeededRng::new(3)).unwrap();
        let cfg = TrainConfig { epochs: 20, lr: 0.1, batch_size: 16 };
        train_sgd(&mut m, &train, &train.all_indices(), &cfg, &mut SeededRng::new(4)).unwrap();
        let forget = split_delete(&train, 0.25, &mut SeededRng::new(5)).unwrap().forget_indices;
        (train, test, forget, m)
    }

    #[test]
    fn balanced_ratio_on_a_perfect_model_is_a_coin_flip() {
        let (train, test, forget, m) = perfect_setup();
        let all = test.all_indices();
        let r = mia_evaluate(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), 1.0, &MiaConfig::default(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(r.scores.correctness, 0.5);
        assert_eq!(r.n_member, 100);
        assert!(!r.resampled);
    }

    #[test]
    fn small_ratio_shifts_flip_the_verdict() {
        let (train, test, forget, m) = perfect_setup();
        let all = test.all_indices();
        let sweep = ratio_sweep(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), &[0.9, 1.1], &MiaConfig::default(), &SeededRng::new(1)).unwrap();
        assert_eq!(sweep[0].scores.correctness, 0.0);
        assert_eq!(sweep[1].scores.correctness, 1.0);
    }

    #[test]
    fn oversized_ratio_resamples_with_replacement() {
        let (train, test, forget, m) = perfect_setup();
        let all = test.all_indices();
        let r = mia_evaluate(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), 1.5, &MiaConfig::default(), &mut SeededRng::new(1)).unwrap();
        assert!(r.resampled);
        assert_eq!(r.n_member, 150);
    }

    #[test]
    fn sweep_is_deterministic_and_ratio_keyed() {
        let (train, test, forget, m) = perfect_setup();
        let all = test.all_indices();
        let (mem, non) = (RowSet::new(&train, &forget), RowSet::new(&test, &all));
        let grid = ratio_grid(0.8, 1.2, 0.05).unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[4], 1.0);
        let a = ratio_sweep(&m, mem, non, &grid, &MiaConfig::default(), &SeededRng::new(9)).unwrap();
        let b = ratio_sweep(&m, mem, non, &grid, &MiaConfig::default(), &SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        let single = ratio_sweep(&m, mem, non, &[1.0], &MiaConfig::default(), &SeededRng::new(9)).unwrap();
        assert_eq!(single[0], a[4]);
        let csv = sweep_csv(&a);
        assert!(csv.starts_with("ratio,correctness,confidence,entropy,m_entropy,probability\n0.8000,"));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn degenerate_attack_sets_are_rejected() {
        let (train, test, forget, m) = perfect_setup();
        let one = [0usize];
        let all = test.all_indices();
        let cfg = MiaConfig::default();
        let mut rng = SeededRng::new(1);
        assert!(mia_evaluate(&m, RowSet::new(&train, &forget), RowSet::new(&test, &one), 1.0, &cfg, &mut rng).is_err());
        assert!(mia_evaluate(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), 0.001, &cfg, &mut rng).is_err());
        assert!(mia_evaluate(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), -1.0, &cfg, &mut rng).is_err());
        assert!(ratio_sweep(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), &[], &cfg, &SeededRng::new(1)).is_err());
    }

    #[test]
    fn logistic_attacker_follows_the_majority_on_a_flat_channel() {
        let (train, test, forget, m) = perfect_setup();
        let all = test.all_indices();
        let cfg = MiaConfig { attacker: Attacker::Logistic };
        let sweep = ratio_sweep(&m, RowSet::new(&train, &forget), RowSet::new(&test, &all), &[0.9, 1.1], &cfg, &SeededRng::new(1)).unwrap();
        assert_eq!(sweep[0].scores.correctness, 0.0);
        assert_eq!(sweep[1].scores.correctness, 1.0);
    }

    #[test]
    fn separable_channel_is_detected() {
        let mem = [0.9, 0.95, 0.99, 0.97];
        let non = [0.1, 0.2, 0.15, 0.3];
        for a in [Attacker::Threshold, Attacker::Logistic] {
            let o = attack(a, &mem, &non, &mem, &non);
            assert_eq!((o.member_rate, o.balanced), (1.0, 1.0), "{a:?}");
        }
    }

    #[test]
    fn permuted_membership_labels_score_at_chance() {
        // Overfit model: members are distinguishable, but shuffled labels are not.
        // Member rate is not at chance here: a near-constant channel flags whichever
        // side the held-in half happens to favour.
        let data = gen_blobs::<f64>(&mut SeededRng::new(2), 60, 2, 2, 1.5).unwrap();
        let test = gen_blobs::<f64>(&mut SeededRng::new(3), 60, 2, 2, 1.5).unwrap();
        let mut m = init_model::<f64>(&mlp_specs(&[2, 32, 2]), &mut SeededRng::new(3)).unwrap();
        train_sgd(&mut m, &data, &data.all_indices(), &TrainConfig { epochs: 300, lr: 0.1, batch_size: 8 }, &mut SeededRng::new(4)).unwrap();
        let pooled: Vec<MiaFeatures> = [mia_features(&m, &data, &data.all_indices()).unwrap(), mia_features(&m, &test, &test.all_indices()).unwrap()].concat();
        let half = pooled.len() / 2;
        for c in Channel::ALL {
            let mut bal = 0.0;
            for seed in 0..20 {
                let mut ids: Vec<usize> = (0..pooled.len()).collect();
                SeededRng::new(seed).shuffle(&mut ids);
                let v = |s: &[usize]| -> Vec<f64> { s.iter().map(|&i| c.score(&pooled[i])).collect() };
                let (mem, non) = ids.split_at(half);
                let (mi, mo) = mem.split_at(half / 2);
                let (ni, no) = non.split_at(half / 2);
                let o = attack(Attacker::Threshold, &v(mi), &v(ni), &v(mo), &v(no));
                bal += o.balanced / 20.0;
            }
            assert!((bal - 0.5).abs() <= 0.1, "{c:?} balanced {bal}");
        }
    }

    proptest! {
        #[test]
        fn scores_are_bounded(
            mi in prop::collection::vec(-5.0f64..5.0, 1..20),
            ni in prop::collection::vec(-5.0f64..5.0, 1..20),
            mo in prop::collection::vec(-5.0f64..5.0, 1..20),
            no in prop::collection::vec(-5.0f64..5.0, 1..20),
            logistic in any::<bool>(),
        ) {
            let a = if logistic { Attacker::Logistic } else { Attacker::Threshold };
            let o = attack(a, &mi, &ni, &mo, &no);
            prop_assert!((0.0..=1.0).contains(&o.member_rate));
            prop_assert!((0.0..=1.0).contains(&o.balanced));
        }
    }
}
