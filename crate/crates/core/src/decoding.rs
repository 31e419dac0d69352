//! Prediction sets and sampling: conformal top-q̂ decoding and the vanilla
//! top-p / top-k baselines.
//!
//! Tokens are ranked by descending probability with ties broken by ascending
//! token id. Two set rules are built on that ranking:
//!
//! * [`prediction_set`] (nucleus rule): the shortest prefix whose cumulative
//!   mass reaches `q` (`>=`). When `q` is at least the total mass the set is
//!   the whole support (every token with positive probability). Vanilla top-p
//!   uses it.
//! * [`conformal_set`]: every token whose APS score is `<= q`, i.e. the longest
//!   prefix of whole tie groups whose cumulative mass stays `<= q`, restricted
//!   to the support. The gold token is a member exactly when its score is
//!   `<= q`, which is what the split-conformal coverage band is about. When
//!   even the top token's mass exceeds `q` the set is that single token;
//!   `q = 1` gives the whole support.
//!
//! The nucleus rule includes the gold token for every `q` in
//! `(score - p(gold), score]`, so calibrating it with APS thresholds
//! over-covers; the conformal decoder uses [`conformal_set`].

use serde::Serialize;

use crate::conformal::CalibrationModel;
use crate::error::{Error, Result};
use crate::records::{dense_entropy, DEFAULT_EPS};
use crate::rng::{rng_from_seed, uniform01};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    /// Descending probability, ties by ascending id.
    pub token_ids: Vec<usize>,
    pub cum_mass: f64,
    pub threshold_used: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.token_ids.contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeStep {
    pub chosen_token: usize,
    pub set: PredictionSet,
    pub entropy: f64,
    pub bin: Option<usize>,
    pub qhat_used: f64,
    /// Seed of the generator that drew `chosen_token`.
    pub rng_seed: u64,
}

/// Token ids sorted by descending probability, ties by ascending id.
pub fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_unstable_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::arg("empty distribution"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::arg("probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DEFAULT_EPS {
        return Err(Error::arg(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Smallest high-probability prefix with cumulative mass `>= q`.
pub fn prediction_set(probs: &[f64], q: f64) -> Result<PredictionSet> {
    check_distribution(probs)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::arg(format!("threshold {q} not in (0, 1]")));
    }
    Ok(prediction_set_sorted(probs, &descending_order(probs), q))
}

/// [`prediction_set`] over a precomputed [`descending_order`].
pub(crate) fn prediction_set_sorted(probs: &[f64], order: &[usize], q: f64) -> PredictionSet {
    let mut prefix = Vec::with_capacity(order.len());
    let mut cum = 0.0;
    for &i in order {
        cum += probs[i];
        prefix.push(cum);
    }
    let total = prefix.last().copied().unwrap_or(0.0);
    let len = if q >= total.min(1.0) {
        // whole support
        order
            .iter()
            .rposition(|&i| probs[i] > 0.0)
            .map_or(1, |p| p + 1)
    } else {
        prefix.partition_point(|&c| c < q) + 1
    };
    PredictionSet {
        token_ids: order[..len].to_vec(),
        cum_mass: prefix[len - 1],
        threshold_used: q,
    }
}

/// Tokens whose APS score is at most `q`; never empty.
pub fn conformal_set(probs: &[f64], q: f64) -> Result<PredictionSet> {
    check_distribution(probs)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::arg(format!("threshold {q} not in (0, 1]")));
    }
    Ok(conformal_set_sorted(probs, &descending_order(probs), q))
}

/// [`conformal_set`] over a precomputed [`descending_order`].
///
/// Cumulative sums run in ranking order, the same order
/// [`crate::conformal::aps_score`] sums in, so membership agrees with
/// `score <= q` bit for bit.
pub(crate) fn conformal_set_sorted(probs: &[f64], order: &[usize], q: f64) -> PredictionSet {
    if q >= 1.0 {
        // maximal threshold: the whole support, whatever rounding did to the sums
        let len = order
            .iter()
            .rposition(|&i| probs[i] > 0.0)
            .map_or(1, |p| p + 1);
        return PredictionSet {
            token_ids: order[..len].to_vec(),
            cum_mass: order[..len].iter().fold(0.0, |acc, &i| acc + probs[i]),
            threshold_used: q,
        };
    }
    let mut len = 0;
    let mut mass = 0.0;
    let mut cum = 0.0;
    let mut i = 0;
    while i < order.len() && probs[order[i]] > 0.0 {
        let p = probs[order[i]];
        let mut end = i;
        while end < order.len() && probs[order[end]] == p {
            cum += p;
            end += 1;
        }
        if cum > q {
            break;
        }
        len = end;
        mass = cum;
        i = end;
    }
    if len == 0 {
        // forced singleton
        len = 1;
        mass = probs[order[0]];
    }
    PredictionSet {
        token_ids: order[..len].to_vec(),
        cum_mass: mass,
        threshold_used: q,
    }
}

/// The first `k` tokens of the ranking.
pub fn top_k_set(probs: &[f64], k: usize) -> Result<PredictionSet> {
    check_distribution(probs)?;
    if k < 1 || k > probs.len() {
        return Err(Error::arg(format!("k = {k} not in [1, {}]", probs.len())));
    }
    let order = descending_order(probs);
    let token_ids = order[..k].to_vec();
    let cum_mass = token_ids.iter().fold(0.0, |acc, &i| acc + probs[i]);
    Ok(PredictionSet {
        token_ids,
        cum_mass,
        threshold_used: cum_mass,
    })
}

/// `(token, probability / set mass)` for every member of the set.
pub fn renormalized(probs: &[f64], set: &PredictionSet) -> Vec<(usize, f64)> {
    let mass = set_mass(probs, set);
    set.token_ids
        .iter()
        .map(|&i| (i, if mass > 0.0 { probs[i] / mass } else { 0.0 }))
        .collect()
}

fn set_mass(probs: &[f64], set: &PredictionSet) -> f64 {
    set.token_ids.iter().fold(0.0, |acc, &i| acc + probs[i])
}

/// Draws a member of `set` with probability `probs[i] / mass(set)`.
///
/// One uniform draw `u` from a ChaCha8 stream keyed by `seed` is scaled by
/// the set mass and located in the running sum over the set's members.
pub fn sample_from_set(probs: &[f64], set: &PredictionSet, seed: u64) -> usize {
    let mut rng = rng_from_seed(seed);
    let target = uniform01(&mut rng) * set_mass(probs, set);
    let mut cum = 0.0;
    for &i in &set.token_ids {
        cum += probs[i];
        if target < cum {
            return i;
        }
    }
    // Rounding left the target at the very top: return the last member that
    // carries mass.
    set.token_ids
        .iter()
        .rev()
        .copied()
        .find(|&i| probs[i] > 0.0)
        .unwrap_or(set.token_ids[0])
}

/// Entropy → bin → q̂ → conformal set → sample.
pub fn conformal_decode_step(
    probs: &[f64],
    model: &CalibrationModel,
    seed: u64,
) -> Result<DecodeStep> {
    if probs.len() != model.vocab_size {
        return Err(Error::arg(format!(
            "distribution has {} entries, model vocab is {}",
            probs.len(),
            model.vocab_size
        )));
    }
    check_distribution(probs)?;
    let entropy = dense_entropy(probs);
    let (bin, qhat) = model.threshold_for(entropy);
    let set = conformal_set_sorted(probs, &descending_order(probs), qhat);
    Ok(DecodeStep {
        chosen_token: sample_from_set(probs, &set, seed),
        set,
        entropy,
        bin,
        qhat_used: qhat,
        rng_seed: seed,
    })
}

pub fn vanilla_top_p_step(probs: &[f64], p: f64, seed: u64) -> Result<DecodeStep> {
    let set = prediction_set(probs, p)?;
    Ok(DecodeStep {
        chosen_token: sample_from_set(probs, &set, seed),
        set,
        entropy: dense_entropy(probs),
        bin: None,
        qhat_used: p,
        rng_seed: seed,
    })
}

/// Top-k step; `qhat_used` reports the mass the k tokens cover.
pub fn vanilla_top_k_step(probs: &[f64], k: usize, seed: u64) -> Result<DecodeStep> {
    let set = top_k_set(probs, k)?;
    Ok(DecodeStep {
        chosen_token: sample_from_set(probs, &set, seed),
        qhat_used: set.cum_mass,
        set,
        entropy: dense_entropy(probs),
        bin: None,
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{fit_global, Mode};
    use crate::records::{Dataset, DistributionRecord};
    use std::collections::BTreeMap;

    const P: [f64; 3] = [0.5, 0.3, 0.2];

    #[test]
    fn prediction_set_examples() {
        let s = prediction_set(&P, 0.8).unwrap();
        assert_eq!(s.token_ids, vec![0, 1]);
        assert!((s.cum_mass - 0.8).abs() < 1e-12);
        assert_eq!(prediction_set(&P, 0.5).unwrap().token_ids, vec![0]);
        assert_eq!(prediction_set(&P, 1.0).unwrap().token_ids, vec![0, 1, 2]);
        assert_eq!(
            prediction_set(&[0.95, 0.05], 0.9).unwrap().token_ids,
            vec![0]
        );
    }

    #[test]
    fn prediction_set_rejects_bad_threshold() {
        assert!(prediction_set(&P, 0.0).is_err());
        assert!(prediction_set(&P, 1.01).is_err());
        assert!(prediction_set(&P, f64::NAN).is_err());
        assert!(prediction_set(&[0.5, 0.3], 0.5).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let s = prediction_set(&[0.2, 0.4, 0.4], 0.4).unwrap();
        assert_eq!(s.token_ids, vec![1]);
        let s = prediction_set(&[0.2, 0.4, 0.4], 0.5).unwrap();
        assert_eq!(s.token_ids, vec![1, 2]);
    }

    #[test]
    fn full_threshold_stops_at_support() {
        let s = prediction_set(&[0.0, 1.0, 0.0], 1.0).unwrap();
        assert_eq!(s.token_ids, vec![1]);
        let s = prediction_set(&[0.5, 0.0, 0.5], 1.0).unwrap();
        assert_eq!(s.token_ids, vec![0, 2]);
    }

    #[test]
    fn conformal_set_examples() {
        assert_eq!(conformal_set(&P, 0.8).unwrap().token_ids, vec![0, 1]);
        assert_eq!(conformal_set(&P, 0.5).unwrap().token_ids, vec![0]);
        assert_eq!(conformal_set(&P, 1.0).unwrap().token_ids, vec![0, 1, 2]);
        // top token alone exceeds q: forced singleton
        assert_eq!(
            conformal_set(&[0.95, 0.05], 0.9).unwrap().token_ids,
            vec![0]
        );
        // score of token 1 is 0.8 > 0.7, so the set stops after token 0
        assert_eq!(conformal_set(&P, 0.7).unwrap().token_ids, vec![0]);
        assert_eq!(prediction_set(&P, 0.7).unwrap().token_ids, vec![0, 1]);
        // tie groups enter together
        assert_eq!(
            conformal_set(&[0.4, 0.4, 0.2], 0.5).unwrap().token_ids,
            vec![0]
        );
        assert_eq!(
            conformal_set(&[0.4, 0.4, 0.2], 0.8).unwrap().token_ids,
            vec![0, 1]
        );
        // zero-probability tokens never enter
        assert_eq!(
            conformal_set(&[0.0, 1.0, 0.0], 1.0).unwrap().token_ids,
            vec![1]
        );
    }

    #[test]
    fn singleton_always_sampled() {
        let s = prediction_set(&[0.95, 0.05], 0.9).unwrap();
        for seed in 0..100 {
            assert_eq!(sample_from_set(&[0.95, 0.05], &s, seed), 0);
        }
    }

    #[test]
    fn renormalized_frequency() {
        let s = prediction_set(&P, 0.8).unwrap();
        let draws = 100_000u64;
        let zeros = (0..draws)
            .filter(|&i| sample_from_set(&P, &s, i) == 0)
            .count();
        let freq = zeros as f64 / draws as f64;
        assert!((freq - 0.625).abs() < 0.01, "{freq}");
    }

    #[test]
    fn same_seed_same_token() {
        let s = prediction_set(&P, 1.0).unwrap();
        let a = sample_from_set(&P, &s, 1234);
        for _ in 0..10 {
            assert_eq!(sample_from_set(&P, &s, 1234), a);
        }
    }

    #[test]
    fn top_k_examples() {
        let step = vanilla_top_k_step(&[0.3, 0.3, 0.4], 1, 0).unwrap();
        assert_eq!(step.chosen_token, 2);
        let step = vanilla_top_k_step(&[0.4, 0.4, 0.2], 1, 0).unwrap();
        assert_eq!(step.chosen_token, 0);
        assert!(vanilla_top_k_step(&P, 0, 0).is_err());
        assert!(vanilla_top_k_step(&P, 4, 0).is_err());
        let full = vanilla_top_k_step(&P, 3, 9).unwrap();
        assert_eq!(full.set.token_ids, vec![0, 1, 2]);
    }

    #[test]
    fn top_p_example() {
        let step = vanilla_top_p_step(&P, 0.9, 0).unwrap();
        assert_eq!(step.set.token_ids, vec![0, 1, 2]);
        assert_eq!(step.qhat_used, 0.9);
    }

    fn global_model(qhat: f64, vocab: usize) -> CalibrationModel {
        CalibrationModel {
            alpha: 0.1,
            mode: Mode::Global,
            bin_edges: vec![],
            qhats: vec![qhat],
            n_per_bin: vec![1],
            vocab_size: vocab,
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn maximal_threshold_is_pure_sampling() {
        let model = global_model(1.0, 3);
        let step = conformal_decode_step(&P, &model, 5).unwrap();
        assert_eq!(step.set.token_ids, vec![0, 1, 2]);
        assert!((step.set.cum_mass - 1.0).abs() < 1e-12);
        assert_eq!(step.bin, None);
        let pure = PredictionSet {
            token_ids: vec![0, 1, 2],
            cum_mass: 1.0,
            threshold_used: 1.0,
        };
        for seed in 0..200 {
            let s = conformal_decode_step(&P, &model, seed).unwrap();
            assert_eq!(s.chosen_token, sample_from_set(&P, &pure, seed));
        }
    }

    #[test]
    fn one_hot_binned_decode() {
        let model = CalibrationModel {
            alpha: 0.1,
            mode: Mode::EntropyBinned,
            bin_edges: vec![0.5, 1.0],
            qhats: vec![1.0, 0.95, 0.9],
            n_per_bin: vec![3, 3, 3],
            vocab_size: 4,
            meta: BTreeMap::new(),
        };
        let step = conformal_decode_step(&[0.0, 0.0, 1.0, 0.0], &model, 1).unwrap();
        assert_eq!(step.entropy, 0.0);
        assert_eq!(step.bin, Some(0));
        assert_eq!(step.set.token_ids, vec![2]);
        assert_eq!(step.chosen_token, 2);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let ds = Dataset::new(vec![DistributionRecord::dense(0, 0, 0, vec![0.5, 0.5])]).unwrap();
        let model = fit_global(&ds, 0.1).unwrap();
        assert!(conformal_decode_step(&P, &model, 0).is_err());
    }
}
