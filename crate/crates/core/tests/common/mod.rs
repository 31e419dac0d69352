//! Generators and brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use conformal_decode::rng::{rng_from_seed, uniform01, Rng64};
use conformal_decode::synth::sample_dirichlet;
use rand::Rng;

/// Random dense distribution from one of several shapes: Dirichlet with a
/// random concentration, softmax of scaled normal logits, or a quantized
/// distribution with ties and exact zeros.
pub fn fuzz_distribution(rng: &mut Rng64) -> Vec<f64> {
    let k = rng.random_range(2..=120);
    match rng.random_range(0..3) {
        0 => {
            let conc = 0.02 + 4.0 * uniform01(rng);
            sample_dirichlet(k, conc, rng)
        }
        1 => {
            let scale = 0.1 + 8.0 * uniform01(rng);
            let logits: Vec<f64> = (0..k).map(|_| scale * normal(rng)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        }
        _ => {
            let levels = rng.random_range(1..=5u32);
            let mut w: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0..=levels) as f64)
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                w[0] = 1.0;
            }
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        }
    }
}

fn normal(rng: &mut Rng64) -> f64 {
    let u1 = uniform01(rng).max(f64::MIN_POSITIVE);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Token drawn uniformly from the support of `probs`.
pub fn support_token(probs: &[f64], rng: &mut Rng64) -> usize {
    let support: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    support[rng.random_range(0..support.len())]
}

/// Fuzzed dense record `(probs, gold)` with gold in the support.
pub fn fuzz_case(seed: u64) -> (Vec<f64>, usize) {
    let mut rng = rng_from_seed(seed);
    let probs = fuzz_distribution(&mut rng);
    let gold = support_token(&probs, &mut rng);
    (probs, gold)
}

/// Smallest candidate threshold `q` among the scores such that at least
/// `ceil((n+1)(1000-m)/1000)` scores are `<= q`, by exhaustive search.
/// Returns 1.0 when the rank exceeds `n`.
pub fn brute_force_quantile(scores: &[f64], alpha_milli: u64) -> f64 {
    let n = scores.len() as u64;
    let rank = ((n + 1) * (1000 - alpha_milli)).div_ceil(1000).max(1);
    if rank > n {
        return 1.0;
    }
    let mut best = f64::INFINITY;
    for &q in scores {
        let count = scores.iter().filter(|&&s| s <= q).count() as u64;
        if count >= rank && q < best {
            best = q;
        }
    }
    best.min(1.0)
}

/// Sum of all probabilities at least as large as the gold probability.
pub fn brute_force_aps(probs: &[f64], gold: usize) -> f64 {
    let pg = probs[gold];
    probs.iter().filter(|&&p| p >= pg).sum()
}
