//! Split-conformal calibration of top-p thresholds.
//!
//! The conformity score of a record is its APS score: the total probability
//! of every token at least as probable as the gold token. The fitted threshold
//! q̂ is the `⌈(n+1)(1-α)⌉`-th smallest calibration score, so the top-q̂
//! prediction set of a fresh exchangeable record contains its gold token with
//! probability in `[1-α, 1-α + 1/(n+1)]`.
//!
//! The entropy-binned variant partitions calibration records at entropy
//! percentiles and fits one q̂ per bin.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};
use crate::records::{validate_record, Body, Dataset, DistributionRecord};

/// Slack absorbed when turning `(n+1)(1-α)` into an integer rank, so values
/// such as `1000 * 0.9` that land a rounding error above an integer keep the
/// integer rank.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "binned")]
    EntropyBinned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub alpha: f64,
    pub mode: Mode,
    /// `B - 1` upper bin edges in nats; bin `b` holds entropies in
    /// `(edge[b-1], edge[b]]`, the last bin everything above.
    pub bin_edges: Vec<f64>,
    pub qhats: Vec<f64>,
    pub n_per_bin: Vec<u64>,
    #[serde(rename = "vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl CalibrationModel {
    pub fn num_bins(&self) -> usize {
        self.qhats.len()
    }

    /// Number of calibration records the model was fitted on.
    pub fn n_calibration(&self) -> u64 {
        self.n_per_bin.iter().sum()
    }

    /// Bin (`None` for global models) and threshold used for a distribution
    /// with the given entropy.
    pub fn threshold_for(&self, entropy: f64) -> (Option<usize>, f64) {
        match self.mode {
            Mode::Global => (None, self.qhats[0]),
            Mode::EntropyBinned => {
                let b = bin_index(&self.bin_edges, entropy);
                (Some(b), self.qhats[b])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} not in (0, 1)", self.alpha));
        }
        if self.vocab_size == 0 {
            return bad("vocab is 0".into());
        }
        let b = self.qhats.len();
        if b == 0 {
            return bad("no thresholds".into());
        }
        if self.n_per_bin.len() != b || self.bin_edges.len() + 1 != b {
            return bad(format!(
                "{} qhats, {} counts, {} edges",
                b,
                self.n_per_bin.len(),
                self.bin_edges.len()
            ));
        }
        if self.mode == Mode::Global && b != 1 {
            return bad("global model must have exactly one bin".into());
        }
        if self.bin_edges.iter().any(|e| !e.is_finite())
            || self.bin_edges.windows(2).any(|w| w[0] > w[1])
        {
            return bad("bin edges must be finite and nondecreasing".into());
        }
        if let Some(q) = self.qhats.iter().find(|&&q| !(q > 0.0 && q <= 1.0)) {
            return bad(format!("qhat {q} not in (0, 1]"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: CalibrationModel = read_json(path.as_ref())?;
        model.validate()?;
        Ok(model)
    }
}

/// A record paired with its conformity score and entropy.
#[derive(Debug, Clone, Copy)]
pub struct ScoredRecord<'a> {
    pub record: &'a DistributionRecord,
    pub score: f64,
    pub entropy: f64,
}

impl<'a> ScoredRecord<'a> {
    pub(crate) fn new(record: &'a DistributionRecord) -> Self {
        ScoredRecord {
            record,
            score: aps_score_unchecked(record),
            entropy: record.entropy_unchecked(),
        }
    }
}

/// APS conformity score of a valid record.
///
/// Sum of all probabilities `>= p(gold)`, ties included. Probabilities are
/// accumulated in the same order [`crate::prediction_set`] uses, which makes
/// `gold ∈ prediction_set(probs, score)` hold exactly in floating point.
///
/// Sparse records are scored conservatively: a gold token outside the listed
/// ids scores 1.0, and the tail contributes only when its per-token share is
/// at least the gold probability.
pub fn aps_score(r: &DistributionRecord) -> Result<f64> {
    let v = validate_record(r);
    if !v.is_empty() {
        return Err(Error::InvalidRecord(v));
    }
    Ok(aps_score_unchecked(r))
}

pub(crate) fn aps_score_unchecked(r: &DistributionRecord) -> f64 {
    match &r.body {
        Body::Dense { probs } => dense_aps_score(probs, r.gold),
        Body::Sparse {
            ids,
            probs,
            tail_mass,
        } => {
            let Some(slot) = ids.iter().position(|&id| id == r.gold) else {
                return 1.0;
            };
            let gold_p = probs[slot];
            let mut score = listed_mass_at_least(ids, probs, gold_p);
            if ids.len() < r.vocab_size && r.tail_share() >= gold_p {
                score += tail_mass;
            }
            score
        }
    }
}

/// APS score of a dense distribution.
pub fn dense_aps_score(probs: &[f64], gold: usize) -> f64 {
    let gold_p = probs[gold];
    let mut top: Vec<(usize, f64)> = probs
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, p)| p >= gold_p)
        .collect();
    sort_desc(&mut top);
    top.iter().fold(0.0, |acc, &(_, p)| acc + p)
}

fn listed_mass_at_least(ids: &[usize], probs: &[f64], gold_p: f64) -> f64 {
    let mut top: Vec<(usize, f64)> = ids
        .iter()
        .copied()
        .zip(probs.iter().copied())
        .filter(|&(_, p)| p >= gold_p)
        .collect();
    sort_desc(&mut top);
    top.iter().fold(0.0, |acc, &(_, p)| acc + p)
}

fn sort_desc(v: &mut [(usize, f64)]) {
    v.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Rank `⌈(n+1)(1-α)⌉`, at least 1.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    ((x - RANK_SLACK).ceil() as usize).max(1)
}

/// The `⌈(n+1)(1-α)⌉`-th smallest score, or 1.0 when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("no calibration scores"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::arg(format!("non-finite score {s}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, alpha))
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let r = conformal_rank(sorted.len(), alpha);
    if r > sorted.len() {
        1.0
    } else {
        // Scores may overshoot 1 by rounding; thresholds live in (0, 1].
        sorted[r - 1].min(1.0)
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha {alpha} not in (0, 1)")))
    }
}

/// Scores and entropies of every record, in dataset order.
pub fn score_dataset(ds: &Dataset) -> Vec<ScoredRecord<'_>> {
    ds.records().par_iter().map(ScoredRecord::new).collect()
}

/// Single global threshold over all records.
pub fn fit_global(ds: &Dataset, alpha: f64) -> Result<CalibrationModel> {
    check_alpha(alpha)?;
    let vocab_size = ds.require_non_empty()?;
    let scores: Vec<f64> = ds.records().par_iter().map(aps_score_unchecked).collect();
    Ok(CalibrationModel {
        alpha,
        mode: Mode::Global,
        bin_edges: Vec::new(),
        qhats: vec![conformal_quantile(&scores, alpha)?],
        n_per_bin: vec![scores.len() as u64],
        vocab_size,
        meta: BTreeMap::new(),
    })
}

/// Nearest-rank percentile edges splitting `sorted` into `num_bins` groups.
///
/// Edge `b` (for `b = 1..num_bins`) is the `⌈b·n/num_bins⌉`-th smallest value.
pub fn percentile_edges(sorted: &[f64], num_bins: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..num_bins)
        .map(|b| {
            let rank = (b * n).div_ceil(num_bins).max(1);
            sorted[rank - 1]
        })
        .collect()
}

/// First bin whose upper edge is `>= entropy`; the last bin otherwise.
pub fn bin_index(edges: &[f64], entropy: f64) -> usize {
    edges.partition_point(|&e| e < entropy)
}

/// One threshold per entropy-percentile bin.
///
/// `num_bins == 1` returns the global fit, field for field.
pub fn fit_binned(ds: &Dataset, alpha: f64, num_bins: usize) -> Result<CalibrationModel> {
    check_alpha(alpha)?;
    let vocab_size = ds.require_non_empty()?;
    if num_bins == 0 {
        return Err(Error::arg("num_bins must be at least 1"));
    }
    if num_bins > ds.len() {
        return Err(Error::arg(format!(
            "num_bins {num_bins} exceeds the {} calibration records",
            ds.len()
        )));
    }
    if num_bins == 1 {
        return fit_global(ds, alpha);
    }

    let scored = score_dataset(ds);
    let mut entropies: Vec<f64> = scored.iter().map(|s| s.entropy).collect();
    entropies.sort_unstable_by(f64::total_cmp);
    let bin_edges = percentile_edges(&entropies, num_bins);

    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); num_bins];
    for s in &scored {
        per_bin[bin_index(&bin_edges, s.entropy)].push(s.score);
    }

    let mut qhats: Vec<Option<f64>> = Vec::with_capacity(num_bins);
    for scores in &mut per_bin {
        if scores.is_empty() {
            qhats.push(None);
        } else {
            scores.sort_unstable_by(f64::total_cmp);
            qhats.push(Some(quantile_of_sorted(scores, alpha)));
        }
    }
    let qhats = inherit_empty(&qhats)?;

    Ok(CalibrationModel {
        alpha,
        mode: Mode::EntropyBinned,
        bin_edges,
        qhats,
        n_per_bin: per_bin.iter().map(|s| s.len() as u64).collect(),
        vocab_size,
        meta: BTreeMap::new(),
    })
}

/// Empty bins take the threshold of the nearest non-empty lower bin (or the
/// nearest upper one when no lower bin is populated).
fn inherit_empty(qhats: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(qhats.len());
    let mut last = None;
    for q in qhats {
        last = q.or(last);
        out.push(last);
    }
    let first_populated = qhats
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::Internal("every bin is empty".into()))?;
    Ok(out
        .into_iter()
        .map(|q| q.unwrap_or(first_populated))
        .collect())
}

/// Bin of `entropy` under a binned model.
pub fn bin_of(model: &CalibrationModel, entropy: f64) -> Result<usize> {
    match model.mode {
        Mode::Global => Err(Error::arg("bin_of requires an entropy-binned model")),
        Mode::EntropyBinned => Ok(bin_index(&model.bin_edges, entropy)),
    }
}

/// Tolerance used when comparing a sparse record scored directly with its
/// dense expansion.
pub const DENSE_SPARSE_TOL: f64 = 1e-12;
