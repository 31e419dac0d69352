//! Synthetic worlds with known ground truth.
//!
//! A world draws a *true* next-token distribution, samples the gold token from
//! it, and records a *distorted* copy `normalize(true^(1/τ))`. With `τ = 1` the
//! recorded distributions are perfectly calibrated; `τ < 1` sharpens them
//! (overconfident) and `τ > 1` flattens them (underconfident).
//!
//! * Dirichlet worlds are IID: each record draws its own true distribution from
//!   a symmetric Dirichlet.
//! * Markov worlds emit sequences from an ergodic chain over the vocabulary;
//!   records within a sequence are dependent.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io_util::read_json;
use crate::records::{Dataset, DistributionRecord, Metadata};
use crate::rng::{categorical, derive_seed, rng_from_seed, Rng64};

/// Transition entries are floored to this before renormalizing, which makes
/// every generated chain irreducible and aperiodic.
pub const TRANSITION_FLOOR: f64 = 1e-4;
const MAX_MATRIX_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Dirichlet,
    Markov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    /// Seed for the transition matrix; kept apart from the sequence seed so a
    /// fixed chain can be resampled.
    #[serde(default)]
    pub transition_seed: u64,
    pub seq_len: usize,
    pub num_sequences: usize,
    /// Explicit row-stochastic matrix; overrides the random draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: WorldKind,
    /// Vocabulary size; the number of chain states for Markov worlds.
    pub vocab_size: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_temp")]
    pub distortion_temp: f64,
    /// Record count for Dirichlet worlds.
    #[serde(default = "default_records")]
    pub num_records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov: Option<MarkovSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn default_concentration() -> f64 {
    0.3
}
fn default_temp() -> f64 {
    1.0
}
fn default_records() -> usize {
    10_000
}

impl SynthSpec {
    pub fn dirichlet(
        vocab_size: usize,
        num_records: usize,
        distortion_temp: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            kind: WorldKind::Dirichlet,
            vocab_size,
            concentration: default_concentration(),
            distortion_temp,
            num_records,
            markov: None,
            seed,
        }
    }

    pub fn markov(
        num_states: usize,
        seq_len: usize,
        num_sequences: usize,
        distortion_temp: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            kind: WorldKind::Markov,
            vocab_size: num_states,
            concentration: default_concentration(),
            distortion_temp,
            num_records: 0,
            markov: Some(MarkovSpec {
                transition_seed: seed,
                seq_len,
                num_sequences,
                transition: None,
            }),
            seed,
        }
    }

    pub fn with_concentration(mut self, concentration: f64) -> Self {
        self.concentration = concentration;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: SynthSpec = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }

    /// Whether records are exchangeable.
    pub fn is_iid(&self) -> bool {
        self.kind == WorldKind::Dirichlet
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::arg("vocab_size must be at least 2"));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::arg("concentration must be positive"));
        }
        if !(self.distortion_temp > 0.0 && self.distortion_temp.is_finite()) {
            return Err(Error::arg("distortion_temp must be positive"));
        }
        match (self.kind, &self.markov) {
            (WorldKind::Dirichlet, _) => {
                if self.num_records == 0 {
                    return Err(Error::arg("num_records must be at least 1"));
                }
            }
            (WorldKind::Markov, None) => {
                return Err(Error::arg("markov world needs a `markov` section"))
            }
            (WorldKind::Markov, Some(m)) => {
                if m.seq_len == 0 || m.num_sequences == 0 {
                    return Err(Error::arg("seq_len and num_sequences must be at least 1"));
                }
                if let Some(t) = &m.transition {
                    check_stochastic(t, self.vocab_size)?;
                }
            }
        }
        Ok(())
    }

    fn metadata(&self) -> Metadata {
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), Value::from("synth"));
        if let Ok(Value::Object(spec)) = serde_json::to_value(self) {
            meta.insert("spec".to_string(), Value::Object(spec));
        }
        meta
    }
}

/// Generates the world described by `spec`.
pub fn gen_world(spec: &SynthSpec) -> Result<Dataset> {
    match spec.kind {
        WorldKind::Dirichlet => gen_dirichlet_world(spec),
        WorldKind::Markov => gen_markov_world(spec),
    }
}

/// `normalize(p^(1/τ))`, computed in log space; zeros stay zero.
pub fn distort(probs: &[f64], temp: f64) -> Vec<f64> {
    if temp == 1.0 {
        return probs.to_vec();
    }
    let inv = 1.0 / temp;
    let max_log = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                ((p.ln() - max_log) * inv).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet(k: usize, concentration: f64, rng: &mut Rng64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let z: f64 = v.iter().sum();
        if z > 0.0 && z.is_finite() {
            v.iter_mut().for_each(|x| *x /= z);
            return v;
        }
    }
}

/// IID records; record `i` uses its own derived seed.
pub fn gen_dirichlet_world(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != WorldKind::Dirichlet {
        return Err(Error::arg("expected a dirichlet world"));
    }
    let records: Vec<DistributionRecord> = (0..spec.num_records)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, i as u64));
            let truth = sample_dirichlet(spec.vocab_size, spec.concentration, &mut rng);
            let gold = categorical(&truth, &mut rng);
            DistributionRecord::dense(i as u64, 0, gold, distort(&truth, spec.distortion_temp))
        })
        .collect();
    Ok(Dataset::new(records)?.with_metadata(spec.metadata()))
}

fn check_stochastic(matrix: &[Vec<f64>], n: usize) -> Result<()> {
    if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
        return Err(Error::arg(format!("transition matrix must be {n}x{n}")));
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::arg(format!(
                "transition row {i} has invalid entries"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("transition row {i} sums to {total}")));
        }
    }
    Ok(())
}

/// Irreducible and aperiodic, i.e. some power of the support pattern is all
/// positive. Wielandt's bound `(n-1)^2 + 1` caps the power that needs checking.
pub fn is_primitive(matrix: &[Vec<f64>]) -> bool {
    let n = matrix.len();
    let base: Vec<Vec<bool>> = matrix
        .iter()
        .map(|row| row.iter().map(|&p| p > 0.0).collect())
        .collect();
    let mut power = base.clone();
    let limit = (n - 1) * (n - 1) + 1;
    for _ in 1..limit {
        if power.iter().all(|row| row.iter().all(|&b| b)) {
            return true;
        }
        power = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).any(|m| power[i][m] && base[m][j]))
                    .collect()
            })
            .collect();
    }
    power.iter().all(|row| row.iter().all(|&b| b))
}

/// Dirichlet rows floored at [`TRANSITION_FLOOR`] and renormalized.
pub fn random_transition_matrix(n: usize, concentration: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_from_seed(seed);
    for _ in 0..MAX_MATRIX_ATTEMPTS {
        let matrix: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut row = sample_dirichlet(n, concentration, &mut rng);
                row.iter_mut().for_each(|p| *p = p.max(TRANSITION_FLOOR));
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
                row
            })
            .collect();
        if is_primitive(&matrix) {
            return Ok(matrix);
        }
    }
    Err(Error::Internal(format!(
        "no ergodic transition matrix after {MAX_MATRIX_ATTEMPTS} attempts"
    )))
}

/// Sequences from an ergodic chain. Record `(s, t)` carries the distorted
/// transition row of the current state and the realized next state as gold.
pub fn gen_markov_world(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = match (spec.kind, &spec.markov) {
        (WorldKind::Markov, Some(m)) => m,
        _ => return Err(Error::arg("expected a markov world")),
    };
    let n = spec.vocab_size;
    let matrix = match &m.transition {
        Some(t) => {
            if !is_primitive(t) {
                return Err(Error::arg("transition matrix is not ergodic and aperiodic"));
            }
            t.clone()
        }
        None => random_transition_matrix(n, spec.concentration, m.transition_seed)?,
    };
    let recorded: Vec<Vec<f64>> = matrix
        .iter()
        .map(|row| distort(row, spec.distortion_temp))
        .collect();

    let sequences: Vec<Vec<DistributionRecord>> = (0..m.num_sequences)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, s as u64));
            let mut state = uniform_index(n, &mut rng);
            (0..m.seq_len)
                .map(|t| {
                    let next = categorical(&matrix[state], &mut rng);
                    let r = DistributionRecord::dense(
                        s as u64,
                        t as u64,
                        next,
                        recorded[state].clone(),
                    );
                    state = next;
                    r
                })
                .collect()
        })
        .collect();
    let records = sequences.into_iter().flatten().collect();
    Ok(Dataset::new(records)?.with_metadata(spec.metadata()))
}

fn uniform_index(n: usize, rng: &mut Rng64) -> usize {
    ((crate::rng::uniform01(rng) * n as f64) as usize).min(n - 1)
}

/// Keeps one uniformly chosen record per `seq_id`, ordered by `seq_id`.
pub fn subsample_one_per_sequence(ds: &Dataset, seed: u64) -> Dataset {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records().iter().enumerate() {
        groups.entry(r.seq_id).or_default().push(i);
    }
    let records: Vec<DistributionRecord> = groups
        .into_iter()
        .map(|(seq, idx)| {
            let mut rng = rng_from_seed(derive_seed(seed, seq));
            ds.records()[idx[uniform_index(idx.len(), &mut rng)]].clone()
        })
        .collect();
    Dataset::new(records)
        .expect("subset of a valid dataset is valid")
        .with_metadata(ds.metadata.clone())
}

/// Splits by sequence: the first `ceil(fraction * S)` sequence ids (in
/// ascending order) go to the first dataset.
pub fn split_by_sequence(ds: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("fraction {fraction} not in (0, 1)")));
    }
    let mut seqs: Vec<u64> = ds.records().iter().map(|r| r.seq_id).collect();
    seqs.sort_unstable();
    seqs.dedup();
    let cut = ((seqs.len() as f64 * fraction).ceil() as usize).clamp(1, seqs.len());
    let boundary = seqs[cut - 1];
    let (a, b): (Vec<_>, Vec<_>) = ds
        .records()
        .iter()
        .cloned()
        .partition(|r| r.seq_id <= boundary);
    Ok((Dataset::new(a)?, Dataset::new(b)?))
}

/// Concatenates datasets over one vocabulary, renumbering `seq_id`s so they
/// stay unique: part `j`'s ids are offset past those of parts `0..j`.
pub fn concat_worlds(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for part in parts {
        let max = part.records().iter().map(|r| r.seq_id).max();
        for mut r in part.into_records() {
            r.seq_id += offset;
            records.push(r);
        }
        if let Some(m) = max {
            offset += m + 1;
        }
    }
    Dataset::new(records)
}
