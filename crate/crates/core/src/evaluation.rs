//! Coverage measurement and calibration diagnostics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::conformal::{
    bin_index, check_alpha, fit_binned, fit_global, percentile_edges, CalibrationModel, Mode,
};
use crate::decoding::{conformal_set_sorted, descending_order, prediction_set_sorted};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::records::{Dataset, DistributionRecord};
use crate::rng::derive_seed;
use crate::synth::{gen_world, SynthSpec, WorldKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinCoverage {
    pub bin: usize,
    pub n: usize,
    pub coverage: f64,
    pub qhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub n_test: usize,
    pub coverage: f64,
    /// `1 - alpha`.
    pub target: f64,
    /// `1 - alpha + 1/(n_cal + 1)`.
    pub theorem_upper: f64,
    pub per_bin: Vec<BinCoverage>,
    pub mean_set_size: f64,
    /// `target - coverage`; positive when coverage falls short.
    pub coverage_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Outcome for one record under a threshold.
struct Membership {
    covered: bool,
    set_size: usize,
}

#[derive(Clone, Copy)]
enum SetRule {
    Conformal,
    Nucleus,
}

fn membership(r: &DistributionRecord, q: f64, rule: SetRule) -> Membership {
    let probs = r.dense_probs();
    let order = descending_order(&probs);
    let set = match rule {
        SetRule::Conformal => conformal_set_sorted(&probs, &order, q),
        SetRule::Nucleus => prediction_set_sorted(&probs, &order, q),
    };
    Membership {
        covered: set.contains(r.gold),
        set_size: set.len(),
    }
}

/// Neumaier-compensated sum; deterministic for a fixed input order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Fraction of test records whose gold token lies in the conformal set at the
/// model's threshold for that record's entropy (the set the decoder samples
/// from).
pub fn empirical_coverage(model: &CalibrationModel, test: &Dataset) -> Result<CoverageReport> {
    let vocab = test.require_non_empty()?;
    if vocab != model.vocab_size {
        return Err(Error::arg(format!(
            "test vocab {vocab} differs from model vocab {}",
            model.vocab_size
        )));
    }
    let outcomes: Vec<(usize, Membership)> = test
        .records()
        .par_iter()
        .map(|r| {
            let (bin, q) = model.threshold_for(r.entropy_unchecked());
            (bin.unwrap_or(0), membership(r, q, SetRule::Conformal))
        })
        .collect();

    let b = model.num_bins();
    let mut covered = vec![0usize; b];
    let mut counts = vec![0usize; b];
    let mut set_sizes = 0usize;
    for (bin, m) in &outcomes {
        counts[*bin] += 1;
        covered[*bin] += usize::from(m.covered);
        set_sizes += m.set_size;
    }
    let n_test = outcomes.len();
    let total_covered: usize = covered.iter().sum();
    let coverage = total_covered as f64 / n_test as f64;
    let target = 1.0 - model.alpha;
    let per_bin = (0..b)
        .map(|i| BinCoverage {
            bin: i,
            n: counts[i],
            coverage: if counts[i] == 0 {
                0.0
            } else {
                covered[i] as f64 / counts[i] as f64
            },
            qhat: model.qhats[i],
        })
        .collect();
    Ok(CoverageReport {
        n_test,
        coverage,
        target,
        theorem_upper: target + 1.0 / (model.n_calibration() as f64 + 1.0),
        per_bin,
        mean_set_size: set_sizes as f64 / n_test as f64,
        coverage_gap: target - coverage,
    })
}

/// Entropy-percentile bins of `ds` itself: `(edges, bin per record)`.
fn own_bins(ds: &Dataset, num_bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    ds.require_non_empty()?;
    if num_bins == 0 || num_bins > ds.len() {
        return Err(Error::arg(format!(
            "num_bins {num_bins} must be in [1, {}]",
            ds.len()
        )));
    }
    let entropies: Vec<f64> = ds
        .records()
        .par_iter()
        .map(|r| r.entropy_unchecked())
        .collect();
    let mut sorted = entropies.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let edges = percentile_edges(&sorted, num_bins);
    let bins = entropies.iter().map(|&e| bin_index(&edges, e)).collect();
    Ok((edges, bins))
}

fn percentile_midpoint(bin: usize, num_bins: usize) -> f64 {
    100.0 * (bin as f64 + 0.5) / num_bins as f64
}

/// Per entropy-percentile bin, the fraction of records whose gold token is in
/// the fixed top-`p` set. Bins are computed on `test`; empty bins are skipped.
/// `x` is the bin's percentile midpoint in `[0, 100]`.
pub fn effective_confidence_curve(
    p: f64,
    test: &Dataset,
    num_bins: usize,
) -> Result<Vec<CurvePoint>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::arg(format!("p = {p} not in (0, 1]")));
    }
    let (_, bins) = own_bins(test, num_bins)?;
    let hits: Vec<bool> = test
        .records()
        .par_iter()
        .map(|r| membership(r, p, SetRule::Nucleus).covered)
        .collect();
    let mut covered = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (&b, &hit) in bins.iter().zip(&hits) {
        counts[b] += 1;
        covered[b] += usize::from(hit);
    }
    let series = format!("top_p={p}");
    Ok((0..num_bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| CurvePoint {
            x: percentile_midpoint(b, num_bins),
            y: covered[b] as f64 / counts[b] as f64,
            series: series.clone(),
        })
        .collect())
}

/// `(1 - α, q̂)` for every α; one series per bin when binned.
///
/// Series are named `global` or `bin<b>`. Points are grouped by series, in
/// the order of `alphas` within each.
pub fn qhat_curve(
    cal: &Dataset,
    alphas: &[f64],
    mode: Mode,
    num_bins: usize,
) -> Result<Vec<CurvePoint>> {
    if alphas.is_empty() {
        return Err(Error::arg("no alphas given"));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let fits: Vec<CalibrationModel> = alphas
        .iter()
        .map(|&a| match mode {
            Mode::Global => fit_global(cal, a),
            Mode::EntropyBinned => fit_binned(cal, a, num_bins),
        })
        .collect::<Result<_>>()?;
    let series_count = fits[0].num_bins();
    let mut out = Vec::with_capacity(series_count * alphas.len());
    for b in 0..series_count {
        let series = if fits[0].mode == Mode::Global {
            "global".to_string()
        } else {
            format!("bin{b}")
        };
        for (m, &a) in fits.iter().zip(alphas) {
            out.push(CurvePoint {
                x: 1.0 - a,
                y: m.qhats[b],
                series: series.clone(),
            });
        }
    }
    Ok(out)
}

/// Writes `x,y,series` CSV with a header row.
pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    write_atomic(path, |w| write_curve_csv_to(points, w))
}

pub fn write_curve_csv_to<W: Write>(points: &[CurvePoint], w: &mut W) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(w, "x,y,series").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{}", p.x, p.y, p.series).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandCheck {
    pub pass: bool,
    /// False for dependent (Markov) worlds, where the band is not guaranteed.
    pub guaranteed: bool,
    pub label: String,
    pub trials: usize,
    pub alpha: f64,
    pub n_cal: usize,
    pub n_test: usize,
    pub mean_coverage: f64,
    pub std_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub lower: f64,
    pub upper: f64,
    pub delta: f64,
    pub mean_qhat: f64,
    /// `1 - alpha - mean_coverage`.
    pub coverage_gap: f64,
}

/// World of exactly `n` records drawn with `seed`; the chain of a Markov world
/// stays fixed (its transition seed is untouched).
fn sized_world(world: &SynthSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut spec = world.clone().with_seed(seed);
    match spec.kind {
        WorldKind::Dirichlet => {
            spec.num_records = n;
            gen_world(&spec)
        }
        WorldKind::Markov => {
            let m = spec
                .markov
                .as_mut()
                .ok_or_else(|| Error::arg("markov world needs a `markov` section"))?;
            m.num_sequences = n.div_ceil(m.seq_len.max(1));
            let ds = gen_world(&spec)?;
            let records: Vec<_> = ds.into_records().into_iter().take(n).collect();
            Dataset::new(records)
        }
    }
}

/// Monte Carlo check of the finite-sample coverage band.
///
/// Each trial draws a fresh calibration set of `n_cal` records and a fresh
/// test set of `n_test` records, fits a global q̂ and measures coverage. The
/// check passes when the mean coverage lies in
/// `[1-α - δ, 1-α + 1/(n_cal+1) + δ]` where δ is three standard errors of the
/// mean: test-set sampling noise plus the spread of the fitted threshold
/// across calibration draws,
/// `δ = 3·sqrt(ᾱ(1-ᾱ)/(trials·n_test) + ᾱ(1-ᾱ)/(trials·(n_cal+2)))`
/// with ᾱ the observed miscoverage.
pub fn theorem_band_check(
    world: &SynthSpec,
    alpha: f64,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    seed: u64,
) -> Result<BandCheck> {
    check_alpha(alpha)?;
    world.validate()?;
    if n_cal == 0 || n_test == 0 || trials == 0 {
        return Err(Error::arg("n_cal, n_test and trials must be positive"));
    }
    let per_trial: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let cal = sized_world(world, n_cal, derive_seed(seed, 2 * t))?;
            let test = sized_world(world, n_test, derive_seed(seed, 2 * t + 1))?;
            let model = fit_global(&cal, alpha)?;
            let report = empirical_coverage(&model, &test)?;
            Ok((report.coverage, model.qhats[0]))
        })
        .collect::<Result<_>>()?;

    let k = trials as f64;
    let mean = compensated_sum(per_trial.iter().map(|c| c.0)) / k;
    let mean_qhat = compensated_sum(per_trial.iter().map(|c| c.1)) / k;
    let var = if trials > 1 {
        compensated_sum(per_trial.iter().map(|c| (c.0 - mean).powi(2))) / (k - 1.0)
    } else {
        0.0
    };
    let miss = (1.0 - mean).clamp(0.0, 1.0);
    let delta = 3.0
        * (miss * (1.0 - miss) / (k * n_test as f64)
            + miss * (1.0 - miss) / (k * (n_cal as f64 + 2.0)))
            .sqrt();
    let lower = 1.0 - alpha - delta;
    let upper = 1.0 - alpha + 1.0 / (n_cal as f64 + 1.0) + delta;
    let guaranteed = world.is_iid();
    Ok(BandCheck {
        pass: (lower..=upper).contains(&mean),
        guaranteed,
        label: if guaranteed {
            "exchangeable".to_string()
        } else {
            "band not guaranteed (dependent records)".to_string()
        },
        trials,
        alpha,
        n_cal,
        n_test,
        mean_coverage: mean,
        std_coverage: var.sqrt(),
        min_coverage: per_trial.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
        max_coverage: per_trial
            .iter()
            .map(|c| c.0)
            .fold(f64::NEG_INFINITY, f64::max),
        lower,
        upper,
        delta,
        mean_qhat,
        coverage_gap: 1.0 - alpha - mean,
    })
}
