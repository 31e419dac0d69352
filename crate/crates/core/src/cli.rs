//! `conformal-decode` command line.
//!
//! Every command prints one JSON summary line to standard output containing at
//! least `command`, `status` and `elapsed_ms`, and writes its artifacts to
//! files atomically.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data validation
//! failure, 4 internal invariant breach.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::conformal::{fit_binned, CalibrationModel, Mode};
use crate::decoding::conformal_decode_step;
use crate::error::{Error, ErrorKind, Result};
use crate::evaluation::{
    effective_confidence_curve, empirical_coverage, qhat_curve, theorem_band_check, write_curve_csv,
};
use crate::io_util::{write_atomic, write_json};
use crate::records::{
    parse_line, read_dataset, validate_record_eps, write_dataset, Line, ReadOptions, DEFAULT_EPS,
};
use crate::rng::derive_seed;
use crate::synth::{gen_world, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Worker cap; 0 or unset means one worker per core.
pub const THREADS_ENV: &str = "CONFORMAL_DECODE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "conformal-decode",
    version,
    about = "Conformal calibration of top-p decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic record file from a JSON world spec.
    Synth {
        spec: PathBuf,
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check every record of a file and summarize violations.
    Validate {
        input: PathBuf,
        /// Stop at the first bad row.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Fit a calibration model.
    Calibrate {
        input: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Entropy bins; 1 fits a single global threshold.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Drop invalid rows instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Measure coverage of a model on a test file.
    Evaluate {
        model: PathBuf,
        test: PathBuf,
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        lenient: bool,
    },
    /// Emit a q̂-vs-confidence or effective-confidence curve as CSV.
    Curve {
        input: PathBuf,
        csv: PathBuf,
        /// `start:stop:step`, inclusive of stop.
        #[arg(long, default_value = "0.05:0.5:0.05")]
        alphas: String,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = CurveKind::Qhat)]
        kind: CurveKind,
        /// Threshold for `--kind effective`.
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Conformal top-q̂ decoding over a stream of distributions.
    Decode {
        model: PathBuf,
        input: PathBuf,
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Monte Carlo check of the coverage band on a synthetic world.
    BandCheck {
        spec: PathBuf,
        report: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 999)]
        n_cal: usize,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurveKind {
    Qhat,
    Effective,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Validate { .. } => "validate",
            Command::Calibrate { .. } => "calibrate",
            Command::Evaluate { .. } => "evaluate",
            Command::Curve { .. } => "curve",
            Command::Decode { .. } => "decode",
            Command::BandCheck { .. } => "band-check",
        }
    }
}

/// Exit code and the JSON summary line.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

/// Parses `start:stop:step` (inclusive of `stop` within 1e-12) or a single
/// value. Values are rounded to 12 decimals.
pub fn parse_alpha_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::arg(format!("bad number `{s}` in alpha range")))
    };
    let round = |v: f64| (v * 1e12).round() / 1e12;
    let values = match parts.as_slice() {
        [one] => vec![num(one)?],
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err(Error::arg("alpha range needs step > 0 and stop >= start"));
            }
            let count = ((stop - start) / step + 1e-12).floor() as usize + 1;
            (0..count).map(|i| round(start + i as f64 * step)).collect()
        }
        _ => {
            return Err(Error::arg(
                "alphas must be `start:stop:step` or a single value",
            ))
        }
    };
    if let Some(a) = values.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::arg(format!("alpha {a} not in (0, 1)")));
    }
    Ok(values)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("eps {eps} not in (0, 1)")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    crate::conformal::check_alpha(alpha)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins >= 1 {
        Ok(())
    } else {
        Err(Error::arg("bins must be at least 1"))
    }
}

fn read_opts(eps: f64, lenient: bool) -> ReadOptions {
    ReadOptions {
        strict: !lenient,
        eps,
    }
}

type Fields = Map<String, Value>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn execute(command: &Command) -> Result<(i32, Fields)> {
    let mut f = Fields::new();
    match command {
        Command::Synth { spec, out, seed } => {
            let mut spec = SynthSpec::load(spec)?;
            if let Some(s) = seed {
                spec.seed = *s;
            }
            let ds = gen_world(&spec)?;
            write_dataset(&ds, out)?;
            f.insert("records".into(), json!(ds.len()));
            f.insert("out".into(), json!(out));
        }
        Command::Validate { input, strict, eps } => {
            check_eps(*eps)?;
            let (_, report) = read_dataset(input, read_opts(*eps, !*strict))?;
            let code = if report.dropped == 0 {
                EXIT_OK
            } else {
                EXIT_DATA
            };
            f.insert("valid".into(), json!(report.kept));
            f.insert("report".into(), to_value(&report));
            return Ok((code, f));
        }
        Command::Calibrate {
            input,
            out,
            alpha,
            bins,
            eps,
            lenient,
        } => {
            check_alpha(*alpha)?;
            check_bins(*bins)?;
            check_eps(*eps)?;
            let (ds, report) = read_dataset(input, read_opts(*eps, *lenient))?;
            if ds.len() < *bins {
                return Err(Error::arg(format!(
                    "{} bins requested for {} records",
                    bins,
                    ds.len()
                )));
            }
            let mut model = fit_binned(&ds, *alpha, *bins)?;
            model.meta.insert("input".into(), json!(input));
            model.meta.insert("records".into(), json!(ds.len()));
            model.meta.insert("dropped".into(), json!(report.dropped));
            model.save(out)?;
            f.insert("mode".into(), to_value(&model.mode));
            f.insert("qhats".into(), json!(model.qhats));
            f.insert("records".into(), json!(ds.len()));
            f.insert("dropped".into(), json!(report.dropped));
        }
        Command::Evaluate {
            model,
            test,
            report,
            eps,
            lenient,
        } => {
            check_eps(*eps)?;
            let model = CalibrationModel::load(model)?;
            let (ds, _) = read_dataset(test, read_opts(*eps, *lenient))?;
            let cov = empirical_coverage(&model, &ds)?;
            write_json(report, &cov)?;
            f.insert("coverage".into(), json!(cov.coverage));
            f.insert("target".into(), json!(cov.target));
            f.insert("theorem_upper".into(), json!(cov.theorem_upper));
            f.insert("n_test".into(), json!(cov.n_test));
        }
        Command::Curve {
            input,
            csv,
            alphas,
            bins,
            kind,
            top_p,
            eps,
        } => {
            check_bins(*bins)?;
            check_eps(*eps)?;
            let points = match kind {
                CurveKind::Qhat => {
                    let alphas = parse_alpha_range(alphas)?;
                    let (ds, _) = read_dataset(input, read_opts(*eps, false))?;
                    let mode = if *bins == 1 {
                        Mode::Global
                    } else {
                        Mode::EntropyBinned
                    };
                    qhat_curve(&ds, &alphas, mode, *bins)?
                }
                CurveKind::Effective => {
                    if !(*top_p > 0.0 && *top_p <= 1.0) {
                        return Err(Error::arg(format!("top-p {top_p} not in (0, 1]")));
                    }
                    let (ds, _) = read_dataset(input, read_opts(*eps, false))?;
                    effective_confidence_curve(*top_p, &ds, *bins)?
                }
            };
            write_curve_csv(&points, csv)?;
            f.insert("points".into(), json!(points.len()));
        }
        Command::Decode {
            model,
            input,
            trace,
            seed,
            max_steps,
            eps,
        } => {
            check_eps(*eps)?;
            let model = CalibrationModel::load(model)?;
            let stats = decode_stream(&model, input, trace, *seed, *max_steps, *eps)?;
            f.insert("steps".into(), json!(stats.steps));
            f.insert("mean_set_size".into(), json!(stats.mean_set_size()));
            if stats.with_gold > 0 {
                f.insert(
                    "gold_in_set_rate".into(),
                    json!(stats.gold_in_set as f64 / stats.with_gold as f64),
                );
            }
        }
        Command::BandCheck {
            spec,
            report,
            alpha,
            n_cal,
            n_test,
            trials,
            seed,
        } => {
            check_alpha(*alpha)?;
            if *n_cal == 0 || *n_test == 0 || *trials == 0 {
                return Err(Error::arg("n-cal, n-test and trials must be positive"));
            }
            let spec = SynthSpec::load(spec)?;
            let check = theorem_band_check(&spec, *alpha, *n_cal, *n_test, *trials, *seed)?;
            write_json(report, &check)?;
            f.insert("pass".into(), json!(check.pass));
            f.insert("mean_coverage".into(), json!(check.mean_coverage));
            f.insert("band".into(), json!([check.lower, check.upper]));
        }
    }
    Ok((EXIT_OK, f))
}

#[derive(Debug, Default)]
struct DecodeStats {
    steps: usize,
    set_sizes: usize,
    with_gold: usize,
    gold_in_set: usize,
}

impl DecodeStats {
    fn mean_set_size(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.set_sizes as f64 / self.steps as f64
        }
    }
}

#[derive(Serialize)]
struct TraceLine {
    step: usize,
    seq: u64,
    pos: u64,
    token: usize,
    set_size: usize,
    cum_mass: f64,
    entropy: f64,
    bin: Option<usize>,
    qhat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_in_set: Option<bool>,
}

/// Reads distributions line by line; step `i` samples with
/// `derive_seed(seed, i)`.
fn decode_stream(
    model: &CalibrationModel,
    input: &Path,
    trace: &Path,
    seed: u64,
    max_steps: Option<usize>,
    eps: f64,
) -> Result<DecodeStats> {
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let reader = BufReader::new(file);
    let mut stats = DecodeStats::default();
    write_atomic(trace, |w| {
        let mut first = true;
        for (idx, line) in reader.lines().enumerate() {
            if max_steps.is_some_and(|m| stats.steps >= m) {
                break;
            }
            let line_no = idx + 1;
            let text = line.map_err(|e| Error::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if text.trim().is_empty() {
                continue;
            }
            let allow_meta = first;
            first = false;
            let rec_line = match parse_line(&text, allow_meta) {
                Ok(Line::Meta(_)) => continue,
                Ok(Line::Record(r)) => r,
                Err(message) => {
                    return Err(Error::Malformed {
                        line: line_no,
                        message,
                    })
                }
            };
            let gold = rec_line.gold;
            let record = rec_line
                .into_record(Some(0))
                .map_err(|message| Error::Malformed {
                    line: line_no,
                    message,
                })?;
            let violations = validate_record_eps(&record, eps);
            if !violations.is_empty() {
                return Err(Error::InvalidLine {
                    line: line_no,
                    violations,
                });
            }
            if record.vocab_size != model.vocab_size {
                return Err(Error::VocabMismatch {
                    line: line_no,
                    expected: model.vocab_size,
                    found: record.vocab_size,
                });
            }
            let mut probs = record.dense_probs().into_owned();
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > DEFAULT_EPS {
                // accepted under a relaxed --eps; renormalize for the decoder
                probs.iter_mut().for_each(|p| *p /= total);
            }
            let step = conformal_decode_step(&probs, model, derive_seed(seed, stats.steps as u64))
                .map_err(|e| match e {
                    Error::InvalidArgument(message) => Error::Malformed {
                        line: line_no,
                        message,
                    },
                    other => other,
                })?;
            let gold_in_set = gold.map(|g| step.set.contains(g));
            stats.set_sizes += step.set.len();
            if let Some(hit) = gold_in_set {
                stats.with_gold += 1;
                stats.gold_in_set += usize::from(hit);
            }
            serde_json::to_writer(
                &mut *w,
                &TraceLine {
                    step: stats.steps,
                    seq: record.seq_id,
                    pos: record.pos,
                    token: step.chosen_token,
                    set_size: step.set.len(),
                    cum_mass: step.set.cum_mass,
                    entropy: step.entropy,
                    bin: step.bin,
                    qhat: step.qhat_used,
                    gold_in_set,
                },
            )?;
            w.write_all(b"\n").map_err(|e| Error::io(trace, e))?;
            stats.steps += 1;
        }
        Ok(())
    })?;
    Ok(stats)
}

fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Internal => EXIT_INTERNAL,
    }
}

fn summary(command: &str, status: &str, started: Instant, mut extra: Fields) -> String {
    let mut m = Fields::new();
    m.insert("command".into(), json!(command));
    m.insert("status".into(), json!(status));
    m.append(&mut extra);
    m.insert(
        "elapsed_ms".into(),
        json!(started.elapsed().as_millis() as u64),
    );
    Value::Object(m).to_string()
}

/// Applies [`THREADS_ENV`] to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::arg(format!("{THREADS_ENV}={raw} is not a non-negative integer")))?;
    if n > 0 {
        // A pool that is already built (e.g. in tests) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name).
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let started = Instant::now();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                return Outcome {
                    code: EXIT_OK,
                    summary: e.to_string(),
                };
            }
            eprintln!("{e}");
            let mut f = Fields::new();
            f.insert("error".into(), json!(e.kind().to_string()));
            return Outcome {
                code: EXIT_USAGE,
                summary: summary("unknown", "error", started, f),
            };
        }
    };
    let name = cli.command.name();
    if let Err(e) = configure_threads() {
        return failure(name, &e, started);
    }
    match execute(&cli.command) {
        Ok((code, fields)) => Outcome {
            code,
            summary: summary(
                name,
                if code == EXIT_OK { "ok" } else { "invalid" },
                started,
                fields,
            ),
        },
        Err(e) => failure(name, &e, started),
    }
}

fn failure(name: &str, e: &Error, started: Instant) -> Outcome {
    let mut f = Fields::new();
    let code = exit_code(e);
    f.insert("exit_code".into(), json!(code));
    f.insert("error".into(), json!(e.to_string()));
    Outcome {
        code,
        summary: summary(name, "error", started, f),
    }
}

pub fn main() -> ! {
    let outcome = run(std::env::args_os());
    println!("{}", outcome.summary);
    std::process::exit(outcome.code)
}
