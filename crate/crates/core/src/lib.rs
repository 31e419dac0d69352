//! Conformal calibration for top-p (nucleus) decoding.
//!
//! Given observed next-token distributions with their gold tokens, this crate
//! fits conformal thresholds (globally or per entropy bin) so that the
//! top-q̂ prediction set contains the gold token with probability at least
//! `1 - alpha`. It also provides the resulting entropy-adaptive decoder, the
//! vanilla top-p / top-k baselines, a coverage evaluation harness, and
//! synthetic worlds with known ground truth for checking all of the above.
//!
//! Module map:
//!
//! * [`records`]: distribution records, the JSON Lines file format, validation.
//! * [`conformal`]: APS scores, the split-conformal quantile, global and
//!   entropy-binned fits.
//! * [`decoding`]: prediction sets and seeded sampling.
//! * [`evaluation`]: coverage reports, diagnostic curves, Monte Carlo band check.
//! * [`synth`]: Dirichlet and Markov-chain worlds, per-sequence subsampling.
//! * [`cli`]: the `conformal-decode` command line front end.

pub mod cli;
pub mod conformal;
pub mod decoding;
mod error;
pub mod evaluation;
pub mod io_util;
pub mod records;
pub mod rng;
pub mod synth;

pub use conformal::{
    aps_score, bin_of, conformal_quantile, fit_binned, fit_global, CalibrationModel, Mode,
    ScoredRecord,
};
pub use decoding::{
    conformal_decode_step, conformal_set, prediction_set, sample_from_set, vanilla_top_k_step,
    vanilla_top_p_step, DecodeStep, PredictionSet,
};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{
    effective_confidence_curve, empirical_coverage, qhat_curve, theorem_band_check, BandCheck,
    CoverageReport, CurvePoint,
};
pub use records::{
    entropy, read_dataset, validate_record, write_dataset, Body, Dataset, DistributionRecord,
    ReadOptions, ReadReport, RecordStats, Violation, ViolationCode,
};
pub use synth::{
    gen_dirichlet_world, gen_markov_world, subsample_one_per_sequence, MarkovSpec, SynthSpec,
    WorldKind,
};
