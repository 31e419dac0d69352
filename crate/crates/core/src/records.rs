//! Next-token distribution records and their JSON Lines file format.
//!
//! A record stores one next-token distribution together with the token that
//! actually followed (the gold token). Distributions are either dense (one
//! probability per vocabulary entry) or sparse: a list of top-K token ids with
//! their probabilities plus a single `tail` mass shared by every unlisted
//! token.
//!
//! File layout: UTF-8, one JSON object per line, an optional leading
//! `{"meta":{...}}` line.
//!
//! ```text
//! {"meta":{"source":"synth"}}
//! {"seq":0,"pos":0,"gold":1,"vocab":3,"probs":[0.5,0.3,0.2]}
//! {"seq":0,"pos":1,"gold":7,"vocab":3,"ids":[7,2],"probs":[0.6,0.3],"tail":0.1}
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

/// Tolerance on the total probability mass of a record.
pub const DEFAULT_EPS: f64 = 1e-6;

pub type Metadata = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Dense {
        probs: Vec<f64>,
    },
    Sparse {
        ids: Vec<usize>,
        probs: Vec<f64>,
        /// Mass shared by all `vocab_size - ids.len()` unlisted tokens.
        tail_mass: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionRecord {
    pub seq_id: u64,
    pub pos: u64,
    pub vocab_size: usize,
    pub gold: usize,
    pub body: Body,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordStats {
    /// Shannon entropy in nats.
    pub entropy: f64,
    pub max_prob: f64,
    pub gold_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationCode {
    /// A probability (or the tail mass) is negative.
    NegProb,
    /// Total mass is outside `[1 - eps, 1 + eps]`.
    BadSum,
    /// Gold token outside `[0, vocab_size)`.
    GoldOob,
    /// A sparse id is listed twice.
    DupId,
    /// A sparse id outside `[0, vocab_size)`.
    IdOob,
    /// Dense length differs from `vocab_size`, or sparse ids/probs lengths differ.
    BadLen,
    /// NaN or infinite value.
    NonFinite,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::NegProb => "NEG_PROB",
            ViolationCode::BadSum => "BAD_SUM",
            ViolationCode::GoldOob => "GOLD_OOB",
            ViolationCode::DupId => "DUP_ID",
            ViolationCode::IdOob => "ID_OOB",
            ViolationCode::BadLen => "BAD_LEN",
            ViolationCode::NonFinite => "NON_FINITE",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.code, self.detail)
    }
}

fn violation(code: ViolationCode, detail: impl Into<String>) -> Violation {
    Violation {
        code,
        detail: detail.into(),
    }
}

/// Every invariant violation of `r` under the default tolerance.
pub fn validate_record(r: &DistributionRecord) -> Vec<Violation> {
    validate_record_eps(r, DEFAULT_EPS)
}

pub fn validate_record_eps(r: &DistributionRecord, eps: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = r.vocab_size;
    if k == 0 {
        out.push(violation(ViolationCode::BadLen, "vocab_size is 0"));
    }
    if r.gold >= k {
        out.push(violation(
            ViolationCode::GoldOob,
            format!("gold {} not in [0, {k})", r.gold),
        ));
    }
    let (probs, tail) = match &r.body {
        Body::Dense { probs } => {
            if probs.len() != k {
                out.push(violation(
                    ViolationCode::BadLen,
                    format!("{} probs for vocab {k}", probs.len()),
                ));
            }
            (probs.as_slice(), 0.0)
        }
        Body::Sparse {
            ids,
            probs,
            tail_mass,
        } => {
            if ids.len() != probs.len() {
                out.push(violation(
                    ViolationCode::BadLen,
                    format!("{} ids but {} probs", ids.len(), probs.len()),
                ));
            }
            let mut seen = HashSet::with_capacity(ids.len());
            for &id in ids {
                if id >= k {
                    out.push(violation(
                        ViolationCode::IdOob,
                        format!("id {id} not in [0, {k})"),
                    ));
                }
                if !seen.insert(id) {
                    out.push(violation(ViolationCode::DupId, format!("id {id} repeated")));
                }
            }
            (probs.as_slice(), *tail_mass)
        }
    };

    let mut finite = tail.is_finite();
    let mut negative = tail < 0.0;
    for &p in probs {
        finite &= p.is_finite();
        negative |= p < 0.0;
    }
    if !finite {
        out.push(violation(
            ViolationCode::NonFinite,
            "non-finite probability",
        ));
        return out;
    }
    if negative {
        out.push(violation(ViolationCode::NegProb, "negative probability"));
    }
    let total: f64 = probs.iter().sum::<f64>() + tail;
    if (total - 1.0).abs() > eps {
        out.push(violation(
            ViolationCode::BadSum,
            format!("total mass {total}"),
        ));
    }
    out
}

fn ensure_valid(r: &DistributionRecord) -> Result<()> {
    let v = validate_record(r);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidRecord(v))
    }
}

/// Entropy in nats of a valid record.
///
/// For sparse records the tail mass is treated as spread uniformly over the
/// unlisted tokens.
pub fn entropy(r: &DistributionRecord) -> Result<f64> {
    ensure_valid(r)?;
    Ok(r.entropy_unchecked())
}

/// `-p ln p`, with `0 ln 0 = 0`.
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Entropy in nats of a dense probability vector.
pub fn dense_entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| plogp(p)).sum::<f64>().max(0.0)
}

impl DistributionRecord {
    pub fn dense(seq_id: u64, pos: u64, gold: usize, probs: Vec<f64>) -> Self {
        DistributionRecord {
            seq_id,
            pos,
            vocab_size: probs.len(),
            gold,
            body: Body::Dense { probs },
        }
    }

    pub fn sparse(
        seq_id: u64,
        pos: u64,
        vocab_size: usize,
        gold: usize,
        ids: Vec<usize>,
        probs: Vec<f64>,
        tail_mass: f64,
    ) -> Self {
        DistributionRecord {
            seq_id,
            pos,
            vocab_size,
            gold,
            body: Body::Sparse {
                ids,
                probs,
                tail_mass,
            },
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.body, Body::Sparse { .. })
    }

    /// Per-token share of the tail mass, or 0 when every token is listed.
    pub fn tail_share(&self) -> f64 {
        match &self.body {
            Body::Dense { .. } => 0.0,
            Body::Sparse { ids, tail_mass, .. } => {
                let unlisted = self.vocab_size.saturating_sub(ids.len());
                if unlisted == 0 {
                    0.0
                } else {
                    tail_mass / unlisted as f64
                }
            }
        }
    }

    /// Dense probability vector; sparse tails are spread uniformly.
    pub fn dense_probs(&self) -> Cow<'_, [f64]> {
        match &self.body {
            Body::Dense { probs } => Cow::Borrowed(probs),
            Body::Sparse { ids, probs, .. } => {
                let mut dense = vec![self.tail_share(); self.vocab_size];
                for (&id, &p) in ids.iter().zip(probs) {
                    dense[id] = p;
                }
                Cow::Owned(dense)
            }
        }
    }

    pub fn gold_prob(&self) -> f64 {
        match &self.body {
            Body::Dense { probs } => probs[self.gold],
            Body::Sparse { ids, probs, .. } => ids
                .iter()
                .position(|&id| id == self.gold)
                .map(|i| probs[i])
                .unwrap_or_else(|| self.tail_share()),
        }
    }

    pub(crate) fn entropy_unchecked(&self) -> f64 {
        match &self.body {
            Body::Dense { probs } => dense_entropy(probs),
            Body::Sparse { ids, probs, .. } => {
                let unlisted = self.vocab_size.saturating_sub(ids.len());
                let listed: f64 = probs.iter().map(|&p| plogp(p)).sum();
                let tail = unlisted as f64 * plogp(self.tail_share());
                (listed + tail).max(0.0)
            }
        }
    }

    fn max_prob_unchecked(&self) -> f64 {
        let listed = match &self.body {
            Body::Dense { probs } | Body::Sparse { probs, .. } => {
                probs.iter().copied().fold(0.0, f64::max)
            }
        };
        listed.max(self.tail_share())
    }

    pub fn stats(&self) -> Result<RecordStats> {
        ensure_valid(self)?;
        Ok(RecordStats {
            entropy: self.entropy_unchecked(),
            max_prob: self.max_prob_unchecked(),
            gold_prob: self.gold_prob(),
        })
    }
}

/// An ordered, validated collection of records sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<DistributionRecord>,
    pub metadata: Metadata,
}

impl Dataset {
    /// Validates every record, the shared vocabulary size and the uniqueness
    /// of `(seq_id, pos)`.
    pub fn new(records: Vec<DistributionRecord>) -> Result<Self> {
        Self::with_eps(records, DEFAULT_EPS)
    }

    pub fn with_eps(records: Vec<DistributionRecord>, eps: f64) -> Result<Self> {
        let mut keys = HashSet::with_capacity(records.len());
        let vocab = records.first().map(|r| r.vocab_size);
        for (i, r) in records.iter().enumerate() {
            let violations = validate_record_eps(r, eps);
            if !violations.is_empty() {
                return Err(Error::InvalidLine {
                    line: i + 1,
                    violations,
                });
            }
            if Some(r.vocab_size) != vocab {
                return Err(Error::VocabMismatch {
                    line: i + 1,
                    expected: vocab.unwrap_or(0),
                    found: r.vocab_size,
                });
            }
            if !keys.insert((r.seq_id, r.pos)) {
                return Err(Error::DuplicateKey {
                    line: i + 1,
                    seq_id: r.seq_id,
                    pos: r.pos,
                });
            }
        }
        Ok(Dataset {
            records,
            metadata: Metadata::new(),
        })
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn records(&self) -> &[DistributionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DistributionRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Vocabulary size shared by all records, `None` when empty.
    pub fn vocab_size(&self) -> Option<usize> {
        self.records.first().map(|r| r.vocab_size)
    }

    pub(crate) fn require_non_empty(&self) -> Result<usize> {
        self.vocab_size()
            .ok_or(Error::Empty("dataset has no records"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Abort on the first bad row instead of dropping it.
    pub strict: bool,
    pub eps: f64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        ReadOptions {
            strict: true,
            eps: DEFAULT_EPS,
        }
    }
}

impl ReadOptions {
    pub fn lenient() -> Self {
        ReadOptions {
            strict: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReadReport {
    pub rows: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Dropped-row counts keyed by violation code (or `MALFORMED`, `VOCAB`, `DUP_KEY`).
    pub by_code: BTreeMap<String, usize>,
    /// Line numbers of dropped rows, capped at 100 entries.
    pub dropped_lines: Vec<usize>,
}

const MAX_REPORTED_LINES: usize = 100;

impl ReadReport {
    fn drop_row(&mut self, line: usize, codes: impl IntoIterator<Item = String>) {
        self.dropped += 1;
        for c in codes {
            *self.by_code.entry(c).or_default() += 1;
        }
        if self.dropped_lines.len() < MAX_REPORTED_LINES {
            self.dropped_lines.push(line);
        }
    }
}

/// Wire representation of one record line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RecordLine {
    pub seq: u64,
    pub pos: u64,
    pub gold: Option<usize>,
    pub vocab: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<usize>>,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<f64>,
}

impl RecordLine {
    /// Converts to a record; `default_gold` fills in a missing gold token.
    pub(crate) fn into_record(
        self,
        default_gold: Option<usize>,
    ) -> std::result::Result<DistributionRecord, String> {
        let gold = self
            .gold
            .or(default_gold)
            .ok_or_else(|| "missing field `gold`".to_string())?;
        let body = match (self.ids, self.tail) {
            (Some(ids), tail) => Body::Sparse {
                ids,
                probs: self.probs,
                tail_mass: tail.unwrap_or(0.0),
            },
            (None, None) => Body::Dense { probs: self.probs },
            (None, Some(_)) => return Err("`tail` given without `ids`".to_string()),
        };
        Ok(DistributionRecord {
            seq_id: self.seq,
            pos: self.pos,
            vocab_size: self.vocab,
            gold,
            body,
        })
    }

    fn from_record(r: &DistributionRecord) -> Self {
        let (ids, probs, tail) = match &r.body {
            Body::Dense { probs } => (None, probs.clone(), None),
            Body::Sparse {
                ids,
                probs,
                tail_mass,
            } => (Some(ids.clone()), probs.clone(), Some(*tail_mass)),
        };
        RecordLine {
            seq: r.seq_id,
            pos: r.pos,
            gold: Some(r.gold),
            vocab: r.vocab_size,
            ids,
            probs,
            tail,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MetaLine {
    pub meta: Metadata,
}

/// One parsed line of a record stream.
pub(crate) enum Line {
    Meta(Metadata),
    Record(RecordLine),
}

/// Parses a line; only the first line of a file may carry metadata.
pub(crate) fn parse_line(text: &str, allow_meta: bool) -> std::result::Result<Line, String> {
    if allow_meta {
        let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if value.get("meta").is_some() {
            let m: MetaLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
            return Ok(Line::Meta(m.meta));
        }
        return serde_json::from_value(value)
            .map(Line::Record)
            .map_err(|e| e.to_string());
    }
    serde_json::from_str(text)
        .map(Line::Record)
        .map_err(|e| e.to_string())
}

pub fn read_dataset(path: impl AsRef<Path>, opts: ReadOptions) -> Result<(Dataset, ReadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file), opts)
}

/// Reads records from any buffered source. See [`read_dataset`].
pub fn read_dataset_from<R: BufRead>(
    reader: R,
    opts: ReadOptions,
) -> Result<(Dataset, ReadReport)> {
    let mut report = ReadReport::default();
    let mut metadata = Metadata::new();
    let mut records = Vec::new();
    let mut keys = HashSet::new();
    let mut vocab: Option<usize> = None;
    let mut first = true;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&text, first);
        first = false;
        let rec_line = match parsed {
            Ok(Line::Meta(m)) => {
                metadata = m;
                continue;
            }
            Ok(Line::Record(r)) => r,
            Err(message) => {
                return Err(Error::Malformed {
                    line: line_no,
                    message,
                })
            }
        };
        report.rows += 1;
        let record = rec_line
            .into_record(None)
            .map_err(|message| Error::Malformed {
                line: line_no,
                message,
            })?;

        // Vocabulary mismatch is a file-level error in both modes.
        match vocab {
            None => vocab = Some(record.vocab_size),
            Some(v) if v != record.vocab_size => {
                return Err(Error::VocabMismatch {
                    line: line_no,
                    expected: v,
                    found: record.vocab_size,
                })
            }
            _ => {}
        }

        let violations = validate_record_eps(&record, opts.eps);
        if !violations.is_empty() {
            if opts.strict {
                return Err(Error::InvalidLine {
                    line: line_no,
                    violations,
                });
            }
            let mut codes: Vec<String> = violations.iter().map(|v| v.code.to_string()).collect();
            codes.sort();
            codes.dedup();
            report.drop_row(line_no, codes);
            continue;
        }
        if !keys.insert((record.seq_id, record.pos)) {
            if opts.strict {
                return Err(Error::DuplicateKey {
                    line: line_no,
                    seq_id: record.seq_id,
                    pos: record.pos,
                });
            }
            report.drop_row(line_no, ["DUP_KEY".to_string()]);
            continue;
        }
        records.push(record);
    }
    report.kept = records.len();
    Ok((Dataset { records, metadata }, report))
}

/// Writes `ds` atomically: the destination only appears once fully written.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_dataset_to(ds, w))
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    let io = |e| Error::io("<stream>", e);
    if !ds.metadata.is_empty() {
        serde_json::to_writer(
            &mut *w,
            &MetaLine {
                meta: ds.metadata.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
    }
    for r in &ds.records {
        serde_json::to_writer(&mut *w, &RecordLine::from_record(r))?;
        w.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}
