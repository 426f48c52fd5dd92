//! Cohort data model: stays, schema, JSONL persistence, batching.
//!
//! A stay couples six hourly sequential modalities (medications, chart
//! events, outputs, procedures, date events, ingredients) with two static
//! ones (demographics, diagnoses) and a mortality label. Cohorts live in
//! JSONL, one stay per line, next to a `schema.json` sidecar declaring
//! feature widths and vocabulary sizes. Save → load round-trips bit-exactly.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Tensor;

/// Current on-disk format for schema and cohort files.
pub const FORMAT_VERSION: u32 = 1;

/// Cap on generated stay lengths and on rollout horizons, in hours (ten
/// days).
pub const MAX_HOURS: usize = 240;

/// The six demographic fields, in storage order.
pub const DEMO_FIELDS: [&str; 6] =
    ["gender", "age_bucket", "insurance", "race", "icu_type", "admission_urgency"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed stay record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line} (stay {stay_id}): {msg}")]
    Invalid { line: usize, stay_id: String, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("schema file {path}: {msg}")]
    SchemaFile { path: String, msg: String },
    #[error("unsupported format_version {found}, this build reads version {expected}")]
    FormatVersion { found: u32, expected: u32 },
    #[error("truncate requires hours >= 1, got {0}")]
    BadTruncate(usize),
    #[error("collate requires a non-empty stay list")]
    EmptyBatch,
    #[error("collate found mixed shapes: stay {stay_id} has {modality} width {got}, batch has {expected}")]
    MixedWidths { stay_id: String, modality: Modality, got: usize, expected: usize },
    #[error("unknown modality name '{0}'")]
    UnknownModality(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// One of the eight input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Meds,
    Chart,
    Out,
    Proc,
    Date,
    Ing,
    Demo,
    Diag,
}

/// Canonical iteration order for the sequential modalities.
pub const SEQ_MODALITIES: [Modality; 6] =
    [Modality::Meds, Modality::Chart, Modality::Out, Modality::Proc, Modality::Date, Modality::Ing];

/// Canonical iteration order for all eight modalities.
pub const ALL_MODALITIES: [Modality; 8] = [
    Modality::Meds,
    Modality::Chart,
    Modality::Out,
    Modality::Proc,
    Modality::Date,
    Modality::Ing,
    Modality::Demo,
    Modality::Diag,
];

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Meds => "meds",
            Modality::Chart => "chart",
            Modality::Out => "out",
            Modality::Proc => "proc",
            Modality::Date => "date",
            Modality::Ing => "ing",
            Modality::Demo => "demo",
            Modality::Diag => "diag",
        }
    }

    /// Position among the sequential modalities, `None` for demo/diag.
    pub fn seq_index(self) -> Option<usize> {
        SEQ_MODALITIES.iter().position(|&m| m == self)
    }

    pub fn is_sequential(self) -> bool {
        self.seq_index().is_some()
    }

    pub fn all_index(self) -> usize {
        ALL_MODALITIES.iter().position(|&m| m == self).expect("member")
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_MODALITIES
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DataError::UnknownModality(s.to_string()))
    }
}

/// Hourly feature width per sequential modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqWidths {
    pub meds: usize,
    pub chart: usize,
    pub out: usize,
    pub proc: usize,
    pub date: usize,
    pub ing: usize,
}

impl SeqWidths {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Meds => self.meds,
            Modality::Chart => self.chart,
            Modality::Out => self.out,
            Modality::Proc => self.proc,
            Modality::Date => self.date,
            Modality::Ing => self.ing,
            Modality::Demo | Modality::Diag => 0,
        }
    }

    pub fn total(&self) -> usize {
        SEQ_MODALITIES.iter().map(|&m| self.get(m)).sum()
    }
}

/// Sidecar schema: widths and vocabulary sizes for one cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub format_version: u32,
    pub seq_widths: SeqWidths,
    /// Vocabulary size per demographic field, in [`DEMO_FIELDS`] order.
    pub demo_vocab: [usize; 6],
    pub diag_vocab: usize,
}

impl Default for CohortSchema {
    /// The stock synthetic schema: modest widths, small vocabularies.
    fn default() -> Self {
        CohortSchema {
            format_version: FORMAT_VERSION,
            seq_widths: SeqWidths { meds: 6, chart: 8, out: 4, proc: 5, date: 3, ing: 4 },
            demo_vocab: [2, 10, 4, 6, 5, 3],
            diag_vocab: 64,
        }
    }
}

impl CohortSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DataError::FormatVersion { found: self.format_version, expected: FORMAT_VERSION });
        }
        for m in SEQ_MODALITIES {
            if self.seq_widths.get(m) == 0 {
                return Err(DataError::Schema(format!("sequential modality {m} has width 0")));
            }
        }
        for (i, &v) in self.demo_vocab.iter().enumerate() {
            if v < 2 {
                return Err(DataError::Schema(format!(
                    "demo field {} needs a vocabulary of at least 2, got {v}",
                    DEMO_FIELDS[i]
                )));
            }
        }
        if self.diag_vocab == 0 {
            return Err(DataError::Schema("diagnosis vocabulary must be non-empty".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        let file = File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| DataError::SchemaFile { path: path.display().to_string(), msg: e.to_string() })?;
        w.write_all(b"\n").map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let schema: CohortSchema = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DataError::SchemaFile { path: path.display().to_string(), msg: e.to_string() })?;
        schema.validate()?;
        Ok(schema)
    }
}

/// Hourly matrices for the six sequential modalities; row t is hour t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqData {
    pub meds: Vec<Vec<f64>>,
    pub chart: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
    pub proc: Vec<Vec<f64>>,
    pub date: Vec<Vec<f64>>,
    pub ing: Vec<Vec<f64>>,
}

impl SeqData {
    pub fn get(&self, m: Modality) -> &Vec<Vec<f64>> {
        match m {
            Modality::Meds => &self.meds,
            Modality::Chart => &self.chart,
            Modality::Out => &self.out,
            Modality::Proc => &self.proc,
            Modality::Date => &self.date,
            Modality::Ing => &self.ing,
            Modality::Demo | Modality::Diag => panic!("{m} is not sequential"),
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Vec<Vec<f64>> {
        match m {
            Modality::Meds => &mut self.meds,
            Modality::Chart => &mut self.chart,
            Modality::Out => &mut self.out,
            Modality::Proc => &mut self.proc,
            Modality::Date => &mut self.date,
            Modality::Ing => &mut self.ing,
            Modality::Demo | Modality::Diag => panic!("{m} is not sequential"),
        }
    }
}

/// One ICU stay: label, static context, and hourly sequences of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcuStay {
    pub stay_id: String,
    pub label: u8,
    /// Categorical codes, one per [`DEMO_FIELDS`] entry.
    pub demo: Vec<u32>,
    /// Active diagnosis codes; duplicates are rejected at load.
    pub diag: Vec<u32>,
    pub seq: SeqData,
}

impl IcuStay {
    /// Observed hours; every sequential modality shares this length.
    pub fn len_hours(&self) -> usize {
        self.seq.meds.len()
    }

    pub fn validate(&self, schema: &CohortSchema) -> Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.demo.len() != 6 {
            return Err(format!("expected 6 demo codes, got {}", self.demo.len()));
        }
        for (i, &code) in self.demo.iter().enumerate() {
            if code as usize >= schema.demo_vocab[i] {
                return Err(format!(
                    "demo field {} code {code} out of vocabulary (size {})",
                    DEMO_FIELDS[i], schema.demo_vocab[i]
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &code in &self.diag {
            if code as usize >= schema.diag_vocab {
                return Err(format!("diag code {code} out of vocabulary (size {})", schema.diag_vocab));
            }
            if !seen.insert(code) {
                return Err(format!("duplicate diag code {code}"));
            }
        }
        let t = self.len_hours();
        if t == 0 {
            return Err("stay has no observed hours".into());
        }
        for m in SEQ_MODALITIES {
            let rows = self.seq.get(m);
            if rows.len() != t {
                return Err(format!("{m} has {} hours, expected {t}", rows.len()));
            }
            let width = schema.seq_widths.get(m);
            for (ti, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(format!("{m} hour {ti} has width {}, schema says {width}", row.len()));
                }
                if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                    return Err(format!("{m} hour {ti} contains non-finite value {bad}"));
                }
            }
        }
        Ok(())
    }
}

/// Keeps the first `min(hours, observed)` hours of a stay; static modalities
/// and the label are untouched.
pub fn truncate(stay: &IcuStay, hours: usize) -> Result<IcuStay, DataError> {
    if hours == 0 {
        return Err(DataError::BadTruncate(hours));
    }
    let keep = hours.min(stay.len_hours());
    let mut out = stay.clone();
    for m in SEQ_MODALITIES {
        out.seq.get_mut(m).truncate(keep);
    }
    Ok(out)
}

/// Returns the stay extended by one observed hour. `rows` is one feature
/// vector per sequential modality in [`SEQ_MODALITIES`] order; widths must
/// match the stay's existing rows.
pub fn append_hour(stay: &IcuStay, rows: &[Vec<f64>]) -> Result<IcuStay, DataError> {
    if rows.len() != 6 {
        return Err(DataError::Invalid {
            line: 0,
            stay_id: stay.stay_id.clone(),
            msg: format!("expected 6 modality rows, got {}", rows.len()),
        });
    }
    let mut out = stay.clone();
    for (&m, row) in SEQ_MODALITIES.iter().zip(rows) {
        let existing = out.seq.get_mut(m);
        let want = existing.first().map_or(row.len(), |r| r.len());
        if row.len() != want {
            return Err(DataError::Invalid {
                line: 0,
                stay_id: stay.stay_id.clone(),
                msg: format!("{m} row has width {}, stay has {want}", row.len()),
            });
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Invalid {
                line: 0,
                stay_id: stay.stay_id.clone(),
                msg: format!("{m} appended row contains non-finite value {bad}"),
            });
        }
        existing.push(row.clone());
    }
    Ok(out)
}

/// Writes one stay per line. Field order is fixed by the struct, so output
/// bytes are deterministic.
pub fn save_cohort(path: &Path, stays: &[IcuStay]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut w = BufWriter::new(file);
    for stay in stays {
        let line = serde_json::to_string(stay).expect("stay serializes");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    }
    Ok(())
}

/// Reads and validates a JSONL cohort. An empty file yields an empty list;
/// any malformed or schema-violating line aborts with its line number.
pub fn load_cohort(path: &Path, schema: &CohortSchema) -> Result<Vec<IcuStay>, DataError> {
    schema.validate()?;
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    let mut stays = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let stay: IcuStay =
            serde_json::from_str(&line).map_err(|source| DataError::Parse { line: line_no, source })?;
        stay.validate(schema).map_err(|msg| DataError::Invalid {
            line: line_no,
            stay_id: stay.stay_id.clone(),
            msg,
        })?;
        stays.push(stay);
    }
    Ok(stays)
}

/// A zero-padded batch ready for the model.
///
/// Sequential tensors are `[B, T_max, F_m]`; positions at or past a stay's
/// length are exactly zero. `mask[b * t_max + t]` is true iff hour t is
/// observed for stay b.
pub struct ModalityBundle {
    pub stay_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    /// In [`SEQ_MODALITIES`] order.
    pub seq: Vec<Tensor>,
    pub mask: Vec<bool>,
    /// `[B * 6]` demographic codes.
    pub demo: Vec<u32>,
    /// Multi-hot `[B, diag_vocab]`.
    pub diag: Tensor,
}

impl ModalityBundle {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

/// Batches stays into padded tensors. Widths are inferred from the first
/// stay; a stay disagreeing on any width is a mixed-shape error.
pub fn collate(stays: &[IcuStay], diag_vocab: usize) -> Result<ModalityBundle, DataError> {
    if stays.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let b = stays.len();
    let widths: Vec<usize> =
        SEQ_MODALITIES.iter().map(|&m| stays[0].seq.get(m).first().map_or(0, |r| r.len())).collect();
    let lengths: Vec<usize> = stays.iter().map(|s| s.len_hours()).collect();
    let t_max = *lengths.iter().max().expect("non-empty");

    let mut seq = Vec::with_capacity(6);
    for (mi, &m) in SEQ_MODALITIES.iter().enumerate() {
        let f = widths[mi];
        let mut data = vec![0.0f64; b * t_max * f];
        for (bi, stay) in stays.iter().enumerate() {
            let rows = stay.seq.get(m);
            for (ti, row) in rows.iter().enumerate() {
                if row.len() != f {
                    return Err(DataError::MixedWidths {
                        stay_id: stay.stay_id.clone(),
                        modality: m,
                        got: row.len(),
                        expected: f,
                    });
                }
                data[(bi * t_max + ti) * f..(bi * t_max + ti + 1) * f].copy_from_slice(row);
            }
        }
        seq.push(Tensor::new(vec![b, t_max, f], data)?);
    }

    let mut mask = vec![false; b * t_max];
    for (bi, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            mask[bi * t_max + t] = true;
        }
    }

    let mut demo = Vec::with_capacity(b * 6);
    for stay in stays {
        demo.extend_from_slice(&stay.demo);
    }

    let mut diag_data = vec![0.0f64; b * diag_vocab];
    for (bi, stay) in stays.iter().enumerate() {
        for &code in &stay.diag {
            let c = code as usize;
            if c >= diag_vocab {
                return Err(DataError::Invalid {
                    line: 0,
                    stay_id: stay.stay_id.clone(),
                    msg: format!("diag code {code} out of vocabulary (size {diag_vocab})"),
                });
            }
            diag_data[bi * diag_vocab + c] = 1.0;
        }
    }

    Ok(ModalityBundle {
        stay_ids: stays.iter().map(|s| s.stay_id.clone()).collect(),
        labels: stays.iter().map(|s| s.label).collect(),
        lengths,
        t_max,
        seq,
        mask,
        demo,
        diag: Tensor::new(vec![b, diag_vocab], diag_data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_schema() -> CohortSchema {
        CohortSchema {
            format_version: FORMAT_VERSION,
            seq_widths: SeqWidths { meds: 2, chart: 3, out: 1, proc: 2, date: 1, ing: 2 },
            demo_vocab: [2, 10, 4, 6, 5, 3],
            diag_vocab: 8,
        }
    }

    pub(crate) fn tiny_stay(id: &str, label: u8, hours: usize) -> IcuStay {
        let schema = tiny_schema();
        let row = |m: Modality, t: usize| -> Vec<f64> {
            (0..schema.seq_widths.get(m)).map(|f| (t * 10 + f) as f64 * 0.25).collect()
        };
        let rows = |m: Modality| (0..hours).map(|t| row(m, t)).collect::<Vec<_>>();
        IcuStay {
            stay_id: id.to_string(),
            label,
            demo: vec![1, 4, 2, 0, 3, 1],
            diag: vec![0, 5],
            seq: SeqData {
                meds: rows(Modality::Meds),
                chart: rows(Modality::Chart),
                out: rows(Modality::Out),
                proc: rows(Modality::Proc),
                date: rows(Modality::Date),
                ing: rows(Modality::Ing),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let stays = vec![tiny_stay("a", 1, 3), tiny_stay("b", 0, 5)];
        save_cohort(&path, &stays).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = load_cohort(&path, &tiny_schema()).unwrap();
        assert_eq!(loaded, stays);
        let path2 = dir.path().join("again.jsonl");
        save_cohort(&path2, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_file_is_empty_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_cohort(&path, &tiny_schema()).unwrap().is_empty());
    }

    #[test]
    fn parse_failure_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&tiny_stay("ok", 0, 2)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = load_cohort(&path, &tiny_schema()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn validation_failure_reports_line_and_stay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut stay = tiny_stay("wide", 0, 2);
        stay.seq.meds[1].push(9.9);
        let line = serde_json::to_string(&stay).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_cohort(&path, &tiny_schema()).unwrap_err();
        match err {
            DataError::Invalid { line, stay_id, msg } => {
                assert_eq!(line, 1);
                assert_eq!(stay_id, "wide");
                assert!(msg.contains("meds"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn out_of_vocab_demo_rejected() {
        let schema = tiny_schema();
        let mut stay = tiny_stay("s", 0, 2);
        stay.demo[0] = 2; // vocab size 2 allows {0, 1}
        let msg = stay.validate(&schema).unwrap_err();
        assert!(msg.contains("gender"), "{msg}");
    }

    #[test]
    fn truncate_keeps_prefix_and_statics() {
        let stay = tiny_stay("s", 1, 6);
        let cut = truncate(&stay, 2).unwrap();
        assert_eq!(cut.len_hours(), 2);
        assert_eq!(cut.seq.chart[1], stay.seq.chart[1]);
        assert_eq!(cut.demo, stay.demo);
        assert_eq!(cut.diag, stay.diag);
        assert_eq!(cut.label, stay.label);
        // Requesting more hours than observed is the identity.
        let same = truncate(&stay, 100).unwrap();
        assert_eq!(same, stay);
        assert!(matches!(truncate(&stay, 0), Err(DataError::BadTruncate(0))));
    }

    #[test]
    fn truncate_then_truncate_composes() {
        let stay = tiny_stay("s", 0, 8);
        let a = truncate(&truncate(&stay, 5).unwrap(), 3).unwrap();
        let b = truncate(&stay, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collate_pads_with_exact_zeros() {
        let stays = vec![tiny_stay("a", 1, 2), tiny_stay("b", 0, 4)];
        let bundle = collate(&stays, 8).unwrap();
        assert_eq!(bundle.t_max, 4);
        assert_eq!(bundle.lengths, vec![2, 4]);
        let meds = &bundle.seq[0];
        assert_eq!(meds.shape(), &[2, 4, 2]);
        // Stay a's hours 2 and 3 are padding.
        for t in 2..4 {
            for f in 0..2 {
                assert_eq!(meds.data()[(t) * 2 + f], 0.0);
            }
        }
        assert_eq!(&bundle.mask[..4], &[true, true, false, false]);
        assert_eq!(&bundle.mask[4..], &[true, true, true, true]);
        // Multi-hot diag: codes 0 and 5 set for both stays.
        for b in 0..2 {
            for c in 0..8 {
                let want = if c == 0 || c == 5 { 1.0 } else { 0.0 };
                assert_eq!(bundle.diag.data()[b * 8 + c], want);
            }
        }
    }

    #[test]
    fn collate_rejects_empty_and_mixed() {
        assert!(matches!(collate(&[], 8), Err(DataError::EmptyBatch)));
        let mut odd = tiny_stay("odd", 0, 2);
        odd.seq.out[0] = vec![1.0, 2.0]; // width 2, batch expects 1
        let stays = vec![tiny_stay("a", 1, 2), odd];
        assert!(matches!(collate(&stays, 8), Err(DataError::MixedWidths { .. })));
    }

    #[test]
    fn modality_names_round_trip() {
        for m in ALL_MODALITIES {
            assert_eq!(Modality::from_str(m.name()).unwrap(), m);
        }
        assert!(Modality::from_str("bogus").is_err());
        assert_eq!(Modality::Proc.seq_index(), Some(3));
        assert_eq!(Modality::Demo.seq_index(), None);
    }

    #[test]
    fn schema_round_trip_and_version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        let schema = tiny_schema();
        schema.save(&path).unwrap();
        assert_eq!(CohortSchema::load(&path).unwrap(), schema);
        let mut future = schema.clone();
        future.format_version = 99;
        assert!(matches!(future.validate(), Err(DataError::FormatVersion { found: 99, .. })));
    }
}
