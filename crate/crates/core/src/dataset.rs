//! Sample data model, the procedural synthetic patch generator and the
//! delimited feature-table format.
//!
//! A [`DatasetTable`] is immutable once built. Training code reads sample
//! values through [`DatasetTable::view`], which records every id it hands
//! out when an [`AccessLog`] is attached; tests use this to prove that no
//! trainer ever touches held-out samples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SampleId = i64;
pub type PatientId = i64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Malignant),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

/// Microscope magnification. Ordering follows zoom level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    M40,
    M100,
    M200,
    M400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::M40,
        Magnification::M100,
        Magnification::M200,
        Magnification::M400,
    ];

    pub fn zoom(self) -> u32 {
        match self {
            Magnification::M40 => 40,
            Magnification::M100 => 100,
            Magnification::M200 => 200,
            Magnification::M400 => 400,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}X", self.zoom())
    }
}

impl FromStr for Magnification {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim();
        let t = t.strip_suffix(['X', 'x']).unwrap_or(t);
        match t {
            "40" => Ok(Magnification::M40),
            "100" => Ok(Magnification::M100),
            "200" => Ok(Magnification::M200),
            "400" => Ok(Magnification::M400),
            _ => Err(format!("unknown magnification {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: SampleId,
    pub patient_id: PatientId,
    pub label: Label,
    pub magnification: Magnification,
    pub values: Vec<f64>,
}

/// Set of sample ids that have been read through [`DatasetTable::view`].
#[derive(Debug, Default)]
pub struct AccessLog {
    seen: Mutex<BTreeSet<SampleId>>,
}

impl AccessLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn record<'a>(&self, ids: impl IntoIterator<Item = &'a SampleId>) {
        let mut seen = self.seen.lock().expect("access log poisoned");
        seen.extend(ids);
    }

    pub fn ids(&self) -> BTreeSet<SampleId> {
        self.seen.lock().expect("access log poisoned").clone()
    }

    pub fn clear(&self) {
        self.seen.lock().expect("access log poisoned").clear();
    }
}

#[derive(Clone, Debug)]
pub struct DatasetTable {
    samples: Vec<Sample>,
    input_dim: usize,
    position: HashMap<SampleId, usize>,
    by_patient: BTreeMap<PatientId, Vec<SampleId>>,
    by_stratum: BTreeMap<(Label, Magnification), Vec<SampleId>>,
    access_log: Option<Arc<AccessLog>>,
}

impl PartialEq for DatasetTable {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim && self.samples == other.samples
    }
}

impl DatasetTable {
    /// Builds the table and its indices. Rejects duplicate sample ids and
    /// ragged value vectors.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let input_dim = samples.first().map_or(0, |s| s.values.len());
        let mut position = HashMap::with_capacity(samples.len());
        let mut by_patient: BTreeMap<PatientId, Vec<SampleId>> = BTreeMap::new();
        let mut by_stratum: BTreeMap<(Label, Magnification), Vec<SampleId>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.values.len() != input_dim {
                return Err(Error::Integrity(format!(
                    "sample {} has {} values, expected {input_dim}",
                    s.sample_id,
                    s.values.len()
                )));
            }
            if position.insert(s.sample_id, i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate sample_id {}",
                    s.sample_id
                )));
            }
            by_patient
                .entry(s.patient_id)
                .or_default()
                .push(s.sample_id);
            by_stratum
                .entry((s.label, s.magnification))
                .or_default()
                .push(s.sample_id);
        }
        Ok(Self {
            samples,
            input_dim,
            position,
            by_patient,
            by_stratum,
            access_log: None,
        })
    }

    pub fn with_access_log(mut self, log: Arc<AccessLog>) -> Self {
        self.access_log = Some(log);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// All samples in insertion order. Not recorded in the access log; meant
    /// for metadata scans (splitting, auditing, export).
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn index_by_patient(&self) -> &BTreeMap<PatientId, Vec<SampleId>> {
        &self.by_patient
    }

    pub fn index_by_stratum(&self) -> &BTreeMap<(Label, Magnification), Vec<SampleId>> {
        &self.by_stratum
    }

    /// Metadata lookup (not logged).
    pub fn meta(&self, id: SampleId) -> Option<&Sample> {
        self.position.get(&id).map(|&i| &self.samples[i])
    }

    /// Resolves ids to samples for reading their values, logging each id.
    pub fn view(&self, ids: &[SampleId]) -> Result<Vec<&Sample>> {
        if let Some(log) = &self.access_log {
            log.record(ids);
        }
        ids.iter()
            .map(|id| {
                self.position
                    .get(id)
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::Index(format!("unknown sample_id {id}")))
            })
            .collect()
    }
}

pub fn stratum_counts(ds: &DatasetTable) -> BTreeMap<(Label, Magnification), usize> {
    ds.index_by_stratum()
        .iter()
        .map(|(k, v)| (*k, v.len()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub patches_per_patient_per_mag: usize,
    pub malignant_patient_fraction: f64,
    pub patch_side: usize,
    pub style_strength: f64,
    pub class_signal_strength: f64,
    pub patient_effect_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 82,
            patches_per_patient_per_mag: 6,
            malignant_patient_fraction: 0.66,
            patch_side: 8,
            style_strength: 0.6,
            class_signal_strength: 1.0,
            patient_effect_strength: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Every violated constraint, keyed by field name.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |f: &str, r: &str| out.push((f.to_string(), r.to_string()));
        if self.n_patients < 1 {
            push("n_patients", "must be >= 1");
        }
        if self.patches_per_patient_per_mag < 1 {
            push("patches_per_patient_per_mag", "must be >= 1");
        }
        let f = self.malignant_patient_fraction;
        if !(f > 0.0 && f < 1.0) {
            push("malignant_patient_fraction", "must lie in (0, 1)");
        }
        if self.patch_side < 4 {
            push("patch_side", "must be >= 4");
        }
        for (name, v) in [
            ("style_strength", self.style_strength),
            ("class_signal_strength", self.class_signal_strength),
            ("patient_effect_strength", self.patient_effect_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                push(name, "must be finite and >= 0");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some((field, reason)) => Err(Error::config(field, reason)),
            None => Ok(()),
        }
    }
}

// Grating (cycles per patch, orientation in radians, phase) per magnification.
const TEXTURES: [(f64, f64, f64); 4] = [
    (1.0, 0.0, 0.3),
    (2.0, std::f64::consts::FRAC_PI_4, 1.1),
    (3.0, std::f64::consts::FRAC_PI_2, 2.0),
    (4.0, 3.0 * std::f64::consts::FRAC_PI_4, 2.7),
];

// Blob width as a fraction of the patch side; higher zoom shows larger nuclei.
const BLOB_WIDTH: [f64; 4] = [0.16, 0.20, 0.24, 0.28];

const PHASE_JITTER: f64 = 0.25;

fn class_blob(label: Label, mag: Magnification, side: usize) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let w = BLOB_WIDTH[mag.index()] * side as f64;
    let sign = match label {
        Label::Malignant => 1.0,
        Label::Benign => -1.0,
    };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
            out.push(sign * (-d2 / (2.0 * w * w)).exp());
        }
    }
    out
}

fn texture(mag: Magnification, side: usize, jitter: f64) -> Vec<f64> {
    let (freq, theta, phase) = TEXTURES[mag.index()];
    let (s, c) = theta.sin_cos();
    let k = 2.0 * std::f64::consts::PI * freq / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let u = col as f64 * c + r as f64 * s;
            out.push((k * u + phase + jitter).cos());
        }
    }
    out
}

/// Procedural stand-in for a multi-magnification patch archive.
///
/// Each patch is the sum of a label-dependent blob, a magnification-specific
/// grating, a per-patient offset field and unit Gaussian noise. Patients are
/// labelled before any patch is drawn, so every patch of a patient shares
/// its label.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.patch_side;
    let dim = side * side;
    let n_malignant = (cfg.n_patients as f64 * cfg.malignant_patient_fraction).round() as usize;

    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![Label::Benign; cfg.n_patients];
    for &p in order.iter().take(n_malignant) {
        labels[p] = Label::Malignant;
    }

    let blobs: BTreeMap<(Label, Magnification), Vec<f64>> = [Label::Benign, Label::Malignant]
        .into_iter()
        .flat_map(|l| Magnification::ALL.into_iter().map(move |m| (l, m)))
        .map(|(l, m)| ((l, m), class_blob(l, m, side)))
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_patients * 4 * cfg.patches_per_patient_per_mag);
    let mut next_id: SampleId = 0;
    for (patient, &label) in labels.iter().enumerate() {
        let offset: Vec<f64> = (0..dim)
            .map(|_| cfg.patient_effect_strength * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for mag in Magnification::ALL {
            let blob = &blobs[&(label, mag)];
            for _ in 0..cfg.patches_per_patient_per_mag {
                let jitter = rng.random_range(-PHASE_JITTER..PHASE_JITTER);
                let tex = texture(mag, side, jitter);
                let values = (0..dim)
                    .map(|j| {
                        let noise: f64 = rng.sample(StandardNormal);
                        cfg.class_signal_strength * blob[j]
                            + cfg.style_strength * tex[j]
                            + offset[j]
                            + noise
                    })
                    .collect();
                samples.push(Sample {
                    sample_id: next_id,
                    patient_id: patient as PatientId,
                    label,
                    magnification: mag,
                    values,
                });
                next_id += 1;
            }
        }
    }
    DatasetTable::from_samples(samples)
}

/// Column names used when reading a feature table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSchema {
    pub sample_id: String,
    pub patient_id: String,
    pub label: String,
    pub magnification: String,
    /// Explicit feature columns; `None` takes every other column in order.
    pub features: Option<Vec<String>>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            sample_id: "sample_id".into(),
            patient_id: "patient_id".into(),
            label: "label".into(),
            magnification: "magnification".into(),
            features: None,
        }
    }
}

pub fn ingest_feature_table(path: &Path, schema: &FeatureSchema) -> Result<DatasetTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_table(file, schema)
}

pub fn read_feature_table<R: std::io::Read>(
    reader: R,
    schema: &FeatureSchema,
) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let id_col = find(&schema.sample_id)?;
    let patient_col = find(&schema.patient_id)?;
    let label_col = find(&schema.label)?;
    let mag_col = find(&schema.magnification)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|c| ![id_col, patient_col, label_col, mag_col].contains(c))
            .collect(),
    };

    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        // Row numbers are 1-based data rows (header excluded).
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            reason: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let parse_int = |c: usize, what: &str| {
            field(c).parse::<i64>().map_err(|_| Error::Parse {
                row,
                reason: format!("{what} {:?} is not an integer", field(c)),
            })
        };
        let sample_id = parse_int(id_col, "sample_id")?;
        let patient_id = parse_int(patient_col, "patient_id")?;
        let label = field(label_col)
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| Error::Parse {
                row,
                reason: format!("label {:?} is not 0 or 1", field(label_col)),
            })?;
        let magnification = field(mag_col)
            .parse::<Magnification>()
            .map_err(|reason| Error::Parse { row, reason })?;
        let values = feature_cols
            .iter()
            .map(|&c| {
                field(c).parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    reason: format!("feature {:?} is not a number", field(c)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if !seen.insert(sample_id) {
            return Err(Error::Integrity(format!(
                "duplicate sample_id {sample_id} at row {row}"
            )));
        }
        samples.push(Sample {
            sample_id,
            patient_id,
            label,
            magnification,
            values,
        });
    }
    DatasetTable::from_samples(samples)
}

/// One row in the feature-table format; `tag` is the magnification column.
pub struct FeatureRow<'a> {
    pub sample_id: SampleId,
    pub patient_id: PatientId,
    pub label: Label,
    pub tag: String,
    pub values: &'a [f64],
}

pub fn write_feature_rows<'a, W: Write>(
    out: W,
    dim: usize,
    rows: impl IntoIterator<Item = FeatureRow<'a>>,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    write!(w, "sample_id,patient_id,label,magnification")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(
            w,
            "{},{},{},{}",
            r.sample_id,
            r.patient_id,
            r.label.as_u8(),
            r.tag
        )?;
        for v in r.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_feature_table<W: Write>(out: W, ds: &DatasetTable) -> std::io::Result<()> {
    write_feature_rows(
        out,
        ds.input_dim(),
        ds.samples().iter().map(|s| FeatureRow {
            sample_id: s.sample_id,
            patient_id: s.patient_id,
            label: s.label,
            tag: s.magnification.zoom().to_string(),
            values: &s.values,
        }),
    )
}
