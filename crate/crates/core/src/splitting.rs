//! Patient-disjoint stratified splitting and leave-one-magnification-out
//! fold construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetTable, Label, Magnification, PatientId, SampleId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.64, 0.16, 0.20];

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<SampleId, Split>,
    pub patient_assignment: BTreeMap<PatientId, Split>,
    pub target_fractions: [f64; 3],
}

impl SplitAssignment {
    pub fn sample_fractions(&self) -> [f64; 3] {
        fractions(self.assignment.values(), self.assignment.len())
    }

    pub fn patient_fractions(&self) -> [f64; 3] {
        fractions(
            self.patient_assignment.values(),
            self.patient_assignment.len(),
        )
    }

    pub fn ids_in(&self, split: Split) -> Vec<SampleId> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }
}

fn fractions<'a>(it: impl Iterator<Item = &'a Split>, n: usize) -> [f64; 3] {
    let mut c = [0usize; 3];
    for s in it {
        c[s.index()] += 1;
    }
    let n = n.max(1) as f64;
    [c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n]
}

/// Greedy patient-level assignment that tracks the label x magnification
/// strata.
///
/// Patients are visited largest first (ties by ascending id). Each goes to
/// the split that minimises the summed absolute deviation of per-stratum
/// sample fractions from the targets. Equal-cost candidates are resolved
/// by the larger relative sample deficit, then by a seeded draw.
pub fn stratified_group_split(
    ds: &DatasetTable,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(
            "split.fractions",
            format!("must be positive and sum to 1, got {fractions:?}"),
        ));
    }
    let patients = ds.index_by_patient();
    if patients.len() < 3 {
        return Err(Error::Infeasible(format!(
            "{} patients cannot fill 3 splits",
            patients.len()
        )));
    }

    let strata: Vec<(Label, Magnification)> = ds.index_by_stratum().keys().copied().collect();
    let stratum_pos: BTreeMap<(Label, Magnification), usize> =
        strata.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let stratum_total: Vec<f64> = ds
        .index_by_stratum()
        .values()
        .map(|v| v.len() as f64)
        .collect();

    // Per-patient stratum histogram.
    let mut profile: BTreeMap<PatientId, Vec<f64>> = BTreeMap::new();
    for (pid, ids) in patients {
        let mut h = vec![0.0; strata.len()];
        for &id in ids {
            let s = ds.meta(id).expect("indexed id");
            h[stratum_pos[&(s.label, s.magnification)]] += 1.0;
        }
        profile.insert(*pid, h);
    }

    let mut order: Vec<PatientId> = patients.keys().copied().collect();
    order.sort_by(|a, b| patients[b].len().cmp(&patients[a].len()).then(a.cmp(b)));

    let total = ds.len() as f64;
    let mut counts = vec![vec![0.0; strata.len()]; 3];
    let mut split_size = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patient_assignment = BTreeMap::new();

    let deviation = |counts: &[Vec<f64>]| -> f64 {
        let mut d = 0.0;
        for (k, row) in counts.iter().enumerate() {
            for (s, c) in row.iter().enumerate() {
                d += (c / stratum_total[s] - fractions[k]).abs();
            }
        }
        d
    };

    for pid in order {
        let h = &profile[&pid];
        let size: f64 = h.iter().sum();
        let mut best: Vec<usize> = Vec::new();
        let mut best_cost = f64::INFINITY;
        for k in 0..3 {
            for (c, x) in counts[k].iter_mut().zip(h) {
                *c += x;
            }
            let cost = deviation(&counts);
            for (c, x) in counts[k].iter_mut().zip(h) {
                *c -= x;
            }
            if cost < best_cost - 1e-12 {
                best_cost = cost;
                best = vec![k];
            } else if (cost - best_cost).abs() <= 1e-12 {
                best.push(k);
            }
        }
        if best.len() > 1 {
            let deficit = |k: usize| (fractions[k] * total - split_size[k]) / fractions[k];
            let top = best
                .iter()
                .map(|&k| deficit(k))
                .fold(f64::NEG_INFINITY, f64::max);
            best.retain(|&k| (deficit(k) - top).abs() <= 1e-9);
        }
        let k = if best.len() == 1 {
            best[0]
        } else {
            best[rng.random_range(0..best.len())]
        };
        for (c, x) in counts[k].iter_mut().zip(h) {
            *c += x;
        }
        split_size[k] += size;
        patient_assignment.insert(pid, Split::ALL[k]);
    }

    repair_empty_splits(&mut patient_assignment, patients);

    let assignment = ds
        .samples()
        .iter()
        .map(|s| (s.sample_id, patient_assignment[&s.patient_id]))
        .collect();
    Ok(SplitAssignment {
        assignment,
        patient_assignment,
        target_fractions: fractions,
    })
}

// Moves the smallest patient (ties: highest id) of the most populated split
// into any split the greedy pass left empty.
fn repair_empty_splits(
    assignment: &mut BTreeMap<PatientId, Split>,
    patients: &BTreeMap<PatientId, Vec<SampleId>>,
) {
    for target in Split::ALL {
        if assignment.values().any(|s| *s == target) {
            continue;
        }
        let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
        for s in assignment.values() {
            *per_split.entry(*s).or_default() += 1;
        }
        let donor = *per_split
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty")
            .0;
        let pid = assignment
            .iter()
            .filter(|(_, s)| **s == donor)
            .map(|(p, _)| *p)
            .min_by(|a, b| patients[a].len().cmp(&patients[b].len()).then(b.cmp(a)))
            .expect("donor split has patients");
        assignment.insert(pid, target);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LomoFold {
    pub held_out: Magnification,
    pub train_ids: Vec<SampleId>,
    pub val_ids: Vec<SampleId>,
    pub test_ids: Vec<SampleId>,
    /// Training magnifications mapped to 0..3 in ascending zoom order.
    pub domain_encoding: BTreeMap<Magnification, usize>,
    pub pos_weight: f64,
}

impl LomoFold {
    pub fn n_domains(&self) -> usize {
        self.domain_encoding.len()
    }

    pub fn domain_index(&self, m: Magnification) -> Option<usize> {
        self.domain_encoding.get(&m).copied()
    }

    pub fn name(&self) -> String {
        self.held_out.to_string()
    }
}

/// One fold per magnification, filtered inside the canonical split.
pub fn build_lomo_folds(ds: &DatasetTable, split: &SplitAssignment) -> Result<Vec<LomoFold>> {
    Magnification::ALL
        .iter()
        .map(|&m| build_fold(ds, split, m))
        .collect()
}

pub fn build_fold(
    ds: &DatasetTable,
    split: &SplitAssignment,
    held_out: Magnification,
) -> Result<LomoFold> {
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut test_ids = Vec::new();
    let (mut benign, mut malignant) = (0usize, 0usize);
    for s in ds.samples() {
        let which = split.assignment.get(&s.sample_id).ok_or_else(|| {
            Error::Fold(format!("sample {} has no split assignment", s.sample_id))
        })?;
        match (which, s.magnification == held_out) {
            (Split::Train, false) => {
                train_ids.push(s.sample_id);
                match s.label {
                    Label::Benign => benign += 1,
                    Label::Malignant => malignant += 1,
                }
            }
            (Split::Val, false) => val_ids.push(s.sample_id),
            (Split::Test, true) => test_ids.push(s.sample_id),
            _ => {}
        }
    }
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::Fold(format!(
            "held-out {held_out}: train has {} samples, test has {}",
            train_ids.len(),
            test_ids.len()
        )));
    }
    if benign == 0 || malignant == 0 {
        return Err(Error::Fold(format!(
            "held-out {held_out}: training split lacks a class ({benign} benign, {malignant} malignant)"
        )));
    }
    let domain_encoding = Magnification::ALL
        .iter()
        .filter(|&&m| m != held_out)
        .enumerate()
        .map(|(i, &m)| (m, i))
        .collect();
    Ok(LomoFold {
        held_out,
        train_ids,
        val_ids,
        test_ids,
        domain_encoding,
        pos_weight: benign as f64 / malignant as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientOverlap {
    pub patient_id: PatientId,
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnificationViolation {
    pub sample_id: SampleId,
    pub split: Split,
    pub magnification: Magnification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub held_out: Magnification,
    pub patient_overlaps: Vec<PatientOverlap>,
    pub magnification_violations: Vec<MagnificationViolation>,
    /// `[benign, malignant]` per split.
    pub class_counts: BTreeMap<Split, [usize; 2]>,
    pub unknown_ids: Vec<SampleId>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.patient_overlaps.is_empty()
            && self.magnification_violations.is_empty()
            && self.unknown_ids.is_empty()
    }

    pub fn total_counted(&self) -> usize {
        self.class_counts.values().map(|c| c[0] + c[1]).sum()
    }
}

pub fn audit_leakage(fold: &LomoFold, ds: &DatasetTable) -> AuditReport {
    let mut patients: BTreeMap<PatientId, BTreeSet<Split>> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut class_counts = BTreeMap::new();
    let mut unknown_ids = Vec::new();
    for (split, ids) in [
        (Split::Train, &fold.train_ids),
        (Split::Val, &fold.val_ids),
        (Split::Test, &fold.test_ids),
    ] {
        let counts: &mut [usize; 2] = class_counts.entry(split).or_default();
        for &id in ids {
            let Some(s) = ds.meta(id) else {
                unknown_ids.push(id);
                continue;
            };
            counts[s.label.as_u8() as usize] += 1;
            patients.entry(s.patient_id).or_default().insert(split);
            let bad = match split {
                Split::Test => s.magnification != fold.held_out,
                _ => s.magnification == fold.held_out,
            };
            if bad {
                violations.push(MagnificationViolation {
                    sample_id: id,
                    split,
                    magnification: s.magnification,
                });
            }
        }
    }
    let patient_overlaps = patients
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(patient_id, s)| PatientOverlap {
            patient_id,
            splits: s.into_iter().collect(),
        })
        .collect();
    AuditReport {
        held_out: fold.held_out,
        patient_overlaps,
        magnification_violations: violations,
        class_counts,
        unknown_ids,
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "held_out: {}", self.held_out)?;
        writeln!(f, "passed: {}", self.passed())?;
        writeln!(f, "patient_overlaps: {}", self.patient_overlaps.len())?;
        for o in &self.patient_overlaps {
            let names: Vec<String> = o.splits.iter().map(Split::to_string).collect();
            writeln!(f, "  patient {} in {}", o.patient_id, names.join("+"))?;
        }
        writeln!(
            f,
            "magnification_violations: {}",
            self.magnification_violations.len()
        )?;
        for v in &self.magnification_violations {
            writeln!(
                f,
                "  sample {} ({}) in {}",
                v.sample_id, v.magnification, v.split
            )?;
        }
        for (s, c) in &self.class_counts {
            writeln!(f, "{s}: benign={} malignant={}", c[0], c[1])?;
        }
        Ok(())
    }
}

pub fn write_split_manifest<W: Write>(
    out: W,
    ds: &DatasetTable,
    split: &SplitAssignment,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "sample_id,patient_id,split")?;
    for s in ds.samples() {
        writeln!(
            w,
            "{},{},{}",
            s.sample_id, s.patient_id, split.assignment[&s.sample_id]
        )?;
    }
    w.flush()
}

/// Rows of `(sample_id, split, fold, role)`; role is the sample's part in
/// that fold or `excluded`.
pub fn write_fold_manifest<W: Write>(
    out: W,
    ds: &DatasetTable,
    split: &SplitAssignment,
    folds: &[LomoFold],
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "sample_id,split,fold,role")?;
    for fold in folds {
        let role_of: BTreeMap<SampleId, &str> = fold
            .train_ids
            .iter()
            .map(|&i| (i, "train"))
            .chain(fold.val_ids.iter().map(|&i| (i, "val")))
            .chain(fold.test_ids.iter().map(|&i| (i, "test")))
            .collect();
        for s in ds.samples() {
            writeln!(
                w,
                "{},{},{},{}",
                s.sample_id,
                split.assignment[&s.sample_id],
                fold.name(),
                role_of.get(&s.sample_id).copied().unwrap_or("excluded")
            )?;
        }
    }
    w.flush()
}
