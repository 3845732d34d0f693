//! Trajectory and clinical table parsing plus cohort inclusion checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajcore::{LesionKey, LesionTrajectory, ScanRecord};

const REQUIRED: [&str; 4] = ["patient_id", "lesion_id", "day", "volume_mm3"];
const OBSERVED_COLUMN: &str = "observed";

/// Reads the long-format trajectory CSV. Output is sorted by (patient, lesion).
pub fn parse_trajectory_table<R: Read>(reader: R) -> Result<Vec<LesionTrajectory>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::parse(1, format!("missing required column `{name}`")))?;
    }
    let observed_col = col(OBSERVED_COLUMN);
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !idx.contains(i) && Some(*i) != observed_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut groups: BTreeMap<LesionKey, Vec<(usize, ScanRecord)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let patient = field(idx[0]);
        let lesion = field(idx[1]);
        if patient.is_empty() || lesion.is_empty() {
            return Err(Error::parse(row, "empty patient_id or lesion_id"));
        }
        let day: u32 = field(idx[2])
            .parse()
            .map_err(|_| Error::parse(row, format!("invalid day {:?}", field(idx[2]))))?;
        let volume: f64 = field(idx[3])
            .parse()
            .map_err(|_| Error::parse(row, format!("invalid volume {:?}", field(idx[3]))))?;
        if !volume.is_finite() || volume < 0.0 {
            return Err(Error::parse(row, format!("negative or non-finite volume {volume}")));
        }
        let mut record = ScanRecord::new(day, volume);
        if let Some(j) = observed_col {
            record.observed = match field(j) {
                "" | "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(Error::parse(row, format!("invalid observed flag {other:?}"))),
            };
        }
        for (j, name) in &feature_cols {
            let raw = field(*j);
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(row, format!("invalid value {raw:?} in column `{name}`")))?;
            record.features.insert(name.clone(), v);
        }
        groups.entry(LesionKey::new(patient, lesion)).or_default().push((row, record));
    }

    let mut out = Vec::with_capacity(groups.len());
    for (key, mut rows) in groups {
        rows.sort_by_key(|(_, r)| r.day);
        for pair in rows.windows(2) {
            if pair[0].1.day == pair[1].1.day {
                return Err(Error::parse(
                    pair[1].0,
                    format!("duplicate day {} for lesion {key}", pair[1].1.day),
                ));
            }
        }
        let (first_row, first) = &rows[0];
        if first.day != 0 {
            return Err(Error::parse(*first_row, format!("lesion {key} has no day-0 record")));
        }
        if !(first.volume_mm3 > 0.0) {
            return Err(Error::parse(*first_row, format!("lesion {key} has zero baseline volume")));
        }
        let records = rows.into_iter().map(|(_, r)| r).collect();
        out.push(LesionTrajectory {
            patient_id: key.patient_id,
            lesion_id: key.lesion_id,
            records,
            clinical: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// Writes trajectories in the format read by [`parse_trajectory_table`].
pub fn write_trajectory_table<W: Write>(writer: W, trajs: &[LesionTrajectory]) -> Result<()> {
    let features: BTreeSet<&str> = trajs
        .iter()
        .flat_map(|t| t.records.iter())
        .flat_map(|r| r.features.keys().map(String::as_str))
        .collect();
    let with_observed = trajs.iter().flat_map(|t| &t.records).any(|r| !r.observed);

    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED.to_vec();
    if with_observed {
        header.push(OBSERVED_COLUMN);
    }
    header.extend(features.iter().copied());
    w.write_record(&header)?;
    for t in trajs {
        for r in &t.records {
            let mut row = vec![
                t.patient_id.clone(),
                t.lesion_id.clone(),
                r.day.to_string(),
                r.volume_mm3.to_string(),
            ];
            if with_observed {
                row.push(r.observed.to_string());
            }
            row.extend(features.iter().map(|f| r.features.get(*f).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One entry of the long-format clinical table. A missing lesion id applies to every lesion of the patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEntry {
    pub patient_id: String,
    pub lesion_id: Option<String>,
    pub name: String,
    pub value: String,
}

pub fn parse_clinical_table<R: Read>(reader: R) -> Result<Vec<ClinicalEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::parse(1, format!("missing required column `{name}`")));
    let (p, n, v) = (need("patient_id")?, need("name")?, need("value")?);
    let l = col("lesion_id");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("").to_string();
        let entry = ClinicalEntry {
            patient_id: get(p),
            lesion_id: l.map(get).filter(|s| !s.is_empty()),
            name: get(n),
            value: get(v),
        };
        if entry.patient_id.is_empty() || entry.name.is_empty() {
            return Err(Error::parse(i + 2, "empty patient_id or name"));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_clinical_table<W: Write>(writer: W, entries: &[ClinicalEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "lesion_id", "name", "value"])?;
    for e in entries {
        w.write_record([&e.patient_id, e.lesion_id.as_deref().unwrap_or(""), &e.name, &e.value])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortCriteria {
    pub max_mean_interval_days: f64,
    pub min_observation_days: f64,
    /// Any gap at or above this excludes the lesion.
    pub max_gap_days: f64,
}

impl Default for CohortCriteria {
    fn default() -> Self {
        Self { max_mean_interval_days: 90.0, min_observation_days: 300.0, max_gap_days: 120.0 }
    }
}

impl CohortCriteria {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_mean_interval_days > 0.0 && self.min_observation_days > 0.0 && self.max_gap_days > 0.0;
        if positive && self.min_observation_days > self.max_mean_interval_days {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cohort criteria {self:?}")))
        }
    }
}

/// Rule for transient drops to zero volume that rebound for several scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwingRule {
    pub min_rebound_fraction: f64,
    pub min_rebound_count: usize,
}

impl Default for SwingRule {
    fn default() -> Self {
        Self { min_rebound_fraction: 0.10, min_rebound_count: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QcKind {
    CrSwing,
    GapTooLarge,
    ShortObservation,
    SparseFollowup,
}

impl QcKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QcKind::CrSwing => "CR_SWING",
            QcKind::GapTooLarge => "GAP_TOO_LARGE",
            QcKind::ShortObservation => "SHORT_OBSERVATION",
            QcKind::SparseFollowup => "SPARSE_FOLLOWUP",
        }
    }
}

impl fmt::Display for QcKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcFlag {
    pub patient_id: String,
    pub lesion_id: String,
    pub kind: QcKind,
    pub detail: String,
}

impl QcFlag {
    fn new(t: &LesionTrajectory, kind: QcKind, detail: String) -> Self {
        Self { patient_id: t.patient_id.clone(), lesion_id: t.lesion_id.clone(), kind, detail }
    }
}

/// First failing schedule criterion, checked as observation span, then gaps, then mean interval.
pub fn schedule_flag(traj: &LesionTrajectory, criteria: &CohortCriteria) -> Option<QcFlag> {
    let span = traj.span_days() as f64;
    if span < criteria.min_observation_days {
        return Some(QcFlag::new(
            traj,
            QcKind::ShortObservation,
            format!("observed {span} days < {}", criteria.min_observation_days),
        ));
    }
    if let Some(pair) = traj
        .records
        .windows(2)
        .find(|p| (p[1].day - p[0].day) as f64 >= criteria.max_gap_days)
    {
        return Some(QcFlag::new(
            traj,
            QcKind::GapTooLarge,
            format!("gap of {} days between day {} and day {}", pair[1].day - pair[0].day, pair[0].day, pair[1].day),
        ));
    }
    let mean = span / (traj.records.len() - 1) as f64;
    if mean > criteria.max_mean_interval_days {
        return Some(QcFlag::new(
            traj,
            QcKind::SparseFollowup,
            format!("mean interval {mean:.1} days > {}", criteria.max_mean_interval_days),
        ));
    }
    None
}

/// Splits trajectories into those meeting the schedule criteria and flags for the rest.
pub fn apply_cohort_criteria(
    trajs: Vec<LesionTrajectory>,
    criteria: &CohortCriteria,
) -> (Vec<LesionTrajectory>, Vec<QcFlag>) {
    let mut kept = Vec::with_capacity(trajs.len());
    let mut flagged = Vec::new();
    for t in trajs {
        match schedule_flag(&t, criteria) {
            Some(flag) => flagged.push(flag),
            None => kept.push(t),
        }
    }
    (kept, flagged)
}

/// Flags a zero-volume observation followed by a run of rebounds above the threshold.
///
/// A single rebound before returning to zero is left to imputation.
pub fn detect_cr_swings(traj: &LesionTrajectory, rule: &SwingRule) -> Option<QcFlag> {
    let volumes = traj.volumes();
    let threshold = rule.min_rebound_fraction * traj.baseline();
    let needed = rule.min_rebound_count.max(1);
    for (i, &v) in volumes.iter().enumerate() {
        if v > 0.0 {
            continue;
        }
        let run = volumes[i + 1..].iter().take_while(|&&x| x > threshold).count();
        if run >= needed {
            return Some(QcFlag::new(
                traj,
                QcKind::CrSwing,
                format!(
                    "zero volume at day {} followed by {run} scans above {threshold:.3} mm3",
                    traj.records[i].day
                ),
            ));
        }
    }
    None
}

#[derive(Debug, Clone, Default)]
pub struct QcOutcome {
    pub kept: Vec<LesionTrajectory>,
    pub flags: Vec<QcFlag>,
    /// Flagged trajectories, retained when the caller wants to include them anyway.
    pub rejected: Vec<LesionTrajectory>,
}

/// Schedule criteria followed by swing detection; each lesion receives at most one flag.
pub fn run_qc(trajs: Vec<LesionTrajectory>, criteria: &CohortCriteria, swing: &SwingRule) -> QcOutcome {
    let mut out = QcOutcome::default();
    for t in trajs {
        match schedule_flag(&t, criteria).or_else(|| detect_cr_swings(&t, swing)) {
            Some(flag) => {
                out.flags.push(flag);
                out.rejected.push(t);
            }
            None => out.kept.push(t),
        }
    }
    out
}

pub fn write_flag_report<W: Write>(writer: W, flags: &[QcFlag]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "lesion_id", "kind", "detail"])?;
    for f in flags {
        w.write_record([&f.patient_id, &f.lesion_id, f.kind.as_str(), &f.detail])?;
    }
    w.flush()?;
    Ok(())
}
