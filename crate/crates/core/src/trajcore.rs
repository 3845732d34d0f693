//! Lesion trajectories and volumetric RANO-BM response classification.
//!
//! A lesion is classified at every time point after treatment (day 0):
//!
//! - **CR**: volume at or below `cr_volume_mm3` (default: empty mask)
//! - **PD**: volume above 172.8% of the prior minimum (nadir)
//! - **PR**: volume below 34.3% of baseline
//! - **SD**: everything else
//!
//! The checks run in that order. The nadir covers the baseline and every
//! strictly earlier time point, never the current one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    /// Days since treatment.
    pub day: u32,
    pub volume_mm3: f64,
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
    /// False when the record was imputed rather than measured.
    #[serde(default = "default_true")]
    pub observed: bool,
}

fn default_true() -> bool {
    true
}

impl ScanRecord {
    pub fn new(day: u32, volume_mm3: f64) -> Self {
        Self { day, volume_mm3, features: BTreeMap::new(), observed: true }
    }
}

/// Identifies a lesion across the cohort. Lesion ids are only unique within a patient.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LesionKey {
    pub patient_id: String,
    pub lesion_id: String,
}

impl LesionKey {
    pub fn new(patient_id: impl Into<String>, lesion_id: impl Into<String>) -> Self {
        Self { patient_id: patient_id.into(), lesion_id: lesion_id.into() }
    }
}

impl fmt::Display for LesionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.patient_id, self.lesion_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionTrajectory {
    pub patient_id: String,
    pub lesion_id: String,
    pub records: Vec<ScanRecord>,
    #[serde(default)]
    pub clinical: BTreeMap<String, f64>,
}

impl LesionTrajectory {
    /// Builds a trajectory and checks its invariants.
    pub fn new(
        patient_id: impl Into<String>,
        lesion_id: impl Into<String>,
        records: Vec<ScanRecord>,
    ) -> Result<Self> {
        let traj = Self {
            patient_id: patient_id.into(),
            lesion_id: lesion_id.into(),
            records,
            clinical: BTreeMap::new(),
        };
        traj.validate()?;
        Ok(traj)
    }

    /// Convenience constructor from parallel day/volume slices.
    pub fn from_volumes(
        patient_id: impl Into<String>,
        lesion_id: impl Into<String>,
        days: &[u32],
        volumes: &[f64],
    ) -> Result<Self> {
        if days.len() != volumes.len() {
            return Err(Error::Shape(format!(
                "{} days for {} volumes",
                days.len(),
                volumes.len()
            )));
        }
        let records = days.iter().zip(volumes).map(|(&d, &v)| ScanRecord::new(d, v)).collect();
        Self::new(patient_id, lesion_id, records)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.key();
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::InvalidTrajectory(format!("{id}: no records")))?;
        if first.day != 0 {
            return Err(Error::InvalidTrajectory(format!("{id}: first record is day {}", first.day)));
        }
        if !(first.volume_mm3 > 0.0) {
            return Err(Error::InvalidTrajectory(format!(
                "{id}: baseline volume {} must be positive",
                first.volume_mm3
            )));
        }
        for pair in self.records.windows(2) {
            if pair[1].day <= pair[0].day {
                return Err(Error::InvalidTrajectory(format!(
                    "{id}: days not strictly ascending ({} then {})",
                    pair[0].day, pair[1].day
                )));
            }
        }
        if let Some(r) = self.records.iter().find(|r| !(r.volume_mm3 >= 0.0) || !r.volume_mm3.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "{id}: invalid volume {} at day {}",
                r.volume_mm3, r.day
            )));
        }
        Ok(())
    }

    pub fn key(&self) -> LesionKey {
        LesionKey::new(self.patient_id.clone(), self.lesion_id.clone())
    }

    pub fn baseline(&self) -> f64 {
        self.records[0].volume_mm3
    }

    pub fn days(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.day).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.volume_mm3).collect()
    }

    /// Days between first and last scan.
    pub fn span_days(&self) -> u32 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.day - a.day,
            _ => 0,
        }
    }
}

/// Anything that can be read as a dated volume series starting at treatment.
pub trait VolumeSeries {
    fn series(&self) -> Vec<(u32, f64)>;
}

impl VolumeSeries for LesionTrajectory {
    fn series(&self) -> Vec<(u32, f64)> {
        self.records.iter().map(|r| (r.day, r.volume_mm3)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResponseCategory {
    CR,
    PR,
    SD,
    PD,
}

impl ResponseCategory {
    pub const ALL: [ResponseCategory; 4] =
        [ResponseCategory::CR, ResponseCategory::PR, ResponseCategory::SD, ResponseCategory::PD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseCategory::CR => "CR",
            ResponseCategory::PR => "PR",
            ResponseCategory::SD => "SD",
            ResponseCategory::PD => "PD",
        }
    }
}

impl fmt::Display for ResponseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResponseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "CR" => Ok(ResponseCategory::CR),
            "PR" => Ok(ResponseCategory::PR),
            "SD" => Ok(ResponseCategory::SD),
            "PD" => Ok(ResponseCategory::PD),
            other => Err(Error::Config(format!("unknown response category {other:?}"))),
        }
    }
}

const BOUNDARY_EPS: f64 = 1e-12;

/// Volumetric thresholds. The defaults are the cubes of the diameter thresholds (0.7³, 1.2³).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseCriteria {
    pub pr_fraction_of_baseline: f64,
    pub pd_fraction_of_nadir: f64,
    pub cr_volume_mm3: f64,
}

impl Default for ResponseCriteria {
    fn default() -> Self {
        Self { pr_fraction_of_baseline: 0.343, pd_fraction_of_nadir: 1.728, cr_volume_mm3: 0.0 }
    }
}

impl ResponseCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pr_fraction_of_baseline > 0.0
            && self.pr_fraction_of_baseline < 1.0
            && self.pd_fraction_of_nadir > 1.0
            && self.cr_volume_mm3 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid response criteria {self:?}")))
        }
    }

    fn decide(&self, baseline: f64, nadir: f64, current: f64) -> ResponseCategory {
        // Threshold products are widened by a relative epsilon so that values written
        // exactly at a boundary (34.3 of 100) stay stable despite binary rounding.
        if current <= self.cr_volume_mm3 {
            ResponseCategory::CR
        } else if current > self.pd_fraction_of_nadir * nadir * (1.0 + BOUNDARY_EPS) {
            ResponseCategory::PD
        } else if current < self.pr_fraction_of_baseline * baseline * (1.0 - BOUNDARY_EPS) {
            ResponseCategory::PR
        } else {
            ResponseCategory::SD
        }
    }
}

/// Classifies one follow-up volume. `prior_volumes` starts with the baseline.
pub fn classify_response(
    baseline_volume: f64,
    prior_volumes: &[f64],
    current_volume: f64,
    criteria: &ResponseCriteria,
) -> Result<ResponseCategory> {
    if !(baseline_volume > 0.0) {
        return Err(Error::InvalidTrajectory(format!(
            "baseline volume {baseline_volume} must be positive"
        )));
    }
    if prior_volumes.is_empty() {
        return Err(Error::InsufficientData("no prior volumes".into()));
    }
    if current_volume < 0.0 || prior_volumes.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidTrajectory("negative volume".into()));
    }
    let nadir = prior_volumes.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(criteria.decide(baseline_volume, nadir, current_volume))
}

/// Classifies every point after the first of a volume sequence.
pub fn classify_volumes(volumes: &[f64], criteria: &ResponseCriteria) -> Result<Vec<ResponseCategory>> {
    if volumes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} time points, need at least 2",
            volumes.len()
        )));
    }
    let baseline = volumes[0];
    if !(baseline > 0.0) {
        return Err(Error::InvalidTrajectory(format!("baseline volume {baseline} must be positive")));
    }
    if volumes.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidTrajectory("negative or non-finite volume".into()));
    }
    let mut nadir = baseline;
    let mut out = Vec::with_capacity(volumes.len() - 1);
    for &current in &volumes[1..] {
        out.push(criteria.decide(baseline, nadir, current));
        nadir = nadir.min(current);
    }
    Ok(out)
}

/// Per-time-point categories for index ≥ 1, paired with the day of each point.
pub fn classify_trajectory<T: VolumeSeries + ?Sized>(
    traj: &T,
    criteria: &ResponseCriteria,
) -> Result<Vec<(u32, ResponseCategory)>> {
    let series = traj.series();
    let volumes: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
    let cats = classify_volumes(&volumes, criteria)?;
    Ok(series[1..].iter().map(|&(d, _)| d).zip(cats).collect())
}

/// Category counts for the transition t_k → t_{k+1}, indexed `[from][to]` in CR, PR, SD, PD order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionFlow {
    pub interval_index: usize,
    pub counts: [[u64; 4]; 4],
}

impl TransitionFlow {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn outflow(&self, from: ResponseCategory) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    pub fn inflow(&self, to: ResponseCategory) -> u64 {
        self.counts.iter().map(|row| row[to.index()]).sum()
    }
}

/// Transition matrices between consecutive classified points.
///
/// Sequences are expected to start at t1, so the first matrix has `interval_index` 1.
pub fn compute_flows(classified: &[Vec<ResponseCategory>]) -> Result<Vec<TransitionFlow>> {
    let Some(len) = classified.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if let Some((i, s)) = classified.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(Error::Shape(format!(
            "sequence {i} has {} categories, expected {len}",
            s.len()
        )));
    }
    let mut flows: Vec<TransitionFlow> = (0..len.saturating_sub(1))
        .map(|k| TransitionFlow { interval_index: k + 1, counts: [[0; 4]; 4] })
        .collect();
    for seq in classified {
        for (k, pair) in seq.windows(2).enumerate() {
            flows[k].counts[pair[0].index()][pair[1].index()] += 1;
        }
    }
    Ok(flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ResponseCategory::*;

    fn crit() -> ResponseCriteria {
        ResponseCriteria::default()
    }

    #[test]
    fn single_point_examples() {
        assert_eq!(classify_response(100.0, &[100.0], 0.0, &crit()).unwrap(), CR);
        assert_eq!(classify_response(100.0, &[100.0], 30.0, &crit()).unwrap(), PR);
        assert_eq!(classify_response(100.0, &[100.0, 20.0], 40.0, &crit()).unwrap(), PD);
        assert_eq!(classify_response(100.0, &[100.0], 34.3, &crit()).unwrap(), SD);
    }

    #[test]
    fn upper_boundary_is_stable() {
        assert_eq!(classify_response(100.0, &[100.0], 172.8, &crit()).unwrap(), SD);
        assert_eq!(classify_response(100.0, &[100.0], 172.81, &crit()).unwrap(), PD);
    }

    #[test]
    fn rejects_bad_baseline() {
        assert!(matches!(
            classify_response(0.0, &[0.0], 1.0, &crit()),
            Err(Error::InvalidTrajectory(_))
        ));
        assert!(classify_volumes(&[-1.0, 2.0], &crit()).is_err());
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(classify_volumes(&[100.0, 0.0, 0.0], &crit()).unwrap(), vec![CR, CR]);
        assert_eq!(classify_volumes(&[100.0, 50.0, 120.0], &crit()).unwrap(), vec![SD, PD]);
        assert_eq!(classify_volumes(&[100.0, 180.0, 30.0], &crit()).unwrap(), vec![PD, PR]);
        assert!(matches!(classify_volumes(&[100.0], &crit()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn classify_trajectory_carries_days() {
        let t = LesionTrajectory::from_volumes("P", "L", &[0, 62, 130], &[100.0, 50.0, 120.0]).unwrap();
        assert_eq!(classify_trajectory(&t, &crit()).unwrap(), vec![(62, SD), (130, PD)]);
    }

    #[test]
    fn trajectory_invariants() {
        assert!(LesionTrajectory::from_volumes("P", "L", &[1, 60], &[1.0, 1.0]).is_err());
        assert!(LesionTrajectory::from_volumes("P", "L", &[0, 60, 60], &[1.0, 1.0, 1.0]).is_err());
        assert!(LesionTrajectory::from_volumes("P", "L", &[0, 60], &[0.0, 1.0]).is_err());
        assert!(LesionTrajectory::from_volumes("P", "L", &[0, 60], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn flows_examples() {
        let all_cr = vec![vec![CR; 6]; 10];
        let flows = compute_flows(&all_cr).unwrap();
        assert_eq!(flows.len(), 5);
        for f in &flows {
            assert_eq!(f.counts[0][0], 10);
            assert_eq!(f.total(), 10);
        }
        let flows = compute_flows(&[vec![SD, SD, PR, CR, CR, CR]]).unwrap();
        assert_eq!(flows[1].interval_index, 2);
        assert_eq!(flows[1].counts[SD.index()][PR.index()], 1);
        assert!(matches!(compute_flows(&[vec![CR; 6], vec![CR; 5]]), Err(Error::Shape(_))));
    }

    #[test]
    fn cr_is_absorbing_for_zero_tail() {
        let cats = classify_volumes(&[80.0, 120.0, 0.0, 0.0, 0.0], &crit()).unwrap();
        assert_eq!(&cats[1..], &[CR, CR, CR]);
    }
}
