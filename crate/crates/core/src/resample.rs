//! Mapping irregular scan schedules onto the fixed 60-day grid t0..t6.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajcore::{LesionKey, LesionTrajectory, VolumeSeries};

pub const GRID_LEN: usize = 7;
pub const GRID_SPACING_DAYS: u32 = 60;
pub const GRID_DAYS: [u32; GRID_LEN] = [0, 60, 120, 180, 240, 300, 360];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    #[default]
    Nearest,
    Linear,
    Bspline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledTrajectory {
    pub patient_id: String,
    pub lesion_id: String,
    pub volumes_mm3: [f64; GRID_LEN],
    /// Record used for each grid point; `None` for interpolated values.
    pub source_index: [Option<usize>; GRID_LEN],
    pub normalized: [f64; GRID_LEN],
    /// Per-point numeric features (radiomics, shape).
    pub features: Vec<BTreeMap<String, f64>>,
    /// False at imputed points.
    pub observed: [bool; GRID_LEN],
}

impl ResampledTrajectory {
    pub fn grid_days(&self) -> [u32; GRID_LEN] {
        GRID_DAYS
    }

    pub fn key(&self) -> LesionKey {
        LesionKey::new(self.patient_id.clone(), self.lesion_id.clone())
    }

    /// Recomputes `normalized` from the current volumes.
    pub fn renormalize(&mut self) -> Result<()> {
        self.normalized = normalize_volumes(&self.volumes_mm3)?;
        Ok(())
    }
}

impl VolumeSeries for ResampledTrajectory {
    fn series(&self) -> Vec<(u32, f64)> {
        GRID_DAYS.iter().copied().zip(self.volumes_mm3).collect()
    }
}

pub fn normalize_volumes(volumes: &[f64; GRID_LEN]) -> Result<[f64; GRID_LEN]> {
    let base = volumes[0];
    if !(base > 0.0) {
        return Err(Error::InvalidTrajectory(format!("baseline volume {base} cannot normalize")));
    }
    let mut out = volumes.map(|v| v / base);
    out[0] = 1.0;
    Ok(out)
}

/// Baseline-relative volumes; element 0 is exactly 1.
pub fn normalize(res: &ResampledTrajectory) -> Result<[f64; GRID_LEN]> {
    normalize_volumes(&res.volumes_mm3)
}

pub fn resample(traj: &LesionTrajectory, method: ResampleMethod) -> Result<ResampledTrajectory> {
    match method {
        ResampleMethod::Nearest => resample_nn(traj),
        ResampleMethod::Linear => resample_linear(traj),
        ResampleMethod::Bspline => resample_bspline(traj),
    }
}

fn ensure_records(traj: &LesionTrajectory) -> Result<()> {
    if traj.records.is_empty() {
        return Err(Error::InsufficientData(format!("{}: empty trajectory", traj.key())));
    }
    Ok(())
}

fn assemble(
    traj: &LesionTrajectory,
    volumes: [f64; GRID_LEN],
    source_index: [Option<usize>; GRID_LEN],
    features: Vec<BTreeMap<String, f64>>,
) -> Result<ResampledTrajectory> {
    let observed = std::array::from_fn(|k| source_index[k].is_some_and(|i| traj.records[i].observed));
    Ok(ResampledTrajectory {
        patient_id: traj.patient_id.clone(),
        lesion_id: traj.lesion_id.clone(),
        normalized: normalize_volumes(&volumes)?,
        volumes_mm3: volumes,
        source_index,
        features,
        observed,
    })
}

/// Index of the record closest in time to `day`; equidistant records resolve to the earlier one.
pub fn nearest_record(days: &[u32], day: u32) -> usize {
    let mut best = 0;
    for (i, &d) in days.iter().enumerate() {
        if d.abs_diff(day) < days[best].abs_diff(day) {
            best = i;
        }
    }
    best
}

pub fn resample_nn(traj: &LesionTrajectory) -> Result<ResampledTrajectory> {
    ensure_records(traj)?;
    let days = traj.days();
    let idx: [usize; GRID_LEN] = GRID_DAYS.map(|g| nearest_record(&days, g));
    let volumes = idx.map(|i| traj.records[i].volume_mm3);
    let features = idx.iter().map(|&i| traj.records[i].features.clone()).collect();
    assemble(traj, volumes, idx.map(Some), features)
}

/// Segment containing `day` and the fractional position in it, clamped to the observed span.
fn bracket(days: &[u32], day: u32) -> (usize, usize, f64) {
    let last = days.len() - 1;
    if day <= days[0] {
        return (0, 0, 0.0);
    }
    if day >= days[last] {
        return (last, last, 0.0);
    }
    let hi = days.partition_point(|&d| d <= day);
    let lo = hi - 1;
    let frac = (day - days[lo]) as f64 / (days[hi] - days[lo]) as f64;
    (lo, hi, frac)
}

fn coincident(days: &[u32], day: u32) -> Option<usize> {
    days.binary_search(&day).ok()
}

fn interpolate_features(traj: &LesionTrajectory, lo: usize, hi: usize, frac: f64) -> BTreeMap<String, f64> {
    let a = &traj.records[lo].features;
    let b = &traj.records[hi].features;
    if lo == hi || frac == 0.0 {
        return a.clone();
    }
    a.iter()
        .filter_map(|(k, &va)| b.get(k).map(|&vb| (k.clone(), va + frac * (vb - va))))
        .collect()
}

pub fn resample_linear(traj: &LesionTrajectory) -> Result<ResampledTrajectory> {
    ensure_records(traj)?;
    let days = traj.days();
    let vols = traj.volumes();
    let mut volumes = [0.0; GRID_LEN];
    let mut features = Vec::with_capacity(GRID_LEN);
    for (k, &g) in GRID_DAYS.iter().enumerate() {
        let (lo, hi, frac) = bracket(&days, g);
        volumes[k] = vols[lo] + frac * (vols[hi] - vols[lo]);
        features.push(interpolate_features(traj, lo, hi, frac));
    }
    assemble(traj, volumes, GRID_DAYS.map(|g| coincident(&days, g)), features)
}

/// Interpolating cubic spline with end slopes clamped to the end-segment secants.
/// Returns the second derivatives at the knots.
fn clamped_spline_moments(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let (mut sub, mut diag, mut sup, mut rhs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    diag[0] = 2.0 * h[0];
    sup[0] = h[0];
    for i in 1..n - 1 {
        sub[i] = h[i - 1];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i];
        rhs[i] = 6.0 * (slope[i] - slope[i - 1]);
    }
    sub[n - 1] = h[n - 2];
    diag[n - 1] = 2.0 * h[n - 2];
    // Thomas algorithm.
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut m = vec![0.0; n];
    m[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
    }
    m
}

fn eval_spline(x: &[f64], y: &[f64], m: &[f64], t: f64) -> f64 {
    let n = x.len();
    if t <= x[0] {
        return y[0];
    }
    if t >= x[n - 1] {
        return y[n - 1];
    }
    let i = x.partition_point(|&v| v <= t) - 1;
    let h = x[i + 1] - x[i];
    let (a, b) = (x[i + 1] - t, t - x[i]);
    m[i] * a.powi(3) / (6.0 * h)
        + m[i + 1] * b.powi(3) / (6.0 * h)
        + (y[i] - m[i] * h * h / 6.0) * a / h
        + (y[i + 1] - m[i + 1] * h * h / 6.0) * b / h
}

pub fn resample_bspline(traj: &LesionTrajectory) -> Result<ResampledTrajectory> {
    ensure_records(traj)?;
    if traj.records.len() < 4 {
        log::warn!(
            "{}: {} records, cubic spline needs 4; using linear interpolation",
            traj.key(),
            traj.records.len()
        );
        return resample_linear(traj);
    }
    let days = traj.days();
    let x: Vec<f64> = days.iter().map(|&d| d as f64).collect();
    let y = traj.volumes();
    let m = clamped_spline_moments(&x, &y);
    let mut volumes = [0.0; GRID_LEN];
    let mut features = Vec::with_capacity(GRID_LEN);
    for (k, &g) in GRID_DAYS.iter().enumerate() {
        volumes[k] = match coincident(&days, g) {
            Some(i) => y[i],
            None => eval_spline(&x, &y, &m, g as f64).max(0.0),
        };
        let (lo, hi, frac) = bracket(&days, g);
        features.push(interpolate_features(traj, lo, hi, frac));
    }
    assemble(traj, volumes, GRID_DAYS.map(|g| coincident(&days, g)), features)
}

fn write_grid<W: Write>(writer: W, rows: &[ResampledTrajectory], pick: impl Fn(&ResampledTrajectory) -> [f64; GRID_LEN]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "lesion_id".to_string()];
    header.extend((0..GRID_LEN).map(|k| format!("t{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.patient_id.clone(), r.lesion_id.clone()];
        row.extend(pick(r).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_resampled_volumes<W: Write>(writer: W, rows: &[ResampledTrajectory]) -> Result<()> {
    write_grid(writer, rows, |r| r.volumes_mm3)
}

pub fn write_resampled_normalized<W: Write>(writer: W, rows: &[ResampledTrajectory]) -> Result<()> {
    write_grid(writer, rows, |r| r.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(days: &[u32], vols: &[f64]) -> LesionTrajectory {
        LesionTrajectory::from_volumes("P", "L", days, vols).unwrap()
    }

    #[test]
    fn nn_irregular_schedule() {
        let t = traj(&[0, 55, 130, 190, 250, 310, 365], &[100.0, 90.0, 80.0, 70.0, 60.0, 50.0, 40.0]);
        let r = resample_nn(&t).unwrap();
        assert_eq!(r.volumes_mm3[1], 90.0);
        assert_eq!(r.volumes_mm3[2], 80.0);
        assert_eq!(r.source_index[1], Some(1));
    }

    #[test]
    fn nn_tie_prefers_earlier() {
        let t = traj(&[0, 150, 210, 360], &[100.0, 10.0, 20.0, 30.0]);
        let r = resample_nn(&t).unwrap();
        assert_eq!(r.volumes_mm3[3], 10.0);
        assert_eq!(r.source_index[3], Some(1));
    }

    #[test]
    fn linear_midpoint_and_clamp() {
        let t = traj(&[0, 120], &[100.0, 0.0]);
        let r = resample_linear(&t).unwrap();
        assert_eq!(r.volumes_mm3[1], 50.0);
        assert_eq!(r.volumes_mm3[6], 0.0);
        assert_eq!(r.source_index[1], None);
        assert_eq!(r.source_index[2], Some(1));
    }

    #[test]
    fn all_methods_pass_through_grid_samples() {
        let vols = [100.0, 40.0, 160.0, 10.0, 0.0, 30.0, 35.0];
        let t = traj(&GRID_DAYS, &vols);
        for m in [ResampleMethod::Nearest, ResampleMethod::Linear, ResampleMethod::Bspline] {
            let r = resample(&t, m).unwrap();
            assert_eq!(r.volumes_mm3, vols, "{m:?}");
            assert_eq!(r.source_index, std::array::from_fn(Some), "{m:?}");
        }
    }

    #[test]
    fn bspline_falls_back_with_few_records() {
        let t = traj(&[0, 120, 360], &[100.0, 0.0, 50.0]);
        assert_eq!(resample_bspline(&t).unwrap().volumes_mm3, resample_linear(&t).unwrap().volumes_mm3);
    }

    #[test]
    fn spline_reproduces_lines() {
        let x = [0.0, 50.0, 130.0, 200.0, 370.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 0.5 * v).collect();
        let m = clamped_spline_moments(&x, &y);
        for t in [10.0, 60.0, 180.0, 300.0] {
            assert!((eval_spline(&x, &y, &m, t) - (3.0 + 0.5 * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn bspline_is_floored_at_zero() {
        let t = traj(&[0, 50, 70, 130, 370], &[100.0, 0.0, 0.0, 200.0, 0.0]);
        let r = resample_bspline(&t).unwrap();
        assert!(r.volumes_mm3.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_volumes(&[200.0, 100.0, 50.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(n, [1.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(normalize_volumes(&[7.0; 7]).unwrap(), [1.0; 7]);
        assert!(normalize_volumes(&[0.0; 7]).is_err());
        assert_eq!(normalize_volumes(&n).unwrap(), n);
    }
}
