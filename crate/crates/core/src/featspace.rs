//! Feature assembly: per-time-point blocks, clinical encoding, noisy-point
//! imputation, fold-wise standardization and mask shape descriptors.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ClinicalEntry;
use crate::resample::{ResampledTrajectory, GRID_DAYS};
use crate::track::Geometry;
use crate::trajcore::LesionKey;

pub const SHAPE_PREFIX: &str = "shape_";
pub const INJECTED_PREFIX: &str = "feat_";
pub const MAX_HORIZON: usize = 5;

/// Replaces isolated zero-volume points (positive on both sides) by time-weighted
/// linear interpolation of volume and of every numeric feature shared by the neighbours.
///
/// Returns the indices that were imputed.
pub fn impute_series(
    days: &[u32],
    volumes: &mut [f64],
    features: &mut [BTreeMap<String, f64>],
    observed: &mut [bool],
) -> Vec<usize> {
    let n = volumes.len();
    let mut imputed = Vec::new();
    for k in 1..n.saturating_sub(1) {
        if volumes[k] == 0.0 && volumes[k - 1] > 0.0 && volumes[k + 1] > 0.0 {
            let span = (days[k + 1] - days[k - 1]) as f64;
            let w_next = (days[k] - days[k - 1]) as f64 / span;
            let w_prev = 1.0 - w_next;
            volumes[k] = w_prev * volumes[k - 1] + w_next * volumes[k + 1];
            let merged: BTreeMap<String, f64> = features[k - 1]
                .iter()
                .filter_map(|(name, &a)| features[k + 1].get(name).map(|&b| (name.clone(), w_prev * a + w_next * b)))
                .collect();
            for (name, v) in merged {
                features[k].insert(name, v);
            }
            observed[k] = false;
            imputed.push(k);
        }
    }
    imputed
}

/// Imputes noisy CR points on a resampled trajectory and refreshes the normalized volumes.
pub fn impute_noisy_points(res: &mut ResampledTrajectory) -> Result<Vec<usize>> {
    let imputed = impute_series(&GRID_DAYS, &mut res.volumes_mm3, &mut res.features, &mut res.observed);
    if !imputed.is_empty() {
        for &k in &imputed {
            res.source_index[k] = None;
        }
        res.renormalize()?;
    }
    Ok(imputed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrigin {
    TimePoint(usize),
    Clinical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub origin: ColumnOrigin,
    pub kind: ColumnKind,
}

/// Encoded clinical covariates, one row per lesion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClinicalBlock {
    pub columns: Vec<ColumnMeta>,
    pub rows: BTreeMap<LesionKey, Vec<f64>>,
}

impl ClinicalBlock {
    /// Encoded row for a lesion; lesions without any clinical entry get the all-missing row.
    pub fn row(&self, key: &LesionKey) -> Vec<f64> {
        self.rows.get(key).cloned().unwrap_or_else(|| vec![0.0; self.columns.len()])
    }
}

/// Numeric variables pass through, categorical ones are one-hot encoded over the
/// categories seen anywhere in `entries` (alphabetical). Missing values encode as zeros.
///
/// A variable is categorical as soon as one of its values is not a number.
/// Lesion-level entries take precedence over patient-level entries of the same name.
pub fn encode_clinical(entries: &[ClinicalEntry], lesions: &[LesionKey]) -> Result<ClinicalBlock> {
    let mut values: BTreeMap<(String, Option<String>, String), String> = BTreeMap::new();
    let mut categorical: BTreeMap<String, bool> = BTreeMap::new();
    let mut categories: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in entries {
        let key = (e.patient_id.clone(), e.lesion_id.clone(), e.name.clone());
        if let Some(prev) = values.get(&key) {
            if prev != &e.value {
                return Err(Error::Conflict(format!(
                    "patient {} lesion {} variable {}: {prev:?} vs {:?}",
                    e.patient_id,
                    e.lesion_id.as_deref().unwrap_or("*"),
                    e.name,
                    e.value
                )));
            }
        }
        values.insert(key, e.value.clone());
        let is_cat = categorical.entry(e.name.clone()).or_insert(false);
        if !e.value.is_empty() {
            categories.entry(e.name.clone()).or_default().insert(e.value.clone());
            if e.value.parse::<f64>().map_or(true, |v| !v.is_finite()) {
                *is_cat = true;
            }
        }
    }

    let mut columns = Vec::new();
    for (name, &is_cat) in &categorical {
        if is_cat {
            for cat in categories.get(name).into_iter().flatten() {
                columns.push(ColumnMeta { name: format!("{name}={cat}"), origin: ColumnOrigin::Clinical, kind: ColumnKind::OneHot });
            }
        } else {
            columns.push(ColumnMeta { name: name.clone(), origin: ColumnOrigin::Clinical, kind: ColumnKind::Numeric });
        }
    }

    let mut rows = BTreeMap::new();
    for key in lesions {
        let mut row = Vec::with_capacity(columns.len());
        for (name, &is_cat) in &categorical {
            let value = values
                .get(&(key.patient_id.clone(), Some(key.lesion_id.clone()), name.clone()))
                .or_else(|| values.get(&(key.patient_id.clone(), None, name.clone())))
                .filter(|v| !v.is_empty());
            if is_cat {
                for cat in categories.get(name).into_iter().flatten() {
                    row.push(if value == Some(cat) { 1.0 } else { 0.0 });
                }
            } else {
                row.push(value.and_then(|v| v.parse().ok()).unwrap_or(0.0));
            }
        }
        rows.insert(key.clone(), row);
    }
    Ok(ClinicalBlock { columns, rows })
}

/// Which feature families enter the per-time-point and clinical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSelection {
    pub volume: bool,
    /// Volume relative to baseline, `volume_rel@tk`.
    pub relative: bool,
    pub shape: bool,
    pub injected: bool,
    pub clinical: bool,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self { volume: true, relative: true, shape: false, injected: false, clinical: true }
    }
}

impl FeatureSelection {
    pub fn volume_only() -> Self {
        Self { volume: true, relative: false, shape: false, injected: false, clinical: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<LesionKey>,
    pub columns: Vec<ColumnMeta>,
    pub values: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            columns: self.columns.clone(),
            values: idx.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }

    /// Keeps the per-time-point columns up to `horizon` and the clinical block.
    pub fn truncate_horizon(&self, horizon: usize) -> FeatureMatrix {
        let keep: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| match c.origin {
                ColumnOrigin::TimePoint(k) => k <= horizon,
                ColumnOrigin::Clinical => true,
            })
            .map(|(j, _)| j)
            .collect();
        FeatureMatrix {
            rows: self.rows.clone(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            values: self.values.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["patient_id".to_string(), "lesion_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (key, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![key.patient_id.clone(), key.lesion_id.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn prefixed_names(trajs: &[ResampledTrajectory], prefix: &str, horizon: usize) -> BTreeSet<String> {
    trajs
        .iter()
        .flat_map(|t| t.features[..=horizon].iter())
        .flat_map(|f| f.keys())
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect()
}

/// Builds the design matrix: per-time-point blocks for t0..t`horizon` (suffix `@tk`), then the clinical block once.
pub fn assemble(
    trajs: &[ResampledTrajectory],
    clinical: Option<&ClinicalBlock>,
    horizon: usize,
    include: &FeatureSelection,
) -> Result<FeatureMatrix> {
    if horizon > MAX_HORIZON {
        return Err(Error::Config(format!("horizon {horizon} exceeds t{MAX_HORIZON}")));
    }
    let mut point_names: Vec<String> = Vec::new();
    if include.volume {
        point_names.push("volume_mm3".into());
    }
    if include.relative {
        point_names.push("volume_rel".into());
    }
    for (on, prefix) in [(include.shape, SHAPE_PREFIX), (include.injected, INJECTED_PREFIX)] {
        if !on {
            continue;
        }
        let names = prefixed_names(trajs, prefix, horizon);
        let missing: Vec<String> = trajs
            .iter()
            .filter(|t| t.features[..=horizon].iter().any(|f| names.iter().any(|n| !f.contains_key(n))))
            .map(|t| t.key().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFeatures(format!("`{prefix}*` features missing for lesions {}", missing.join(", "))));
        }
        if names.is_empty() && !trajs.is_empty() {
            return Err(Error::MissingFeatures(format!("no `{prefix}*` features in any lesion")));
        }
        point_names.extend(names);
    }

    let mut columns = Vec::new();
    for k in 0..=horizon {
        for name in &point_names {
            columns.push(ColumnMeta { name: format!("{name}@t{k}"), origin: ColumnOrigin::TimePoint(k), kind: ColumnKind::Numeric });
        }
    }
    let clinical = clinical.filter(|_| include.clinical);
    if let Some(block) = clinical {
        columns.extend(block.columns.iter().cloned());
    }

    let mut values = Vec::with_capacity(trajs.len());
    for t in trajs {
        let mut row = Vec::with_capacity(columns.len());
        for k in 0..=horizon {
            for name in &point_names {
                row.push(match name.as_str() {
                    "volume_mm3" => t.volumes_mm3[k],
                    "volume_rel" => t.normalized[k],
                    _ => t.features[k][name],
                });
            }
        }
        if let Some(block) = clinical {
            row.extend(block.row(&t.key()));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTrajectory(format!("{}: non-finite feature value {v}", t.key())));
        }
        values.push(row);
    }
    let keys: BTreeSet<LesionKey> = trajs.iter().map(|t| t.key()).collect();
    if keys.len() != trajs.len() {
        return Err(Error::InvalidTrajectory("duplicate lesion keys".into()));
    }
    Ok(FeatureMatrix { rows: trajs.iter().map(|t| t.key()).collect(), columns, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns constant on the training rows; they standardize to 0.
    pub constant: Vec<bool>,
}

/// Column means and population standard deviations over `train_rows`.
pub fn standardize_fit(matrix: &FeatureMatrix, train_rows: &[usize]) -> Result<StandardizationParams> {
    if train_rows.is_empty() {
        return Err(Error::InsufficientData("no training rows to standardize".into()));
    }
    let n = train_rows.len() as f64;
    let p = matrix.n_cols();
    let mut mean = vec![0.0; p];
    let mut std = vec![0.0; p];
    let mut constant = vec![true; p];
    for j in 0..p {
        let first = matrix.values[train_rows[0]][j];
        let mut sum = 0.0;
        for &i in train_rows {
            let v = matrix.values[i][j];
            sum += v;
            if v != first {
                constant[j] = false;
            }
        }
        mean[j] = sum / n;
        let var = train_rows.iter().map(|&i| (matrix.values[i][j] - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = if constant[j] { 0.0 } else { var.sqrt() };
    }
    Ok(StandardizationParams { columns: matrix.columns.iter().map(|c| c.name.clone()).collect(), mean, std, constant })
}

pub fn standardize_apply(params: &StandardizationParams, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    if params.columns.len() != matrix.n_cols() {
        return Err(Error::Dimension { expected: params.columns.len(), got: matrix.n_cols() });
    }
    let values = matrix
        .values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| if params.constant[j] { 0.0 } else { (v - params.mean[j]) / params.std[j] })
                .collect()
        })
        .collect();
    Ok(FeatureMatrix { rows: matrix.rows.clone(), columns: matrix.columns.clone(), values })
}

/// Mask shape descriptors of a voxel set (sorted linear indices).
///
/// Surface area counts exposed voxel faces. An empty set yields zeros.
pub fn shape_features(voxels: &[usize], geometry: &Geometry) -> BTreeMap<String, f64> {
    let names = [
        "volume_mm3",
        "voxel_count",
        "surface_area_mm2",
        "sphericity",
        "max_axis_extent_mm",
        "centroid_x_mm",
        "centroid_y_mm",
        "centroid_z_mm",
    ];
    let mut out: BTreeMap<String, f64> = names.iter().map(|n| (n.to_string(), 0.0)).collect();
    if voxels.is_empty() {
        return out;
    }
    let [sx, sy, sz] = geometry.spacing_mm;
    let face = [sy * sz, sx * sz, sx * sy];
    let contains = |x: i64, y: i64, z: i64| -> bool {
        let d = geometry.dims;
        if x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
            return false;
        }
        voxels.binary_search(&geometry.index(x as usize, y as usize, z as usize)).is_ok()
    };
    let mut area = 0.0;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut centroid = [0.0; 3];
    for &v in voxels {
        let c = geometry.coords(v);
        let (x, y, z) = (c[0] as i64, c[1] as i64, c[2] as i64);
        for (axis, (dx, dy, dz)) in [(0, (1, 0, 0)), (1, (0, 1, 0)), (2, (0, 0, 1))] {
            if !contains(x + dx, y + dy, z + dz) {
                area += face[axis];
            }
            if !contains(x - dx, y - dy, z - dz) {
                area += face[axis];
            }
        }
        let w = geometry.world(v);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
            centroid[a] += w[a];
        }
    }
    let n = voxels.len() as f64;
    let volume = n * geometry.voxel_volume();
    let extent = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64 * geometry.spacing_mm[a]).fold(0.0, f64::max);
    out.insert("volume_mm3".into(), volume);
    out.insert("voxel_count".into(), n);
    out.insert("surface_area_mm2".into(), area);
    out.insert("sphericity".into(), PI.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / area);
    out.insert("max_axis_extent_mm".into(), extent);
    out.insert("centroid_x_mm".into(), centroid[0] / n);
    out.insert("centroid_y_mm".into(), centroid[1] / n);
    out.insert("centroid_z_mm".into(), centroid[2] / n);
    out
}

/// Number of per-time-point columns in a matrix (columns with origin t0).
pub fn point_block_width(matrix: &FeatureMatrix) -> usize {
    matrix.columns.iter().filter(|c| c.origin == ColumnOrigin::TimePoint(0)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::resample_nn;
    use crate::trajcore::LesionTrajectory;

    fn entry(p: &str, l: Option<&str>, name: &str, value: &str) -> ClinicalEntry {
        ClinicalEntry { patient_id: p.into(), lesion_id: l.map(Into::into), name: name.into(), value: value.into() }
    }

    fn resampled(id: &str, vols: [f64; 7]) -> ResampledTrajectory {
        resample_nn(&LesionTrajectory::from_volumes("P", id, &GRID_DAYS, &vols).unwrap()).unwrap()
    }

    #[test]
    fn imputation_examples() {
        let days = [0, 60, 120];
        let mut feats = vec![BTreeMap::new(); 3];
        let mut obs = [true; 3];
        let mut v = [100.0, 0.0, 80.0];
        assert_eq!(impute_series(&days, &mut v, &mut feats, &mut obs), vec![1]);
        assert_eq!(v[1], 90.0);
        assert!(!obs[1]);

        let mut v = [100.0, 0.0, 0.0, 80.0];
        let mut feats = vec![BTreeMap::new(); 4];
        assert!(impute_series(&[0, 60, 120, 180], &mut v, &mut feats, &mut [true; 4]).is_empty());

        let mut v = [100.0, 50.0, 80.0];
        assert!(impute_series(&days, &mut v, &mut vec![BTreeMap::new(); 3], &mut [true; 3]).is_empty());
        assert_eq!(v, [100.0, 50.0, 80.0]);
    }

    #[test]
    fn imputation_uses_time_weights_and_features() {
        let mut feats = vec![BTreeMap::new(); 3];
        feats[0].insert("feat_a".to_string(), 10.0);
        feats[2].insert("feat_a".to_string(), 40.0);
        let mut v = [100.0, 0.0, 40.0];
        impute_series(&[0, 30, 120], &mut v, &mut feats, &mut [true; 3]);
        assert!((v[1] - 85.0).abs() < 1e-12);
        assert!((feats[1]["feat_a"] - 17.5).abs() < 1e-12);
    }

    #[test]
    fn imputation_keeps_terminal_zeros() {
        let mut r = resampled("L", [100.0, 50.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(impute_noisy_points(&mut r).unwrap().is_empty());
        let mut r = resampled("L", [100.0, 0.0, 60.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(impute_noisy_points(&mut r).unwrap(), vec![1]);
        assert_eq!(r.volumes_mm3[1], 80.0);
        assert_eq!(r.normalized[1], 0.8);
        assert_eq!(r.source_index[1], None);
    }

    #[test]
    fn one_hot_alphabetical() {
        let lesions = [LesionKey::new("P1", "L1"), LesionKey::new("P2", "L1"), LesionKey::new("P3", "L1")];
        let e = vec![
            entry("P1", None, "primary", "Lung"),
            entry("P2", None, "primary", "Melanoma"),
            entry("P3", None, "primary", "Breast"),
            entry("P1", None, "age", "61"),
        ];
        let b = encode_clinical(&e, &lesions).unwrap();
        let names: Vec<&str> = b.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["age", "primary=Breast", "primary=Lung", "primary=Melanoma"]);
        assert_eq!(b.row(&lesions[1]), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.row(&lesions[0]), vec![61.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sex_is_exactly_one_hot() {
        let lesions = [LesionKey::new("P1", "L1"), LesionKey::new("P2", "L1")];
        let e = vec![entry("P1", None, "sex", "Female"), entry("P2", None, "sex", "Male")];
        let b = encode_clinical(&e, &lesions).unwrap();
        assert_eq!(b.columns.len(), 2);
        for k in &lesions {
            assert_eq!(b.row(k).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn missing_and_conflicting_clinical() {
        let lesions = [LesionKey::new("P1", "L1"), LesionKey::new("P9", "L1")];
        let b = encode_clinical(&[entry("P1", None, "age", "70")], &lesions).unwrap();
        assert_eq!(b.row(&lesions[1]), vec![0.0]);
        let err = encode_clinical(&[entry("P1", None, "age", "70"), entry("P1", None, "age", "71")], &lesions);
        assert!(matches!(err, Err(Error::Conflict(msg)) if msg.contains("age")));
        let b = encode_clinical(&[entry("P1", None, "n", "1"), entry("P1", Some("L1"), "n", "2")], &lesions).unwrap();
        assert_eq!(b.row(&lesions[0]), vec![2.0]);
    }

    #[test]
    fn assemble_shapes() {
        let trajs = vec![resampled("L1", [100.0, 80.0, 60.0, 50.0, 40.0, 30.0, 20.0]), resampled("L2", [10.0; 7])];
        let keys: Vec<LesionKey> = trajs.iter().map(|t| t.key()).collect();
        let block = encode_clinical(&[entry("P", None, "age", "50")], &keys).unwrap();
        let sel = FeatureSelection { clinical: true, ..FeatureSelection::volume_only() };
        let m0 = assemble(&trajs, Some(&block), 0, &sel).unwrap();
        assert_eq!(m0.n_cols(), 2);
        let m1 = assemble(&trajs, Some(&block), 1, &sel).unwrap();
        assert_eq!(m1.n_cols(), 3);
        assert_eq!(m1.columns[1].name, "volume_mm3@t1");
        let m5 = assemble(&trajs, None, 5, &FeatureSelection::volume_only()).unwrap();
        assert_eq!(m5.values[0], trajs[0].volumes_mm3[..6].to_vec());
        assert_eq!(m5.truncate_horizon(1).n_cols(), 2);

        let rel = assemble(&trajs, Some(&block), 1, &FeatureSelection::default()).unwrap();
        let names: Vec<&str> = rel.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["volume_mm3@t0", "volume_rel@t0", "volume_mm3@t1", "volume_rel@t1", "age"]);
        assert_eq!(rel.values[0], vec![100.0, 1.0, 80.0, 0.8, 50.0]);
    }

    #[test]
    fn assemble_reports_missing_injected() {
        let mut a = resampled("L1", [1.0; 7]);
        for f in &mut a.features {
            f.insert("feat_x".into(), 1.0);
        }
        let b = resampled("L2", [1.0; 7]);
        let sel = FeatureSelection { injected: true, ..FeatureSelection::volume_only() };
        match assemble(&[a, b], None, 2, &sel) {
            Err(Error::MissingFeatures(msg)) => assert!(msg.contains("P/L2") && !msg.contains("P/L1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardize_examples() {
        let m = FeatureMatrix {
            rows: (0..3).map(|i| LesionKey::new("P", i.to_string())).collect(),
            columns: vec![
                ColumnMeta { name: "a".into(), origin: ColumnOrigin::Clinical, kind: ColumnKind::Numeric },
                ColumnMeta { name: "c".into(), origin: ColumnOrigin::Clinical, kind: ColumnKind::Numeric },
            ],
            values: vec![vec![1.0, 0.1], vec![2.0, 0.1], vec![3.0, 0.1]],
        };
        let p = standardize_fit(&m, &[0, 1, 2]).unwrap();
        assert_eq!(p.mean[0], 2.0);
        assert!((p.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(p.constant[1]);
        let z = standardize_apply(&p, &m).unwrap();
        assert_eq!(z.values[1][0], 0.0);
        assert!(z.values.iter().all(|r| r[1] == 0.0));
        assert!(standardize_fit(&m, &[]).is_err());
    }

    #[test]
    fn shape_of_single_voxel_and_cube() {
        let g = Geometry { dims: [4, 4, 4], spacing_mm: [1.0; 3], origin_mm: [0.0; 3] };
        let one = shape_features(&[g.index(1, 1, 1)], &g);
        assert_eq!(one["surface_area_mm2"], 6.0);
        let expected = PI.cbrt() * 6f64.powf(2.0 / 3.0) / 6.0;
        assert!((one["sphericity"] - expected).abs() < 1e-12);
        assert!((one["sphericity"] - 0.806).abs() < 1e-3);

        let mut cube: Vec<usize> = (0..8).map(|i| g.index(i & 1, (i >> 1) & 1, i >> 2)).collect();
        cube.sort_unstable();
        let s = shape_features(&cube, &g);
        assert_eq!((s["volume_mm3"], s["surface_area_mm2"]), (8.0, 24.0));

        let g2 = Geometry { spacing_mm: [2.5; 3], ..g };
        let s2 = shape_features(&cube, &g2);
        assert!((s2["sphericity"] - s["sphericity"]).abs() < 1e-12);
        assert!(shape_features(&[], &g).values().all(|&v| v == 0.0));
    }
}
