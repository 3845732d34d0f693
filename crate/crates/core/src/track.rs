//! Lesion extraction from label volumes and correspondence across time points.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featspace::shape_features;
use crate::trajcore::{LesionTrajectory, ScanRecord};

/// Grid geometry shared by every volume of a registered series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Geometry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    /// Linear index in x-fastest order.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    /// World position of a voxel center; the origin is the center of voxel (0,0,0).
    pub fn world(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        std::array::from_fn(|a| self.origin_mm[a] + c[a] as f64 * self.spacing_mm[a])
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Shape(format!("dims {:?} must be positive", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape(format!("spacing {:?} must be positive", self.spacing_mm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub geometry: Geometry,
    /// Zero is background; x-fastest order.
    pub labels: Vec<u16>,
}

/// JSON sidecar describing a raw little-endian label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u16>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "{} labels for dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn empty(geometry: Geometry) -> Result<Self> {
        Self::new(geometry, vec![0; geometry.len()])
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn sidecar(&self) -> VolumeSidecar {
        VolumeSidecar {
            dims: self.geometry.dims,
            spacing_mm: self.geometry.spacing_mm,
            origin_mm: self.geometry.origin_mm,
            dtype: "u16".into(),
            order: "x-fastest".into(),
        }
    }

    pub fn from_parts(sidecar: &VolumeSidecar, raw: &[u8]) -> Result<Self> {
        if sidecar.dtype != "u16" || sidecar.order != "x-fastest" {
            return Err(Error::Config(format!(
                "unsupported volume encoding dtype={} order={}",
                sidecar.dtype, sidecar.order
            )));
        }
        let geometry = Geometry { dims: sidecar.dims, spacing_mm: sidecar.spacing_mm, origin_mm: sidecar.origin_mm };
        geometry.validate()?;
        if raw.len() != 2 * geometry.len() {
            return Err(Error::Shape(format!(
                "raw volume has {} bytes, expected {}",
                raw.len(),
                2 * geometry.len()
            )));
        }
        let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Self::new(geometry, labels)
    }

    pub fn to_raw(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }

    pub fn read(raw_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: VolumeSidecar = serde_json::from_slice(&fs::read(sidecar_path)?)?;
        Self::from_parts(&sidecar, &fs::read(raw_path)?)
    }

    pub fn write(&self, raw_path: &Path, sidecar_path: &Path) -> Result<()> {
        fs::write(raw_path, self.to_raw())?;
        fs::write(sidecar_path, serde_json::to_vec_pretty(&self.sidecar())?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionComponent {
    pub component_id: usize,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    pub centroid_mm: [f64; 3],
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
}

impl LesionComponent {
    fn from_voxels(geometry: &Geometry, mut voxels: Vec<usize>) -> Self {
        voxels.sort_unstable();
        let mut c = [0.0; 3];
        for &v in &voxels {
            let w = geometry.world(v);
            for a in 0..3 {
                c[a] += w[a];
            }
        }
        let n = voxels.len() as f64;
        Self {
            component_id: 0,
            voxel_count: voxels.len(),
            volume_mm3: n * geometry.voxel_volume(),
            centroid_mm: c.map(|s| s / n),
            voxels,
        }
    }

    pub fn centroid_distance(&self, other: &LesionComponent) -> f64 {
        (0..3).map(|a| (self.centroid_mm[a] - other.centroid_mm[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// 26-connected foreground components, largest first (ties by centroid).
pub fn connected_components(vol: &LabelVolume) -> Vec<LesionComponent> {
    let g = &vol.geometry;
    let [nx, ny, nz] = g.dims;
    let mut seen = vec![false; vol.labels.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..vol.labels.len() {
        if vol.labels[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(v) = queue.pop_front() {
            voxels.push(v);
            let [x, y, z] = g.coords(v);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let n = g.index(xx as usize, yy as usize, zz as usize);
                        if vol.labels[n] != 0 && !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        comps.push(LesionComponent::from_voxels(g, voxels));
    }
    comps.sort_by(|a, b| {
        b.voxel_count.cmp(&a.voxel_count).then_with(|| {
            a.centroid_mm
                .iter()
                .zip(&b.centroid_mm)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    for (i, c) in comps.iter_mut().enumerate() {
        c.component_id = i;
    }
    comps
}

/// Components of one time point together with the grid they live on.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    pub geometry: Geometry,
    pub components: Vec<LesionComponent>,
}

impl ComponentSet {
    pub fn from_volume(vol: &LabelVolume) -> Self {
        Self { geometry: vol.geometry, components: connected_components(vol) }
    }
}

/// Indices refer to positions in the two component lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub appeared: Vec<usize>,
    pub disappeared: Vec<usize>,
}

/// Voxel intersection counts between every pair of components, `[a][b]`.
pub fn overlap_table(geometry: &Geometry, a: &[LesionComponent], b: &[LesionComponent]) -> Vec<Vec<usize>> {
    let mut owner = vec![u32::MAX; geometry.len()];
    for (j, c) in b.iter().enumerate() {
        for &v in &c.voxels {
            owner[v] = j as u32;
        }
    }
    a.iter()
        .map(|c| {
            let mut row = vec![0usize; b.len()];
            for &v in &c.voxels {
                if owner[v] != u32::MAX {
                    row[owner[v] as usize] += 1;
                }
            }
            row
        })
        .collect()
}

/// Greedy matching by descending overlap, then ascending centroid distance.
///
/// Zero-overlap pairs are admissible when their centroids are within `max_centroid_mm`.
pub fn match_components(a: &ComponentSet, b: &ComponentSet, max_centroid_mm: f64) -> Result<MatchResult> {
    if a.geometry != b.geometry {
        return Err(Error::Alignment(format!("{:?} vs {:?}", a.geometry, b.geometry)));
    }
    Ok(match_lists(&a.geometry, &a.components, &b.components, max_centroid_mm))
}

fn match_lists(
    geometry: &Geometry,
    a: &[LesionComponent],
    b: &[LesionComponent],
    max_centroid_mm: f64,
) -> MatchResult {
    let overlap = overlap_table(geometry, a, b);
    let mut candidates = Vec::new();
    for (i, ca) in a.iter().enumerate() {
        for (j, cb) in b.iter().enumerate() {
            let dist = ca.centroid_distance(cb);
            if overlap[i][j] > 0 || dist <= max_centroid_mm {
                candidates.push((overlap[i][j], dist, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.0.cmp(&x.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut result = MatchResult::default();
    for (_, _, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            result.pairs.push((i, j));
        }
    }
    result.disappeared = (0..a.len()).filter(|&i| !used_a[i]).collect();
    result.appeared = (0..b.len()).filter(|&j| !used_b[j]).collect();
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewLesion {
    pub day: u32,
    pub volume_mm3: f64,
    pub centroid_mm: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct TrackingOutput {
    pub trajectories: Vec<LesionTrajectory>,
    /// Components first seen after day 0; they have no treatment baseline.
    pub new_lesions: Vec<NewLesion>,
    pub decisions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub max_centroid_mm: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { max_centroid_mm: 10.0 }
    }
}

fn record_for(day: u32, comp: Option<&LesionComponent>, geometry: &Geometry) -> ScanRecord {
    let mut rec = ScanRecord::new(day, comp.map_or(0.0, |c| c.volume_mm3));
    let features = match comp {
        Some(c) => shape_features(&c.voxels, geometry),
        None => shape_features(&[], geometry),
    };
    rec.features = features.into_iter().map(|(k, v)| (format!("shape_{k}"), v)).collect();
    rec
}

/// Chains day-0 lesions through a registered series of label volumes.
pub fn build_trajectories(
    patient_id: &str,
    series: &[(u32, LabelVolume)],
    cfg: &TrackConfig,
) -> Result<TrackingOutput> {
    let Some((first_day, first_vol)) = series.first() else {
        return Err(Error::InsufficientData("empty series".into()));
    };
    if *first_day != 0 {
        return Err(Error::InvalidTrajectory(format!("series starts at day {first_day}, not 0")));
    }
    for pair in series.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::InvalidTrajectory("series days must be strictly ascending".into()));
        }
        if pair[1].1.geometry != pair[0].1.geometry {
            return Err(Error::Alignment(format!("volume at day {} differs in geometry", pair[1].0)));
        }
    }
    let geometry = first_vol.geometry;
    let mut out = TrackingOutput::default();
    let seeds = connected_components(first_vol);
    if seeds.is_empty() {
        out.decisions.push(format!("{patient_id}: empty day-0 volume, no lesions"));
        return Ok(out);
    }
    let mut records: Vec<Vec<ScanRecord>> =
        seeds.iter().map(|c| vec![record_for(0, Some(c), &geometry)]).collect();
    let mut current: Vec<Option<LesionComponent>> = seeds.into_iter().map(Some).collect();

    for (day, vol) in &series[1..] {
        let next = connected_components(vol);
        let active: Vec<usize> = (0..current.len()).filter(|&l| current[l].is_some()).collect();
        let prev: Vec<LesionComponent> = active.iter().map(|&l| current[l].clone().unwrap()).collect();
        let m = match_lists(&geometry, &prev, &next, cfg.max_centroid_mm);
        let overlap = overlap_table(&geometry, &prev, &next);
        let mut assigned: BTreeMap<usize, usize> = BTreeMap::new();
        for &(i, j) in &m.pairs {
            assigned.insert(active[i], j);
        }
        for &i in &m.disappeared {
            if let Some(j) = (0..next.len()).find(|&j| overlap[i][j] > 0) {
                let winner = m.pairs.iter().find(|p| p.1 == j).map(|p| active[p.0]);
                out.decisions.push(format!(
                    "{patient_id}: day {day}: lesion L{} merged into component of lesion L{}, recorded as 0",
                    active[i] + 1,
                    winner.map_or(0, |w| w + 1)
                ));
            }
        }
        for &j in &m.appeared {
            out.new_lesions.push(NewLesion { day: *day, volume_mm3: next[j].volume_mm3, centroid_mm: next[j].centroid_mm });
        }
        for l in 0..current.len() {
            let comp = assigned.get(&l).map(|&j| next[j].clone());
            records[l].push(record_for(*day, comp.as_ref(), &geometry));
            current[l] = comp;
        }
    }
    for (l, recs) in records.into_iter().enumerate() {
        out.trajectories.push(LesionTrajectory::new(patient_id, format!("L{}", l + 1), recs)?);
    }
    Ok(out)
}
