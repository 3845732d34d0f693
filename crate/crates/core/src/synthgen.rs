//! Synthetic lesion cohorts built from five growth archetypes with irregular scan schedules.
//!
//! Archetype magnitudes are hand-calibrated; tests should rely only on the
//! response classes and separability they induce.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalstat::Task;
use crate::ingest::ClinicalEntry;
use crate::resample::{resample, ResampleMethod};
use crate::track::{Geometry, LabelVolume};
use crate::trajcore::{classify_trajectory, LesionTrajectory, ResponseCategory, ResponseCriteria};

pub const N_ARCHETYPES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub id: usize,
    pub name: &'static str,
    pub weight: f64,
}

impl ArchetypeSpec {
    /// Relative volume at normalized time `tau = day / 360`.
    pub fn shape(&self, tau: f64) -> f64 {
        archetype_shape(self.id, tau)
    }
}

pub const ARCHETYPES: [ArchetypeSpec; N_ARCHETYPES] = [
    ArchetypeSpec { id: 0, name: "early complete response", weight: 0.40 },
    ArchetypeSpec { id: 1, name: "pseudoprogression", weight: 0.10 },
    ArchetypeSpec { id: 2, name: "partial shrinkage", weight: 0.20 },
    ArchetypeSpec { id: 3, name: "rapid growth", weight: 0.15 },
    ArchetypeSpec { id: 4, name: "accelerating growth", weight: 0.15 },
];

pub fn archetype_shape(id: usize, tau: f64) -> f64 {
    let tau = tau.max(0.0);
    match id {
        0 => (1.0 - 12.0 * tau).max(0.0),
        1 => {
            if tau < 0.25 {
                1.0 + 0.8 * tau / 0.25
            } else {
                1.8 * (-3.3 * (tau - 0.25)).exp()
            }
        }
        2 => 0.45 + 0.55 * (-tau / 0.12).exp(),
        3 => 6.0 - 5.0 * (-tau / 0.1).exp(),
        4 => 1.0 + 2.0 * tau * tau,
        _ => panic!("archetype {id} out of range"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_lesions: usize,
    pub seed: u64,
    pub weights: [f64; N_ARCHETYPES],
    /// σ of the multiplicative lognormal noise per scan.
    pub noise_sigma: f64,
    pub baseline_median_mm3: f64,
    pub baseline_log_sigma: f64,
    pub interval_mean_days: f64,
    pub interval_sd_days: f64,
    pub interval_min_days: u32,
    pub interval_max_days: u32,
    pub min_span_days: u32,
    pub max_lesions_per_patient: usize,
    pub clinical: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lesions: 500,
            seed: 0,
            weights: ARCHETYPES.map(|a| a.weight),
            noise_sigma: 0.1,
            baseline_median_mm3: 60.0,
            baseline_log_sigma: 0.8,
            interval_mean_days: 60.0,
            interval_sd_days: 20.0,
            interval_min_days: 30,
            interval_max_days: 119,
            min_span_days: 360,
            max_lesions_per_patient: 8,
            clinical: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lesions < 10 {
            return Err(Error::Config(format!("need at least 10 lesions, got {}", self.n_lesions)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid archetype weights {:?}", self.weights)));
        }
        let schedule_ok = self.interval_min_days >= 1
            && self.interval_min_days <= self.interval_max_days
            && self.interval_sd_days >= 0.0
            && self.interval_mean_days > 0.0
            && self.min_span_days > 0;
        if !schedule_ok {
            return Err(Error::Config("invalid scan schedule parameters".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.baseline_median_mm3 > 0.0) || !(self.baseline_log_sigma >= 0.0) {
            return Err(Error::Config("invalid volume or noise parameters".into()));
        }
        if self.max_lesions_per_patient == 0 {
            return Err(Error::Config("max_lesions_per_patient must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLesion {
    pub trajectory: LesionTrajectory,
    pub archetype: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohort {
    pub lesions: Vec<SyntheticLesion>,
    pub clinical: Vec<ClinicalEntry>,
}

impl SyntheticCohort {
    pub fn trajectories(&self) -> Vec<LesionTrajectory> {
        self.lesions.iter().map(|l| l.trajectory.clone()).collect()
    }

    pub fn archetypes(&self) -> Vec<usize> {
        self.lesions.iter().map(|l| l.archetype).collect()
    }
}

fn lesion_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Day 0 followed by clipped normal increments until the span reaches `min_span_days`.
pub fn draw_schedule(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let step = Normal::new(cfg.interval_mean_days, cfg.interval_sd_days).map_err(|e| Error::Config(e.to_string()))?;
    let mut days = vec![0u32];
    while *days.last().unwrap() < cfg.min_span_days {
        let inc = step.sample(rng).round().clamp(cfg.interval_min_days as f64, cfg.interval_max_days as f64);
        days.push(days.last().unwrap() + inc as u32);
    }
    Ok(days)
}

/// Volumes `baseline · shape(day / 360) · noise`; the baseline scan is left noise-free.
pub fn archetype_volumes(archetype: usize, baseline: f64, days: &[u32], noise_sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = LogNormal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid lognormal");
    days.iter()
        .map(|&d| {
            let v = baseline * archetype_shape(archetype, d as f64 / 360.0);
            if d == 0 || noise_sigma == 0.0 {
                v
            } else {
                v * noise.sample(rng)
            }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pick = WeightedIndex::new(cfg.weights).map_err(|e| Error::Config(e.to_string()))?;
    let baseline = LogNormal::new(cfg.baseline_median_mm3.ln(), cfg.baseline_log_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let width = cfg.n_lesions.to_string().len().max(4);

    let mut lesions = Vec::with_capacity(cfg.n_lesions);
    let mut clinical = Vec::new();
    let mut patient = 0usize;
    while lesions.len() < cfg.n_lesions {
        patient += 1;
        let patient_id = format!("S{patient:0width$}");
        let count = master.random_range(1..=cfg.max_lesions_per_patient).min(cfg.n_lesions - lesions.len());
        for _ in 0..count {
            let index = lesions.len();
            let mut rng = ChaCha8Rng::seed_from_u64(lesion_seed(cfg.seed, index));
            let archetype = pick.sample(&mut rng);
            let days = draw_schedule(cfg, &mut rng)?;
            let base = baseline.sample(&mut rng);
            let volumes = archetype_volumes(archetype, base, &days, cfg.noise_sigma, &mut rng);
            let lesion_id = format!("L{:0width$}", index + 1);
            let trajectory = LesionTrajectory::from_volumes(&patient_id, &lesion_id, &days, &volumes)?;
            lesions.push(SyntheticLesion { trajectory, archetype });
        }
        if cfg.clinical {
            let age = (62.0 + 11.0 * master.sample::<f64, _>(rand_distr::StandardNormal)).round().clamp(25.0, 95.0);
            let sex = if master.random_bool(0.5) { "F" } else { "M" };
            let primary = ["breast", "lung", "melanoma", "other"][master.random_range(0..4)];
            for (name, value) in [("age", age.to_string()), ("sex", sex.into()), ("primary", primary.into())] {
                clinical.push(ClinicalEntry { patient_id: patient_id.clone(), lesion_id: None, name: name.into(), value });
            }
        }
    }
    Ok(SyntheticCohort { lesions, clinical })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortLabels {
    pub t6: Vec<ResponseCategory>,
    pub cr: Vec<bool>,
    pub resp: Vec<bool>,
}

impl CohortLabels {
    pub fn for_task(&self, task: Task) -> &[bool] {
        match task {
            Task::CrVsNoncr => &self.cr,
            Task::RespVsNonresp => &self.resp,
        }
    }
}

/// t6 categories and task labels, computed by resampling and classifying each generated trajectory.
pub fn label_targets(trajectories: &[LesionTrajectory], method: ResampleMethod, criteria: &ResponseCriteria) -> Result<CohortLabels> {
    let mut t6 = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let res = resample(t, method)?;
        let cats = classify_trajectory(&res, criteria)?;
        t6.push(cats.last().expect("grid has seven points").1);
    }
    let cr = t6.iter().map(|&c| Task::CrVsNoncr.is_positive(c)).collect();
    let resp = t6.iter().map(|&c| Task::RespVsNonresp.is_positive(c)).collect();
    Ok(CohortLabels { t6, cr, resp })
}

pub fn write_labels<W: Write>(writer: W, cohort: &SyntheticCohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lesion_id", "archetype"])?;
    for l in &cohort.lesions {
        w.write_record([l.trajectory.lesion_id.as_str(), &l.archetype.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A ball whose radius is given per time point; radius 0 means absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereLesion {
    pub center_mm: [f64; 3],
    pub radii_mm: Vec<f64>,
}

/// Binary label volumes (label 1) with each sphere rasterized by voxel-center inclusion.
pub fn sphere_mask_series(geometry: &Geometry, days: &[u32], spheres: &[SphereLesion]) -> Result<Vec<(u32, LabelVolume)>> {
    if let Some(s) = spheres.iter().find(|s| s.radii_mm.len() != days.len()) {
        return Err(Error::Dimension { expected: days.len(), got: s.radii_mm.len() });
    }
    days.iter()
        .enumerate()
        .map(|(t, &day)| {
            let mut labels = vec![0u16; geometry.len()];
            for (idx, label) in labels.iter_mut().enumerate() {
                let p = geometry.world(idx);
                let inside = spheres.iter().any(|s| {
                    let r = s.radii_mm[t];
                    r > 0.0 && (0..3).map(|a| (p[a] - s.center_mm[a]).powi(2)).sum::<f64>() <= r * r
                });
                if inside {
                    *label = 1;
                }
            }
            Ok((day, LabelVolume::new(*geometry, labels)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajcore::ResponseCategory::*;

    fn noise_free(weights: [f64; 5], n: usize) -> SynthConfig {
        SynthConfig { n_lesions: n, seed: 11, weights, noise_sigma: 0.0, ..SynthConfig::default() }
    }

    #[test]
    fn shapes_start_at_one() {
        for a in ARCHETYPES {
            assert_eq!(a.shape(0.0), 1.0);
            assert!((0..=60).all(|k| a.shape(k as f64 / 40.0) >= 0.0));
        }
        assert_eq!(archetype_shape(0, 0.2), 0.0);
    }

    #[test]
    fn archetype_outcomes() {
        let crit = ResponseCriteria::default();
        let cases = [(0, CR), (1, PR), (2, SD), (3, PD), (4, PD)];
        for (a, expected) in cases {
            let mut w = [0.0; 5];
            w[a] = 1.0;
            let cohort = generate(&noise_free(w, 30)).unwrap();
            let labels = label_targets(&cohort.trajectories(), ResampleMethod::Nearest, &crit).unwrap();
            assert!(labels.t6.iter().all(|&c| c == expected), "archetype {a}: {:?}", labels.t6);
        }
    }

    #[test]
    fn rapid_growth_is_progressive_throughout() {
        let cohort = generate(&noise_free([0.0, 0.0, 0.0, 1.0, 0.0], 20)).unwrap();
        for l in &cohort.lesions {
            let cats = classify_trajectory(&l.trajectory, &ResponseCriteria::default()).unwrap();
            assert!(cats.iter().all(|(_, c)| *c == PD));
        }
    }

    #[test]
    fn schedules_respect_bounds() {
        let cohort = generate(&SynthConfig { n_lesions: 200, ..SynthConfig::default() }).unwrap();
        for l in &cohort.lesions {
            let days = l.trajectory.days();
            assert_eq!(days[0], 0);
            assert!(*days.last().unwrap() >= 360);
            assert!(days.windows(2).all(|w| (30..=119).contains(&(w[1] - w[0]))));
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig { n_lesions: 57, seed: 4, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.lesions.len(), 57);
        assert!(generate(&SynthConfig { n_lesions: 5, ..cfg }).is_err());
    }

    #[test]
    fn empty_labels() {
        let l = label_targets(&[], ResampleMethod::Nearest, &ResponseCriteria::default()).unwrap();
        assert!(l.t6.is_empty() && l.cr.is_empty());
    }

    #[test]
    fn sphere_rasterization() {
        let g = Geometry { dims: [11, 11, 11], spacing_mm: [1.0; 3], origin_mm: [0.0; 3] };
        let s = SphereLesion { center_mm: [5.0; 3], radii_mm: vec![1.0, 0.0] };
        let series = sphere_mask_series(&g, &[0, 60], &[s]).unwrap();
        assert_eq!(series[0].1.foreground_count(), 7);
        assert_eq!(series[1].1.foreground_count(), 0);
    }
}
