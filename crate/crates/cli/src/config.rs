use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bmtraj::cluster::GmmConfig;
use bmtraj::evalstat::{Method, ProtocolConfig, Task};
use bmtraj::featspace::{FeatureSelection, MAX_HORIZON};
use bmtraj::ingest::{CohortCriteria, SwingRule};
use bmtraj::resample::ResampleMethod;
use bmtraj::synthgen::SynthConfig;
use bmtraj::track::TrackConfig;
use bmtraj::ResponseCriteria;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub trajectories: Option<PathBuf>,
    pub clinical: Option<PathBuf>,
    pub series: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub evaluations: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every module's settings plus the master seed and file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub patient_id: String,
    pub criteria: ResponseCriteria,
    pub cohort: CohortCriteria,
    pub swing: SwingRule,
    pub include_flagged: bool,
    pub resample: ResampleMethod,
    pub track: TrackConfig,
    pub features: FeatureSelection,
    pub horizon: usize,
    pub task: Task,
    pub methods: Vec<Method>,
    pub gmm: GmmConfig,
    pub protocol: ProtocolConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            patient_id: "P1".into(),
            criteria: ResponseCriteria::default(),
            cohort: CohortCriteria::default(),
            swing: SwingRule::default(),
            include_flagged: false,
            resample: ResampleMethod::default(),
            track: TrackConfig::default(),
            features: FeatureSelection::default(),
            horizon: MAX_HORIZON,
            task: Task::CrVsNoncr,
            methods: vec![Method::Gbdt],
            gmm: GmmConfig::default(),
            protocol: ProtocolConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> bmtraj::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Pushes the master seed into every seeded component and checks all sections.
    pub fn materialize(&mut self) -> bmtraj::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bmtraj::Error::Config(format!(
                "config schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.gmm.seed = self.seed;
        self.protocol.seed = self.seed;
        self.synth.seed = self.seed;
        self.criteria.validate()?;
        self.cohort.validate()?;
        self.protocol.validate()?;
        if self.horizon > MAX_HORIZON {
            return Err(bmtraj::Error::Config(format!("horizon {} exceeds t{MAX_HORIZON}", self.horizon)));
        }
        if self.methods.is_empty() {
            return Err(bmtraj::Error::Config("no evaluation methods selected".into()));
        }
        Ok(())
    }

    /// The configuration without file locations, for embedding in reports.
    pub fn settings(&self) -> RunConfig {
        RunConfig { paths: Paths::default(), ..self.clone() }
    }
}
