//! Longitudinal brain-metastasis trajectory engine.
//!
//! Lesions are tracked across registered label volumes (or ingested as
//! trajectory tables), resampled onto a 60-day grid, classified with the
//! volumetric RANO-BM criteria, clustered into growth patterns, and used
//! to predict the one-year response with boosted trees or a temporal
//! graph-attention network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boost;
pub mod cluster;
pub mod error;
pub mod evalstat;
pub mod featspace;
pub mod ingest;
pub mod resample;
pub mod synthgen;
pub mod tgat;
pub mod track;
pub mod trajcore;

pub use error::{Error, Result};
pub use trajcore::{
    classify_response, classify_trajectory, compute_flows, LesionKey, LesionTrajectory, ResponseCategory,
    ResponseCriteria, ScanRecord, TransitionFlow,
};
