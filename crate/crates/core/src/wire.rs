//! JSON bodies of the HTTP API, shared by the service and its clients.

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::raycast::{RenderStats, DELTA_MAX, DELTA_MIN};
use crate::stepctl::GTable;
use crate::transfer::TransferFunction;
use crate::volume::VolumeMeta;

pub const MAX_IMAGE_SIDE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerRequest {
    pub enabled: bool,
    pub target_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub volume_id: String,
    pub pose: CameraPose,
    pub kappa: Vec<f32>,
    pub img: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub frame_png_b64: String,
    pub stats: RenderStats,
    pub predicted_ms: f64,
    pub delta_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub volume_id: String,
    pub pose: CameraPose,
    pub kappa: Vec<f32>,
    pub img: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub dims: [usize; 3],
    pub meta: VolumeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GSummary {
    pub points: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub tnorm_min: f64,
    pub tnorm_max: f64,
    pub table: GTable,
}

impl GSummary {
    pub fn of(g: &GTable) -> Self {
        let fold = |init: f64, f: fn(f64, f64) -> f64, v: &[f64]| v.iter().copied().fold(init, f);
        Self {
            points: g.deltas.len(),
            delta_min: fold(f64::INFINITY, f64::min, &g.deltas),
            delta_max: fold(f64::NEG_INFINITY, f64::max, &g.deltas),
            tnorm_min: fold(f64::INFINITY, f64::min, &g.tnorm),
            tnorm_max: fold(f64::NEG_INFINITY, f64::max, &g.tnorm),
            table: g.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub descriptor: String,
    pub lobes: usize,
    pub target: String,
    pub delta_ref: f64,
    pub g: Option<GSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// A request field that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl FieldError {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, message: message.into() }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Query parameters after validation.
#[derive(Debug, Clone)]
pub struct Query {
    pub pose: CameraPose,
    pub tf: TransferFunction,
    pub img: (usize, usize),
}

pub fn validate_query(pose: &CameraPose, kappa: &[f32], img: [usize; 2], lobes: usize) -> Result<Query, FieldError> {
    let pose = CameraPose::new(pose.rx, pose.ry, pose.dz).map_err(|e| FieldError::new("pose", e.to_string()))?;
    if kappa.len() != 3 * lobes {
        return Err(FieldError::new("kappa", format!("expected {} values, got {}", 3 * lobes, kappa.len())));
    }
    let tf = TransferFunction::from_kappa(kappa).map_err(|e| FieldError::new("kappa", e.to_string()))?;
    if img.iter().any(|&s| s == 0 || s > MAX_IMAGE_SIDE) {
        return Err(FieldError::new("img", format!("sides must be in 1..={MAX_IMAGE_SIDE}, got {img:?}")));
    }
    Ok(Query { pose, tf, img: (img[0], img[1]) })
}

impl PredictRequest {
    pub fn validate(&self, lobes: usize) -> Result<Query, FieldError> {
        validate_query(&self.pose, &self.kappa, self.img, lobes)
    }
}

impl RenderRequest {
    pub fn validate(&self, lobes: usize) -> Result<Query, FieldError> {
        let q = validate_query(&self.pose, &self.kappa, self.img, lobes)?;
        if let Some(d) = self.delta {
            if !(d.is_finite() && (DELTA_MIN as f64..=DELTA_MAX as f64).contains(&d)) {
                return Err(FieldError::new("delta", format!("must be in [{DELTA_MIN}, {DELTA_MAX}], got {d}")));
            }
        }
        if let Some(c) = &self.controller {
            if c.enabled && !(c.target_ms.is_finite() && c.target_ms > 0.0) {
                return Err(FieldError::new("controller.target_ms", "must be positive"));
            }
        }
        Ok(q)
    }
}
