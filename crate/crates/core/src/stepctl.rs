//! Step-size control: the normalized time-vs-step curve `G`, its inverse,
//! and a per-frame controller that picks the ray step for a time budget.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraPose, PoseError};
use crate::raycast::{measure, RenderConfig, RenderError, Renderer, DELTA_MAX, DELTA_MIN, DELTA_REF};
use crate::transfer::{TfError, TransferFunction};
use crate::util::median;

#[derive(Debug, Error)]
pub enum StepCtlError {
    #[error("degenerate step sweep: {0}")]
    DegenerateSweep(String),
    #[error("invalid G table: {0}")]
    InvalidTable(String),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("path needs at least one keyframe with ascending times")]
    InvalidPath,
    #[error("prediction failed: {0}")]
    Predict(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tf(#[from] TfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StepCtlError>;

pub const MIN_SWEEP_POINTS: usize = 8;
pub const DEFAULT_TARGET_MS: f64 = 25.0;
pub const BAND: f64 = 0.2;

/// Default sweep over [0.25, 4] voxel spacings.
pub fn default_sweep() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0]
}

/// Three fixed poses used for measuring `G`.
pub fn default_g_poses() -> Vec<CameraPose> {
    [(30.0, 20.0, 1.5), (150.0, -35.0, 2.0), (260.0, 60.0, 2.5)]
        .into_iter()
        .map(|(rx, ry, dz)| CameraPose { rx, ry, dz })
        .collect()
}

/// Tabulated `t(δ) / t(δ_ref)`, non-increasing in δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTable {
    pub deltas: Vec<f64>,
    pub tnorm: Vec<f64>,
    pub delta_ref: f64,
}

/// Pool-adjacent-violators projection onto non-increasing sequences
/// (unweighted least squares).
pub fn isotonic_non_increasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let n = n1 + n2;
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n));
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

fn check_sweep(deltas: &[f64], delta_ref: f64) -> Result<usize> {
    let bad = |m: &str| Err(StepCtlError::DegenerateSweep(m.to_string()));
    if deltas.len() < MIN_SWEEP_POINTS {
        return bad("fewer than 8 step sizes");
    }
    if deltas.windows(2).any(|w| w[0] >= w[1]) || deltas.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return bad("step sizes must be positive and strictly ascending");
    }
    match deltas.iter().position(|&d| (d - delta_ref).abs() < 1e-12) {
        Some(i) => Ok(i),
        None => bad("sweep must contain the reference step"),
    }
}

impl GTable {
    /// Builds `G` from raw timing curves measured over `deltas`: each curve
    /// is normalized by its value at `delta_ref`, curves are combined by the
    /// per-step median, projected to be non-increasing, and renormalized so
    /// that `G(delta_ref) = 1`.
    pub fn from_curves(deltas: &[f64], curves: &[Vec<f64>], delta_ref: f64) -> Result<Self> {
        let iref = check_sweep(deltas, delta_ref)?;
        if curves.is_empty() {
            return Err(StepCtlError::DegenerateSweep("no curves".into()));
        }
        let mut normed = Vec::with_capacity(curves.len());
        for c in curves {
            if c.len() != deltas.len() || c.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(StepCtlError::DegenerateSweep("curve values must be positive".into()));
            }
            normed.push(c.iter().map(|t| t / c[iref]).collect::<Vec<f64>>());
        }
        let med: Vec<f64> = (0..deltas.len())
            .map(|j| median(&normed.iter().map(|c| c[j]).collect::<Vec<_>>()).expect("non-empty"))
            .collect();
        let iso = isotonic_non_increasing(&med);
        let r = iso[iref];
        let mut tnorm: Vec<f64> = iso.iter().map(|v| v / r).collect();
        tnorm[iref] = 1.0;
        Ok(Self { deltas: deltas.to_vec(), tnorm, delta_ref })
    }

    pub fn validate(&self) -> Result<()> {
        let iref = check_sweep(&self.deltas, self.delta_ref).map_err(|e| StepCtlError::InvalidTable(e.to_string()))?;
        if self.tnorm.len() != self.deltas.len() {
            return Err(StepCtlError::InvalidTable("length mismatch".into()));
        }
        if self.tnorm.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(StepCtlError::InvalidTable("values must be positive".into()));
        }
        if self.tnorm.windows(2).any(|w| w[1] > w[0]) {
            return Err(StepCtlError::InvalidTable("values must be non-increasing".into()));
        }
        if (self.tnorm[iref] - 1.0).abs() > 1e-6 {
            return Err(StepCtlError::InvalidTable("G(delta_ref) must be 1".into()));
        }
        Ok(())
    }

    /// `G(δ) = δ_ref / δ`, the curve of a renderer whose cost is
    /// proportional to the number of steps.
    pub fn reciprocal(deltas: &[f64], delta_ref: f64) -> Result<Self> {
        check_sweep(deltas, delta_ref)?;
        let tnorm = deltas.iter().map(|d| if *d == delta_ref { 1.0 } else { delta_ref / d }).collect();
        Ok(Self { deltas: deltas.to_vec(), tnorm, delta_ref })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.validate()?;
        Ok(crate::util::write_json(path, self)?)
    }

    /// Reads and validates a table written by [`GTable::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let g: Self = crate::util::read_json(path)?;
        g.validate()?;
        Ok(g)
    }

    pub fn eval(&self, delta: f64) -> f64 {
        g_eval(self, delta)
    }

    pub fn inverse(&self, ratio: f64) -> f64 {
        g_inverse(self, ratio)
    }
}

/// Piecewise-linear `G(δ)`, clamped to the table's step range.
pub fn g_eval(g: &GTable, delta: f64) -> f64 {
    let d = &g.deltas;
    let delta = delta.clamp(d[0], d[d.len() - 1]);
    let i = d.partition_point(|&x| x <= delta).clamp(1, d.len() - 1);
    let t = (delta - d[i - 1]) / (d[i] - d[i - 1]);
    g.tnorm[i - 1] + t * (g.tnorm[i] - g.tnorm[i - 1])
}

/// Step size with `G(δ) = ratio`, clamped to the table range. On flat
/// stretches the smallest such δ is returned.
pub fn g_inverse(g: &GTable, ratio: f64) -> f64 {
    let (d, t) = (&g.deltas, &g.tnorm);
    let n = d.len();
    if ratio >= t[0] {
        return d[0];
    }
    if ratio <= t[n - 1] {
        return d[n - 1];
    }
    // First segment whose right end drops to `ratio` or below.
    let i = (1..n).find(|&i| t[i] <= ratio).expect("ratio above table minimum");
    if t[i - 1] == t[i] {
        return d[i - 1];
    }
    let s = (t[i - 1] - ratio) / (t[i - 1] - t[i]);
    d[i - 1] + s * (d[i] - d[i - 1])
}

/// Unit of `t_target`, predictions and measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    /// Deterministic sample counts (benchmark mode).
    #[default]
    Cost,
    /// Wall-clock milliseconds (live mode).
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GBuildConfig {
    pub deltas: Vec<f64>,
    pub delta_ref: f64,
    pub poses: Vec<CameraPose>,
    pub kappa: Vec<f32>,
    pub unit: TimeUnit,
    pub repeats: usize,
    pub render: RenderConfig,
}

impl Default for GBuildConfig {
    fn default() -> Self {
        Self {
            deltas: default_sweep(),
            delta_ref: DELTA_REF as f64,
            poses: default_g_poses(),
            kappa: vec![0.3, 0.05, 0.6, 0.55, 0.08, 0.8, 0.8, 0.05, 1.0],
            unit: TimeUnit::Cost,
            repeats: 3,
            render: RenderConfig::default().with_image(128, 128),
        }
    }
}

fn frame_time(r: &Renderer, tf: &TransferFunction, pose: &CameraPose, cfg: &RenderConfig, unit: TimeUnit, repeats: usize) -> Result<(f64, f64)> {
    match unit {
        TimeUnit::Cost => {
            let st = r.cost(tf, pose, cfg)?;
            Ok((st.samples_total() as f64, st.wall_ms))
        }
        TimeUnit::Wall => {
            let m = measure(r, tf, pose, cfg, repeats)?;
            Ok((m.wall_ms, m.wall_ms))
        }
    }
}

/// Measures one curve per (volume, pose) across the sweep and combines them.
pub fn build_g(renderers: &[Renderer], cfg: &GBuildConfig) -> Result<GTable> {
    check_sweep(&cfg.deltas, cfg.delta_ref)?;
    let tf = TransferFunction::from_kappa(&cfg.kappa)?;
    let mut curves = Vec::new();
    for r in renderers {
        for pose in &cfg.poses {
            let mut curve = Vec::with_capacity(cfg.deltas.len());
            for &d in &cfg.deltas {
                let rc = cfg.render.clone().with_step(d as f32);
                curve.push(frame_time(r, &tf, pose, &rc, cfg.unit, cfg.repeats)?.0);
            }
            curves.push(curve);
        }
    }
    GTable::from_curves(&cfg.deltas, &curves, cfg.delta_ref)
}

/// One keyframe; `t` in seconds. Angles are interpolated without wrapping,
/// so an orbit can run from 0 to 360.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub rx: f64,
    pub ry: f64,
    pub dz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraPath {
    pub keys: Vec<Keyframe>,
}

impl CameraPath {
    pub fn validate(&self) -> Result<()> {
        if self.keys.is_empty() || self.keys.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(StepCtlError::InvalidPath);
        }
        let m = self.keys[0].kappa.as_ref().map(|k| k.len());
        if self.keys.iter().any(|k| k.kappa.as_ref().map(|k| k.len()) != m) {
            return Err(StepCtlError::InvalidPath);
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.keys.last().map_or(0.0, |k| k.t)
    }

    /// Pose and optional κ at time `t`, clamped to the keyed range.
    pub fn at(&self, t: f64) -> Result<(CameraPose, Option<Vec<f32>>)> {
        let k = &self.keys;
        let i = k.partition_point(|x| x.t <= t);
        if i == 0 || i == k.len() {
            let key = if i == 0 { &k[0] } else { &k[k.len() - 1] };
            return Ok((CameraPose::new(key.rx, key.ry, key.dz)?, key.kappa.clone()));
        }
        let (a, b) = (&k[i - 1], &k[i]);
        let s = (t - a.t) / (b.t - a.t);
        let lerp = |x: f64, y: f64| x + s * (y - x);
        let kappa = match (&a.kappa, &b.kappa) {
            (Some(ka), Some(kb)) => Some(ka.iter().zip(kb).map(|(x, y)| x + s as f32 * (y - x)).collect()),
            _ => None,
        };
        Ok((CameraPose::new(lerp(a.rx, b.rx), lerp(a.ry, b.ry), lerp(a.dz, b.dz))?, kappa))
    }

    /// Full orbit at fixed elevation with the distance oscillating between
    /// `dz_near` and `dz_far`.
    pub fn orbit(duration: f64, ry: f64, dz_near: f64, dz_far: f64, keys: usize) -> Self {
        let keys = keys.max(2);
        let keys = (0..keys)
            .map(|i| {
                let s = i as f64 / (keys - 1) as f64;
                let dz = dz_near + (dz_far - dz_near) * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * s).cos());
                Keyframe { t: s * duration, rx: 360.0 * s, ry, dz, kappa: None }
            })
            .collect();
        Self { keys }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub t_target: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_ref: f64,
    pub unit: TimeUnit,
    /// Benchmark mode: fixed number of frames spread evenly over the path.
    pub frames: Option<usize>,
    /// Live mode: stop once this much wall time has elapsed.
    pub duration_s: Option<f64>,
    /// Disables the controller and renders every frame at this step.
    pub fixed_delta: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            t_target: DEFAULT_TARGET_MS,
            delta_min: DELTA_MIN as f64,
            delta_max: DELTA_MAX as f64,
            delta_ref: DELTA_REF as f64,
            unit: TimeUnit::Wall,
            frames: None,
            duration_s: None,
            fixed_delta: None,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StepCtlError::InvalidConfig(m.to_string()));
        if !(self.t_target > 0.0) {
            return bad("t_target must be positive");
        }
        if !(self.delta_min < self.delta_ref && self.delta_ref < self.delta_max) {
            return bad("need delta_min < delta_ref < delta_max");
        }
        if self.delta_min < DELTA_MIN as f64 || self.delta_max > DELTA_MAX as f64 {
            return bad("step bounds exceed the renderer's range");
        }
        if self.frames.is_none() && self.duration_s.is_none() {
            return bad("either frames or duration_s must be set");
        }
        Ok(())
    }
}

/// Alg. 1 step: `δ = δ_ref · G⁻¹(t_target / t_pred)`, clamped. The table is
/// indexed relative to its own reference step.
pub fn adapt_delta(g: &GTable, cfg: &ControllerConfig, t_pred: f64) -> f64 {
    let ratio = if t_pred > 0.0 { cfg.t_target / t_pred } else { f64::INFINITY };
    let rel = g_inverse(g, ratio) / g.delta_ref;
    (cfg.delta_ref * rel).clamp(cfg.delta_min, cfg.delta_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame: usize,
    pub t: f64,
    pub pose: CameraPose,
    pub t_pred: f64,
    pub delta: f64,
    pub cost: u64,
    pub wall_ms: f64,
    /// Achieved time in the configured unit.
    pub t_actual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub frames: usize,
    pub within_band: usize,
    pub fraction_within: f64,
}

pub fn summarize(log: &[FrameLog], t_target: f64, band: f64) -> ControlSummary {
    let within = log.iter().filter(|f| (f.t_actual - t_target).abs() <= band * t_target).count();
    ControlSummary {
        frames: log.len(),
        within_band: within,
        fraction_within: if log.is_empty() { 0.0 } else { within as f64 / log.len() as f64 },
    }
}

/// Predicts the frame time at the reference step.
pub type Predictor<'a> = dyn FnMut(&CameraPose, &TransferFunction, (usize, usize)) -> std::result::Result<f64, String> + 'a;

/// Runs the closed loop along `path`, rendering each frame at the adapted
/// step (or at `fixed_delta`) and reporting every frame to `sink`.
#[allow(clippy::too_many_arguments)]
pub fn control_loop(
    renderer: &Renderer,
    tf: &TransferFunction,
    path: &CameraPath,
    g: &GTable,
    cfg: &ControllerConfig,
    render: &RenderConfig,
    predict: &mut Predictor<'_>,
    sink: &mut dyn FnMut(&FrameLog) -> std::io::Result<()>,
) -> Result<Vec<FrameLog>> {
    cfg.validate()?;
    path.validate()?;
    g.validate()?;
    let img = (render.width, render.height);
    let mut out = Vec::new();
    let start = Instant::now();
    let mut frame = 0;
    loop {
        let t = match (cfg.frames, cfg.duration_s) {
            (Some(n), _) => {
                if frame >= n {
                    break;
                }
                if n > 1 { path.duration() * frame as f64 / (n - 1) as f64 } else { 0.0 }
            }
            (None, Some(dur)) => {
                let el = start.elapsed().as_secs_f64();
                if el >= dur {
                    break;
                }
                path.duration() * (el / dur)
            }
            (None, None) => unreachable!("validated"),
        };
        let (pose, kappa) = path.at(t)?;
        let frame_tf = match kappa {
            Some(k) => TransferFunction::from_kappa(&k)?,
            None => tf.clone(),
        };
        let t_pred = predict(&pose, &frame_tf, img).map_err(StepCtlError::Predict)?;
        let delta = match cfg.fixed_delta {
            Some(d) => d.clamp(cfg.delta_min, cfg.delta_max),
            None => adapt_delta(g, cfg, t_pred),
        };
        let rc = render.clone().with_step(delta as f32);
        let (cost, wall_ms) = match cfg.unit {
            TimeUnit::Cost => {
                let st = renderer.cost(&frame_tf, &pose, &rc)?;
                (st.samples_total(), st.wall_ms)
            }
            TimeUnit::Wall => {
                let (_, st) = renderer.render(&frame_tf, &pose, &rc)?;
                (st.samples_total(), st.wall_ms)
            }
        };
        let t_actual = match cfg.unit {
            TimeUnit::Cost => cost as f64,
            TimeUnit::Wall => wall_ms,
        };
        let row = FrameLog { frame, t, pose, t_pred, delta, cost, wall_ms, t_actual };
        sink(&row)?;
        out.push(row);
        frame += 1;
    }
    Ok(out)
}
