use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_with::skip_serializing_none;

use rendertime_core::bundle::ModelBundle;
use rendertime_core::harness::TrainTarget;
use rendertime_core::raycast::{RenderConfig, Renderer};
use rendertime_core::stepctl::{
    build_g, control_loop, default_sweep, summarize, CameraPath, ControllerConfig, GBuildConfig, GTable, TimeUnit, BAND,
    DEFAULT_TARGET_MS,
};
use rendertime_core::util::{read_json, JsonlSink};
use rendertime_core::wire::GSummary;

use super::{find_volume, jsonl_writer, load_volumes, print_json};
use crate::opts::{need, parse_img, parse_list, parse_tf, usage, CliError, CliResult, DEFAULT_KAPPA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitArg {
    Cost,
    Wall,
}

impl From<UnitArg> for TimeUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Cost => TimeUnit::Cost,
            UnitArg::Wall => TimeUnit::Wall,
        }
    }
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBenchArgs {
    /// Model bundle supplying the per-frame prediction
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Volume manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Volume id to render
    #[arg(long)]
    pub volume: Option<String>,
    /// Step-size table (JSON) [default: the bundle's table, else delta_ref/delta]
    #[arg(long)]
    pub g: Option<PathBuf>,
    /// Camera path (JSON keyframes) [default: one orbit over 10 s, distance 1.5 to 3]
    #[arg(long)]
    pub path: Option<PathBuf>,
    /// Frames spread evenly over the path (benchmark mode) [default: 200]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Run for this many wall seconds instead of a fixed frame count (live mode)
    #[arg(long)]
    pub duration: Option<f64>,
    /// Frame budget in the chosen unit [default: 25 for wall; required for cost]
    #[arg(long)]
    pub target: Option<f64>,
    /// Time unit: deterministic cost or wall ms [default: the bundle's training target]
    #[arg(long, value_enum)]
    pub unit: Option<UnitArg>,
    /// Disable the controller and render every frame at this step
    #[arg(long)]
    pub fixed_delta: Option<f64>,
    /// Image size N or WxH [default: 256]
    #[arg(long)]
    pub img: Option<String>,
    /// Transfer function as c,w,h triples [default: 3 preset lobes]
    #[arg(long)]
    pub kappa: Option<String>,
    /// Per-frame log (JSONL)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn control_bench(a: ControlBenchArgs) -> CliResult<()> {
    let bundle = ModelBundle::load(&need(a.model.clone(), "model")?).context("reading model bundle")?;
    let vols = load_volumes(&need(a.manifest.clone(), "manifest")?)?;
    let id = need(a.volume.clone(), "volume")?;
    let out = need(a.out.clone(), "out")?;
    let vol = find_volume(&vols, &id)?;
    let tf = parse_tf(a.kappa.as_deref().unwrap_or(DEFAULT_KAPPA))?;
    if tf.lobes().len() != bundle.lobes() {
        return usage(format!("the model expects {} lobes, --kappa has {}", bundle.lobes(), tf.lobes().len()));
    }
    let img = parse_img(a.img.as_deref().unwrap_or("256"))?;
    let unit: TimeUnit = match a.unit {
        Some(u) => u.into(),
        None if bundle.target == TrainTarget::Cost => TimeUnit::Cost,
        None => TimeUnit::Wall,
    };
    let t_target = match (a.target, unit) {
        (Some(t), _) => t,
        (None, TimeUnit::Wall) => DEFAULT_TARGET_MS,
        (None, TimeUnit::Cost) => return usage("--target is required with --unit cost"),
    };
    let g = match (&a.g, &bundle.g) {
        (Some(p), _) => GTable::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(g)) => g.clone(),
        (None, None) => GTable::reciprocal(&default_sweep(), bundle.delta_ref)?,
    };
    let path = match &a.path {
        Some(p) => read_json::<CameraPath>(p).with_context(|| format!("reading {}", p.display()))?,
        None => CameraPath::orbit(10.0, 20.0, 1.5, 3.0, 9),
    };
    let frames = match (a.frames, a.duration) {
        (Some(_), Some(_)) => return usage("give --frames or --duration, not both"),
        (None, None) => Some(200),
        (f, _) => f,
    };
    let cfg = ControllerConfig {
        t_target,
        delta_ref: bundle.delta_ref,
        unit,
        frames,
        duration_s: a.duration,
        fixed_delta: a.fixed_delta,
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let feature = match bundle.feature(&id) {
        Some(f) => f.to_vec(),
        None => bundle.encode_volume(&id, vol)?.values,
    };
    let renderer = Renderer::new(vol);
    let render = RenderConfig::default().with_image(img[0], img[1]);
    let mut predict = |p: &_, tf: &_, img| bundle.prednet.predict(&feature, p, tf, img).map_err(|e| e.to_string());
    let mut sink = JsonlSink::new(jsonl_writer(&out)?);
    let log = control_loop(&renderer, &tf, &path, &g, &cfg, &render, &mut predict, &mut |row| sink.push(row))?;
    print_json(&summarize(&log, t_target, BAND))
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GBuildArgs {
    /// Volume manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated volume ids [default: all]
    #[arg(long)]
    pub volumes: Option<String>,
    /// cost or wall [default: cost]
    #[arg(long, value_enum)]
    pub unit: Option<UnitArg>,
    /// Timed renders per point in wall mode [default: 3]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Image size N or WxH [default: 128]
    #[arg(long)]
    pub img: Option<String>,
    /// Transfer function as c,w,h triples [default: 3 preset lobes]
    #[arg(long)]
    pub kappa: Option<String>,
    /// Comma-separated step sizes, at least 8, including the reference [default: 0.25 to 4, log-spaced]
    #[arg(long)]
    pub deltas: Option<String>,
    /// Reference step size [default: 1]
    #[arg(long)]
    pub delta_ref: Option<f64>,
    /// Output table (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn g_build(a: GBuildArgs) -> CliResult<()> {
    let manifest = need(a.manifest.clone(), "manifest")?;
    let out = need(a.out.clone(), "out")?;
    let vols = load_volumes(&manifest)?;
    let selected: Vec<&rendertime_core::volume::Volume> = match &a.volumes {
        Some(ids) => ids.split(',').map(|id| find_volume(&vols, id.trim())).collect::<CliResult<_>>()?,
        None => vols.iter().map(|(_, v)| v).collect(),
    };
    if selected.is_empty() {
        return usage("no volumes selected");
    }
    let img = parse_img(a.img.as_deref().unwrap_or("128"))?;
    let defaults = GBuildConfig::default();
    let cfg = GBuildConfig {
        deltas: match &a.deltas {
            Some(d) => parse_list(d, "deltas")?,
            None => defaults.deltas.clone(),
        },
        delta_ref: a.delta_ref.unwrap_or(defaults.delta_ref),
        kappa: parse_tf(a.kappa.as_deref().unwrap_or(DEFAULT_KAPPA))?.kappa(),
        unit: a.unit.map_or(TimeUnit::Cost, Into::into),
        repeats: a.repeats.unwrap_or(defaults.repeats),
        render: defaults.render.clone().with_image(img[0], img[1]),
        poses: defaults.poses,
    };
    let renderers: Vec<Renderer> = selected.iter().map(|v| Renderer::new(v)).collect();
    let g = build_g(&renderers, &cfg).map_err(|e| match e {
        rendertime_core::stepctl::StepCtlError::DegenerateSweep(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    g.save(&out).with_context(|| format!("writing {}", out.display()))?;
    print_json(&GSummary::of(&g))
}
