use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_with::skip_serializing_none;

use rendertime_core::baselines::LowResFit;
use rendertime_core::harness::{self, CollectConfig, CollectTarget, DatasetManifest};
use rendertime_core::raycast::{measure, Renderer};
use rendertime_core::util::JsonlSink;
use rendertime_core::volume::{gen_synthetic, save_raw, ManifestEntry, Recipe, VolumeManifest};

use super::{absolute, jsonl_writer, load_volumes, write_json};
use crate::opts::{need, parse_dims, parse_imgs, usage, CliError, CliResult};

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenVolumesArgs {
    /// Number of volumes [default: 8]
    #[arg(long)]
    pub count: Option<usize>,
    /// Side length N or XxYxZ, each in 16..=256 [default: 64]
    #[arg(long)]
    pub dims: Option<String>,
    /// blobs, fault_noise, shell, or mixed to cycle through all three [default: mixed]
    #[arg(long)]
    pub recipe: Option<String>,
    /// Seed of the first volume; volume i uses seed + i [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for raw files and volumes.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_volumes(a: GenVolumesArgs) -> CliResult<()> {
    let out = need(a.out, "out")?;
    let count = a.count.unwrap_or(8);
    if count == 0 {
        return usage("--count must be positive");
    }
    let dims = parse_dims(a.dims.as_deref().unwrap_or("64"))?;
    if dims.iter().any(|d| !(16..=256).contains(d)) {
        return usage(format!("invalid dims {dims:?}: each side must lie in 16..=256"));
    }
    let recipes: Vec<Recipe> = match a.recipe.as_deref().unwrap_or("mixed") {
        "mixed" => Recipe::ALL.to_vec(),
        r => vec![r.parse().map_err(CliError::Usage)?],
    };
    let seed = a.seed.unwrap_or(0);
    std::fs::create_dir_all(&out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let recipe = recipes[i % recipes.len()];
        let (v, meta) = gen_synthetic(seed + i as u64, dims, recipe)?;
        let file = format!("{}.raw", meta.id);
        save_raw(&v, &out.join(&file), &meta.id)?;
        println!("{}\t{:?}\tsparsity {:.3}", meta.id, dims, meta.sparsity);
        entries.push(ManifestEntry { meta, path: file, dims, recipe: Some(recipe) });
    }
    VolumeManifest { entries }.save(&out.join("volumes.json"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Wall,
    Cost,
    Synthetic,
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectArgs {
    /// Volume manifest (volumes.json)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Samples per training volume [default: 100]
    #[arg(long)]
    pub samples_per_volume: Option<usize>,
    /// Samples per validation/test volume [default: 10]
    #[arg(long)]
    pub eval_samples_per_volume: Option<usize>,
    /// Timed renders per sample; the median is kept [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Recorded time: measured wall ms, deterministic cost, or wall ms synthesized from cost [default: wall]
    #[arg(long, value_enum)]
    pub target: Option<TargetKind>,
    /// Synthetic target slope; calibrated on this machine when omitted
    #[arg(long)]
    pub ms_per_sample: Option<f64>,
    /// Synthetic target intercept; calibrated on this machine when omitted
    #[arg(long)]
    pub overhead_ms: Option<f64>,
    /// Comma-separated image sizes sampled uniformly [default: 256,512]
    #[arg(long)]
    pub resolutions: Option<String>,
    /// Transfer-function lobes per sample [default: 3]
    #[arg(long)]
    pub lobes: Option<usize>,
    /// Seed for the split and the sampled views [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output samples file (JSONL); the dataset manifest is written next to it
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fits `wall_ms = a * cost + b` on a few full renders of one volume.
fn calibrate(r: &Renderer, id: &str, cfg: &CollectConfig) -> CliResult<(f64, f64)> {
    let mut pairs = Vec::new();
    for p in harness::sample_params(cfg, id, 12)? {
        let rc = cfg.render.clone().with_image(p.img[0], p.img[1]);
        let m = measure(r, &p.tf, &p.pose, &rc, cfg.repeats)?;
        pairs.push((m.stats.samples_total() as f64, m.wall_ms));
    }
    let fit = LowResFit::fit(&pairs)?;
    Ok((fit.a.max(0.0), fit.b.max(0.0)))
}

pub fn collect(a: CollectArgs) -> CliResult<()> {
    let manifest = need(a.manifest, "manifest")?;
    let out = need(a.out, "out")?;
    let vols = load_volumes(&manifest)?;
    if vols.is_empty() {
        return Err(anyhow::anyhow!("manifest {} lists no volumes", manifest.display()).into());
    }
    let seed = a.seed.unwrap_or(0);
    let defaults = CollectConfig::default();
    let mut cfg = CollectConfig {
        train_samples_per_volume: a.samples_per_volume.unwrap_or(defaults.train_samples_per_volume),
        eval_samples_per_volume: a.eval_samples_per_volume.unwrap_or(defaults.eval_samples_per_volume),
        repeats: a.repeats.unwrap_or(defaults.repeats),
        lobes: a.lobes.unwrap_or(defaults.lobes),
        seed,
        target: CollectTarget::Cost,
        ..defaults
    };
    if let Some(r) = &a.resolutions {
        cfg.resolutions = parse_imgs(r)?;
    }
    if cfg.lobes == 0 || cfg.repeats == 0 {
        return usage("--lobes and --repeats must be positive");
    }
    cfg.target = match a.target.unwrap_or(TargetKind::Wall) {
        TargetKind::Wall => CollectTarget::Wall,
        TargetKind::Cost => CollectTarget::Cost,
        TargetKind::Synthetic => {
            let (ms_per_sample, overhead_ms) = match (a.ms_per_sample, a.overhead_ms) {
                (Some(m), Some(o)) => (m, o),
                (None, None) => {
                    let (meta, v) = &vols[0];
                    let fit = calibrate(&Renderer::new(v), &meta.id, &cfg)?;
                    eprintln!("calibrated synthetic target: {:.3e} ms/sample + {:.3} ms", fit.0, fit.1);
                    fit
                }
                _ => return usage("give both --ms-per-sample and --overhead-ms, or neither"),
            };
            CollectTarget::Synthetic { ms_per_sample, overhead_ms }
        }
    };

    let ids: Vec<String> = vols.iter().map(|(m, _)| m.id.clone()).collect();
    let split = harness::split_volumes(&ids, seed);
    let mut sink = JsonlSink::new(jsonl_writer(&out)?);
    let report = harness::collect(&vols, &split, &cfg, &mut |row| sink.push(row))?;
    let ds = DatasetManifest {
        volumes: absolute(&manifest).to_string_lossy().into_owned(),
        samples: out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        split,
        config: cfg,
    };
    write_json(&DatasetManifest::path_for(&out), &ds)?;
    println!("{} rows, {} failed renders", report.rows, report.failures);
    Ok(())
}
