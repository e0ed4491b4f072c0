use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_with::skip_serializing_none;

use rendertime_client::Client;
use rendertime_core::baselines::{bruder_mean, BRUDER_FRACTION};
use rendertime_core::bundle::{compute_features, join_rows, ModelBundle};
use rendertime_core::eval::{error_distribution, mean_err, rmse, run_ablation, std_err};
use rendertime_core::harness::SplitRole;
use rendertime_core::lpt::{compare_estimators, TaskSet};
use rendertime_core::nn::OptimConfig;
use rendertime_core::prednet::InputGroup;
use rendertime_core::util::{read_json, read_jsonl};
use rendertime_core::volume::Volume;
use rendertime_core::wire::{PredictRequest, PredictResponse};

use super::{find_volume, load_volumes, print_json, write_json, Dataset};
use crate::opts::{need, parse_drop_set, parse_img, parse_list, parse_pose, parse_tf, usage, CliResult, DEFAULT_KAPPA};

fn load_bundle(path: &Path) -> CliResult<ModelBundle> {
    Ok(ModelBundle::load(path).with_context(|| format!("reading {}", path.display()))?)
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictArgs {
    /// Model bundle (not needed with --server)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Volume manifest, for volumes whose features are not stored in the bundle
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Volume id
    #[arg(long)]
    pub volume: Option<String>,
    /// Camera pose rx,ry,dz [default: 0,0,2]
    #[arg(long)]
    pub pose: Option<String>,
    /// Transfer function as comma-separated c,w,h triples [default: 3 preset lobes]
    #[arg(long)]
    pub kappa: Option<String>,
    /// Image size N or WxH [default: 256]
    #[arg(long)]
    pub img: Option<String>,
    /// Ask a running service instead of loading the model, e.g. http://127.0.0.1:8080
    #[arg(long)]
    pub server: Option<String>,
    /// Task file whose est_time fields are filled in (writes --out)
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Output task file for --tasks
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Feature vector of `id`: stored in the bundle, else encoded from the manifest.
fn feature_for(bundle: &ModelBundle, vols: &Option<Vec<(rendertime_core::volume::VolumeMeta, Volume)>>, id: &str) -> CliResult<Vec<f32>> {
    if let Some(f) = bundle.feature(id) {
        return Ok(f.to_vec());
    }
    match vols {
        Some(vols) => Ok(bundle.encode_volume(id, find_volume(vols, id)?)?.values),
        None => usage(format!("volume {id:?} has no stored feature; pass --manifest")),
    }
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    if let Some(tasks) = &a.tasks {
        return predict_tasks(&a, tasks);
    }
    let volume = need(a.volume.clone(), "volume")?;
    let pose = parse_pose(a.pose.as_deref().unwrap_or("0,0,2"))?;
    let tf = parse_tf(a.kappa.as_deref().unwrap_or(DEFAULT_KAPPA))?;
    let img = parse_img(a.img.as_deref().unwrap_or("256"))?;
    let resp = if let Some(server) = &a.server {
        let req = PredictRequest { volume_id: volume, pose, kappa: tf.kappa(), img };
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        rt.block_on(Client::new(server).predict(&req))?
    } else {
        let bundle = load_bundle(&need(a.model.clone(), "model")?)?;
        let vols = a.manifest.as_deref().map(load_volumes).transpose()?;
        let f = feature_for(&bundle, &vols, &volume)?;
        PredictResponse { predicted_ms: bundle.prednet.predict(&f, &pose, &tf, (img[0], img[1]))? }
    };
    print_json(&resp)
}

fn predict_tasks(a: &PredictArgs, path: &Path) -> CliResult<()> {
    let out = need(a.out.clone(), "out")?;
    let bundle = load_bundle(&need(a.model.clone(), "model")?)?;
    let vols = a.manifest.as_deref().map(load_volumes).transpose()?;
    let mut set: TaskSet = read_json(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cache: std::collections::HashMap<String, Vec<f32>> = Default::default();
    for t in &mut set.tasks {
        if !cache.contains_key(&t.volume_id) {
            cache.insert(t.volume_id.clone(), feature_for(&bundle, &vols, &t.volume_id)?);
        }
        let tf = rendertime_core::transfer::TransferFunction::from_kappa(&t.kappa)?;
        let est = bundle.prednet.predict(&cache[&t.volume_id], &t.pose, &tf, (t.img[0], t.img[1]))?;
        // LPT needs positive estimates.
        t.est_time = Some(est.max(f64::MIN_POSITIVE));
    }
    write_json(&out, &set)?;
    println!("{} tasks estimated", set.tasks.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl From<Role> for SplitRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Train => SplitRole::Train,
            Role::Val => SplitRole::Val,
            Role::Test => SplitRole::Test,
        }
    }
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// JSONL of {"pred": .., "truth": ..} rows, evaluated as given
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Model bundle to evaluate on --data
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset manifest (or samples file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to evaluate on [default: test]
    #[arg(long, value_enum)]
    pub role: Option<Role>,
    /// Seed of the baseline's subsample [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Squared-error histogram file (JSON)
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredRow {
    pub pred: f64,
    pub truth: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    n: usize,
    rmse: f64,
    mean_err: f64,
    std_err: f64,
    truth_mean: f64,
    bruder_rmse: f64,
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let (pred, truth): (Vec<f64>, Vec<f64>) = match (&a.predictions, &a.model) {
        (Some(p), None) => {
            let rows: Vec<PredRow> = read_jsonl(p).with_context(|| format!("reading {}", p.display()))?;
            rows.into_iter().map(|r| (r.pred, r.truth)).unzip()
        }
        (None, Some(m)) => {
            let bundle = load_bundle(m)?;
            let ds = Dataset::load(&need(a.data.clone(), "data")?)?;
            let named: Vec<(String, &Volume)> = ds.volumes.iter().map(|(m, v)| (m.id.clone(), v)).collect();
            let feats = compute_features(&bundle.volumenet, &named)?;
            let role = a.role.unwrap_or(Role::Test).into();
            let rows = join_rows(&ds.manifest.split.select(&ds.rows, role), &feats, bundle.target)?;
            let pred = bundle.prednet.predict_rows(&rows.iter().map(|r| r.x.clone()).collect::<Vec<_>>())?;
            (pred, rows.iter().map(|r| r.y).collect())
        }
        _ => return usage("give exactly one of --predictions or --model"),
    };
    if truth.is_empty() {
        return usage("nothing to evaluate: no rows");
    }
    let b = bruder_mean(&truth, BRUDER_FRACTION, a.seed.unwrap_or(0))?;
    let report = EvalReport {
        n: truth.len(),
        rmse: rmse(&pred, &truth)?,
        mean_err: mean_err(&pred, &truth)?,
        std_err: std_err(&pred, &truth)?,
        truth_mean: truth.iter().sum::<f64>() / truth.len() as f64,
        bruder_rmse: rmse(&vec![b.prediction; truth.len()], &truth)?,
    };
    println!("RMSE {:?}", report.rmse);
    println!("mean error {:?}, std error {:?}, n {}", report.mean_err, report.std_err, report.n);
    println!("baseline (mean of {:.0}% sample) RMSE {:?}", BRUDER_FRACTION * 100.0, report.bruder_rmse);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if let Some(h) = &a.hist {
        write_json(h, &error_distribution(&pred, &truth)?)?;
    }
    Ok(())
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    /// Model bundle; its autoencoder supplies the features and its descriptor the predictor shape
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset manifest (or samples file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Semicolon-separated drop sets [default: none;feature;pose;tf;resolution]
    #[arg(long)]
    pub drops: Option<String>,
    /// Maximum epochs per retrain [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Early-stopping patience [default: 20]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Training seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let bundle = load_bundle(&need(a.model.clone(), "model")?)?;
    let ds = Dataset::load(&need(a.data.clone(), "data")?)?;
    let drops: Vec<Vec<InputGroup>> = a
        .drops
        .as_deref()
        .unwrap_or("none;feature;pose;tf;resolution")
        .split(';')
        .map(parse_drop_set)
        .collect::<CliResult<_>>()?;
    let base = OptimConfig::prednet();
    let lr = a.lr.unwrap_or(base.lr_max);
    let cfg = OptimConfig {
        lr_max: lr,
        lr_min: base.lr_min.min(lr),
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        patience: a.patience.unwrap_or(base.patience),
        ..base
    };
    let named: Vec<(String, &Volume)> = ds.volumes.iter().map(|(m, v)| (m.id.clone(), v)).collect();
    let feats = compute_features(&bundle.volumenet, &named)?;
    let split = &ds.manifest.split;
    let rows = |role| join_rows(&split.select(&ds.rows, role), &feats, bundle.target);
    let (train, val, test) = (rows(SplitRole::Train)?, rows(SplitRole::Val)?, rows(SplitRole::Test)?);
    if test.is_empty() {
        return usage("the dataset has no test rows");
    }
    let arch = bundle.descriptor.prednet_arch(ds.lobes());
    let results = run_ablation(&train, &val, &test, arch, &cfg, a.seed.unwrap_or(0), &drops)?;
    for r in &results {
        let names: Vec<&str> = r.dropped.iter().map(|g| g.name()).collect();
        let label = if names.is_empty() { "none".to_string() } else { names.join(",") };
        println!("{label}\t{:?}", r.rmse);
    }
    if let Some(out) = &a.out {
        write_json(out, &results)?;
    }
    Ok(())
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleArgs {
    /// Task file with gt_time and optional est_time per task
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Comma-separated node counts [default: 4,8,16,32]
    #[arg(long)]
    pub nodes: Option<String>,
    /// Seed of the uniform baseline [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-node loads (CSV)
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn schedule(a: ScheduleArgs) -> CliResult<()> {
    let path = need(a.tasks.clone(), "tasks")?;
    let nodes: Vec<usize> = parse_list(a.nodes.as_deref().unwrap_or("4,8,16,32"), "node counts")?;
    if nodes.contains(&0) {
        return usage("node counts must be positive");
    }
    let set: TaskSet = read_json(&path).with_context(|| format!("reading {}", path.display()))?;
    let report = compare_estimators(&set, &nodes, a.seed.unwrap_or(0))?;
    println!("nodes\testimator\tmakespan\toverhead");
    for r in &report.rows {
        println!("{}\t{}\t{:?}\t{:.4}", r.nodes, r.estimator.name(), r.makespan, r.overhead);
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}
