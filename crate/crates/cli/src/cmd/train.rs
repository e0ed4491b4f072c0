use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use serde_with::skip_serializing_none;

use rendertime_core::bundle::{compute_features, join_rows, ModelBundle, ModelDescriptor};
use rendertime_core::eval::rmse;
use rendertime_core::harness::{CollectTarget, SplitRole, TrainTarget};
use rendertime_core::nn::{Checkpoint, OptimConfig};
use rendertime_core::prednet::train_prednet;
use rendertime_core::stepctl::GTable;
use rendertime_core::util::JsonlSink;
use rendertime_core::volume::Volume;
use rendertime_core::volumenet::{prepare_volume, train_volumenet, VolumeNet, VolumeNetArch};

use super::{jsonl_writer, print_json, Dataset};
use crate::opts::{log_path_for, need, parse_drop_set, usage, CliError, CliResult};

pub const VOLUMENET_FORMAT: &str = "rendertime-volumenet/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Volumenet,
    Prednet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    Cost,
    Wall,
}

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Which network to train
    #[arg(long, value_enum)]
    pub stage: Option<Stage>,
    /// Model descriptor, e.g. 32^3F4->4C256 [default: 32^3F4->4C256]
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset manifest (or the samples file it describes)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint: the autoencoder for volumenet, the full bundle for prednet
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Autoencoder checkpoint from the volumenet stage (prednet stage only)
    #[arg(long)]
    pub volumenet: Option<PathBuf>,
    /// Regression target; follows the dataset when omitted
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    /// Comma-separated input groups to zero out (feature, pose, tf, resolution)
    #[arg(long)]
    pub drop: Option<String>,
    /// Step-size table to embed in the bundle (prednet stage only)
    #[arg(long)]
    pub g: Option<PathBuf>,
    /// Maximum epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule [default: 1e-3 volumenet, 1e-4 prednet]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Early-stopping patience in epochs [default: 20]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight initialization and shuffling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch log (JSONL) [default: <out>.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    fn optim(&self, base: OptimConfig) -> CliResult<OptimConfig> {
        let lr = self.lr.unwrap_or(base.lr_max);
        let cfg = OptimConfig {
            lr_max: lr,
            lr_min: base.lr_min.min(lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            patience: self.patience.unwrap_or(base.patience),
            ..base
        };
        if !(cfg.lr_max > 0.0) || cfg.batch_size == 0 || cfg.epochs == 0 {
            return usage("--lr, --batch-size and --epochs must be positive");
        }
        Ok(cfg)
    }
}

fn log_sink(a: &TrainArgs, out: &Path) -> CliResult<JsonlSink<std::io::BufWriter<std::fs::File>>> {
    let path = a.log.clone().unwrap_or_else(|| log_path_for(out));
    Ok(JsonlSink::new(jsonl_writer(&path)?))
}

fn prepared(ds: &Dataset, ids: &[String], res: usize) -> CliResult<Vec<rendertime_core::nn::Tensor<f32>>> {
    ids.iter()
        .map(|id| {
            let v = super::find_volume(&ds.volumes, id)?;
            Ok(prepare_volume(v, res)?)
        })
        .collect()
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let stage = need(a.stage, "stage")?;
    let out = need(a.out.clone(), "out")?;
    let data = need(a.data.clone(), "data")?;
    let desc: ModelDescriptor = a
        .arch
        .as_deref()
        .unwrap_or("32^3F4->4C256")
        .parse()
        .map_err(|e| CliError::Usage(format!("{e}")))?;
    let ds = Dataset::load(&data)?;
    match stage {
        Stage::Volumenet => train_volumenet_stage(&a, desc, &ds, &out),
        Stage::Prednet => train_prednet_stage(&a, desc, &ds, &out),
    }
}

fn train_volumenet_stage(a: &TrainArgs, desc: ModelDescriptor, ds: &Dataset, out: &Path) -> CliResult<()> {
    let cfg = a.optim(OptimConfig::volumenet())?;
    let split = &ds.manifest.split;
    let res = desc.volumenet.input_res;
    let (train, val) = (prepared(ds, &split.train, res)?, prepared(ds, &split.val, res)?);
    let mut sink = log_sink(a, out)?;
    let mut log_err = None;
    let (net, report) = train_volumenet(&train, &val, desc.volumenet, &cfg, a.seed.unwrap_or(0), &mut |row| {
        if let Err(e) = sink.push(row) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let mut ck = Checkpoint::new(json!({
        "format": VOLUMENET_FORMAT,
        "arch": desc.volumenet.to_string(),
        "report": report,
    }));
    net.to_checkpoint(&mut ck);
    ck.save(out).with_context(|| format!("writing {}", out.display()))?;
    print_json(&report)
}

pub fn load_volumenet(path: &Path) -> CliResult<VolumeNet<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    if ck.meta.get("format").and_then(|v| v.as_str()) != Some(VOLUMENET_FORMAT) {
        return usage(format!("{} is not a volumenet checkpoint", path.display()));
    }
    let arch: VolumeNetArch = ck.meta["arch"]
        .as_str()
        .unwrap_or_default()
        .parse()
        .map_err(|e| anyhow::anyhow!("{}: bad arch: {e}", path.display()))?;
    Ok(VolumeNet::from_checkpoint(arch, &ck)?)
}

#[derive(Serialize)]
struct PredNetSummary {
    rows_train: usize,
    rows_val: usize,
    rows_test: usize,
    test_rmse: Option<f64>,
    test_mean: Option<f64>,
}

fn train_prednet_stage(a: &TrainArgs, desc: ModelDescriptor, ds: &Dataset, out: &Path) -> CliResult<()> {
    let vn = load_volumenet(&need(a.volumenet.clone(), "volumenet")?)?;
    if vn.arch != desc.volumenet {
        return usage(format!("--arch {desc} does not match the autoencoder ({})", vn.arch));
    }
    let target = match a.target {
        Some(TargetArg::Cost) => TrainTarget::Cost,
        Some(TargetArg::Wall) => TrainTarget::Wall,
        None if ds.manifest.config.target == CollectTarget::Cost => TrainTarget::Cost,
        None => TrainTarget::Wall,
    };
    let dropped = parse_drop_set(a.drop.as_deref().unwrap_or("none"))?;
    let cfg = a.optim(OptimConfig::prednet())?;
    let named: Vec<(String, &Volume)> = ds.volumes.iter().map(|(m, v)| (m.id.clone(), v)).collect();
    let features = compute_features(&vn, &named)?;
    let split = &ds.manifest.split;
    let rows = |role| join_rows(&split.select(&ds.rows, role), &features, target);
    let (train, val, test) = (rows(SplitRole::Train)?, rows(SplitRole::Val)?, rows(SplitRole::Test)?);

    let mut sink = log_sink(a, out)?;
    let mut log_err = None;
    let arch = desc.prednet_arch(ds.lobes());
    let net = train_prednet(&train, &val, arch, &dropped, &cfg, a.seed.unwrap_or(0), &mut |row| {
        if let Err(e) = sink.push(row) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }

    let (test_rmse, test_mean) = if test.is_empty() {
        (None, None)
    } else {
        let truth: Vec<f64> = test.iter().map(|r| r.y).collect();
        let pred = net.predict_rows(&test.iter().map(|r| r.x.clone()).collect::<Vec<_>>())?;
        (Some(rmse(&pred, &truth)?), Some(truth.iter().sum::<f64>() / truth.len() as f64))
    };
    let mut bundle = ModelBundle::new(desc, vn, net, target);
    bundle.features = features;
    if let Some(g) = &a.g {
        bundle.g = Some(GTable::load(g).with_context(|| format!("reading {}", g.display()))?);
    }
    bundle.save(out).with_context(|| format!("writing {}", out.display()))?;
    print_json(&PredNetSummary {
        rows_train: train.len(),
        rows_val: val.len(),
        rows_test: test.len(),
        test_rmse,
        test_mean,
    })
}
