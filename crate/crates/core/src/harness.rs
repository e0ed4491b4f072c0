//! Dataset construction: sampling render parameters, timing renders and
//! persisting JSONL sample files.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{sample_pose, CameraPose};
use crate::raycast::{measure, RenderConfig, RenderError, Renderer};
use crate::transfer::{sample_tf, TfError, TransferFunction, DEFAULT_LOBES};
use crate::util::{rng_for, stable_hash};
use crate::volume::{Volume, VolumeError, VolumeMeta};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("subsample produced no rows")]
    EmptyResult,
    #[error("gamma must lie in [0.1, 1.0], got {0}")]
    InvalidGamma(f64),
    #[error("sample references unknown volume {0:?}")]
    UnknownVolume(String),
    #[error("no volumes to collect from")]
    NoVolumes,
    #[error("resolution set is empty")]
    NoResolutions,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tf(#[from] TfError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const TRAIN_SAMPLES_PER_VOLUME: usize = 100;
pub const EVAL_SAMPLES_PER_VOLUME: usize = 10;
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_RESOLUTIONS: [[usize; 2]; 2] = [[256, 256], [512, 512]];

/// One timed render. `wall_ms` is `None` for cost-only collections so that
/// those files are byte-for-byte reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub volume_id: String,
    pub pose: CameraPose,
    pub kappa: Vec<f32>,
    pub img: [usize; 2],
    pub delta: f32,
    pub wall_ms: Option<f64>,
    pub cost: u64,
    pub repeats: usize,
}

impl TimingSample {
    pub fn tf(&self) -> std::result::Result<TransferFunction, TfError> {
        TransferFunction::from_kappa(&self.kappa)
    }

    pub fn img(&self) -> (usize, usize) {
        (self.img[0], self.img[1])
    }

    pub fn target(&self, t: TrainTarget) -> Option<f64> {
        match t {
            TrainTarget::Cost => Some(self.cost as f64),
            TrainTarget::Wall => self.wall_ms,
        }
    }
}

/// What `collect` writes into each row's time field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CollectTarget {
    /// Median measured wall time.
    #[default]
    Wall,
    /// Deterministic sample counts only.
    Cost,
    /// Wall time synthesized from cost: `overhead_ms + ms_per_sample * cost`.
    Synthetic { ms_per_sample: f64, overhead_ms: f64 },
}

/// Which row field a predictor is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    #[default]
    Cost,
    Wall,
}

impl TrainTarget {
    pub fn name(self) -> &'static str {
        match self {
            TrainTarget::Cost => "cost",
            TrainTarget::Wall => "wall",
        }
    }
}

impl std::str::FromStr for TrainTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cost" => Ok(TrainTarget::Cost),
            "wall" | "synthetic" => Ok(TrainTarget::Wall),
            _ => Err(format!("unknown target {s:?} (expected cost or wall)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Volume-level train/val/test assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn role(&self, id: &str) -> Option<SplitRole> {
        let has = |v: &Vec<String>| v.iter().any(|x| x == id);
        if has(&self.train) {
            Some(SplitRole::Train)
        } else if has(&self.val) {
            Some(SplitRole::Val)
        } else if has(&self.test) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, role: SplitRole) -> &[String] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Test => &self.test,
        }
    }

    /// Rows whose volume has the given role, in file order.
    pub fn select<'a>(&self, rows: &'a [TimingSample], role: SplitRole) -> Vec<&'a TimingSample> {
        rows.iter().filter(|r| self.role(&r.volume_id) == Some(role)).collect()
    }
}

/// 80/10/10 split over volume ids. Ids are sorted before the seeded
/// shuffle, so the result does not depend on manifest order. With three or
/// more volumes, validation and test each get at least one.
pub fn split_volumes(ids: &[String], seed: u64) -> Split {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut rng_for(seed, 0x73706c));
    let n = ids.len();
    let (mut n_val, mut n_test) = ((n as f64 * 0.1).round() as usize, (n as f64 * 0.1).round() as usize);
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let test = ids.split_off(n - n_test);
    let val = ids.split_off(ids.len() - n_val);
    Split { train: ids, val, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub train_samples_per_volume: usize,
    pub eval_samples_per_volume: usize,
    pub repeats: usize,
    pub resolutions: Vec<[usize; 2]>,
    pub lobes: usize,
    pub seed: u64,
    pub target: CollectTarget,
    /// Width and height are overridden per sample.
    pub render: RenderConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            train_samples_per_volume: TRAIN_SAMPLES_PER_VOLUME,
            eval_samples_per_volume: EVAL_SAMPLES_PER_VOLUME,
            repeats: DEFAULT_REPEATS,
            resolutions: DEFAULT_RESOLUTIONS.to_vec(),
            lobes: DEFAULT_LOBES,
            seed: 0,
            target: CollectTarget::Wall,
            render: RenderConfig::default(),
        }
    }
}

/// Parameters of one sample before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleParams {
    pub volume_id: String,
    pub pose: CameraPose,
    pub tf: TransferFunction,
    pub img: [usize; 2],
}

/// Deterministic parameter sequence for one volume; the stream depends on
/// the seed and the volume id only.
pub fn sample_params(cfg: &CollectConfig, volume_id: &str, n: usize) -> Result<Vec<SampleParams>> {
    if cfg.resolutions.is_empty() {
        return Err(HarnessError::NoResolutions);
    }
    let mut rng = rng_for(cfg.seed, stable_hash(volume_id));
    Ok((0..n)
        .map(|_| {
            let pose = sample_pose(&mut rng);
            let tf = sample_tf(&mut rng, cfg.lobes);
            let img = *cfg.resolutions.choose(&mut rng).expect("non-empty");
            SampleParams { volume_id: volume_id.to_string(), pose, tf, img }
        })
        .collect())
}

/// Times one parameter set. Cost-only targets skip the shading path.
pub fn time_sample(renderer: &Renderer, p: &SampleParams, cfg: &CollectConfig) -> Result<TimingSample> {
    let rc = cfg.render.clone().with_image(p.img[0], p.img[1]);
    let (wall_ms, stats, repeats) = match cfg.target {
        CollectTarget::Wall => {
            let m = measure(renderer, &p.tf, &p.pose, &rc, cfg.repeats)?;
            (Some(m.wall_ms), m.stats, m.repeats)
        }
        CollectTarget::Cost => (None, renderer.cost(&p.tf, &p.pose, &rc)?, 1),
        CollectTarget::Synthetic { ms_per_sample, overhead_ms } => {
            let st = renderer.cost(&p.tf, &p.pose, &rc)?;
            (Some(overhead_ms + ms_per_sample * st.samples_total() as f64), st, 1)
        }
    };
    Ok(TimingSample {
        volume_id: p.volume_id.clone(),
        pose: p.pose,
        kappa: p.tf.kappa(),
        img: p.img,
        delta: rc.step_size,
        wall_ms,
        cost: stats.samples_total().max(1),
        repeats,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectReport {
    pub rows: usize,
    pub failures: usize,
}

/// Renders every sample and hands rows to `sink` in (volume, sample)
/// order. Volumes in `split.train` (or all volumes when the split is empty)
/// get `train_samples_per_volume` rows, the rest `eval_samples_per_volume`.
/// Failed renders are logged and skipped.
pub fn collect(
    volumes: &[(VolumeMeta, Volume)],
    split: &Split,
    cfg: &CollectConfig,
    sink: &mut dyn FnMut(&TimingSample) -> io::Result<()>,
) -> Result<CollectReport> {
    if volumes.is_empty() {
        return Err(HarnessError::NoVolumes);
    }
    let no_split = split.train.is_empty() && split.val.is_empty() && split.test.is_empty();
    let mut report = CollectReport::default();
    for (meta, vol) in volumes {
        let n = match split.role(&meta.id) {
            Some(SplitRole::Train) => cfg.train_samples_per_volume,
            None if no_split => cfg.train_samples_per_volume,
            _ => cfg.eval_samples_per_volume,
        };
        let params = sample_params(cfg, &meta.id, n)?;
        let renderer = Renderer::new(vol).with_block(cfg.render.ess_block);
        let results: Vec<Result<TimingSample>> = if cfg.target == CollectTarget::Wall {
            params.iter().map(|p| time_sample(&renderer, p, cfg)).collect()
        } else {
            params.par_iter().map(|p| time_sample(&renderer, p, cfg)).collect()
        };
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(row) => {
                    sink(&row)?;
                    report.rows += 1;
                }
                Err(e) => {
                    log::warn!("volume {} sample {i}: render failed: {e}", meta.id);
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Companion file describing how a sample file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Volume manifest path, relative to this file's directory unless absolute.
    pub volumes: String,
    pub samples: String,
    pub split: Split,
    pub config: CollectConfig,
}

impl DatasetManifest {
    pub fn path_for(samples: &Path) -> PathBuf {
        let mut s = samples.as_os_str().to_owned();
        s.push(".dataset.json");
        PathBuf::from(s)
    }

    pub fn resolve(&self, manifest_path: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

/// Uniform random subset of `gamma` of the rows, stratified per volume and
/// keeping file order.
pub fn subsample(rows: &[TimingSample], gamma: f64, seed: u64) -> Result<Vec<TimingSample>> {
    if !(0.1..=1.0).contains(&gamma) {
        return Err(HarnessError::InvalidGamma(gamma));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.volume_id.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; rows.len()];
    for (id, idx) in groups {
        let k = (gamma * idx.len() as f64).round() as usize;
        let mut rng = rng_for(seed, stable_hash(id));
        for &i in idx.choose_multiple(&mut rng, k) {
            keep[i] = true;
        }
    }
    let out: Vec<TimingSample> = rows.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
    if out.is_empty() {
        return Err(HarnessError::EmptyResult);
    }
    Ok(out)
}

/// Row counts per volume id.
pub fn counts_by_volume(rows: &[TimingSample]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for r in rows {
        *m.entry(r.volume_id.clone()).or_insert(0) += 1;
    }
    m
}
