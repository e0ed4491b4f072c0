pub mod analyze;
pub mod control;
pub mod data;
pub mod serve;
pub mod train;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use rendertime_core::harness::{DatasetManifest, TimingSample};
use rendertime_core::util::{read_json, read_jsonl};
use rendertime_core::volume::{Volume, VolumeManifest, VolumeMeta};

use crate::opts::{CliError, CliResult};

pub fn load_volumes(manifest: &Path) -> CliResult<Vec<(VolumeMeta, Volume)>> {
    let m = VolumeManifest::load(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    Ok(m.load_volumes(manifest)?)
}

pub fn find_volume<'a>(vols: &'a [(VolumeMeta, Volume)], id: &str) -> CliResult<&'a Volume> {
    vols.iter()
        .find(|(m, _)| m.id == id)
        .map(|(_, v)| v)
        .ok_or_else(|| CliError::Usage(format!("volume {id:?} is not in the manifest")))
}

/// A collected dataset: its manifest, the rows and the volumes they refer to.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rows: Vec<TimingSample>,
    pub volumes: Vec<(VolumeMeta, Volume)>,
}

impl Dataset {
    /// Accepts either the dataset manifest or the samples file next to it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mpath = if path.to_string_lossy().ends_with(".dataset.json") {
            path.to_path_buf()
        } else {
            DatasetManifest::path_for(path)
        };
        let manifest: DatasetManifest =
            read_json(&mpath).with_context(|| format!("reading dataset manifest {}", mpath.display()))?;
        let samples = manifest.resolve(&mpath, &manifest.samples);
        let rows = read_jsonl(&samples).with_context(|| format!("reading {}", samples.display()))?;
        let volumes = load_volumes(&manifest.resolve(&mpath, &manifest.volumes))?;
        Ok(Self { manifest, rows, volumes })
    }

    pub fn lobes(&self) -> usize {
        self.rows.first().map_or(rendertime_core::transfer::DEFAULT_LOBES, |r| r.kappa.len() / 3)
    }
}

pub fn jsonl_writer(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> CliResult<()> {
    rendertime_core::util::write_json(path, v).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn print_json<T: Serialize + ?Sized>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
