//! Small on-disk fixtures for integration tests of the service, client
//! and command line.

use std::path::{Path, PathBuf};

use crate::bundle::{ModelBundle, ModelDescriptor};
use crate::harness::TrainTarget;
use crate::prednet::{PredNet, TargetScaler};
use crate::volume::{gen_synthetic, save_raw, ManifestEntry, Recipe, VolumeManifest};
use crate::volumenet::VolumeNet;

pub struct Fixture {
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub ids: Vec<String>,
}

/// Writes `n` synthetic volumes of side `dim`, their manifest and an
/// untrained bundle whose scaler centres predictions near `mean`.
pub fn write_fixture(dir: &Path, n: usize, dim: usize, mean: f64) -> Result<Fixture, Box<dyn std::error::Error>> {
    let mut entries = Vec::new();
    for i in 0..n {
        let recipe = Recipe::ALL[i % Recipe::ALL.len()];
        let (v, meta) = gen_synthetic(i as u64, [dim; 3], recipe)?;
        let file = format!("{}.raw", meta.id);
        save_raw(&v, &dir.join(&file), &meta.id)?;
        entries.push(ManifestEntry { meta, path: file, dims: v.dims(), recipe: Some(recipe) });
    }
    let ids = entries.iter().map(|e| e.meta.id.clone()).collect();
    let manifest = dir.join("volumes.json");
    VolumeManifest { entries }.save(&manifest)?;
    let desc = ModelDescriptor::default();
    let mut pn = PredNet::new(desc.prednet_arch(3), 1);
    pn.scaler = Some(TargetScaler { mean, std: mean * 0.01 });
    let bundle = ModelBundle::new(desc, VolumeNet::new(desc.volumenet, 2), pn, TrainTarget::Wall);
    let model = dir.join("model.ckpt");
    bundle.save(&model)?;
    Ok(Fixture { manifest, model, ids })
}
