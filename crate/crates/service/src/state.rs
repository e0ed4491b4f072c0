use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use rendertime_core::bundle::{BundleError, ModelBundle};
use rendertime_core::raycast::Renderer;
use rendertime_core::stepctl::{default_sweep, GTable, StepCtlError};
use rendertime_core::volume::{Volume, VolumeError, VolumeManifest, VolumeMeta};
use rendertime_core::wire::{GSummary, ModelInfo, VolumeInfo};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("loading volumes: {0}")]
    Volume(#[from] VolumeError),
    #[error("loading model: {0}")]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    StepCtl(#[from] StepCtlError),
    #[error("duplicate volume id {0:?}")]
    DuplicateVolume(String),
}

pub struct LoadedVolume {
    pub meta: VolumeMeta,
    pub dims: [usize; 3],
    pub renderer: Renderer,
    pub feature: Option<Vec<f32>>,
}

/// Everything the handlers read; immutable after startup.
pub struct AppState {
    pub volumes: Vec<LoadedVolume>,
    index: HashMap<String, usize>,
    pub model: Option<ModelBundle>,
    /// Step-size curve for the controller: the bundle's table, or
    /// `δ_ref / δ` when the bundle has none.
    pub g: GTable,
}

impl AppState {
    /// Builds renderers and encodes every volume once.
    pub fn new(volumes: Vec<(VolumeMeta, Volume)>, model: Option<ModelBundle>) -> Result<Self, StateError> {
        let mut index = HashMap::new();
        let mut loaded = Vec::with_capacity(volumes.len());
        for (i, (meta, v)) in volumes.into_iter().enumerate() {
            if index.insert(meta.id.clone(), i).is_some() {
                return Err(StateError::DuplicateVolume(meta.id));
            }
            let feature = match &model {
                Some(m) => Some(m.encode_volume(&meta.id, &v)?.values),
                None => None,
            };
            log::info!("loaded volume {} {:?}", meta.id, v.dims());
            loaded.push(LoadedVolume { dims: v.dims(), renderer: Renderer::new(&v), meta, feature });
        }
        let g = match model.as_ref().and_then(|m| m.g.clone()) {
            Some(g) => g,
            None => GTable::reciprocal(&default_sweep(), model.as_ref().map_or(1.0, |m| m.delta_ref))?,
        };
        Ok(Self { volumes: loaded, index, model, g })
    }

    pub fn load(manifest: &Path, model: Option<&Path>) -> Result<Self, StateError> {
        let vols = VolumeManifest::load(manifest)?.load_volumes(manifest)?;
        let bundle = model.map(ModelBundle::load).transpose()?;
        Self::new(vols, bundle)
    }

    pub fn volume(&self, id: &str) -> Option<&LoadedVolume> {
        self.index.get(id).map(|&i| &self.volumes[i])
    }

    pub fn volume_infos(&self) -> Vec<VolumeInfo> {
        self.volumes.iter().map(|v| VolumeInfo { id: v.meta.id.clone(), dims: v.dims, meta: v.meta.clone() }).collect()
    }

    pub fn model_info(&self) -> Option<ModelInfo> {
        self.model.as_ref().map(|m| ModelInfo {
            descriptor: m.descriptor.to_string(),
            lobes: m.lobes(),
            target: m.target.name().to_string(),
            delta_ref: m.delta_ref,
            g: Some(GSummary::of(&self.g)),
        })
    }
}
