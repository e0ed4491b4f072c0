//! Trained model bundle: VolumeNet + PredNet weights, target scaler,
//! descriptor and cached feature vectors in one checkpoint file.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::harness::{TimingSample, TrainTarget};
use crate::nn::{Checkpoint, NnError};
use crate::prednet::{encode_input, FeatureScaler, InputGroup, PredNet, PredNetArch, PredNetError, TargetScaler, TrainRow};
use crate::raycast::DELTA_REF;
use crate::stepctl::GTable;
use crate::transfer::TransferFunction;
use crate::volume::Volume;
use crate::volumenet::{prepare_volume, FeatureVector, VolumeNet, VolumeNetArch, VolumeNetError};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad model descriptor {0:?}")]
    Descriptor(String),
    #[error("unknown volume {0:?}")]
    UnknownVolume(String),
    #[error("sample for {0:?} has no value for the training target")]
    MissingTarget(String),
    #[error("bundle metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    VolumeNet(#[from] VolumeNetError),
    #[error(transparent)]
    PredNet(#[from] PredNetError),
}

pub type Result<T> = std::result::Result<T, BundleError>;

/// `<res>^3F<F>-><n>C256`, e.g. `32^3F4->4C256`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub volumenet: VolumeNetArch,
    pub n_c256: usize,
}

impl Default for ModelDescriptor {
    fn default() -> Self {
        Self { volumenet: VolumeNetArch::default(), n_c256: 4 }
    }
}

impl ModelDescriptor {
    pub fn prednet_arch(&self, lobes: usize) -> PredNetArch {
        PredNetArch { feature_dim: self.volumenet.feature_dim, lobes, n_c256: self.n_c256 }
    }
}

impl fmt::Display for ModelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}C256", self.volumenet, self.n_c256)
    }
}

impl FromStr for ModelDescriptor {
    type Err = BundleError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || BundleError::Descriptor(s.to_string());
        let t = s.trim().replace('→', "->");
        let (vn, pn) = t.split_once("->").ok_or_else(bad)?;
        let volumenet: VolumeNetArch = vn.parse().map_err(|_| bad())?;
        let n = pn.strip_suffix("C256").ok_or_else(bad)?;
        let n_c256 = n.parse().map_err(|_| bad())?;
        Ok(Self { volumenet, n_c256 })
    }
}

/// JSON header stored in the bundle checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format: String,
    pub descriptor: String,
    pub lobes: usize,
    pub target: TrainTarget,
    pub delta_ref: f64,
    pub scaler: TargetScaler,
    #[serde(default)]
    pub feature_scaler: Option<FeatureScaler>,
    #[serde(default)]
    pub dropped: Vec<InputGroup>,
    #[serde(default)]
    pub features: Vec<FeatureVector>,
    #[serde(default)]
    pub g: Option<GTable>,
}

pub const BUNDLE_FORMAT: &str = "rendertime-bundle/1";

pub struct ModelBundle {
    pub descriptor: ModelDescriptor,
    pub volumenet: VolumeNet<f32>,
    pub prednet: PredNet,
    pub target: TrainTarget,
    pub delta_ref: f64,
    pub features: Vec<FeatureVector>,
    pub g: Option<GTable>,
}

impl ModelBundle {
    pub fn new(descriptor: ModelDescriptor, volumenet: VolumeNet<f32>, prednet: PredNet, target: TrainTarget) -> Self {
        Self { descriptor, volumenet, prednet, target, delta_ref: DELTA_REF as f64, features: Vec::new(), g: None }
    }

    pub fn lobes(&self) -> usize {
        self.prednet.arch.lobes
    }

    pub fn feature(&self, volume_id: &str) -> Option<&[f32]> {
        self.features.iter().find(|f| f.volume_id == volume_id).map(|f| f.values.as_slice())
    }

    pub fn encode_volume(&self, id: &str, v: &Volume) -> Result<FeatureVector> {
        let x = prepare_volume(v, self.descriptor.volumenet.input_res)?;
        Ok(FeatureVector { volume_id: id.to_string(), values: self.volumenet.encode(&x)? })
    }

    /// Predicted time at the reference step for a cached volume.
    pub fn predict(&self, volume_id: &str, pose: &CameraPose, tf: &TransferFunction, img: (usize, usize)) -> Result<f64> {
        let f = self.feature(volume_id).ok_or_else(|| BundleError::UnknownVolume(volume_id.to_string()))?;
        Ok(self.prednet.predict(f, pose, tf, img)?)
    }

    pub fn meta(&self) -> Result<BundleMeta> {
        Ok(BundleMeta {
            format: BUNDLE_FORMAT.to_string(),
            descriptor: self.descriptor.to_string(),
            lobes: self.lobes(),
            target: self.target,
            delta_ref: self.delta_ref,
            scaler: self.prednet.scaler.ok_or(PredNetError::MissingScaler)?,
            feature_scaler: self.prednet.feature_scaler.clone(),
            dropped: self.prednet.dropped.clone(),
            features: self.features.clone(),
            g: self.g.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(self.meta()?).map_err(|e| BundleError::Meta(e.to_string()))?;
        let mut ck = Checkpoint::new(meta);
        self.volumenet.to_checkpoint(&mut ck);
        self.prednet.to_checkpoint(&mut ck);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| BundleError::Meta(e.to_string()))?;
        if meta.format != BUNDLE_FORMAT {
            return Err(BundleError::Meta(format!("unsupported format {:?}", meta.format)));
        }
        let descriptor: ModelDescriptor = meta.descriptor.parse()?;
        let volumenet = VolumeNet::from_checkpoint(descriptor.volumenet, ck)?;
        let mut prednet = PredNet::from_checkpoint(descriptor.prednet_arch(meta.lobes), ck)?.with_dropped(&meta.dropped);
        prednet.scaler = Some(meta.scaler);
        prednet.feature_scaler = meta.feature_scaler;
        Ok(Self {
            descriptor,
            volumenet,
            prednet,
            target: meta.target,
            delta_ref: meta.delta_ref,
            features: meta.features,
            g: meta.g,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Feature vectors for a set of volumes.
pub fn compute_features(net: &VolumeNet<f32>, volumes: &[(String, &Volume)]) -> Result<Vec<FeatureVector>> {
    volumes
        .iter()
        .map(|(id, v)| {
            let x = prepare_volume(v, net.arch.input_res)?;
            Ok(FeatureVector { volume_id: id.clone(), values: net.encode(&x)? })
        })
        .collect()
}

/// Joins timing rows with their volume's feature vector.
pub fn join_rows(samples: &[&TimingSample], features: &[FeatureVector], target: TrainTarget) -> Result<Vec<TrainRow>> {
    let index: HashMap<&str, &[f32]> = features.iter().map(|f| (f.volume_id.as_str(), f.values.as_slice())).collect();
    samples
        .iter()
        .map(|s| {
            let f = index.get(s.volume_id.as_str()).ok_or_else(|| BundleError::UnknownVolume(s.volume_id.clone()))?;
            let y = s.target(target).ok_or_else(|| BundleError::MissingTarget(s.volume_id.clone()))?;
            Ok(TrainRow { x: encode_input(f, &s.pose, &s.kappa, s.img()), y })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        let d: ModelDescriptor = "32^3F4->4C256".parse().unwrap();
        assert_eq!(d, ModelDescriptor::default());
        assert_eq!(d.to_string(), "32^3F4->4C256");
        let p: ModelDescriptor = "128³F2→12C256".parse().unwrap();
        assert_eq!(p.to_string(), "128^3F2->12C256");
        for bad in ["32^3F4", "32^3F4->4C128", "32^3F4->xC256", "33^3F4->4C256"] {
            assert!(bad.parse::<ModelDescriptor>().is_err(), "{bad}");
        }
    }

    #[test]
    fn bundle_checkpoint_round_trip() {
        let desc = ModelDescriptor::default();
        let vn = VolumeNet::new(desc.volumenet, 1);
        let mut pn = PredNet::new(desc.prednet_arch(3), 2);
        pn.scaler = Some(TargetScaler { mean: 100.0, std: 20.0 });
        pn.feature_scaler = Some(FeatureScaler { mean: vec![0.1, 0.0, -0.3, 2.0], std: vec![1.0, 0.5, 2.0, 4.0] });
        let mut b = ModelBundle::new(desc, vn, pn, TrainTarget::Cost);
        b.features.push(FeatureVector { volume_id: "v".into(), values: vec![0.1, -0.2, 0.3, 0.0] });
        let ck = b.to_checkpoint().unwrap();
        let mut buf = Vec::new();
        crate::nn::write_checkpoint(&mut buf, &ck).unwrap();
        let back = ModelBundle::from_checkpoint(&crate::nn::read_checkpoint(&mut buf.as_slice()).unwrap()).unwrap();
        let pose = CameraPose::new(10.0, 5.0, 2.0).unwrap();
        let tf = TransferFunction::from_kappa(&[0.5, 0.1, 1.0, 0.2, 0.05, 0.3, 0.8, 0.02, 0.6]).unwrap();
        assert_eq!(b.predict("v", &pose, &tf, (64, 64)).unwrap(), back.predict("v", &pose, &tf, (64, 64)).unwrap());
        assert_eq!(back.meta().unwrap(), b.meta().unwrap());
        assert!(matches!(back.predict("w", &pose, &tf, (64, 64)), Err(BundleError::UnknownVolume(_))));
    }
}
