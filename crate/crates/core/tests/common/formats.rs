//! Save-then-load checks for every on-disk format. Each returns a short
//! description on success and the first mismatch otherwise.

use std::path::Path;

use rendertime_core::bundle::{ModelBundle, ModelDescriptor};
use rendertime_core::harness::{collect, split_volumes, CollectConfig, DatasetManifest, TimingSample, TrainTarget};
use rendertime_core::prednet::{PredNet, TargetScaler};
use rendertime_core::raycast::Renderer;
use rendertime_core::stepctl::{build_g, GBuildConfig, GTable};
use rendertime_core::transfer::sample_tf;
use rendertime_core::camera::sample_pose;
use rendertime_core::util::{read_json, read_jsonl, rng_for, write_json, JsonlSink};
use rendertime_core::volume::{gen_synthetic, load_raw, save_raw, Recipe, ValueRange, Volume};
use rendertime_core::volumenet::{prepare_volume, VolumeNet};

type Check = Result<String, String>;

fn bits(v: &Volume) -> Vec<u32> {
    v.values().iter().map(|x| x.to_bits()).collect()
}

pub fn volume_raw(dir: &Path) -> Check {
    let (v, meta) = gen_synthetic(5, [20, 18, 16], Recipe::Blobs).map_err(|e| e.to_string())?;
    let path = dir.join("blobs.raw");
    save_raw(&v, &path, &meta.id).map_err(|e| e.to_string())?;
    let (back, side) = load_raw(&path, None, None).map_err(|e| e.to_string())?;
    if side.id != meta.id || back.dims() != v.dims() || back.range() != v.range() || bits(&back) != bits(&v) {
        return Err("f32 volume changed".into());
    }
    let bytes = Volume::from_fn([7, 5, 3], ValueRange::UnsignedByte, |x, y, z| ((x * 31 + y * 7 + z) % 256) as f32)
        .map_err(|e| e.to_string())?;
    let path = dir.join("bytes.raw");
    save_raw(&bytes, &path, "bytes").map_err(|e| e.to_string())?;
    let (back, _) = load_raw(&path, None, None).map_err(|e| e.to_string())?;
    if back.dims() != bytes.dims() || bits(&back) != bits(&bytes) {
        return Err("u8 volume changed".into());
    }
    Ok(format!("{} + {} voxels", v.len(), bytes.len()))
}

pub fn dataset_jsonl(dir: &Path) -> Check {
    let vols: Vec<_> = (0..3u64)
        .map(|i| {
            let (v, m) = gen_synthetic(i, [16; 3], Recipe::ALL[i as usize]).unwrap();
            (m, v)
        })
        .collect();
    let ids: Vec<String> = vols.iter().map(|(m, _)| m.id.clone()).collect();
    let split = split_volumes(&ids, 3);
    let cfg = CollectConfig {
        train_samples_per_volume: 4,
        eval_samples_per_volume: 2,
        resolutions: vec![[16, 16], [24, 16]],
        seed: 9,
        ..Default::default()
    };
    let path = dir.join("samples.jsonl");
    let mut rows: Vec<TimingSample> = Vec::new();
    {
        let mut sink = JsonlSink::new(std::fs::File::create(&path).map_err(|e| e.to_string())?);
        collect(&vols, &split, &cfg, &mut |r| {
            rows.push(r.clone());
            sink.push(r)
        })
        .map_err(|e| e.to_string())?;
    }
    let back: Vec<TimingSample> = read_jsonl(&path).map_err(|e| e.to_string())?;
    if back != rows {
        return Err("sample rows changed".into());
    }
    let manifest = DatasetManifest { volumes: "volumes.json".into(), samples: "samples.jsonl".into(), split, config: cfg };
    let mpath = DatasetManifest::path_for(&path);
    write_json(&mpath, &manifest).map_err(|e| e.to_string())?;
    let mback: DatasetManifest = read_json(&mpath).map_err(|e| e.to_string())?;
    if mback != manifest {
        return Err("dataset manifest changed".into());
    }
    Ok(format!("{} rows", rows.len()))
}

pub fn model_bundle(dir: &Path) -> Check {
    let desc = ModelDescriptor::default();
    let (v, meta) = gen_synthetic(2, [32; 3], Recipe::Shell).map_err(|e| e.to_string())?;
    let vn = VolumeNet::new(desc.volumenet, 4);
    let mut pn = PredNet::new(desc.prednet_arch(3), 5);
    pn.scaler = Some(TargetScaler { mean: 1234.5, std: 321.0 });
    let mut bundle = ModelBundle::new(desc, vn, pn, TrainTarget::Cost);
    bundle.features.push(bundle.encode_volume(&meta.id, &v).map_err(|e| e.to_string())?);
    bundle.g = Some(GTable { deltas: vec![0.5, 1.0, 2.0], tnorm: vec![1.9, 1.0, 0.55], delta_ref: 1.0 });
    let path = dir.join("model.ckpt");
    bundle.save(&path).map_err(|e| e.to_string())?;
    let back = ModelBundle::load(&path).map_err(|e| e.to_string())?;
    if back.meta().map_err(|e| e.to_string())? != bundle.meta().map_err(|e| e.to_string())? {
        return Err("bundle metadata changed".into());
    }
    let x = prepare_volume(&v, desc.volumenet.input_res).map_err(|e| e.to_string())?;
    let a = bundle.volumenet.encode(&x).map_err(|e| e.to_string())?;
    let b = back.volumenet.encode(&x).map_err(|e| e.to_string())?;
    if a.iter().map(|f| f.to_bits()).ne(b.iter().map(|f| f.to_bits())) {
        return Err("encoder output changed".into());
    }
    let mut rng = rng_for(1, 2);
    for _ in 0..10 {
        let (pose, tf) = (sample_pose(&mut rng), sample_tf(&mut rng, 3));
        let p = bundle.predict(&meta.id, &pose, &tf, (256, 256)).map_err(|e| e.to_string())?;
        let q = back.predict(&meta.id, &pose, &tf, (256, 256)).map_err(|e| e.to_string())?;
        if p.to_bits() != q.to_bits() {
            return Err("prediction changed".into());
        }
    }
    Ok(format!("{} bytes", std::fs::metadata(&path).map_err(|e| e.to_string())?.len()))
}

pub fn g_table(dir: &Path) -> Check {
    let (v, _) = gen_synthetic(8, [24; 3], Recipe::Blobs).map_err(|e| e.to_string())?;
    let cfg = GBuildConfig { render: GBuildConfig::default().render.with_image(32, 32), ..Default::default() };
    let g = build_g(&[Renderer::new(&v)], &cfg).map_err(|e| e.to_string())?;
    let path = dir.join("g.json");
    g.save(&path).map_err(|e| e.to_string())?;
    let back = GTable::load(&path).map_err(|e| e.to_string())?;
    let same = back.delta_ref.to_bits() == g.delta_ref.to_bits()
        && back.deltas.iter().map(|x| x.to_bits()).eq(g.deltas.iter().map(|x| x.to_bits()))
        && back.tnorm.iter().map(|x| x.to_bits()).eq(g.tnorm.iter().map(|x| x.to_bits()));
    if !same {
        return Err("G table changed".into());
    }
    Ok(format!("{} points", g.deltas.len()))
}
