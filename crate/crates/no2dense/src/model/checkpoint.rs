//! Self-describing checkpoints: a serialized parameter store plus a
//! manifest carrying everything needed to rebuild and run the model with
//! no other context (architecture, prediction space, loss configuration,
//! normalization statistics, seed, and a content hash of the parameters).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model, ParamStore};
use crate::datamodel::NormStats;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::sampler::SamplerConfig;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub params_hash: String,
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub manifest: CheckpointManifest,
}

/// Writes `dir/params.safetensors` and `dir/manifest.json`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    sampler: &SamplerConfig,
    loss: &LossConfig,
    norm_stats: &NormStats,
    seed: u64,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    model.params().save(&params_path)?;
    let manifest = CheckpointManifest {
        format_version: 1,
        backbone: model.config().clone(),
        sampler: *sampler,
        loss: loss.clone(),
        norm_stats: norm_stats.clone(),
        seed,
        params_hash: ParamStore::content_hash(&params_path)?,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Rebuilds the model recorded in `dir` and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest =
        serde_json::from_reader(std::io::BufReader::new(fs::File::open(&manifest_path).map_err(
            |e| Error::Checkpoint(format!("cannot open {}: {e}", manifest_path.display())),
        )?))?;
    let params_path = dir.join(PARAMS_FILE);
    let hash = ParamStore::content_hash(&params_path)?;
    if hash != manifest.params_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch in {}: manifest {} vs file {hash}",
            dir.display(),
            manifest.params_hash
        )));
    }
    manifest.norm_stats.validate()?;
    let mut model = Model::new(&manifest.backbone, manifest.seed)?;
    model.params_mut().load(&params_path)?;
    Ok(LoadedCheckpoint { model, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::INPUT_CHANNELS;
    use crate::model::{BackboneKind, FEATURE_CHANNELS};
    use crate::sampler::WINDOW;
    use candle_core::{Device, Tensor};
    use tempfile::TempDir;

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let cfg = BackboneConfig {
            kind: BackboneKind::Autoencoder,
            encoder_channels: [2, 4, 8, 16],
            bottleneck_channels: 32,
            out_channels: FEATURE_CHANNELS,
        };
        let model = Model::new(&cfg, 77).unwrap();
        let stats = NormStats {
            channel_mean: vec![0.0; INPUT_CHANNELS],
            channel_std: vec![1.0; INPUT_CHANNELS],
            target_mean: 10.0,
            target_std: 4.0,
            std_convention: "population".into(),
        };
        let sampler = SamplerConfig::new(8, 3).unwrap();
        let loss = LossConfig::default();
        let dir = TempDir::new().unwrap();

        let manifest =
            save_checkpoint(dir.path(), &model, &sampler, &loss, &stats, 77).unwrap();
        assert_eq!(manifest.params_hash.len(), 64);

        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.manifest.sampler.prediction_space, 8);
        let x = Tensor::rand(-1f32, 1f32, (1, INPUT_CHANNELS, WINDOW, WINDOW), &Device::Cpu)
            .unwrap();
        let a = model.forward(&x, 8, false).unwrap().no2_plane;
        let b = loaded.model.forward(&x, 8, false).unwrap().no2_plane;
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn tampered_params_are_rejected() {
        let cfg = BackboneConfig {
            kind: BackboneKind::Unet,
            encoder_channels: [2, 2, 2, 2],
            bottleneck_channels: 4,
            out_channels: FEATURE_CHANNELS,
        };
        let model = Model::new(&cfg, 1).unwrap();
        let stats = NormStats {
            channel_mean: vec![0.0; INPUT_CHANNELS],
            channel_std: vec![1.0; INPUT_CHANNELS],
            target_mean: 0.0,
            target_std: 1.0,
            std_convention: "population".into(),
        };
        let dir = TempDir::new().unwrap();
        save_checkpoint(
            dir.path(),
            &model,
            &SamplerConfig::new(8, 0).unwrap(),
            &LossConfig::default(),
            &stats,
            1,
        )
        .unwrap();
        // flip a byte in the parameter file
        let p = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
