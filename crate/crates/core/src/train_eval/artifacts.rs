//! Saving and loading trained models: a weight checkpoint plus a JSON
//! config sidecar next to it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::factor_gnn::{FactorGnn, GnnConfig};
use crate::tensor_nn::Checkpoint;

use super::TrainError;

/// `model.json` -> `model.config.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("config.json")
}

pub fn save_model(model: &FactorGnn, checkpoint: &Path) -> Result<(), TrainError> {
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.to_checkpoint().save(checkpoint)?;
    fs::write(sidecar_path(checkpoint), serde_json::to_string_pretty(model.config())? + "\n")?;
    Ok(())
}

pub fn load_model(checkpoint: &Path) -> Result<FactorGnn, TrainError> {
    let cfg: GnnConfig = serde_json::from_str(&fs::read_to_string(sidecar_path(checkpoint))?)?;
    Ok(FactorGnn::from_checkpoint(cfg, &Checkpoint::load(checkpoint)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{build_spin, Family};
    use rand::SeedableRng;

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("factorlab-artifacts-{}", std::process::id()));
        let path = dir.join("m.json");
        let cfg = GnnConfig {
            hidden_dim: 4,
            heads: 2,
            message_hidden: 4,
            attention_hidden: 3,
            encoder_hidden: vec![5],
            decoder_hidden: vec![5],
            ..GnnConfig::for_family(Family::Spin)
        };
        let model = FactorGnn::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        save_model(&model, &path).unwrap();
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("m.config.json")).unwrap()).unwrap();
        for key in ["family", "hidden_dim", "heads", "mode", "readout_range"] {
            assert!(side.get(key).is_some(), "{key}");
        }
        let back = load_model(&path).unwrap();
        let g = build_spin(&[[0.2, 0.1, -0.3]; 3], &[(0, 1, 2, 0.4)], 0.5).unwrap();
        assert_eq!(model.predict(&[&g]).unwrap(), back.predict(&[&g]).unwrap());
        fs::remove_dir_all(dir).unwrap();
    }
}
