//! The JSON run-config file: a versioned wrapper around the experiment
//! configuration. Unknown keys are rejected so that typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fedema_core::ExperimentConfig;

use crate::{CliError, CliResult};

/// Bump when the config layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    pub experiment: ExperimentConfig,
}

impl RunConfigFile {
    pub fn new(experiment: ExperimentConfig) -> Self {
        RunConfigFile {
            schema_version: SCHEMA_VERSION,
            experiment,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema version {} (this binary supports {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        file.experiment
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// FNV-1a over the canonical JSON of the experiment config; ties
/// checkpoints to the run that produced them.
pub fn config_hash(config: &ExperimentConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in json.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedema_core::orchestrator::Algorithm;
    use fedema_core::scenegen::GeneratorConfig;
    use fedema_core::segnet::RegSign;
    use fedema_core::vehicle::AdamConfig;
    use fedema_core::ModelConfig;

    pub(crate) fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            algorithm: Algorithm::FedEma,
            clients: 2,
            rounds: 3,
            tau: 1,
            lambda: 0.002,
            sign: RegSign::Plus,
            window: Some(5),
            beta: None,
            mu: 0.0,
            model: ModelConfig {
                feature_dim: 3,
                hidden_dim: 4,
                class_count: 6,
            },
            generator: GeneratorConfig::default(),
            phases: 1,
            alpha: 0.5,
            optimizer: AdamConfig::default(),
            batch_images: 2,
            images_per_client: 4,
            eval_images: 2,
            eval_cadence: 1,
            seed: 1,
            parallel: false,
            objective_threshold: 1.0,
        }
    }

    #[test]
    fn round_trips_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let file = RunConfigFile::new(sample_config());
        file.save(&path).unwrap();
        let loaded = RunConfigFile::load(&path).unwrap();
        let again = serde_json::to_string(&loaded).unwrap();
        assert_eq!(serde_json::to_string(&file).unwrap(), again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut value: serde_json::Value =
            serde_json::to_value(RunConfigFile::new(sample_config())).unwrap();
        value["surprise"] = serde_json::json!(true);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(RunConfigFile::load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut file = RunConfigFile::new(sample_config());
        file.schema_version = 99;
        file.save(&path).unwrap();
        assert!(matches!(RunConfigFile::load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = config_hash(&sample_config());
        let mut other = sample_config();
        other.seed = 2;
        assert_ne!(a, config_hash(&other));
        assert_eq!(a, config_hash(&sample_config()));
    }
}
