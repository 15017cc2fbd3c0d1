use std::path::Path;

use serde::{Deserialize, Serialize};

use scenesynth::heatmap::HeatmapParams;
use scenesynth::pipeline::PipelineConfig;
use scenesynth::preprocess::PreprocessParams;

use crate::error::Failure;

/// Everything a run depends on besides its inputs. Precedence: flags, then
/// the `--config` file, then defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; copied into every stage that draws random numbers.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub heatmap: HeatmapParams,
    pub preprocess: PreprocessParams,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    /// Propagates the base seed and checks every section.
    pub fn resolve(mut self) -> Result<Self, Failure> {
        if self.seed > i64::MAX as u64 {
            return Err(Failure::config("seed must fit in a signed 64-bit integer"));
        }
        self.preprocess.jitter.seed = self.seed;
        self.pipeline.seed = self.seed;
        self.heatmap.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.preprocess.jitter.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.pipeline.validate().map_err(|e| Failure::config(e.to_string()))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echoed_config_reads_back_identically() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.heatmap = HeatmapParams::exact();
        c.pipeline.texts_per_image = [0, 3];
        let c = c.resolve().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back.resolve().unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
    }
}
