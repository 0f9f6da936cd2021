//! Run configuration: a JSON config file merged with command-line overrides.
//! Flags win over the file; the file wins over defaults. Every command echoes
//! the fully resolved configuration into its output directory.

use serde::{Deserialize, Serialize};
use smta_core::model::{FusionStrategy, ModelConfig};
use smta_core::pipeline::{DatasetMeta, PreprocessConfig};
use smta_core::synth::SynthConfig;
use smta_core::train::TrainConfig;
use smta_core::{Result, SmtaError};
use std::path::Path;

/// Model hyperparameter overrides; input shapes always come from the dataset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub ff_width: Option<usize>,
    pub head_hidden: Option<usize>,
    pub fusion: Option<String>,
    pub share_channel_encoders: Option<bool>,
    pub use_positional_encoding: Option<bool>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthConfig>,
    pub preprocess: Option<PreprocessConfig>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                SmtaError::Config(format!("cannot read config file {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| SmtaError::Config(format!("bad config file {}: {e}", p.display())))
        }
    }
}

impl ModelSection {
    /// Start from defaults for the dataset's shapes, then apply the file
    /// section and finally the flag overrides.
    pub fn resolve(&self, flags: &ModelSection, meta: &DatasetMeta) -> Result<ModelConfig> {
        let mut config = ModelConfig::new(
            meta.steps,
            meta.channel_widths.clone(),
            meta.static_width,
        );
        for layer in [self, flags] {
            if let Some(v) = layer.width {
                config.width = v;
            }
            if let Some(v) = layer.heads {
                config.heads = v;
            }
            if let Some(v) = layer.encoder_layers {
                config.encoder_layers = v;
            }
            if let Some(v) = layer.ff_width {
                config.ff_width = v;
            }
            if let Some(v) = layer.head_hidden {
                config.head_hidden = v;
            }
            if let Some(f) = &layer.fusion {
                config.fusion = f.parse::<FusionStrategy>()?;
            }
            if let Some(v) = layer.share_channel_encoders {
                config.share_channel_encoders = v;
            }
            if let Some(v) = layer.use_positional_encoding {
                config.use_positional_encoding = v;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Write the resolved configuration next to a command's outputs.
pub fn echo_config<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(resolved)?,
    )?;
    Ok(())
}
