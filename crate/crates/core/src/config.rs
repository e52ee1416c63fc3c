//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::extract::{ExtractorConfig, FeatureKind};
use crate::data::synth::SynthSpec;
use crate::data::BundleSet;
use crate::encoders::{GlobalInput, LocalInput};
use crate::error::{Error, Result};
use crate::fusion::{AttentionScale, Variant};
use crate::gradcheck::GradCheckConfig;
use crate::grid::GridConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Model settings that do not depend on the data. Input widths come from
/// the bundle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub heads: usize,
    pub slots: usize,
    pub k: usize,
    pub variant: Variant,
    pub fusion_dropout: f64,
    pub classifier_dropout: f64,
    pub scale: AttentionScale,
    pub exclude_padded: bool,
    pub init_std: f64,
    /// Raw-crop bundles only: patch side of the global encoder.
    pub patch: usize,
    pub patch_embed_dim: usize,
    /// Raw-crop bundles only: cell side and channels of the crop encoder.
    pub crop_cell: usize,
    pub crop_channels: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::for_features(1, 2);
        Self {
            d_model: m.d_model,
            heads: m.heads,
            slots: m.slots,
            k: m.k,
            variant: m.variant,
            fusion_dropout: m.fusion_dropout,
            classifier_dropout: m.classifier_dropout,
            scale: m.scale,
            exclude_padded: m.exclude_padded,
            init_std: m.init_std,
            patch: 16,
            patch_embed_dim: 64,
            crop_cell: 4,
            crop_channels: 8,
        }
    }
}

impl ModelSettings {
    /// Full model configuration for `set`.
    pub fn model_config(&self, set: &BundleSet) -> Result<ModelConfig> {
        let (global_input, local_input) = match set.kind {
            FeatureKind::Descriptor { .. } => (
                GlobalInput::Feature { dim: set.global_dim() },
                LocalInput::Feature { dim: set.local_dim() },
            ),
            FeatureKind::RawCrop { crop } => {
                if set.grid_height != set.grid_width {
                    return Err(Error::Config("raw-crop bundles need square images".into()));
                }
                (
                    GlobalInput::Image {
                        side: set.grid_height,
                        patch: self.patch,
                        embed_dim: self.patch_embed_dim,
                    },
                    LocalInput::Crop {
                        side: crop,
                        cell: self.crop_cell,
                        channels: self.crop_channels,
                    },
                )
            }
        };
        let cfg = ModelConfig {
            global_input,
            local_input,
            d_model: self.d_model,
            heads: self.heads,
            classes: set.num_classes(),
            slots: self.slots,
            k: self.k,
            variant: self.variant,
            fusion_dropout: self.fusion_dropout,
            classifier_dropout: self.classifier_dropout,
            scale: self.scale,
            exclude_padded: self.exclude_padded,
            init_std: self.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub extractor: ExtractorConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// One seed for everything that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self.grid.seeds = vec![seed];
    }

    /// Canonical JSON; the hash in a manifest is taken over these bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Written next to the outputs of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub bundle_format: u32,
    pub checkpoint_format: u32,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            bundle_format: crate::data::bundle_io::VERSION,
            checkpoint_format: crate::checkpoint::VERSION,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
