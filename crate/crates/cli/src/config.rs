//! Run configuration documents.

use std::path::{Path, PathBuf};

use affuse_core::data::windows::WindowSpec;
use affuse_core::data::Dimension;
use affuse_core::fusion::ModelConfig;
use affuse_core::trainer::TrainerConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DimensionChoice {
    Valence,
    Arousal,
    /// Valence, then arousal, as two separate models.
    Both,
}

impl DimensionChoice {
    pub fn dimensions(self) -> Vec<Dimension> {
        match self {
            DimensionChoice::Valence => vec![Dimension::Valence],
            DimensionChoice::Arousal => vec![Dimension::Arousal],
            DimensionChoice::Both => vec![Dimension::Valence, Dimension::Arousal],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub window: WindowSpec,
    pub dimension: DimensionChoice,
    /// `prepared.json` from `affuse prepare`; relative to the config file.
    pub prepared: Option<PathBuf>,
    /// Fold file from `affuse folds`; relative to the config file.
    pub folds: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            window: WindowSpec::default(),
            dimension: DimensionChoice::Valence,
            prepared: None,
            folds: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).with_context(|| format!("malformed config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.prepared, &mut config.folds].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.window.validate()?;
        Ok(())
    }
}
