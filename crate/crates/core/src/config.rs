//! Flat TOML run configuration. Unknown keys are rejected; missing keys take
//! their defaults. The parsed config is echoed into every checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::kg::{Norm, TransEConfig};
use crate::model::{AttentionKind, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchyMode {
    Predefined,
    Kmeans,
    Hc,
    Amie,
}

impl std::str::FromStr for HierarchyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predefined" => Ok(HierarchyMode::Predefined),
            "kmeans" => Ok(HierarchyMode::Kmeans),
            "hc" => Ok(HierarchyMode::Hc),
            "amie" => Ok(HierarchyMode::Amie),
            other => Err(Error::Config(format!("unknown hierarchy mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub encoder: EncoderKind,
    pub attention: AttentionKind,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub position_clamp: usize,
    pub window: usize,
    pub hidden: usize,
    /// Defaults to 0.5 for CNN and 0.9 for PCNN.
    pub dropout: Option<f64>,
    pub attention_hidden: usize,
    pub gcn_dim: Option<usize>,
    pub output_bias: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub max_len: usize,
    pub fine_tune_words: bool,

    pub transe_dim: usize,
    pub transe_epochs: usize,
    pub transe_margin: f64,
    pub transe_learning_rate: f64,
    pub transe_norm: u32,

    pub hierarchy: HierarchyMode,
    /// Layer count including the root, for the clustering builders.
    pub hierarchy_layers: usize,
    /// Clusters per internal layer for k-means, finest first.
    pub kmeans_k: Vec<usize>,
    pub amie_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderKind::Pcnn,
            attention: AttentionKind::Katt,
            word_dim: 300,
            pos_dim: 5,
            position_clamp: 50,
            window: 3,
            hidden: 230,
            dropout: None,
            attention_hidden: 64,
            gcn_dim: None,
            output_bias: true,
            learning_rate: 0.1,
            batch_size: 160,
            epochs: 30,
            pretrain_epochs: 5,
            max_len: 120,
            fine_tune_words: true,
            transe_dim: 50,
            transe_epochs: 500,
            transe_margin: 1.0,
            transe_learning_rate: 0.01,
            transe_norm: 2,
            hierarchy: HierarchyMode::Predefined,
            hierarchy_layers: 3,
            kmeans_k: vec![4],
            amie_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.train_config().validate()?;
        self.transe_config()?.validate()?;
        if self.attention_hidden == 0 || self.gcn_dim == Some(0) {
            return Err(Error::Config("attention and GCN widths must be positive".into()));
        }
        if self.hierarchy_layers < 2 {
            return Err(Error::Config("a hierarchy needs at least 2 layers".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            word_dim: self.word_dim,
            pos_dim: self.pos_dim,
            clamp: self.position_clamp,
            window: self.window,
            hidden: self.hidden,
            dropout: self.dropout.unwrap_or_else(|| self.encoder.default_dropout()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            attention: self.attention,
            attention_hidden: self.attention_hidden,
            gcn_dim: self.gcn_dim,
            output_bias: self.output_bias,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            pretrain_epochs: self.pretrain_epochs,
            seed: self.seed,
            fine_tune_words: self.fine_tune_words,
        }
    }

    pub fn transe_config(&self) -> Result<TransEConfig> {
        Ok(TransEConfig {
            dim: self.transe_dim,
            margin: self.transe_margin,
            norm: Norm::from_order(self.transe_norm)?,
            learning_rate: self.transe_learning_rate,
            epochs: self.transe_epochs,
            negatives: 1,
            seed: self.seed,
        })
    }
}
