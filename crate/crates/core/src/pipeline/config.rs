use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClsModelConfig, SegModelConfig};
use crate::phantom::{Location, PhantomSpec};
use crate::preprocess::PreprocessConfig;

use super::split::SplitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_weighted_loss: bool,
    pub masked_input: bool,
    pub location_filter: Option<Location>,
    /// Run the cleanup stages after windowing.
    pub preprocessed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::segmentation()
    }
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            stage: Stage::Segmentation,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            use_weighted_loss: false,
            masked_input: false,
            location_filter: None,
            preprocessed: true,
        }
    }

    pub fn classification() -> Self {
        Self {
            stage: Stage::Classification,
            use_weighted_loss: true,
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!(
                "training config is for stage {:?}, expected {stage:?}",
                self.stage
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seeds; every grid cell derives its own seed from one of these
    /// and the cell name.
    pub seeds: Vec<u64>,
    pub finetune_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            finetune_epochs: 5,
        }
    }
}

/// Missing keys of the `[train_cls]` table fall back to
/// [`TrainConfig::classification`] rather than the segmentation defaults.
fn classification_section<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<TrainConfig, D::Error> {
    let overrides = toml::Table::deserialize(d)?;
    let mut base =
        match toml::Value::try_from(TrainConfig::classification()).map_err(D::Error::custom)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("structs serialise to tables"),
        };
    base.extend(overrides);
    toml::Value::Table(base)
        .try_into()
        .map_err(D::Error::custom)
}

/// Complete run configuration, one TOML table per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub segmenter: SegModelConfig,
    pub classifier: ClsModelConfig,
    pub split: SplitSpec,
    pub train_seg: TrainConfig,
    #[serde(deserialize_with = "classification_section")]
    pub train_cls: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            segmenter: SegModelConfig::default(),
            classifier: ClsModelConfig::default(),
            split: SplitSpec::default(),
            train_seg: TrainConfig::segmentation(),
            train_cls: TrainConfig::classification(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.segmenter.validate()?;
        self.classifier.validate()?;
        self.split.validate()?;
        self.train_seg.validate()?;
        self.train_seg.expect_stage(Stage::Segmentation)?;
        self.train_cls.validate()?;
        self.train_cls.expect_stage(Stage::Classification)?;
        if self.classifier.fuse_encoder_features
            && self.classifier.encoder_feature_width != self.segmenter.bottleneck_width()
        {
            return Err(Error::Config(format!(
                "classifier.encoder_feature_width {} differs from the segmenter bottleneck width {}",
                self.classifier.encoder_feature_width,
                self.segmenter.bottleneck_width()
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PoolingMode;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);

        let partial = "[classifier]\npooling_mode = \"max_pool\"\n\n[train_cls]\nepochs = 3\n";
        let cfg = Config::from_toml(partial).unwrap();
        assert_eq!(cfg.classifier.pooling_mode, PoolingMode::MaxPool);
        assert_eq!(cfg.train_cls.epochs, 3);
        assert_eq!(cfg.train_cls.stage, Stage::Classification);
        assert_eq!(cfg.train_seg.epochs, 30);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "[train_seg]\nbatch_size = 0\n",
            "[nonsense]\nx = 1\n",
            "[split]\ntest_fraction = 1.5\n",
            "[segmenter]\nencoder_widths = [8, 16, 32]\n",
            "[train_cls]\nstage = \"segmentation\"\n",
        ] {
            let err = Config::from_toml(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }
}
