use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsekp::codec::{Activation, CodecParams, DecodeParams};
use sparsekp::synth::{SceneSpec, SplitPlan};
use sparsekp::trainer::TrainConfig;
use sparsekp::{LossVariant, ModelSpec};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Peak picking settings; the threshold is chosen per loss variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub window: usize,
    pub k: usize,
    pub default_threshold: f64,
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            window: 5,
            k: 30,
            default_threshold: 0.3,
            thresholds: BTreeMap::from([("MSE".to_string(), 0.2)]),
        }
    }
}

impl DecodeConfig {
    pub fn threshold_for(&self, variant: LossVariant) -> f64 {
        self.thresholds
            .iter()
            .find(|(name, _)| name.parse::<LossVariant>().ok() == Some(variant))
            .map_or(self.default_threshold, |(_, &t)| t)
    }

    /// Decode parameters for a model trained with `variant`.
    pub fn params_for(&self, variant: LossVariant) -> DecodeParams {
        DecodeParams {
            window: self.window,
            k: self.k,
            t: self.threshold_for(variant),
            activation: if variant.is_mse_family() {
                Activation::Identity
            } else {
                Activation::Sigmoid
            },
        }
    }

    fn validate(&self) -> Result<(), String> {
        for (name, &t) in &self.thresholds {
            name.parse::<LossVariant>().map_err(|e| e.to_string())?;
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("threshold for {name} must lie in [0, 1], got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(format!("default_threshold must lie in [0, 1], got {}", self.default_threshold));
        }
        for v in LossVariant::ALL {
            self.params_for(v).validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub scene: SceneSpec,
    pub split: SplitPlan,
    pub model: ModelSpec,
    pub codec: CodecParams,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("out"),
            master_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            precision: Precision::F64,
            scene: SceneSpec::default(),
            split: SplitPlan::default(),
            model: ModelSpec::default(),
            codec: CodecParams::default(),
            decode: DecodeConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: sparsekp::Result<()>| r.map_err(|e| CliError::Validation(e.to_string()));
        check(self.scene.validate())?;
        check(self.split.validate(self.scene.texture_seed_groups))?;
        check(self.model.validate())?;
        check(self.codec.validate())?;
        check(self.train.validate())?;
        self.decode.validate().map_err(CliError::Validation)?;
        if self.model.in_channels() != 3 {
            return Err(CliError::Validation("model input must have 3 channels (RGB)".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("seeds must not be empty".into()));
        }
        Ok(())
    }
}
