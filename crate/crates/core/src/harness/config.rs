use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustics::FeatureConfig;
use crate::compression::{GateCompare, Method};
use crate::error::{Error, Result};
use crate::model::{MaskParams, ModelConfig};
use crate::synthcorpus::{CategorySpec, CorpusParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Pretraining steps at scale 1.
pub const PRETRAIN_STEPS: u64 = 400_000;

/// Evaluation checkpoints at scale 1, up to the full pretraining length.
pub const CHECKPOINT_GRID: [u64; 15] = [
    0, 500, 1_000, 2_000, 3_000, 4_000, 6_000, 8_000, 10_000, 20_000, 50_000, 100_000, 200_000, 300_000, 400_000,
];

/// A preset name or an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Named(String),
    Custom(ModelConfig),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelChoice::Named(n) => ModelConfig::by_name(n)?,
            ModelChoice::Custom(c) => *c,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub categories: Vec<String>,
    pub planted_bias: f64,
    /// Target stimuli per group; `None` keeps each category's own count.
    pub targets_per_group: Option<usize>,
    pub params: CorpusParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            categories: CategorySpec::standard().into_iter().map(|c| c.name).collect(),
            planted_bias: 1.0,
            targets_per_group: None,
            params: CorpusParams::default(),
        }
    }
}

impl CorpusConfig {
    pub fn categories(&self) -> Result<Vec<CategorySpec>> {
        if self.categories.is_empty() {
            return Err(Error::InvalidConfig("no bias categories".into()));
        }
        self.categories
            .iter()
            .map(|n| {
                let c = CategorySpec::by_name(n)?;
                Ok(match self.targets_per_group {
                    Some(k) => c.with_count(k),
                    None => c,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// At scale 1.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub mask: MaskParams,
    /// At scale 1; scaled, rounded up and de-duplicated before use.
    pub checkpoint_grid: Vec<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: PRETRAIN_STEPS,
            batch_size: 12,
            lr: 1e-4,
            mask: MaskParams::default(),
            checkpoint_grid: CHECKPOINT_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub methods: Vec<Method>,
    pub gate_compare: GateCompare,
    pub student_layers: Vec<usize>,
    /// At scale 1.
    pub distill_steps: u64,
    pub distill_batch_size: usize,
    pub distill_lr: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Head, Method::Row, Method::Weight, Method::Distill],
            gate_compare: GateCompare::Ema,
            student_layers: vec![2, 4, 6],
            distill_steps: 200_000,
            distill_batch_size: 24,
            distill_lr: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelChoice,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub pretrain: PretrainConfig,
    pub compression: CompressionConfig,
    /// Divides every step count.
    pub scale: u64,
    pub seed: u64,
    /// Permutations per bias evaluation; 0 skips p-values.
    pub n_perm: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelChoice::Named("tiny".into()),
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            pretrain: PretrainConfig::default(),
            compression: CompressionConfig::default(),
            scale: 100,
            seed: 42,
            n_perm: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// The end-to-end smoke setup: tiny model, every step count / 1000.
    pub fn smoke() -> Self {
        let mut c = Self {
            scale: 1000,
            ..Self::default()
        };
        c.compression.student_layers = vec![2];
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(s) if s == u64::from(SCHEMA_VERSION) => {}
            Some(s) => return Err(Error::InvalidConfig(format!("schema_version {s}, expected {SCHEMA_VERSION}"))),
            None => return Err(Error::InvalidConfig("missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::InvalidConfig("scale must be at least 1".into()));
        }
        let model = self.model.resolve()?;
        if model.input_dim != self.features.n_mels {
            return Err(Error::InvalidConfig(format!(
                "model input_dim {} != n_mels {}",
                model.input_dim, self.features.n_mels
            )));
        }
        self.corpus.categories()?;
        if !(0.0..=1.0).contains(&self.corpus.planted_bias) {
            return Err(Error::InvalidConfig(format!(
                "planted_bias {} outside [0, 1]",
                self.corpus.planted_bias
            )));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || !(p.lr > 0.0) {
            return Err(Error::InvalidConfig("pretraining needs positive batch size and lr".into()));
        }
        if let Some(&bad) = self.compression.student_layers.iter().find(|&&l| l == 0) {
            return Err(Error::InvalidConfig(format!("student with {bad} layers")));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn scaled(&self, steps: u64) -> u64 {
        crate::compression::scale_steps(steps, self.scale)
    }

    pub fn pretrain_steps(&self) -> u64 {
        self.scaled(self.pretrain.steps)
    }

    /// Scaled checkpoint grid: `0` stays `0`, everything else is rounded up
    /// to at least one step; duplicates and points past the end are dropped.
    pub fn checkpoint_grid(&self) -> Vec<u64> {
        let end = self.pretrain_steps();
        let mut g: Vec<u64> = self
            .pretrain
            .checkpoint_grid
            .iter()
            .map(|&s| if s == 0 { 0 } else { self.scaled(s) })
            .filter(|&s| s <= end)
            .collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_schema_check() {
        let c = ExperimentConfig::smoke();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_json(r#"{"scale": 10}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "scael": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "scale": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "model": "huge"}"#).is_err());
        let minimal = ExperimentConfig::from_json(r#"{"schema_version": 1, "model": "slim"}"#).unwrap();
        assert_eq!(minimal.model_config().unwrap(), ModelConfig::slim());
    }

    #[test]
    fn custom_model_shape() {
        let text = r#"{"schema_version": 1, "model": {"n_layers": 2, "hidden_dim": 16, "ffw_dim": 32,
            "n_heads": 2, "n_clusters": 8, "input_dim": 80, "positional": {"kind": "sinusoidal"}}}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.model_config().unwrap().hidden_dim, 16);
    }

    #[test]
    fn scaled_grid() {
        let c = ExperimentConfig::smoke();
        assert_eq!(c.checkpoint_grid(), vec![0, 1, 2, 3, 4, 6, 8, 10, 20, 50, 100, 200, 300, 400]);
        let base = ExperimentConfig::default();
        assert_eq!(&base.checkpoint_grid()[..4], &[0, 5, 10, 20]);
        assert_eq!(*base.checkpoint_grid().last().unwrap(), 4000);
    }
}
