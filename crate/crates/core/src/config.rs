//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! name = "filmtrust-krum-adversarial"
//!
//! [data]
//! synthetic = "filmtrust"     # or ratings = "...", trust = "..."
//! rating_min = 1.0
//! rating_max = 8.0
//!
//! [model]
//! embedding_dim = 8
//!
//! [training]
//! learning_rate = 2.0
//! max_rounds = 200
//!
//! [client]
//! pseudo_item_count = 10
//!
//! [defense]
//! kind = "krum"
//!
//! [attack]
//! mode = "adversarial"
//! attacker_fraction = 0.3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::DefenseConfig;
use crate::attack::{AttackMode, AttackPlan};
use crate::client::ClientConfig;
use crate::data::{RatingRange, SyntheticParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub client: ClientConfig,
    pub defense: DefenseConfig,
    pub attack: AttackPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            client: ClientConfig::default(),
            defense: DefenseConfig::default(),
            attack: AttackPlan::default(),
        }
    }
}

/// Named generator settings or a full parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SyntheticSpec {
    Preset(String),
    Params(SyntheticParams),
}

impl SyntheticSpec {
    pub fn resolve(&self) -> Result<SyntheticParams> {
        match self {
            SyntheticSpec::Params(p) => Ok(p.clone()),
            SyntheticSpec::Preset(name) => match name.as_str() {
                "filmtrust" => Ok(SyntheticParams::filmtrust()),
                "small" => Ok(SyntheticParams::small()),
                "default" => Ok(SyntheticParams::default()),
                other => Err(Error::config(
                    "data.synthetic",
                    format!("unknown preset `{other}`; allowed: filmtrust, small, default"),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Label used in reports.
    pub name: String,
    pub ratings: Option<PathBuf>,
    pub trust: Option<PathBuf>,
    pub rating_min: f64,
    pub rating_max: f64,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            ratings: None,
            trust: None,
            rating_min: 1.0,
            rating_max: 8.0,
            synthetic: Some(SyntheticSpec::Preset("small".into())),
        }
    }
}

impl DataConfig {
    pub fn range(&self) -> Result<RatingRange> {
        RatingRange::new(self.rating_min, self.rating_max).map_err(|e| Error::config("data.rating_min", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Standard deviation of the initial embedding entries.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_rounds: usize,
    pub early_stop_patience: usize,
    pub validation_interval: usize,
    /// 0 schedules every participating client each round.
    pub clients_per_round: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            max_rounds: 300,
            early_stop_patience: 5,
            validation_interval: 1,
            clients_per_round: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.ratings, &mut self.data.trust].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.range()?;
        match (&self.data.ratings, &self.data.trust, &self.data.synthetic) {
            (Some(_), Some(_), None) => {}
            (None, None, Some(s)) => {
                let p = s.resolve()?;
                if p.rating_min != self.data.rating_min || p.rating_max != self.data.rating_max {
                    return Err(Error::config(
                        "data.rating_min",
                        "synthetic rating range differs from data.rating_min/rating_max",
                    ));
                }
            }
            _ => {
                return Err(Error::config(
                    "data",
                    "give either both `ratings` and `trust` paths or `synthetic`",
                ))
            }
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be at least 1"));
        }
        if !(self.model.init_std > 0.0 && self.model.init_std.is_finite()) {
            return Err(Error::config("model.init_std", "must be positive"));
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be > 0"));
        }
        if t.early_stop_patience == 0 {
            return Err(Error::config("training.early_stop_patience", "must be at least 1"));
        }
        if t.validation_interval == 0 {
            return Err(Error::config("training.validation_interval", "must be at least 1"));
        }
        self.client
            .validate()
            .map_err(|e| Error::config("client", e.to_string()))?;
        let f = self.defense.flame_noise_factor;
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::config("defense.flame_noise_factor", "must be finite and >= 0"));
        }
        let a = &self.attack;
        if !(0.0..=0.5).contains(&a.attacker_fraction) {
            return Err(Error::config(
                "attack.attacker_fraction",
                format!("{} outside [0, 0.5]", a.attacker_fraction),
            ));
        }
        if a.mode == AttackMode::Backdoor
            && !a.forged_ratings.is_empty()
            && a.forged_ratings.len() != a.target_items.len()
        {
            return Err(Error::config(
                "attack.forged_ratings",
                "one forged rating per target item",
            ));
        }
        Ok(())
    }
}
