//! Training configuration and published per-dataset defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proto::DEFAULT_TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Main effects only.
    Protonam,
    /// All pairwise interactions through a shared conditional predictor.
    Protona2m,
    /// A single term over every feature.
    Protonanm,
}

impl ModelKind {
    pub fn order(self, n_features: usize) -> usize {
        match self {
            ModelKind::Protonam => 1,
            ModelKind::Protona2m => 2,
            ModelKind::Protonanm => n_features,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protonam" => Ok(ModelKind::Protonam),
            "protona2m" => Ok(ModelKind::Protona2m),
            "protonanm" => Ok(ModelKind::Protonanm),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    LayerNorm,
    BatchNorm,
}

/// Every knob of a training run. JSON field names are the snake-case field
/// names below; missing fields take the Housing ProtoNAM defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub task: TaskKind,
    pub prototypes: usize,
    pub layers: usize,
    pub predictor_layers: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub max_iteration: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub dropout_output: f64,
    pub output_penalty: f64,
    pub normalization: Normalization,
    pub seed: u64,
    pub ensemble_size: usize,
    pub tau: f64,
    pub use_quantile: bool,
    /// Validation is scored every this many iterations.
    pub eval_every: usize,
    /// Sum the loss over every layer's prediction (false: last layer only).
    pub hierarchical: bool,
    /// Use the prototype activation (false: identity activation).
    pub use_prototypes: bool,
    /// Restricts interaction models to these feature index sets.
    pub interactions: Option<Vec<Vec<usize>>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::protonam_housing()
    }
}

impl TrainConfig {
    pub fn protonam_housing() -> Self {
        TrainConfig {
            model_kind: ModelKind::Protonam,
            task: TaskKind::Regression,
            prototypes: 32,
            layers: 4,
            predictor_layers: 2,
            hidden_dim: 64,
            batch_size: 2048,
            max_iteration: 1000,
            learning_rate: 2e-4,
            weight_decay: 1e-3,
            dropout: 0.0,
            dropout_output: 0.0,
            output_penalty: 1e-3,
            normalization: Normalization::LayerNorm,
            seed: 0,
            ensemble_size: 1,
            tau: DEFAULT_TAU,
            use_quantile: false,
            eval_every: 10,
            hierarchical: true,
            use_prototypes: true,
            interactions: None,
        }
    }

    pub fn protonam_income() -> Self {
        TrainConfig {
            task: TaskKind::Classification,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            output_penalty: 1e-2,
            use_quantile: true,
            ..Self::protonam_housing()
        }
    }

    pub fn protona2m_housing() -> Self {
        TrainConfig {
            model_kind: ModelKind::Protona2m,
            learning_rate: 2e-3,
            weight_decay: 1e-3,
            output_penalty: 1e-2,
            ..Self::protonam_housing()
        }
    }

    pub fn protona2m_income() -> Self {
        TrainConfig {
            model_kind: ModelKind::Protona2m,
            learning_rate: 2e-4,
            weight_decay: 8e-3,
            output_penalty: 1e-3,
            ..Self::protonam_income()
        }
    }

    pub fn protonanm_housing() -> Self {
        TrainConfig {
            model_kind: ModelKind::Protonanm,
            learning_rate: 2e-4,
            weight_decay: 1e-3,
            output_penalty: 1e-2,
            ..Self::protonam_housing()
        }
    }

    pub fn protonanm_income() -> Self {
        TrainConfig {
            model_kind: ModelKind::Protonanm,
            learning_rate: 1e-5,
            weight_decay: 5e-2,
            output_penalty: 4e-4,
            ..Self::protonam_income()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural constraints that every run must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.prototypes == 0 {
            return fail("prototypes must be at least 1");
        }
        if self.layers == 0 {
            return fail("layers must be at least 1");
        }
        if !(1..=2).contains(&self.predictor_layers) {
            return fail("predictor_layers must be 1 or 2");
        }
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_iteration == 0 {
            return fail("hidden_dim, batch_size and max_iteration must be positive");
        }
        if self.ensemble_size == 0 || self.eval_every == 0 {
            return fail("ensemble_size and eval_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail("tau must be positive");
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("output_penalty", self.output_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        for (name, p) in [("dropout", self.dropout), ("dropout_output", self.dropout_output)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Fields outside the published hyperparameter search space. Runs
    /// outside it are allowed (small synthetic experiments need them).
    pub fn outside_search_space(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if ![1, 2, 4, 8, 16, 32, 64, 128].contains(&self.prototypes) {
            out.push("prototypes");
        }
        if !(1..=4).contains(&self.layers) {
            out.push("layers");
        }
        if ![32, 64].contains(&self.hidden_dim) {
            out.push("hidden_dim");
        }
        if ![512, 1024, 2048].contains(&self.batch_size) {
            out.push("batch_size");
        }
        if ![200, 500, 1000].contains(&self.max_iteration) {
            out.push("max_iteration");
        }
        if !(1e-6..=1e-1).contains(&self.learning_rate) {
            out.push("learning_rate");
        }
        if !(1e-8..=1e-1).contains(&self.weight_decay) {
            out.push("weight_decay");
        }
        if ![0.0, 0.1, 0.2, 0.3, 0.4, 0.5].contains(&self.dropout) {
            out.push("dropout");
        }
        if ![0.0, 0.1, 0.2, 0.3].contains(&self.dropout_output) {
            out.push("dropout_output");
        }
        if !(1e-5..=1e-1).contains(&self.output_penalty) {
            out.push("output_penalty");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_inside_search_space() {
        for cfg in [
            TrainConfig::protonam_housing(),
            TrainConfig::protonam_income(),
            TrainConfig::protona2m_housing(),
            TrainConfig::protona2m_income(),
            TrainConfig::protonanm_housing(),
            TrainConfig::protonanm_income(),
        ] {
            cfg.validate().unwrap();
            assert!(cfg.outside_search_space().is_empty(), "{cfg:?}");
        }
    }

    #[test]
    fn json_uses_snake_case_and_defaults() {
        let cfg = TrainConfig::from_json(r#"{"layers": 2, "normalization": "batch_norm"}"#).unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.normalization, Normalization::BatchNorm);
        assert_eq!(cfg.prototypes, 32);
        assert!(TrainConfig::from_json(r#"{"layerz": 2}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"predictor_layers": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"dropout": 1.0}"#).is_err());
    }
}
