//! `key = value` run configuration files (TOML syntax).
//!
//! Every key is optional; missing keys keep their defaults:
//!
//! ```toml
//! learning_rate = 1e-3
//! weight_decay = 1e-2
//! max_epochs = 20
//! patience = 3
//! batch_size = 32
//! beta1 = 0.9
//! beta2 = 0.999
//! adam_eps = 1e-8
//! init_seed = 0
//! init = "uniform"          # or "zero"
//! validation = true         # false: keep the last epoch
//! hidden_units = 0          # 0: plain linear probes
//! meta_input = "probabilities"   # or "features"
//! aux_branch_loss = false
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{MetaInput, ModelConfig};
use crate::optim::{InitScheme, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    init_seed: Option<u64>,
    init: Option<InitScheme>,
    validation: Option<bool>,
    hidden_units: Option<usize>,
    meta_input: Option<MetaInput>,
    aux_branch_loss: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: file.learning_rate.unwrap_or(d.learning_rate),
        weight_decay: file.weight_decay.unwrap_or(d.weight_decay),
        max_epochs: file.max_epochs.unwrap_or(d.max_epochs),
        patience: file.patience.unwrap_or(d.patience),
        batch_size: file.batch_size.unwrap_or(d.batch_size),
        beta1: file.beta1.unwrap_or(d.beta1),
        beta2: file.beta2.unwrap_or(d.beta2),
        adam_eps: file.adam_eps.unwrap_or(d.adam_eps),
        init_seed: file.init_seed.unwrap_or(d.init_seed),
        init: file.init.unwrap_or(d.init),
        use_validation: file.validation.unwrap_or(d.use_validation),
    };
    train.validate()?;
    let model = ModelConfig {
        hidden_units: file.hidden_units.filter(|&h| h > 0),
        meta_input: file.meta_input.unwrap_or_default(),
        aux_branch_loss: file.aux_branch_loss.unwrap_or(false),
    };
    Ok(RunConfig { train, model })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.weight_decay, 1e-2);
        assert_eq!(cfg.train.max_epochs, 20);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn overrides_and_model_options() {
        let cfg = parse_config(
            "learning_rate = 0.01\n# comment\npatience = 5\nhidden_units = 16\n\
             meta_input = \"features\"\naux_branch_loss = true\nvalidation = false\ninit = \"zero\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.patience, 5);
        assert!(!cfg.train.use_validation);
        assert_eq!(cfg.train.init, InitScheme::Zero);
        assert_eq!(cfg.model.hidden_units, Some(16));
        assert_eq!(cfg.model.meta_input, MetaInput::Features);
        assert!(cfg.model.aux_branch_loss);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(parse_config("lr = 1"), Err(Error::Config(_))));
        assert!(matches!(parse_config("weight_decay = 2.0"), Err(Error::Config(_))));
        assert!(matches!(parse_config("max_epochs = \"x\""), Err(Error::Config(_))));
    }
}
