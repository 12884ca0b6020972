//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys keep their defaults. Unknown keys are
//! rejected so typos surface as errors naming the offending field.
//!
//! ```toml
//! mode = "t2s"          # t2s | naive-independent | task-id | sequential
//! mu = 0.5
//! seed = 7
//! tasks = 10
//! epochs = 60
//! order = [3, 1, 0, 2, 4, 5, 6, 7, 8, 9]
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::OptimizerKind;
use crate::metrics::NbtConvention;
use crate::trainer::{LifelongRunConfig, LrSchedule, Mode, TrainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// The documented keys of a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    // run
    pub mode: Option<Mode>,
    pub mu: Option<f64>,
    pub seed: Option<u64>,
    pub order: Option<Vec<usize>>,
    // suite
    pub tasks: Option<usize>,
    pub suite_seed: Option<u64>,
    pub horizon: Option<usize>,
    // model
    pub blocks: Option<usize>,
    pub width: Option<usize>,
    pub tokens_per_task: Option<usize>,
    pub window: Option<usize>,
    pub heads: Option<usize>,
    pub pool_size: Option<usize>,
    pub language_dim: Option<usize>,
    pub token_attention: Option<bool>,
    pub refill: Option<bool>,
    pub value_std: Option<f64>,
    pub head_value_std: Option<f64>,
    pub key_gain: Option<f64>,
    pub observation_gain: Option<f64>,
    // trainer
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerName>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub demos_per_task: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub nbt_convention: Option<NbtConvention>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    file.check_fields()?;
    Ok(file)
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

impl ConfigFile {
    fn check_fields(&self) -> Result<(), ConfigError> {
        if let Some(mu) = self.mu {
            if !(0.0..=1.0).contains(&mu) {
                return Err(field("mu", format!("{mu} is outside [0, 1]")));
            }
        }
        let counts = [
            ("tasks", self.tasks),
            ("horizon", self.horizon),
            ("blocks", self.blocks),
            ("width", self.width),
            ("tokens_per_task", self.tokens_per_task),
            ("window", self.window),
            ("heads", self.heads),
            ("pool_size", self.pool_size),
            ("language_dim", self.language_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("demos_per_task", self.demos_per_task),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in counts {
            if v == Some(0) {
                return Err(field(name, "must be at least 1"));
            }
        }
        let positives = [
            ("learning_rate", self.learning_rate),
            ("value_std", self.value_std),
            ("head_value_std", self.head_value_std),
            ("key_gain", self.key_gain),
            ("observation_gain", self.observation_gain),
        ];
        for (name, v) in positives {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(field(name, format!("{v} must be positive and finite")));
                }
            }
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(field("momentum", format!("{m} is outside [0, 1)")));
            }
        }
        if let (Some(w), Some(h)) = (self.width, self.heads) {
            if w % h != 0 {
                return Err(field("heads", format!("width {w} is not divisible by {h}")));
            }
        }
        Ok(())
    }

    /// Overlays the set keys on `base`. An unset pool size grows with the
    /// suite so that every task can own a disjoint block.
    pub fn apply(&self, base: &LifelongRunConfig) -> Result<LifelongRunConfig, ConfigError> {
        let mut c = base.clone();
        if let Some(tasks) = self.tasks {
            let mut suite = crate::tasksuite::SuiteSpec::with_tasks(tasks);
            suite.sim = c.suite.sim;
            c.suite = suite;
        }
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    c.$($dst)+ = v;
                }
            };
        }
        set!(horizon => suite.sim.horizon);
        set!(suite_seed => suite_seed);
        set!(seed => seed);
        set!(seed => policy.seed);
        set!(mode => mode);
        set!(mu => policy.mu);
        set!(blocks => policy.blocks);
        set!(width => policy.width);
        set!(tokens_per_task => policy.tokens_per_task);
        set!(window => policy.window);
        set!(heads => policy.heads);
        set!(language_dim => policy.language_dim);
        set!(token_attention => policy.token_attention);
        set!(refill => policy.refill);
        set!(value_std => policy.value_std);
        set!(head_value_std => policy.head_value_std);
        set!(key_gain => policy.key_gain);
        set!(observation_gain => policy.observation_gain);
        set!(epochs => epochs);
        set!(batch_size => batch_size);
        set!(learning_rate => optimizer.learning_rate);
        set!(lr_schedule => lr_schedule);
        set!(demos_per_task => demos_per_task);
        set!(eval_episodes => eval_episodes);
        set!(nbt_convention => nbt_convention);
        if self.order.is_some() {
            c.order = self.order.clone();
        }
        c.policy.pool_size = self
            .pool_size
            .unwrap_or(c.suite.num_tasks.saturating_mul(c.policy.tokens_per_task));
        match (self.optimizer, self.momentum) {
            (Some(OptimizerName::Sgd), m) => {
                c.optimizer.kind = OptimizerKind::SgdMomentum {
                    momentum: m.unwrap_or(0.9),
                }
            }
            (Some(OptimizerName::Adam), Some(_)) => {
                return Err(field("momentum", "only applies to optimizer = \"sgd\""));
            }
            (Some(OptimizerName::Adam), None) => c.optimizer.kind = OptimizerKind::adam(),
            (None, Some(m)) => match &mut c.optimizer.kind {
                OptimizerKind::SgdMomentum { momentum } => *momentum = m,
                OptimizerKind::Adam { .. } => {
                    return Err(field("momentum", "only applies to optimizer = \"sgd\""));
                }
            },
            (None, None) => {}
        }
        c.validate().map_err(|e| match e {
            TrainError::Config(m) => ConfigError::Invalid(m),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        Ok(c)
    }

    /// Every key set from an effective config, for echoing into manifests.
    pub fn from_config(c: &LifelongRunConfig) -> Self {
        let (optimizer, momentum) = match c.optimizer.kind {
            OptimizerKind::Adam { .. } => (OptimizerName::Adam, None),
            OptimizerKind::SgdMomentum { momentum } => (OptimizerName::Sgd, Some(momentum)),
        };
        Self {
            mode: Some(c.mode),
            mu: Some(c.policy.mu),
            seed: Some(c.seed),
            order: c.order.clone(),
            tasks: Some(c.suite.num_tasks),
            suite_seed: Some(c.suite_seed),
            horizon: Some(c.suite.sim.horizon),
            blocks: Some(c.policy.blocks),
            width: Some(c.policy.width),
            tokens_per_task: Some(c.policy.tokens_per_task),
            window: Some(c.policy.window),
            heads: Some(c.policy.heads),
            pool_size: Some(c.policy.pool_size),
            language_dim: Some(c.policy.language_dim),
            token_attention: Some(c.policy.token_attention),
            refill: Some(c.policy.refill),
            value_std: Some(c.policy.value_std),
            head_value_std: Some(c.policy.head_value_std),
            key_gain: Some(c.policy.key_gain),
            observation_gain: Some(c.policy.observation_gain),
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            optimizer: Some(optimizer),
            learning_rate: Some(c.optimizer.learning_rate),
            momentum,
            lr_schedule: Some(c.lr_schedule),
            demos_per_task: Some(c.demos_per_task),
            eval_episodes: Some(c.eval_episodes),
            nbt_convention: Some(c.nbt_convention),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

/// Parses a comma-separated permutation such as `2,0,1`.
pub fn parse_order(text: &str) -> Result<Vec<usize>, ConfigError> {
    let order = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| field("order", format!("`{}`: {e}", s.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..order.len()).collect::<Vec<_>>() {
        return Err(field(
            "order",
            format!("{order:?} is not a permutation of 0..{}", order.len()),
        ));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_keeps_defaults() {
        let base = LifelongRunConfig::default();
        assert_eq!(parse_config("").unwrap().apply(&base).unwrap(), base);
    }

    #[test]
    fn keys_override_defaults() {
        let text = r#"
            mode = "sequential"
            mu = 0.9
            seed = 7
            tasks = 4
            order = [3, 1, 0, 2]
            optimizer = "sgd"
            momentum = 0.5
            nbt_convention = "zero-last"
        "#;
        let c = parse_config(text)
            .unwrap()
            .apply(&LifelongRunConfig::default())
            .unwrap();
        assert_eq!(c.mode, Mode::Sequential);
        assert_eq!(c.policy.mu, 0.9);
        assert_eq!((c.seed, c.policy.seed), (7, 7));
        assert_eq!(c.suite.num_tasks, 4);
        assert_eq!(c.policy.pool_size, 4 * c.policy.tokens_per_task);
        assert_eq!(c.order, Some(vec![3, 1, 0, 2]));
        assert_eq!(c.optimizer.kind, OptimizerKind::SgdMomentum { momentum: 0.5 });
        assert_eq!(c.nbt_convention, NbtConvention::ZeroLast);
    }

    #[test]
    fn errors_name_the_field() {
        let unknown = parse_config("epoch = 3").unwrap_err().to_string();
        assert!(unknown.contains("epoch"), "{unknown}");
        let mu = parse_config("mu = 2.0").unwrap_err();
        assert!(matches!(mu, ConfigError::Field { field: "mu", .. }));
        let mode = parse_config("mode = \"fast\"").unwrap_err().to_string();
        assert!(mode.contains("fast"), "{mode}");
        assert!(matches!(
            parse_config("epochs = 0").unwrap_err(),
            ConfigError::Field { field: "epochs", .. }
        ));
        let bad_order = parse_config("tasks = 3\norder = [0, 0, 1]")
            .unwrap()
            .apply(&LifelongRunConfig::default());
        assert!(matches!(bad_order, Err(ConfigError::Invalid(_))));
        assert!(parse_config("mu = ").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut base = LifelongRunConfig::default().with_seed(11);
        base.order = Some((0..10).rev().collect());
        base.mode = Mode::TaskId;
        let text = ConfigFile::from_config(&base).to_toml();
        let back = parse_config(&text)
            .unwrap()
            .apply(&LifelongRunConfig::default())
            .unwrap();
        assert_eq!(back, base);
    }

    #[test]
    fn order_parsing() {
        assert_eq!(parse_order("2, 0,1").unwrap(), vec![2, 0, 1]);
        assert!(parse_order("0,2").is_err());
        assert!(parse_order("a").is_err());
        assert!(parse_order("").is_err());
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_config(&text);
            let _ = parse_order(&text);
        }
    }
}
