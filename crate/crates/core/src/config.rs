//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Mode, Task};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::synthdata::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.json"),
            test: PathBuf::from("data/test.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            max_grad_norm: a.max_grad_norm,
            epochs: 10,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: Vec<usize>,
    pub modes: Vec<Mode>,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub group_constraint: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: vec![10, 20, 50],
            modes: vec![Mode::With, Mode::No],
            eval_every: 0,
            group_constraint: false,
        }
    }
}

impl EvalConfig {
    pub fn options(&self, predicate_groups: &[usize]) -> EvalOptions {
        EvalOptions {
            group_constraint: self.group_constraint,
            predicate_groups: predicate_groups.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::PredCls,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let toml_error = |e: toml::de::Error| Error::Config(e.message().to_string() + &span_note(text, e.span()));
        let de = toml::de::Deserializer::parse(text).map_err(toml_error)?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = toml_error(e.into_inner());
            match inner {
                Error::Config(m) if field != "." => Error::Config(format!("{field}: {m}")),
                other => other,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data and output paths are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.test, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Overrides the run seed and the generator seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        self.model.validate()?;
        self.loss.validate().map_err(as_config)?;
        self.generator.validate().map_err(as_config)?;
        let o = &self.optim;
        if !(o.lr >= 0.0) || !(o.max_grad_norm > 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::Config("optim: lr and weight_decay must be >= 0, eps and max_grad_norm > 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optim: betas must lie in [0, 1)".into()));
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(Error::Config("eval.k must list positive values".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes must not be empty".into()));
        }
        Ok(())
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.dtrans.temporal_depth, 3);
        assert_eq!(cfg.model.dtrans.spatial_depth, 3);
        assert_eq!(cfg.model.dtrans.top_k, 8);
        assert_eq!(cfg.optim.lr, 1e-5);
        assert_eq!(cfg.optim.max_grad_norm, 5.0);
        assert_eq!(cfg.optim.epochs, 10);
        assert_eq!((cfg.loss.gamma_pos, cfg.loss.gamma_neg), (1.0, 4.0));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("task = \"sgcls\"\n[optim]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.task, Task::SgCls);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.epochs, 10);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "task = \"sgdet\"",
            "[model.dtrans]\ndim = 30\nheads = 8",
            "[loss]\ngamma_pos = 5.0\ngamma_neg = 1.0",
            "[eval]\nk = []",
            "unknown_key = 1",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
