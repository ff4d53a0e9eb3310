//! Run configuration as a TOML document. Every field has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::prompt::{DiscretePrompt, PromptConfig};
use crate::tasks::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub ways: usize,
    pub shots: usize,
    pub tasks: usize,
    pub seed: u64,
    /// Discrete prompt with a `[CLASS]` slot; empty means the bare label text.
    pub template: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            tasks: 20,
            seed: 1,
            template: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub evaluation: EvaluationConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks everything that does not depend on a corpus.
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.prompt.validate()?;
        self.synthetic.validate()?;
        DiscretePrompt::parse(&self.evaluation.template)?;
        if self.evaluation.ways == 0 || self.evaluation.tasks == 0 {
            return Err(Error::Config("evaluation ways and tasks must be positive".into()));
        }
        if self.corpus.max_len == 0 {
            return Err(Error::Config("corpus max_len must be positive".into()));
        }
        if self.model.graph.output_dim != self.model.text.output_dim {
            return Err(Error::Config(format!(
                "graph output dim {} differs from text output dim {}",
                self.model.graph.output_dim, self.model.text.output_dim
            )));
        }
        Ok(())
    }
}
