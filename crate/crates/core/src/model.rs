//! The dual encoder: text transformer, graph convolution and shared temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::initial_temperature;
use crate::corpus::{GraphTextCorpus, TokenizedText};
use crate::error::{Error, Result};
use crate::graph_encoder::{GraphEncoder, GraphEncoderConfig, GraphInputs};
use crate::numeric::{ParamId, ParamStore, Tensor};
use crate::text_encoder::{TextEncoder, TextEncoderConfig};

pub const TEMPERATURE_PARAM: &str = "temperature";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub graph: GraphEncoderConfig,
}

impl ModelConfig {
    /// Copies corpus-dependent sizes into the config.
    pub fn for_corpus(mut self, corpus: &GraphTextCorpus) -> Self {
        self.text.vocab_size = corpus.vocab.len();
        self.text.max_len = corpus.max_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        if self.graph.output_dim != self.text.output_dim {
            return Err(Error::Config(format!(
                "graph output dim {} differs from text output dim {}",
                self.graph.output_dim, self.text.output_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub graph: GraphEncoder,
    pub tau: ParamId,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(config.text, &mut store, &mut rng)?;
        let graph = GraphEncoder::new(config.graph, feature_dim, &mut store, &mut rng)?;
        let tau = store.add(TEMPERATURE_PARAM, Tensor::scalar(initial_temperature()));
        Ok(Self {
            config,
            store,
            text,
            graph,
            tau,
        })
    }

    /// Binds an existing parameter store, e.g. one read from a checkpoint.
    pub fn from_store(config: ModelConfig, feature_dim: usize, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder::from_store(config.text, &store)?;
        let graph = GraphEncoder::from_store(config.graph, feature_dim, &store)?;
        let tau = store
            .find(TEMPERATURE_PARAM)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {TEMPERATURE_PARAM}")))?;
        Ok(Self {
            config,
            store,
            text,
            graph,
            tau,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.graph.feature_dim()
    }

    pub fn temperature(&self) -> f32 {
        self.store.value(self.tau).item()
    }

    pub fn logit_scale(&self) -> f32 {
        self.temperature().exp()
    }

    pub fn embed_texts(&self, texts: &[&TokenizedText]) -> Result<Tensor> {
        self.text.embed_texts(&self.store, texts)
    }

    /// Text embeddings of every corpus document.
    pub fn embed_documents(&self, corpus: &GraphTextCorpus) -> Result<Tensor> {
        let docs: Vec<&TokenizedText> = corpus.documents.iter().collect();
        self.embed_texts(&docs)
    }

    pub fn embed_nodes(&self, inputs: &GraphInputs) -> Result<Tensor> {
        self.graph.embed_nodes(&self.store, inputs)
    }

    /// Check that the corpus fits this model's vocabulary and features.
    pub fn check_corpus(&self, corpus: &GraphTextCorpus) -> Result<()> {
        if corpus.vocab.len() != self.config.text.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} entries, model expects {}",
                corpus.vocab.len(),
                self.config.text.vocab_size
            )));
        }
        if corpus.feature_dim() != self.feature_dim() {
            return Err(Error::Config(format!(
                "corpus features have {} dims, model expects {}",
                corpus.feature_dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            text: TextEncoderConfig {
                layers: 1,
                width: 8,
                heads: 2,
                max_len: 6,
                vocab_size: 10,
                output_dim: 4,
                ..Default::default()
            },
            graph: GraphEncoderConfig {
                hidden: 5,
                output_dim: 4,
                slope: 0.01,
            },
        }
    }

    #[test]
    fn rebinding_the_store_finds_every_parameter() {
        let m = DualEncoder::new(config(), 3, 1).unwrap();
        let again = DualEncoder::from_store(m.config, 3, m.store.clone()).unwrap();
        assert_eq!(again.text, m.text);
        assert_eq!(again.graph, m.graph);
        assert_eq!(again.tau, m.tau);
        assert!((m.logit_scale() - 1.0 / 0.07).abs() < 1e-3);
        let ids = m.text.param_ids().len() + m.graph.param_ids().len() + 1;
        assert_eq!(ids, m.store.len());
    }

    #[test]
    fn mismatched_output_dims_rejected() {
        let mut c = config();
        c.graph.output_dim = 7;
        assert!(matches!(DualEncoder::new(c, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DualEncoder::new(config(), 3, 5).unwrap();
        let b = DualEncoder::new(config(), 3, 5).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
