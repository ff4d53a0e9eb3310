//! Two-layer graph convolutional node encoder and neighborhood summaries.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::GraphTextCorpus;
use crate::error::{Error, Result};
use crate::numeric::init::glorot_uniform;
use crate::numeric::{CsrMatrix, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphEncoderConfig {
    pub hidden: usize,
    pub output_dim: usize,
    /// LeakyReLU negative slope after the first layer.
    pub slope: f64,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            output_dim: 128,
            slope: 0.01,
        }
    }
}

/// `D^-1/2 (A + I) D^-1/2` over the corpus graph, degrees counting the self-loop.
pub fn build_normalized_adjacency(adjacency: &[Vec<usize>]) -> CsrMatrix {
    let n = adjacency.len();
    let inv_sqrt: Vec<f64> = adjacency.iter().map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt()).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, nb) in adjacency.iter().enumerate() {
        let mut cols: Vec<usize> = nb.iter().copied().chain(std::iter::once(i)).collect();
        cols.sort_unstable();
        cols.dedup();
        for j in cols {
            col_idx.push(j);
            values.push((inv_sqrt[i] * inv_sqrt[j]) as f32);
        }
        row_ptr.push(col_idx.len());
    }
    CsrMatrix {
        rows: n,
        cols: n,
        row_ptr,
        col_idx,
        values,
    }
}

/// Frozen graph inputs: the normalized adjacency and the once-propagated
/// features `Â X`.
#[derive(Debug, Clone)]
pub struct GraphInputs<T: Scalar = f32> {
    pub adjacency: Arc<CsrMatrix<T>>,
    pub propagated: Tensor<T>,
}

impl GraphInputs {
    pub fn from_corpus(corpus: &GraphTextCorpus) -> Result<Self> {
        Self::new(build_normalized_adjacency(&corpus.adjacency), &corpus.node_features)
    }

    pub fn new(adjacency: CsrMatrix, features: &Tensor) -> Result<Self> {
        let propagated = adjacency.matmul_dense(features)?;
        Ok(Self {
            adjacency: Arc::new(adjacency),
            propagated,
        })
    }
}

impl<T: Scalar> GraphInputs<T> {
    pub fn nodes(&self) -> usize {
        self.adjacency.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.propagated.cols()
    }

    pub fn cast<U: Scalar>(&self) -> GraphInputs<U> {
        GraphInputs {
            adjacency: Arc::new(self.adjacency.cast()),
            propagated: self.propagated.cast(),
        }
    }
}

/// Parameter handles of the graph encoder inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    config: GraphEncoderConfig,
    feature_dim: usize,
    w1: ParamId,
    w2: ParamId,
}

impl GraphEncoder {
    pub fn new(config: GraphEncoderConfig, feature_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Self::validate(&config, feature_dim)?;
        let w1 = store.add("graph.layer1.weight", glorot_uniform(feature_dim, config.hidden, rng));
        let w2 = store.add("graph.layer2.weight", glorot_uniform(config.hidden, config.output_dim, rng));
        Ok(Self {
            config,
            feature_dim,
            w1,
            w2,
        })
    }

    pub fn from_store<T: Scalar>(config: GraphEncoderConfig, feature_dim: usize, store: &ParamStore<T>) -> Result<Self> {
        Self::validate(&config, feature_dim)?;
        let find = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(Self {
            config,
            feature_dim,
            w1: find("graph.layer1.weight", [feature_dim, config.hidden])?,
            w2: find("graph.layer2.weight", [config.hidden, config.output_dim])?,
        })
    }

    fn validate(config: &GraphEncoderConfig, feature_dim: usize) -> Result<()> {
        if config.hidden == 0 || config.output_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("graph encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.slope) {
            return Err(Error::Config(format!("LeakyReLU slope {} outside [0, 1)", config.slope)));
        }
        Ok(())
    }

    pub fn config(&self) -> &GraphEncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.w2]
    }

    fn check_inputs<T: Scalar>(&self, inputs: &GraphInputs<T>) -> Result<()> {
        if inputs.feature_dim() != self.feature_dim {
            return Err(Error::LengthMismatch {
                left: inputs.feature_dim(),
                right: self.feature_dim,
            });
        }
        Ok(())
    }

    /// `Z = Â · LeakyReLU(Â X W1) · W2` for every node.
    pub fn encode_nodes<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &GraphInputs<T>) -> Result<Var> {
        self.check_inputs(inputs)?;
        let ax = tape.leaf(inputs.propagated.clone());
        let w1 = tape.param(store, self.w1);
        let h = tape.matmul(ax, w1)?;
        let h = tape.leaky_relu(h, T::lit(self.config.slope));
        let ah = tape.spmm(inputs.adjacency.clone(), h)?;
        let w2 = tape.param(store, self.w2);
        Ok(tape.matmul(ah, w2)?)
    }

    /// Rows of [`encode_nodes`](Self::encode_nodes) for `batch` only,
    /// computed over the batch's one-hop receptive field. The result equals
    /// selecting those rows from the full-graph output.
    pub fn encode_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &GraphInputs<T>,
        batch: &[usize],
    ) -> Result<Var> {
        self.check_inputs(inputs)?;
        let a = &inputs.adjacency;
        if let Some(&node) = batch.iter().find(|&&b| b >= a.rows) {
            return Err(Error::NodeOutOfRange { node, nodes: a.rows });
        }
        let field: Vec<usize> = batch
            .iter()
            .flat_map(|&b| a.col_idx[a.row_ptr[b]..a.row_ptr[b + 1]].iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut local = vec![usize::MAX; a.rows];
        for (k, &r) in field.iter().enumerate() {
            local[r] = k;
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &b in batch {
            for (j, v) in a.row(b) {
                col_idx.push(local[j]);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let sub = CsrMatrix {
            rows: batch.len(),
            cols: field.len(),
            row_ptr,
            col_idx,
            values,
        };
        let ax = tape.leaf(inputs.propagated.select_rows(&field));
        let w1 = tape.param(store, self.w1);
        let h = tape.matmul(ax, w1)?;
        let h = tape.leaky_relu(h, T::lit(self.config.slope));
        let ah = tape.spmm(Arc::new(sub), h)?;
        let w2 = tape.param(store, self.w2);
        Ok(tape.matmul(ah, w2)?)
    }

    /// Inference helper: all node embeddings without recording gradients.
    pub fn embed_nodes(&self, store: &ParamStore, inputs: &GraphInputs) -> Result<Tensor> {
        let mut tape = Tape::with_frozen_params();
        let z = self.encode_nodes(&mut tape, store, inputs)?;
        Ok(tape.value(z).clone())
    }
}

/// Nodes whose text embeddings are averaged into the summary of `node`:
/// up to `eta` sampled neighbors, or the node itself when it has none.
pub fn summary_members(corpus: &GraphTextCorpus, node: usize, eta: usize, rng: &mut impl Rng) -> Vec<usize> {
    let members = corpus.sample_neighbors(node, eta, rng);
    if members.is_empty() {
        log::debug!("node {node} has no neighbors; summary falls back to its own text");
        vec![node]
    } else {
        members
    }
}

/// Mean of the text embeddings (rows of `text_embeddings`) of the sampled
/// summary members of `node`.
pub fn summary_embedding(
    text_embeddings: &Tensor,
    corpus: &GraphTextCorpus,
    node: usize,
    eta: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if node >= corpus.len() {
        return Err(Error::NodeOutOfRange {
            node,
            nodes: corpus.len(),
        });
    }
    let members = summary_members(corpus, node, eta, rng);
    let d = text_embeddings.cols();
    let mut out = vec![0.0f32; d];
    for &m in &members {
        for (o, &v) in out.iter_mut().zip(text_embeddings.row(m)) {
            *o += v;
        }
    }
    let inv = 1.0 / members.len() as f32;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::new(vec![1, d], out)?)
}
