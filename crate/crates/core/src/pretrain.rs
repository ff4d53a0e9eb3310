//! Joint contrastive pre-training of the text and graph encoders.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{batch_losses, clamp_temperature, LossMask};
use crate::corpus::{CorpusConfig, GraphTextCorpus, TokenizedText};
use crate::error::{Error, Result};
use crate::graph_encoder::{summary_members, GraphInputs};
use crate::model::{DualEncoder, ModelConfig};
use crate::numeric::{Adam, Tape};
use crate::tasks::{generate_synthetic_corpus, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Neighbors sampled per node for its summary embedding.
    pub eta: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mask: LossMask,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            eta: 3,
            lambda: 0.1,
            learning_rate: 2e-5,
            seed: 1,
            loss_mask: LossMask::ALL,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eta == 0 {
            return Err(Error::Config("epochs, batch_size and eta must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    /// Global step counter across epochs.
    pub batch: usize,
    pub text_node: f32,
    pub text_summary: f32,
    pub node_summary: f32,
    pub total: f32,
    pub logit_scale: f32,
    pub seconds: f64,
}

impl fmt::Display for BatchRecord {
    /// `epoch batch L1 L2 L3 total expTau seconds`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.4} {:.4}",
            self.epoch,
            self.batch,
            self.text_node,
            self.text_summary,
            self.node_summary,
            self.total,
            self.logit_scale,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub mean_text_node: f64,
    pub mean_text_summary: f64,
    pub mean_node_summary: f64,
    pub mean_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch batch L1 L2 L3 total expTau seconds";

    /// Header line followed by one line per batch.
    pub fn to_lines(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for b in &self.batches {
            out.push_str(&b.to_string());
            out.push('\n');
        }
        out
    }

    pub fn final_total(&self) -> Option<f32> {
        self.batches.last().map(|b| b.total)
    }
}

/// Runs `config.epochs` epochs of contrastive training, updating the text
/// encoder, graph encoder and temperature in place. `on_batch` sees every
/// record as it is produced.
pub fn pretrain(
    model: &mut DualEncoder,
    corpus: &GraphTextCorpus,
    inputs: &GraphInputs,
    config: &PretrainConfig,
    mut on_batch: impl FnMut(&BatchRecord),
) -> Result<TrainLog> {
    config.validate()?;
    model.check_corpus(corpus)?;
    let adam = Adam::new(config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let summary = run_epoch(model, corpus, inputs, config, &adam, &mut rng, epoch, &mut log, &mut on_batch)?;
        log::info!(
            "epoch {epoch}: mean loss {:.4} ({:.2}s)",
            summary.mean_total,
            summary.seconds
        );
        log.epochs.push(summary);
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut DualEncoder,
    corpus: &GraphTextCorpus,
    inputs: &GraphInputs,
    config: &PretrainConfig,
    adam: &Adam,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    log: &mut TrainLog,
    on_batch: &mut impl FnMut(&BatchRecord),
) -> Result<EpochSummary> {
    let start = Instant::now();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut sums = [0.0f64; 4];
    let mut count = 0;
    for batch in order.chunks(config.batch_size) {
        let t0 = Instant::now();
        let [l1, l2, l3, total] = train_step(model, corpus, inputs, config, adam, rng, batch)?;
        let record = BatchRecord {
            epoch,
            batch: log.batches.len(),
            text_node: l1,
            text_summary: l2,
            node_summary: l3,
            total,
            logit_scale: model.logit_scale(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_batch(&record);
        log.batches.push(record);
        for (s, v) in sums.iter_mut().zip([l1, l2, l3, total]) {
            *s += v as f64;
        }
        count += 1;
    }
    let n = count as f64;
    Ok(EpochSummary {
        epoch,
        batches: count,
        mean_text_node: sums[0] / n,
        mean_text_summary: sums[1] / n,
        mean_node_summary: sums[2] / n,
        mean_total: sums[3] / n,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Forward, backward and update for one batch; returns `[L1, L2, L3, total]`.
fn train_step(
    model: &mut DualEncoder,
    corpus: &GraphTextCorpus,
    inputs: &GraphInputs,
    config: &PretrainConfig,
    adam: &Adam,
    rng: &mut ChaCha8Rng,
    batch: &[usize],
) -> Result<[f32; 4]> {
    // Encode the batch documents and all sampled neighbors in one pass.
    let mut position: HashMap<usize, usize> = HashMap::with_capacity(batch.len() * (config.eta + 1));
    let mut union: Vec<usize> = Vec::with_capacity(batch.len() * (config.eta + 1));
    for &b in batch {
        position.entry(b).or_insert_with(|| {
            union.push(b);
            union.len() - 1
        });
    }
    let mut groups = Vec::with_capacity(batch.len());
    for &b in batch {
        let members = summary_members(corpus, b, config.eta, rng);
        groups.push(
            members
                .into_iter()
                .map(|m| {
                    *position.entry(m).or_insert_with(|| {
                        union.push(m);
                        union.len() - 1
                    })
                })
                .collect::<Vec<_>>(),
        );
    }
    let docs: Vec<&TokenizedText> = union.iter().map(|&u| &corpus.documents[u]).collect();
    let batch_rows: Vec<usize> = batch.iter().map(|b| position[b]).collect();

    let store = &model.store;
    let mut tape = Tape::new();
    let dropout_rng: Option<&mut dyn RngCore> = if model.config.text.dropout > 0.0 { Some(rng) } else { None };
    let t_all = model.text.encode_tokens(&mut tape, store, &docs, dropout_rng)?;
    let t = tape.gather_rows(t_all, &batch_rows)?;
    let s = tape.group_mean(t_all, &groups)?;
    let z = model.graph.encode_batch(&mut tape, store, inputs, batch)?;
    let tau = tape.param(store, model.tau);
    let losses = batch_losses(&mut tape, t, z, s, tau, config.lambda, config.loss_mask)?;
    let values = [losses.text_node, losses.text_summary, losses.node_summary, losses.total].map(|v| tape.value(v).item());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            detail: format!(
                "{values:?} on batch {batch:?} with temperature {} (exp {})",
                model.temperature(),
                model.logit_scale()
            ),
        });
    }
    tape.backward(losses.total, &mut model.store)?;
    adam.step(&mut model.store);
    clamp_temperature(&mut model.store, model.tau);
    Ok(values)
}

/// Inputs for [`measure_epoch_scaling`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSetup {
    /// Template corpus; `docs_per_class` is overridden per size and edge
    /// probabilities are rescaled so the expected degree stays fixed.
    pub synthetic: SyntheticConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

/// Wall time of one pre-training epoch for each corpus size. Each size is
/// timed `pretrain.epochs` times and the fastest epoch is reported.
pub fn measure_epoch_scaling(sizes: &[usize], setup: &ScalingSetup) -> Result<Vec<(usize, f64)>> {
    setup.pretrain.validate()?;
    let base = setup.synthetic;
    let base_degree = base.expected_degree();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let per_class = (size / base.classes).max(1);
        let mut synth = SyntheticConfig {
            docs_per_class: per_class,
            ..base
        };
        let factor = base_degree / synth.expected_degree().max(f64::MIN_POSITIVE);
        synth.p_in = (base.p_in * factor).min(1.0);
        synth.p_out = (base.p_out * factor).min(synth.p_in * 0.999);
        let corpus = generate_synthetic_corpus(&synth, &setup.corpus)?;
        let inputs = GraphInputs::from_corpus(&corpus)?;
        let mut model = DualEncoder::new(setup.model.for_corpus(&corpus), corpus.feature_dim(), setup.pretrain.seed)?;
        let log = pretrain(&mut model, &corpus, &inputs, &setup.pretrain, |_| {})?;
        let best = log.epochs.iter().map(|e| e.seconds).fold(f64::INFINITY, f64::min);
        out.push((corpus.len(), best));
    }
    Ok(out)
}
