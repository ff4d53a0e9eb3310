//! Task-level evaluation of zero-shot and few-shot classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::GraphTextCorpus;
use crate::error::Result;
use crate::graph_encoder::GraphInputs;
use crate::model::DualEncoder;
use crate::numeric::Tensor;
use crate::prompt::{classify_scaled, prompt_tune, zero_shot_weights, ClassWeights, DiscretePrompt, PromptConfig, PromptInit};
use crate::tasks::{evaluate, sample_task, EvalReport, FewShotTask, TaskScore};

/// Generator for task `index` of a run seeded with `seed`. Task `i` gets the
/// same class set whatever the shot count, so runs at different K are paired.
pub fn task_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Frozen model plus precomputed node embeddings for one corpus.
pub struct Evaluator<'a> {
    pub model: &'a DualEncoder,
    pub corpus: &'a GraphTextCorpus,
    pub nodes: Tensor,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a DualEncoder, corpus: &'a GraphTextCorpus) -> Result<Self> {
        model.check_corpus(corpus)?;
        let inputs = GraphInputs::from_corpus(corpus)?;
        let nodes = model.embed_nodes(&inputs)?;
        Ok(Self { model, corpus, nodes })
    }

    /// Weights for every corpus class under `template`.
    pub fn class_weights(&self, template: &DiscretePrompt) -> Result<ClassWeights> {
        let texts: Vec<&str> = self.corpus.raw.class_texts.iter().map(String::as_str).collect();
        zero_shot_weights(self.model, &self.corpus.vocab, &texts, template)
    }

    /// Scores the query set of `task` against task-local weights.
    pub fn score_query(&self, task: &FewShotTask, weights: &ClassWeights, scale: f32, index: usize) -> Result<TaskScore> {
        let truth: Vec<usize> = task.query.iter().map(|q| q.1).collect();
        let predictions: Vec<usize> = task
            .query
            .iter()
            .map(|&(n, _)| classify_scaled(self.nodes.row(n), weights, scale).1)
            .collect();
        let (accuracy, macro_f1) = evaluate(&predictions, &truth, task.ways())?;
        Ok(TaskScore {
            task: index,
            accuracy,
            macro_f1,
        })
    }

    fn restrict(weights: &ClassWeights, classes: &[usize]) -> ClassWeights {
        ClassWeights {
            matrix: weights.matrix.select_rows(classes),
        }
    }

    /// Zero-shot accuracy over `tasks` sampled `ways`-way tasks.
    pub fn zero_shot(&self, template: &DiscretePrompt, ways: usize, tasks: usize, seed: u64) -> Result<EvalReport> {
        let all = self.class_weights(template)?;
        let name = if template.is_label_only() { "zero-shot (label text)" } else { "zero-shot (template)" };
        let mut report = EvalReport::new(name);
        for i in 0..tasks {
            let task = sample_task(self.corpus, ways, 0, &mut task_rng(seed, i))?;
            report.query_capped |= task.query_capped;
            report.scores.push(self.score_query(&task, &Self::restrict(&all, &task.classes), 1.0, i)?);
        }
        Ok(report)
    }

    /// Few-shot accuracy with prompt tuning. Also returns label-text
    /// zero-shot scores on the same query sets.
    pub fn few_shot(
        &self,
        config: &PromptConfig,
        ways: usize,
        shots: usize,
        tasks: usize,
        seed: u64,
    ) -> Result<(EvalReport, EvalReport)> {
        let label_only = self.class_weights(&DiscretePrompt::label_only())?;
        let name = match config.init {
            PromptInit::Context => format!("{shots}-shot prompt tuning (context init)"),
            PromptInit::Random => format!("{shots}-shot prompt tuning (random init)"),
            PromptInit::LabelOnly => format!("{shots}-shot label text only"),
        };
        let mut report = EvalReport::new(name);
        let mut baseline = EvalReport::new("zero-shot (label text) on the same queries");
        for i in 0..tasks {
            let mut rng = task_rng(seed, i);
            let task = sample_task(self.corpus, ways, shots, &mut rng)?;
            let tuned = prompt_tune(self.model, self.corpus, &self.nodes, &task, config, &mut rng)?;
            report.query_capped |= task.query_capped;
            baseline.query_capped |= task.query_capped;
            report
                .scores
                .push(self.score_query(&task, &tuned.weights, config.logit_scale as f32, i)?);
            baseline
                .scores
                .push(self.score_query(&task, &Self::restrict(&label_only, &task.classes), 1.0, i)?);
        }
        Ok((report, baseline))
    }
}
