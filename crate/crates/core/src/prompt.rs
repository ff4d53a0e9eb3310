//! Prompt-based classification heads on top of a frozen dual encoder.
//!
//! Class weights are text-encoder outputs for prompted label texts. Zero-shot
//! prompts are discrete templates; few-shot prompts are trainable input
//! vectors prepended to the label tokens.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, GraphTextCorpus, TokenizedText, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::numeric::{l2_normalize_rows, row_softmax, Adam, ParamStore, Parameter, Scalar, Tape, Tensor, Var};
use crate::tasks::FewShotTask;
use crate::text_encoder::TextEncoder;

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";

/// Natural-language template with a single `[CLASS]` slot. The empty
/// template stands for the bare label text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscretePrompt {
    prefix: String,
    suffix: String,
}

impl DiscretePrompt {
    pub fn label_only() -> Self {
        Self {
            prefix: String::new(),
            suffix: String::new(),
        }
    }

    pub fn parse(template: &str) -> Result<Self> {
        if template.trim().is_empty() {
            return Ok(Self::label_only());
        }
        let count = template.matches(CLASS_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Template(format!(
                "{template:?} must contain {CLASS_PLACEHOLDER} exactly once (found {count})"
            )));
        }
        let (prefix, suffix) = template.split_once(CLASS_PLACEHOLDER).expect("placeholder present");
        Ok(Self {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn is_label_only(&self) -> bool {
        self.prefix.trim().is_empty() && self.suffix.trim().is_empty()
    }

    pub fn render(&self, label: &str) -> String {
        format!("{}{}{}", self.prefix, label, self.suffix)
    }
}

impl FromStr for DiscretePrompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// `N x d` matrix of unit-norm class weight rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub matrix: Tensor,
}

impl ClassWeights {
    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Encodes each prompted label text and normalizes the rows.
pub fn zero_shot_weights(
    model: &DualEncoder,
    vocab: &Vocabulary,
    label_texts: &[&str],
    template: &DiscretePrompt,
) -> Result<ClassWeights> {
    let max_len = model.config.text.max_len;
    let texts: Vec<TokenizedText> = label_texts
        .iter()
        .map(|label| {
            let t = tokenize(&template.render(label), vocab, max_len);
            if t.truncated {
                log::warn!("prompted label {label:?} exceeds {max_len} tokens; tail truncated");
            }
            t
        })
        .collect();
    if let Some(i) = texts.iter().position(TokenizedText::is_empty) {
        return Err(Error::Template(format!("prompted label {:?} has no tokens", label_texts[i])));
    }
    let refs: Vec<&TokenizedText> = texts.iter().collect();
    let raw = model.embed_texts(&refs)?;
    Ok(ClassWeights {
        matrix: l2_normalize_rows(&raw),
    })
}

/// Class probabilities `softmax(scale * cos(z, w_y))` and the argmax, ties
/// going to the lowest class id.
pub fn classify_scaled(z: &[f32], weights: &ClassWeights, scale: f32) -> (Vec<f32>, usize) {
    let norm = z.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    let logits: Vec<f32> = (0..weights.classes())
        .map(|y| scale * weights.matrix.row(y).iter().zip(z).map(|(w, v)| w * v).sum::<f32>() / norm)
        .collect();
    let probs = row_softmax(&Tensor::new(vec![1, logits.len()], logits).expect("nonempty classes")).into_data();
    let mut best = 0;
    for (y, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = y;
        }
    }
    (probs, best)
}

/// [`classify_scaled`] with unit scale.
pub fn classify(z: &[f32], weights: &ClassWeights) -> (Vec<f32>, usize) {
    classify_scaled(z, weights, 1.0)
}

/// `M` trainable vectors in the text encoder's input-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPrompt {
    vectors: Option<Tensor>,
    width: usize,
}

impl ContinuousPrompt {
    pub fn new(vectors: Tensor) -> Self {
        let width = vectors.cols();
        Self {
            vectors: Some(vectors.as_matrix()),
            width,
        }
    }

    /// The zero-length prompt.
    pub fn empty(width: usize) -> Self {
        Self { vectors: None, width }
    }

    pub fn len(&self) -> usize {
        self.vectors.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_none()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vectors(&self) -> Option<&Tensor> {
        self.vectors.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.len() * self.width
    }
}

/// Averages, position by position, the first-`m` token embeddings of every
/// support node and up to `eta` sampled graph neighbors of each. Short
/// documents are padded with the `PAD` embedding. Returns the prompt and the
/// number of averaged sequences.
pub fn init_prompt_from_context(
    corpus: &GraphTextCorpus,
    encoder: &TextEncoder,
    store: &ParamStore,
    support: &[usize],
    m: usize,
    eta: usize,
    rng: &mut impl Rng,
) -> Result<(ContinuousPrompt, usize)> {
    let width = encoder.width();
    if m == 0 {
        return Ok((ContinuousPrompt::empty(width), 0));
    }
    let table = store.value(encoder.token_embedding_id());
    let mut sum = Tensor::zeros(&[m, width]);
    let mut count = 0usize;
    for &node in support {
        if node >= corpus.len() {
            return Err(Error::NodeOutOfRange {
                node,
                nodes: corpus.len(),
            });
        }
        let mut members = vec![node];
        members.extend(corpus.sample_neighbors(node, eta, rng));
        for member in members {
            let doc = &corpus.documents[member];
            for pos in 0..m {
                let id = if pos < doc.length { doc.ids[pos] } else { PAD_ID };
                for (s, &v) in sum.row_mut(pos).iter_mut().zip(table.row(id as usize)) {
                    *s += v;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("context initialization needs at least one support node".into()));
    }
    let inv = 1.0 / count as f32;
    Ok((ContinuousPrompt::new(sum.map(|v| v * inv)), count))
}

/// Normalized class weights `w_y = enc([h_1..h_M, E(label_y)])` on the tape.
/// `prompt` is an `M x width` variable or `None` for `M = 0`.
pub fn few_shot_weights<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &TextEncoder,
    store: &ParamStore<T>,
    prompt: Option<Var>,
    labels: &[&TokenizedText],
) -> Result<Var> {
    let m = prompt.map_or(0, |p| tape.value(p).rows());
    let max_len = encoder.config().max_len;
    if m >= max_len {
        return Err(Error::InvalidLength { length: m + 1, max_len });
    }
    let mut inputs = Vec::with_capacity(labels.len());
    for label in labels {
        let mut tokens = label.tokens();
        if tokens.is_empty() {
            return Err(Error::Template("class label text has no tokens".into()));
        }
        if m + tokens.len() > max_len {
            log::warn!("prompt of {m} vectors plus label exceeds {max_len} positions; label tail truncated");
            tokens = &tokens[..max_len - m];
        }
        let label_vectors = encoder.token_vectors(tape, store, tokens)?;
        let seq = match prompt {
            Some(p) => tape.concat_rows(&[p, label_vectors])?,
            None => label_vectors,
        };
        let seq = encoder.add_positions(tape, store, seq)?;
        inputs.push((seq, m + tokens.len()));
    }
    let raw = encoder.encode_inputs(tape, store, &inputs, None)?;
    Ok(tape.l2_normalize_rows(raw))
}

/// Class weights for a fixed continuous prompt.
pub fn continuous_weights(model: &DualEncoder, prompt: &ContinuousPrompt, labels: &[&TokenizedText]) -> Result<ClassWeights> {
    let mut tape = Tape::with_frozen_params();
    let p = prompt.vectors().map(|v| tape.leaf(v.clone()));
    let w = few_shot_weights(&mut tape, &model.text, &model.store, p, labels)?;
    Ok(ClassWeights {
        matrix: tape.value(w).clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    /// Averaged token embeddings of support nodes and their neighbors.
    #[default]
    Context,
    /// Small Gaussian vectors.
    Random,
    /// No prompt vectors and no tuning.
    LabelOnly,
}

impl FromStr for PromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Self::Context),
            "random" => Ok(Self::Random),
            "label-only" => Ok(Self::LabelOnly),
            other => Err(Error::Config(format!(
                "unknown prompt init {other:?}; expected context, random or label-only"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Number of prompt vectors `M`.
    pub prompt_len: usize,
    pub learning_rate: f64,
    /// Full-batch passes over the support set.
    pub epochs: usize,
    pub init: PromptInit,
    /// Neighbors sampled per support node for context initialization.
    pub eta: usize,
    /// Fixed multiplier on cosine logits; 1 leaves them unscaled.
    pub logit_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            learning_rate: 0.01,
            epochs: 50,
            init: PromptInit::Context,
            eta: 3,
            logit_scale: 1.0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("prompt learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!("logit scale must be positive, got {}", self.logit_scale)));
        }
        if self.init != PromptInit::LabelOnly && self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1 for a tuned prompt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub prompt: ContinuousPrompt,
    pub weights: ClassWeights,
    /// Iterate picked by validation; 0 is the initialization.
    pub best_iterate: usize,
    pub validation_accuracy: f64,
    pub trainable_parameters: usize,
    /// Number of sequences averaged by context initialization.
    pub context_sequences: usize,
}

fn labeled_rows(nodes: &Tensor, pairs: &[(usize, usize)]) -> (Tensor, Vec<usize>) {
    let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    (l2_normalize_rows(&nodes.select_rows(&ids)), pairs.iter().map(|p| p.1).collect())
}

/// Tunes a continuous prompt on the support set of `task` while the encoders
/// stay frozen. `node_embeddings` are the graph encoder outputs for every
/// corpus node. The iterate (including the initialization) with the best
/// validation accuracy is returned, ties broken by lower validation loss.
pub fn prompt_tune(
    model: &DualEncoder,
    corpus: &GraphTextCorpus,
    node_embeddings: &Tensor,
    task: &FewShotTask,
    config: &PromptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TuneOutcome> {
    config.validate()?;
    let labels: Vec<&TokenizedText> = task.classes.iter().map(|&c| &corpus.class_label_texts[c]).collect();
    let width = model.text.width();
    let support_pairs = FewShotTask::labeled(&task.support);
    let validation_pairs = FewShotTask::labeled(&task.validation);
    let support_nodes: Vec<usize> = support_pairs.iter().map(|p| p.0).collect();

    let (init, context_sequences) = match config.init {
        PromptInit::LabelOnly => (ContinuousPrompt::empty(width), 0),
        PromptInit::Context => init_prompt_from_context(
            corpus,
            &model.text,
            &model.store,
            &support_nodes,
            config.prompt_len,
            config.eta,
            rng,
        )?,
        PromptInit::Random => {
            let normal = Normal::new(0.0f32, 0.02).expect("valid deviation");
            let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
            (
                ContinuousPrompt::new(Tensor::from_fn(config.prompt_len, width, |_, _| normal.sample(&mut local))),
                0,
            )
        }
    };
    let Some(init_vectors) = init.vectors().cloned() else {
        let weights = continuous_weights(model, &init, &labels)?;
        return Ok(TuneOutcome {
            prompt: init,
            weights,
            best_iterate: 0,
            validation_accuracy: f64::NAN,
            trainable_parameters: 0,
            context_sequences,
        });
    };
    if support_pairs.is_empty() {
        return Err(Error::Config("prompt tuning needs at least one support example".into()));
    }

    let (support_z, support_y) = labeled_rows(node_embeddings, &support_pairs);
    let validation = (!validation_pairs.is_empty()).then(|| labeled_rows(node_embeddings, &validation_pairs));
    let scale = config.logit_scale as f32;
    let adam = Adam::new(config.learning_rate)?;
    let mut param = Parameter::new("prompt", init_vectors);

    let score = |weights: &Tensor| -> Result<(f64, f64)> {
        let Some((z, y)) = &validation else {
            return Ok((0.0, 0.0));
        };
        let logits = z.matmul(&weights.transpose())?.map(|v| v * scale);
        let predictions: Vec<usize> = (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect();
        let correct = predictions.iter().zip(y).filter(|(p, t)| p == t).count();
        let ce = crate::numeric::row_cross_entropy(&logits, y)? as f64;
        Ok((correct as f64 / y.len() as f64, ce))
    };

    let mut best: Option<(f64, f64, usize, Tensor, Tensor)> = None;
    for iterate in 0..=config.epochs {
        let mut tape = Tape::with_frozen_params();
        let p = tape.input(param.value.clone());
        let w = few_shot_weights(&mut tape, &model.text, &model.store, Some(p), &labels)?;
        let weights = tape.value(w).clone();
        let (acc, ce) = score(&weights)?;
        let better = match &best {
            None => true,
            Some((ba, bce, ..)) => acc > *ba || (acc == *ba && ce < *bce),
        };
        if better {
            best = Some((acc, ce, iterate, param.value.clone(), weights));
        }
        if iterate == config.epochs {
            break;
        }
        let z = tape.leaf(support_z.clone());
        let wt = tape.transpose(w);
        let logits = tape.matmul(z, wt)?;
        let logits = tape.scale(logits, scale);
        let loss = tape.cross_entropy(logits, &support_y)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                detail: format!("{loss_value} in prompt tuning at iterate {iterate}"),
            });
        }
        let grads = tape.gradients(loss)?;
        param.gradient = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        adam.step_param(&mut param);
    }
    let (acc, _, best_iterate, vectors, weights) = best.expect("at least one iterate");
    let prompt = ContinuousPrompt::new(vectors);
    Ok(TuneOutcome {
        trainable_parameters: prompt.num_parameters(),
        prompt,
        weights: ClassWeights { matrix: weights },
        best_iterate,
        validation_accuracy: acc,
        context_sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, SkipGramConfig};
    use crate::graph_encoder::{GraphEncoderConfig, GraphInputs};
    use crate::model::ModelConfig;
    use crate::numeric::gradcheck::{check_input_gradient, max_relative_error};
    use crate::tasks::{generate_synthetic_corpus, sample_task, SyntheticConfig};
    use crate::text_encoder::TextEncoderConfig;

    fn setup() -> (GraphTextCorpus, DualEncoder) {
        let cfg = SyntheticConfig {
            classes: 5,
            docs_per_class: 20,
            p_in: 0.15,
            ..Default::default()
        };
        let cc = CorpusConfig {
            max_len: 32,
            word_embeddings: SkipGramConfig { dim: 8, epochs: 1, ..Default::default() },
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, &cc).unwrap();
        let mc = ModelConfig {
            text: TextEncoderConfig {
                layers: 1,
                width: 8,
                heads: 2,
                output_dim: 6,
                ..Default::default()
            },
            graph: GraphEncoderConfig {
                hidden: 8,
                output_dim: 6,
                slope: 0.01,
            },
        }
        .for_corpus(&corpus);
        let model = DualEncoder::new(mc, corpus.feature_dim(), 3).unwrap();
        (corpus, model)
    }

    #[test]
    fn template_parsing() {
        assert!(DiscretePrompt::parse("").unwrap().is_label_only());
        let p = DiscretePrompt::parse("paper of [CLASS].").unwrap();
        assert_eq!(p.render("nlp"), "paper of nlp.");
        assert!(matches!(DiscretePrompt::parse("no slot"), Err(Error::Template(_))));
        assert!(DiscretePrompt::parse("[CLASS] and [CLASS]").is_err());
    }

    #[test]
    fn zero_shot_weight_properties() {
        let (corpus, model) = setup();
        let empty = DiscretePrompt::label_only();
        let w = zero_shot_weights(&model, &corpus.vocab, &["c0w0 c0w1", "c0w0 c0w1", "c1w0"], &empty).unwrap();
        assert_eq!(w.matrix.row(0), w.matrix.row(1));
        for i in 0..3 {
            let n: f32 = w.matrix.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let templ = DiscretePrompt::parse("paper of [CLASS]").unwrap();
        let w2 = zero_shot_weights(&model, &corpus.vocab, &["c0w0 c0w1", "c0w0 c0w1", "c1w0"], &templ).unwrap();
        assert_ne!(w.matrix, w2.matrix);
        // Decomposition: encode independently, then normalize.
        let t = tokenize("c1w0", &corpus.vocab, corpus.max_len);
        let raw = model.embed_texts(&[&t]).unwrap();
        let n = l2_normalize_rows(&raw);
        for (a, b) in n.data().iter().zip(w.matrix.row(2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_cases() {
        let w = ClassWeights {
            matrix: Tensor::from_fn(5, 5, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        let (p, y) = classify(&[0.0, 0.0, 0.0, 2.0, 0.0], &w);
        assert_eq!(y, 3);
        assert!(p.iter().enumerate().all(|(k, &v)| k == 3 || v < p[3]));
        let w6 = ClassWeights {
            matrix: Tensor::from_fn(5, 6, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        let (p, y) = classify(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &w6);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-6));
        assert_eq!(y, 0);
        let z = [0.3, -0.2, 0.9, 0.1, 0.4];
        let (p1, y1) = classify(&z, &w);
        let (p7, y7) = classify(&z.map(|v| v * 7.0), &w);
        assert_eq!(y1, y7);
        for (a, b) in p1.iter().zip(&p7) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn context_init_cases() {
        let (corpus, model) = setup();
        let table = model.store.value(model.text.token_embedding_id()).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, n) = init_prompt_from_context(&corpus, &model.text, &model.store, &[7], 4, 0, &mut rng).unwrap();
        assert_eq!(n, 1);
        for pos in 0..4 {
            assert_eq!(p.vectors().unwrap().row(pos), table.row(corpus.documents[7].ids[pos] as usize));
        }
        let (p, n) = init_prompt_from_context(&corpus, &model.text, &model.store, &[3, 9], 2, 0, &mut rng).unwrap();
        assert_eq!(n, 2);
        for pos in 0..2 {
            let (u, v) = (corpus.documents[3].ids[pos] as usize, corpus.documents[9].ids[pos] as usize);
            for j in 0..8 {
                assert!((p.vectors().unwrap().at(pos, j) - (table.at(u, j) + table.at(v, j)) / 2.0).abs() < 1e-6);
            }
        }
        let (p, _) = init_prompt_from_context(&corpus, &model.text, &model.store, &[0], 0, 3, &mut rng).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn context_init_sequence_count() {
        let (corpus, model) = setup();
        let support: Vec<usize> = (0..10).collect();
        let expected: usize = support.iter().map(|&s| corpus.degree(s).min(3) + 1).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, n) = init_prompt_from_context(&corpus, &model.text, &model.store, &support, 4, 3, &mut rng).unwrap();
        assert_eq!(n, expected);
    }

    #[test]
    fn empty_prompt_reduces_to_label_only_zero_shot() {
        let (corpus, model) = setup();
        let labels: Vec<&TokenizedText> = corpus.class_label_texts.iter().collect();
        let few = continuous_weights(&model, &ContinuousPrompt::empty(8), &labels).unwrap();
        let texts: Vec<&str> = corpus.raw.class_texts.iter().map(String::as_str).collect();
        let zero = zero_shot_weights(&model, &corpus.vocab, &texts, &DiscretePrompt::label_only()).unwrap();
        assert_eq!(few, zero);
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let (corpus, model) = setup();
        let store = model.store.cast::<f64>();
        let text = TextEncoder::from_store(model.config.text, &store).unwrap();
        let labels: Vec<&TokenizedText> = corpus.class_label_texts[..2].iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prompt = Tensor::from_fn(3, 8, |_, _| rng.gen_range(-0.5..0.5));
        let z = Tensor::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let (analytic, numeric) = check_input_gradient(
            &prompt,
            |tape, p| {
                let w = few_shot_weights(tape, &text, &store, Some(p), &labels).unwrap();
                let zv = tape.leaf(z.clone());
                let wt = tape.transpose(w);
                let logits = tape.matmul(zv, wt).unwrap();
                tape.cross_entropy(logits, &[0, 1, 1, 0]).unwrap()
            },
            1e-4,
        );
        assert!(analytic.iter().any(|g| g.abs() > 1e-8));
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
        let w = continuous_weights(&model, &ContinuousPrompt::new(prompt.cast()), &labels).unwrap();
        assert_ne!(w.matrix.row(0), w.matrix.row(1));
    }

    #[test]
    fn tuning_keeps_encoder_frozen_and_counts_parameters() {
        let (corpus, model) = setup();
        let inputs = GraphInputs::from_corpus(&corpus).unwrap();
        let nodes = model.embed_nodes(&inputs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let task = sample_task(&corpus, 5, 2, &mut rng).unwrap();
        let before = model.store.clone();
        let cfg = PromptConfig {
            epochs: 5,
            ..Default::default()
        };
        for init in [PromptInit::Context, PromptInit::Random, PromptInit::LabelOnly] {
            let out = prompt_tune(&model, &corpus, &nodes, &task, &PromptConfig { init, ..cfg }, &mut rng).unwrap();
            let expected = if init == PromptInit::LabelOnly { 0 } else { 4 * 8 };
            assert_eq!(out.trainable_parameters, expected);
            assert!(out.best_iterate <= 5);
            if init == PromptInit::Context {
                let expected: usize = FewShotTask::labeled(&task.support)
                    .iter()
                    .map(|&(n, _)| corpus.degree(n).min(3) + 1)
                    .sum();
                assert_eq!(out.context_sequences, expected);
            }
        }
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
