//! Stochastic-block-model corpora whose documents are drawn from
//! class-specific vocabularies mixed with a shared pool.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{train_word_embeddings, CorpusConfig, GraphTextCorpus, RawCorpus, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub docs_per_class: usize,
    pub class_vocab: usize,
    pub shared_vocab: usize,
    /// Edge probability between two nodes of the same class.
    pub p_in: f64,
    /// Edge probability between nodes of different classes.
    pub p_out: f64,
    /// Probability that a token comes from the shared pool.
    pub noise: f64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Number of most frequent class tokens forming the label text.
    pub label_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            docs_per_class: 100,
            class_vocab: 30,
            shared_vocab: 200,
            p_in: 0.05,
            p_out: 0.001,
            noise: 0.3,
            min_doc_len: 20,
            max_doc_len: 24,
            label_tokens: 3,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.p_in <= self.p_out {
            return bad(format!("p_in ({}) must exceed p_out ({})", self.p_in, self.p_out));
        }
        if self.classes == 0 || self.docs_per_class == 0 || self.class_vocab == 0 {
            return bad("classes, docs_per_class and class_vocab must be positive".into());
        }
        if self.noise > 0.0 && self.shared_vocab == 0 {
            return bad("noise requires a non-empty shared vocabulary".into());
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return bad(format!("document length range {}..={} is empty", self.min_doc_len, self.max_doc_len));
        }
        if self.label_tokens == 0 || self.label_tokens > self.class_vocab {
            return bad(format!("label_tokens must be in 1..={}", self.class_vocab));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.classes * self.docs_per_class
    }

    /// Expected node degree under the block model.
    pub fn expected_degree(&self) -> f64 {
        let same = (self.docs_per_class - 1) as f64;
        let other = (self.nodes() - self.docs_per_class) as f64;
        same * self.p_in + other * self.p_out
    }
}

fn class_token(class: usize, k: usize) -> String {
    format!("c{class}w{k}")
}

fn shared_token(k: usize) -> String {
    format!("s{k}")
}

/// Generates the raw corpus files. Node `i` belongs to class `i mod C`.
pub fn generate_synthetic_raw(config: &SyntheticConfig) -> Result<RawCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.nodes();
    let zipf: Vec<f64> = (0..config.class_vocab).map(|k| 1.0 / (k + 1) as f64).collect();
    let class_dist = WeightedIndex::new(&zipf).expect("positive weights");

    let mut raw = RawCorpus {
        class_ids: (0..config.classes).map(|c| format!("class{c}")).collect(),
        class_texts: (0..config.classes)
            .map(|c| (0..config.label_tokens).map(|k| class_token(c, k)).collect::<Vec<_>>().join(" "))
            .collect(),
        ..Default::default()
    };
    let width = n.to_string().len();
    for i in 0..n {
        let class = i % config.classes;
        let len = rng.gen_range(config.min_doc_len..=config.max_doc_len);
        let words: Vec<String> = (0..len)
            .map(|_| {
                if rng.gen_bool(config.noise) {
                    shared_token(rng.gen_range(0..config.shared_vocab))
                } else {
                    class_token(class, class_dist.sample(&mut rng))
                }
            })
            .collect();
        raw.node_ids.push(format!("n{i:0width$}"));
        raw.texts.push(words.join(" "));
        raw.labels.insert(i, class);
    }
    for i in 0..n {
        for j in i + 1..n {
            let p = if i % config.classes == j % config.classes {
                config.p_in
            } else {
                config.p_out
            };
            if rng.gen_bool(p) {
                raw.edges.push((i, j));
            }
        }
    }
    Ok(raw)
}

/// Generates a corpus and builds its vocabulary and word-vector features.
pub fn generate_synthetic_corpus(config: &SyntheticConfig, corpus_config: &CorpusConfig) -> Result<GraphTextCorpus> {
    let raw = generate_synthetic_raw(config)?;
    let vocab = Vocabulary::build(raw.texts.iter().map(String::as_str), corpus_config.min_freq);
    let table = train_word_embeddings(&raw, &vocab, corpus_config);
    Ok(GraphTextCorpus::build(raw, vocab, &table, corpus_config.max_len)?)
}

/// Per-class label counts, used by tests and reports.
pub fn class_sizes(raw: &RawCorpus) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for &c in raw.labels.values() {
        *out.entry(c).or_insert(0) += 1;
    }
    out
}
