//! N-way K-shot task construction, synthetic corpora and evaluation metrics.

mod eval;
mod synthetic;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::GraphTextCorpus;
use crate::error::{Error, Result};

pub use eval::{evaluate, spearman, EvalReport, Interval, TaskScore};
pub use synthetic::{class_sizes, generate_synthetic_corpus, generate_synthetic_raw, SyntheticConfig};

/// Largest query set kept per class.
pub const QUERY_CAP_PER_CLASS: usize = 200;

/// One classification episode. Task-local class `k` is corpus class `classes[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotTask {
    pub classes: Vec<usize>,
    /// `support[k]` holds the K support nodes of task class `k`.
    pub support: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    /// `(node, task class)` pairs.
    pub query: Vec<(usize, usize)>,
    pub query_capped: bool,
}

impl FewShotTask {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Flattened `(node, task class)` pairs of a per-class split.
    pub fn labeled(split: &[Vec<usize>]) -> Vec<(usize, usize)> {
        split
            .iter()
            .enumerate()
            .flat_map(|(k, nodes)| nodes.iter().map(move |&n| (n, k)))
            .collect()
    }
}

/// Samples `ways` classes uniformly without replacement, then `shots`
/// support and `shots` validation nodes per class; the remaining labeled
/// nodes of those classes form the query set (at most
/// [`QUERY_CAP_PER_CLASS`] per class).
///
/// Every class of the corpus must hold at least `2 * shots + 1` labeled nodes.
pub fn sample_task(corpus: &GraphTextCorpus, ways: usize, shots: usize, rng: &mut impl Rng) -> Result<FewShotTask> {
    let by_class = corpus.nodes_by_class();
    let need = 2 * shots + 1;
    for c in 0..corpus.num_classes() {
        let have = by_class.get(&c).map_or(0, Vec::len);
        if have < need {
            return Err(Error::InsufficientClass {
                class: corpus.raw.class_ids[c].clone(),
                have,
                need,
            });
        }
    }
    if ways == 0 || ways > corpus.num_classes() {
        return Err(Error::Config(format!(
            "cannot sample {ways} classes from a corpus with {}",
            corpus.num_classes()
        )));
    }
    let classes: Vec<usize> = sample(rng, corpus.num_classes(), ways).into_vec();
    let mut task = FewShotTask {
        classes: classes.clone(),
        support: Vec::with_capacity(ways),
        validation: Vec::with_capacity(ways),
        query: Vec::new(),
        query_capped: false,
    };
    for (k, &c) in classes.iter().enumerate() {
        let mut nodes = by_class[&c].clone();
        nodes.shuffle(rng);
        task.support.push(nodes[..shots].to_vec());
        task.validation.push(nodes[shots..2 * shots].to_vec());
        let mut rest = nodes[2 * shots..].to_vec();
        if rest.len() > QUERY_CAP_PER_CLASS {
            rest.truncate(QUERY_CAP_PER_CLASS);
            task.query_capped = true;
        }
        rest.sort_unstable();
        task.query.extend(rest.into_iter().map(|n| (n, k)));
    }
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::corpus::SkipGramConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn corpus(classes: usize, per_class: usize) -> GraphTextCorpus {
        let cfg = SyntheticConfig {
            classes,
            docs_per_class: per_class,
            p_in: 0.1,
            ..Default::default()
        };
        let cc = CorpusConfig {
            word_embeddings: SkipGramConfig { dim: 4, epochs: 1, ..Default::default() },
            ..Default::default()
        };
        generate_synthetic_corpus(&cfg, &cc).unwrap()
    }

    #[test]
    fn zero_shot_task_puts_everything_in_query() {
        let c = corpus(6, 10);
        let t = sample_task(&c, 5, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(t.support.iter().all(Vec::is_empty));
        assert!(t.validation.iter().all(Vec::is_empty));
        assert_eq!(t.query.len(), 50);
        assert_eq!(t.shots(), 0);
    }

    #[test]
    fn boundary_population_and_disjointness() {
        let c = corpus(5, 11);
        let t = sample_task(&c, 5, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(t.query.len(), 5);
        let mut seen = HashSet::new();
        for (n, k) in FewShotTask::labeled(&t.support)
            .into_iter()
            .chain(FewShotTask::labeled(&t.validation))
            .chain(t.query.iter().copied())
        {
            assert!(seen.insert(n), "node {n} in two splits");
            assert_eq!(c.label(n), Some(t.classes[k]));
        }
    }

    #[test]
    fn insufficient_class_is_named() {
        let c = corpus(5, 10);
        let err = sample_task(&c, 5, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap_err();
        assert!(matches!(&err, Error::InsufficientClass { class, have: 10, need: 11 } if class == "class0"));
    }

    #[test]
    fn query_is_capped() {
        let c = corpus(5, 210);
        let t = sample_task(&c, 5, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(t.query_capped);
        assert_eq!(t.query.len(), 5 * QUERY_CAP_PER_CLASS);
    }

    #[test]
    fn classes_sampled_uniformly() {
        let c = corpus(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            for &k in &sample_task(&c, 5, 1, &mut rng).unwrap().classes {
                counts[k] += 1;
            }
        }
        for k in counts {
            assert!((k as f64 / 1000.0 - 0.5).abs() <= 0.05, "frequency {k}");
        }
    }
}
