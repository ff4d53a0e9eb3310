//! Graph-grounded text corpus: one document per node, undirected edges,
//! optional class labels, and class label texts.
//!
//! On disk a corpus is a directory of tab-separated files:
//!
//! | file            | line format               |
//! |-----------------|---------------------------|
//! | `documents.tsv` | `node_id<TAB>raw text`    |
//! | `edges.tsv`     | `src_id<TAB>dst_id`       |
//! | `labels.tsv`    | `node_id<TAB>class_id` (optional) |
//! | `classes.tsv`   | `class_id<TAB>label text` |
//!
//! Node and class ids are external strings; internal indices follow file
//! order. `vocab.tsv` and `embeddings.f32` are picked up when present.

mod embeddings;
mod tokenizer;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numeric::Tensor;

pub use embeddings::{train_skip_gram, SkipGramConfig, WordEmbeddingTable};
pub use tokenizer::{tokenize, words, TokenizedText};
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

pub const DOCUMENTS_FILE: &str = "documents.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CLASSES_FILE: &str = "classes.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("required file {0} is missing")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: duplicate node id {id:?}")]
    DuplicateNode { file: String, line: usize, id: String },
    #[error("{file}:{line}: edge references unknown node id {id:?}")]
    DanglingEdge { file: String, line: usize, id: String },
    #[error("{file}:{line}: document {id:?} is empty")]
    EmptyDocument { file: String, line: usize, id: String },
    #[error("{file}:{line}: unknown class id {id:?}")]
    UnknownClass { file: String, line: usize, id: String },
    #[error("corpus has no documents")]
    NoDocuments,
    #[error("embedding table has {table} rows but the vocabulary has {vocab} entries")]
    EmbeddingMismatch { table: usize, vocab: usize },
    #[error("{0}")]
    Invalid(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Corpus contents exactly as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawCorpus {
    pub node_ids: Vec<String>,
    pub texts: Vec<String>,
    /// Undirected edges over internal indices, `a < b`, first occurrence order.
    pub edges: Vec<(usize, usize)>,
    pub labels: BTreeMap<usize, usize>,
    pub class_ids: Vec<String>,
    pub class_texts: Vec<String>,
}

fn split_tab<'a>(line: &'a str, file: &str, lineno: usize) -> Result<(&'a str, &'a str), CorpusError> {
    line.split_once('\t').ok_or_else(|| CorpusError::Parse {
        file: file.to_string(),
        line: lineno,
        message: "expected two tab-separated fields".into(),
    })
}

fn read_required(dir: &Path, name: &str) -> Result<String, CorpusError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CorpusError::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let mut raw = RawCorpus::default();
        let mut node_index: HashMap<String, usize> = HashMap::new();

        let docs = read_required(dir, DOCUMENTS_FILE)?;
        for (lineno, line) in data_lines(&docs) {
            let (id, text) = split_tab(line, DOCUMENTS_FILE, lineno)?;
            let id = id.trim().to_string();
            if node_index.contains_key(&id) {
                return Err(CorpusError::DuplicateNode {
                    file: DOCUMENTS_FILE.into(),
                    line: lineno,
                    id,
                });
            }
            if words(text).is_empty() {
                return Err(CorpusError::EmptyDocument {
                    file: DOCUMENTS_FILE.into(),
                    line: lineno,
                    id,
                });
            }
            node_index.insert(id.clone(), raw.node_ids.len());
            raw.node_ids.push(id);
            raw.texts.push(text.to_string());
        }
        if raw.node_ids.is_empty() {
            return Err(CorpusError::NoDocuments);
        }

        let lookup = |id: &str, file: &str, line: usize| {
            node_index.get(id.trim()).copied().ok_or_else(|| CorpusError::DanglingEdge {
                file: file.to_string(),
                line,
                id: id.trim().to_string(),
            })
        };

        let edges = read_required(dir, EDGES_FILE)?;
        let mut seen = HashSet::new();
        for (lineno, line) in data_lines(&edges) {
            let (a, b) = split_tab(line, EDGES_FILE, lineno)?;
            let (a, b) = (lookup(a, EDGES_FILE, lineno)?, lookup(b, EDGES_FILE, lineno)?);
            if a == b {
                log::warn!("{EDGES_FILE}:{lineno}: dropping self-loop on node {a}");
                continue;
            }
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                raw.edges.push(e);
            }
        }

        let classes = read_required(dir, CLASSES_FILE)?;
        let mut class_index: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in data_lines(&classes) {
            let (id, text) = split_tab(line, CLASSES_FILE, lineno)?;
            let id = id.trim().to_string();
            if class_index.contains_key(&id) {
                return Err(CorpusError::Parse {
                    file: CLASSES_FILE.into(),
                    line: lineno,
                    message: format!("duplicate class id {id:?}"),
                });
            }
            class_index.insert(id.clone(), raw.class_ids.len());
            raw.class_ids.push(id);
            raw.class_texts.push(text.to_string());
        }

        let labels_path = dir.join(LABELS_FILE);
        if labels_path.exists() {
            let labels = fs::read_to_string(&labels_path).map_err(|e| CorpusError::io(&labels_path, e))?;
            for (lineno, line) in data_lines(&labels) {
                let (node, class) = split_tab(line, LABELS_FILE, lineno)?;
                let node = lookup(node, LABELS_FILE, lineno)?;
                let class = class.trim();
                let class = *class_index.get(class).ok_or_else(|| CorpusError::UnknownClass {
                    file: LABELS_FILE.into(),
                    line: lineno,
                    id: class.to_string(),
                })?;
                raw.labels.insert(node, class);
            }
        }
        Ok(raw)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let clean = |s: &str| s.replace(['\n', '\r'], " ");
        let mut docs = String::new();
        for (id, text) in self.node_ids.iter().zip(&self.texts) {
            docs.push_str(&format!("{id}\t{}\n", clean(text)));
        }
        let mut edges = String::new();
        for &(a, b) in &self.edges {
            edges.push_str(&format!("{}\t{}\n", self.node_ids[a], self.node_ids[b]));
        }
        let mut labels = String::new();
        for (&n, &c) in &self.labels {
            labels.push_str(&format!("{}\t{}\n", self.node_ids[n], self.class_ids[c]));
        }
        let mut classes = String::new();
        for (id, text) in self.class_ids.iter().zip(&self.class_texts) {
            classes.push_str(&format!("{id}\t{}\n", clean(text)));
        }
        for (name, body) in [
            (DOCUMENTS_FILE, docs),
            (EDGES_FILE, edges),
            (LABELS_FILE, labels),
            (CLASSES_FILE, classes),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| CorpusError::io(&path, e))?;
        }
        Ok(())
    }

    /// Short hex digest of documents, edges and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (id, text) in self.node_ids.iter().zip(&self.texts) {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(text.as_bytes());
            h.update([1]);
        }
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        for (&n, &c) in &self.labels {
            h.update((n as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub max_len: usize,
    pub min_freq: usize,
    pub word_embeddings: SkipGramConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            min_freq: 2,
            word_embeddings: SkipGramConfig::default(),
        }
    }
}

/// Validated, tokenized corpus with frozen node input features.
#[derive(Debug, Clone)]
pub struct GraphTextCorpus {
    pub raw: RawCorpus,
    pub vocab: Vocabulary,
    pub documents: Vec<TokenizedText>,
    /// Sorted neighbor lists, symmetric.
    pub adjacency: Vec<Vec<usize>>,
    pub node_features: Tensor,
    pub class_label_texts: Vec<TokenizedText>,
    pub max_len: usize,
}

impl GraphTextCorpus {
    /// Tokenizes `raw` with `vocab` and pools `table` into node features.
    pub fn build(raw: RawCorpus, vocab: Vocabulary, table: &WordEmbeddingTable, max_len: usize) -> Result<Self, CorpusError> {
        if raw.is_empty() {
            return Err(CorpusError::NoDocuments);
        }
        if table.rows() != vocab.len() {
            return Err(CorpusError::EmbeddingMismatch {
                table: table.rows(),
                vocab: vocab.len(),
            });
        }
        let documents: Vec<TokenizedText> = raw.texts.iter().map(|t| tokenize(t, &vocab, max_len)).collect();
        if let Some(i) = documents.iter().position(TokenizedText::is_empty) {
            return Err(CorpusError::EmptyDocument {
                file: DOCUMENTS_FILE.into(),
                line: i + 1,
                id: raw.node_ids[i].clone(),
            });
        }
        let truncated = documents.iter().filter(|d| d.truncated).count();
        if truncated > 0 {
            log::info!("{truncated} documents truncated to {max_len} tokens");
        }
        let mut adjacency = vec![Vec::new(); raw.len()];
        for &(a, b) in &raw.edges {
            if a >= raw.len() || b >= raw.len() || a == b {
                return Err(CorpusError::Invalid(format!("invalid edge ({a}, {b})")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for n in &mut adjacency {
            n.sort_unstable();
            n.dedup();
        }
        let class_label_texts = raw.class_texts.iter().map(|t| tokenize(t, &vocab, max_len)).collect();
        let node_features = build_node_features(&documents, table);
        Ok(Self {
            raw,
            vocab,
            documents,
            adjacency,
            node_features,
            class_label_texts,
            max_len,
        })
    }

    /// Vocabulary and word vectors default to `vocab.tsv`/`embeddings.f32`
    /// in `dir` when present, else are built from the corpus itself.
    pub fn load(dir: &Path, config: &CorpusConfig) -> Result<Self, CorpusError> {
        Self::load_with(dir, config, None, None)
    }

    pub fn load_with(
        dir: &Path,
        config: &CorpusConfig,
        vocab: Option<Vocabulary>,
        table: Option<WordEmbeddingTable>,
    ) -> Result<Self, CorpusError> {
        Self::load_parts(dir, config, vocab, table).map(|(corpus, _)| corpus)
    }

    /// Like [`GraphTextCorpus::load_with`] but also returns the word
    /// embedding table the node features were built from.
    pub fn load_parts(
        dir: &Path,
        config: &CorpusConfig,
        vocab: Option<Vocabulary>,
        table: Option<WordEmbeddingTable>,
    ) -> Result<(Self, WordEmbeddingTable), CorpusError> {
        let raw = RawCorpus::load(dir)?;
        let vocab = match vocab {
            Some(v) => v,
            None if dir.join(VOCAB_FILE).exists() => Vocabulary::load(&dir.join(VOCAB_FILE))?,
            None => Vocabulary::build(raw.texts.iter().map(String::as_str), config.min_freq),
        };
        let table = match table {
            Some(t) => t,
            None if dir.join(EMBEDDINGS_FILE).exists() => WordEmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?,
            None => train_word_embeddings(&raw, &vocab, config),
        };
        let corpus = Self::build(raw, vocab, &table, config.max_len)?;
        Ok((corpus, table))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.raw.class_ids.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.raw.labels.get(&node).copied()
    }

    /// Labeled nodes grouped by class, ascending node order.
    pub fn nodes_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&n, &c) in &self.raw.labels {
            out.entry(c).or_default().push(n);
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Up to `eta` distinct neighbors, uniformly without replacement.
    pub fn sample_neighbors(&self, node: usize, eta: usize, rng: &mut impl Rng) -> Vec<usize> {
        let neighbors = &self.adjacency[node];
        if neighbors.len() <= eta {
            return neighbors.clone();
        }
        sample(rng, neighbors.len(), eta).into_iter().map(|i| neighbors[i]).collect()
    }
}

/// Skip-gram vectors over the corpus documents, tokenized without truncation.
pub fn train_word_embeddings(raw: &RawCorpus, vocab: &Vocabulary, config: &CorpusConfig) -> WordEmbeddingTable {
    let sequences: Vec<Vec<u32>> = raw
        .texts
        .iter()
        .map(|t| words(t).iter().map(|w| vocab.id(w)).collect())
        .collect();
    train_skip_gram(&sequences, vocab.len(), &config.word_embeddings)
}

/// Row `i` is the mean word vector over the non-padding tokens of document
/// `i`; empty documents get a zero row.
pub fn build_node_features(documents: &[TokenizedText], table: &WordEmbeddingTable) -> Tensor {
    let dim = table.dim();
    let mut out = Tensor::zeros(&[documents.len().max(1), dim]);
    for (i, doc) in documents.iter().enumerate() {
        let row = out.row_mut(i);
        if doc.is_empty() {
            log::warn!("document {i} has no tokens; using a zero feature vector");
            continue;
        }
        for &t in doc.tokens() {
            for (r, &v) in row.iter_mut().zip(table.vector(t)) {
                *r += v;
            }
        }
        let inv = 1.0 / doc.length as f32;
        row.iter_mut().for_each(|r| *r *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_fixture(dir: &Path, edges: &str) {
        fs::write(dir.join(DOCUMENTS_FILE), "a\tgraph neural nets\nb\tgraph text\nc\tneural text nets\n").unwrap();
        fs::write(dir.join(EDGES_FILE), edges).unwrap();
        fs::write(dir.join(LABELS_FILE), "a\tx\nc\ty\n").unwrap();
        fs::write(dir.join(CLASSES_FILE), "x\tgraphs\ny\ttext\n").unwrap();
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "a\tb\nb\tc\n");
        let corpus = GraphTextCorpus::load(dir.path(), &CorpusConfig {
            word_embeddings: SkipGramConfig { dim: 4, epochs: 1, ..Default::default() },
            ..Default::default()
        })
        .unwrap();
        assert_eq!(corpus.len(), 3);
        let degrees: Vec<usize> = (0..3).map(|i| corpus.degree(i)).collect();
        assert_eq!(degrees, vec![1, 2, 1]);
        assert_eq!(corpus.num_classes(), 2);
        assert_eq!(corpus.label(2), Some(1));
        assert_eq!(corpus.label(1), None);
        for i in 0..3 {
            for &j in &corpus.adjacency[i] {
                assert!(corpus.adjacency[j].contains(&i));
            }
        }
    }

    #[test]
    fn dangling_edge_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "a\tb\nb\t99\n");
        let err = RawCorpus::load(dir.path()).unwrap_err();
        assert!(matches!(&err, CorpusError::DanglingEdge { line: 2, id, .. } if id == "99"));
        assert!(err.to_string().contains("edges.tsv:2"));
    }

    #[test]
    fn duplicate_and_empty_documents_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "");
        fs::write(dir.path().join(DOCUMENTS_FILE), "a\tone\na\ttwo\n").unwrap();
        assert!(matches!(RawCorpus::load(dir.path()), Err(CorpusError::DuplicateNode { line: 2, .. })));
        fs::write(dir.path().join(DOCUMENTS_FILE), "a\tone\nb\t ... \n").unwrap();
        assert!(matches!(RawCorpus::load(dir.path()), Err(CorpusError::EmptyDocument { line: 2, .. })));
    }

    #[test]
    fn missing_edges_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "");
        fs::remove_file(dir.path().join(EDGES_FILE)).unwrap();
        let err = RawCorpus::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("edges.tsv"));
    }

    #[test]
    fn self_loops_and_duplicate_edges_collapse() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "a\tb\nb\ta\nc\tc\n");
        let raw = RawCorpus::load(dir.path()).unwrap();
        assert_eq!(raw.edges, vec![(0, 1)]);
    }

    fn table(rows: usize, dim: usize, seed: u64) -> WordEmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WordEmbeddingTable::new(Tensor::from_fn(rows, dim, |_, _| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn node_features_are_token_means() {
        let vocab = Vocabulary::from_tokens(["u", "v", "w"]);
        let t = table(vocab.len(), 6, 1);
        let docs = vec![tokenize("u", &vocab, 8), tokenize("u v", &vocab, 8), tokenize("w u v w v", &vocab, 8)];
        let x = build_node_features(&docs, &t);
        assert_eq!(x.row(0), t.vector(2));
        for j in 0..6 {
            assert!((x.at(1, j) - (t.vector(2)[j] + t.vector(3)[j]) / 2.0).abs() < 1e-6);
            let oracle: f32 = [4u32, 2, 3, 4, 3].iter().map(|&id| t.vector(id)[j]).sum::<f32>() / 5.0;
            assert!((x.at(2, j) - oracle).abs() < 1e-6);
        }
        let shuffled = build_node_features(&[tokenize("v w w u v", &vocab, 8)], &t);
        for (a, b) in shuffled.row(0).iter().zip(x.row(2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn star(degree: usize) -> GraphTextCorpus {
        let raw = RawCorpus {
            node_ids: (0..=degree).map(|i| i.to_string()).collect(),
            texts: (0..=degree).map(|_| "w".to_string()).collect(),
            edges: (1..=degree).map(|i| (0, i)).collect(),
            ..Default::default()
        };
        let vocab = Vocabulary::from_tokens(["w"]);
        GraphTextCorpus::build(raw, vocab, &table(3, 2, 0), 4).unwrap()
    }

    #[test]
    fn neighbor_sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = star(1);
        assert_eq!(c.sample_neighbors(0, 3, &mut rng), vec![1]);
        let c = star(5);
        let s = c.sample_neighbors(0, 3, &mut rng);
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 3);
        assert!(s.iter().all(|n| c.adjacency[0].contains(n)));
        let lonely = GraphTextCorpus::build(
            RawCorpus {
                node_ids: vec!["0".into()],
                texts: vec!["w".into()],
                ..Default::default()
            },
            Vocabulary::from_tokens(["w"]),
            &table(3, 2, 0),
            4,
        )
        .unwrap();
        assert!(lonely.sample_neighbors(0, 3, &mut rng).is_empty());
    }

    #[test]
    fn neighbor_sampling_is_uniform() {
        let c = star(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            for n in c.sample_neighbors(0, 2, &mut rng) {
                counts[n] += 1;
            }
        }
        for &k in &counts[1..] {
            let f = k as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.05, "frequency {f}");
        }
    }
}
