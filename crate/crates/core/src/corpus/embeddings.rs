//! Shallow word embeddings used as graph-encoder input features.
//!
//! Vectors come either from `embeddings.f32` or from a skip-gram pass with
//! negative sampling over the corpus token streams.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::PAD_ID;
use super::CorpusError;
use crate::numeric::Tensor;

const MAGIC: &[u8; 4] = b"WEMB";
const VERSION: u32 = 1;

/// `|vocab| x f` table of word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable {
    vectors: Tensor,
}

impl WordEmbeddingTable {
    pub fn new(vectors: Tensor) -> Self {
        Self {
            vectors: vectors.as_matrix(),
        }
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        self.vectors.row(id as usize)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.vectors
    }

    /// 16-byte header (magic, version, rows, cols) then row-major
    /// little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.vectors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self, CorpusError> {
        let bad = |message: String| CorpusError::Parse {
            file: source.to_string(),
            line: 0,
            message,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing embedding header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (version, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
        if version != VERSION {
            return Err(bad(format!("unsupported embedding version {version}")));
        }
        if rows == 0 || cols == 0 || bytes.len() != 16 + 4 * rows * cols {
            return Err(bad(format!("payload does not match {rows}x{cols} header")));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vectors = Tensor::new(vec![rows, cols], data).map_err(|e| bad(e.to_string()))?;
        Ok(Self { vectors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_bytes()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

/// Skip-gram with negative sampling. `sequences` hold token ids without
/// padding; the `PAD` row of the result is zero.
pub fn train_skip_gram(sequences: &[Vec<u32>], vocab_size: usize, config: &SkipGramConfig) -> WordEmbeddingTable {
    let dim = config.dim.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 0.5 / dim as f32;
    let mut input: Vec<f32> = (0..vocab_size * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0f32; vocab_size * dim];

    let mut counts = vec![0.0f64; vocab_size];
    for seq in sequences {
        for &t in seq {
            counts[t as usize] += 1.0;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let total_tokens: usize = sequences.iter().map(Vec::len).sum();
    let Ok(noise) = WeightedIndex::new(&weights) else {
        return WordEmbeddingTable::new(Tensor::zeros(&[vocab_size.max(1), dim]));
    };

    let total_steps = (config.epochs * total_tokens).max(1) as f32;
    let mut step = 0usize;
    let mut grad = vec![0.0f32; dim];
    for _ in 0..config.epochs {
        for seq in sequences {
            for (pos, &center) in seq.iter().enumerate() {
                let lr = (config.learning_rate * (1.0 - step as f32 / total_steps)).max(config.learning_rate * 1e-4);
                step += 1;
                let reach = rng.gen_range(1..=config.window.max(1));
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(seq.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = seq[ctx_pos] as usize;
                    let c_off = center as usize * dim;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let o_off = target * dim;
                        let dot: f32 = (0..dim).map(|d| input[c_off + d] * output[o_off + d]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for d in 0..dim {
                            grad[d] += g * output[o_off + d];
                            output[o_off + d] += g * input[c_off + d];
                        }
                    }
                    for d in 0..dim {
                        input[c_off + d] += grad[d];
                    }
                }
            }
        }
    }
    let pad = PAD_ID as usize * dim;
    input[pad..pad + dim].iter_mut().for_each(|v| *v = 0.0);
    WordEmbeddingTable::new(Tensor::new(vec![vocab_size, dim], input).expect("embedding shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn bytes_round_trip_and_header() {
        let t = WordEmbeddingTable::new(Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f32));
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"WEMB");
        assert_eq!(WordEmbeddingTable::from_bytes(&bytes, "mem").unwrap(), t);
        assert!(WordEmbeddingTable::from_bytes(&bytes[..20], "mem").is_err());
    }

    #[test]
    fn co_occurring_words_end_up_closer() {
        // Two topics: ids 2..6 and 6..10 never share a sentence.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seqs: Vec<Vec<u32>> = (0..400)
            .map(|i| {
                let base = if i % 2 == 0 { 2 } else { 6 };
                (0..10).map(|_| base + rng.gen_range(0..4)).collect()
            })
            .collect();
        let cfg = SkipGramConfig {
            dim: 16,
            epochs: 3,
            ..Default::default()
        };
        let table = train_skip_gram(&seqs, 10, &cfg);
        let same = cosine(table.vector(2), table.vector(3));
        let cross = cosine(table.vector(2), table.vector(7));
        assert!(same > cross, "same-topic {same} vs cross-topic {cross}");
        assert!(table.vector(PAD_ID).iter().all(|&v| v == 0.0));
        assert_eq!(train_skip_gram(&seqs, 10, &cfg), table);
    }
}
