//! Binary checkpoints of a pre-trained dual encoder.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "G2P2CKPT"  u32 version
//! u32 len, run config as TOML
//! u64 seed
//! u32 len, corpus fingerprint
//! u32 feature dim
//! u32 count, then per vocabulary token: u32 len, UTF-8 bytes
//! u32 len, word embedding table blob
//! u32 count, then per parameter: u32 len, name, u32 rank, u32 dims.., f32 values
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::{Vocabulary, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::numeric::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"G2P2CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub vocab: Vocabulary,
    pub word_embeddings: WordEmbeddingTable,
    pub model: DualEncoder,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&self.config.to_toml());
        w.u64(self.seed);
        w.string(&self.corpus_fingerprint);
        w.u32(self.model.feature_dim() as u32);
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.string(t);
        }
        let table = self.word_embeddings.to_bytes();
        w.u32(table.len() as u32);
        w.bytes(&table);
        w.u32(self.model.store.len() as u32);
        for (_, p) in self.model.store.iter() {
            w.string(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for v in p.value.data() {
                w.bytes(&v.to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let config = RunConfig::from_toml(&r.string()?)?;
        let seed = r.u64()?;
        let corpus_fingerprint = r.string()?;
        let feature_dim = r.u32()? as usize;
        let vocab_len = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(vocab_len.min(1 << 20));
        for _ in 0..vocab_len {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens.iter().skip(2).cloned());
        if vocab.tokens() != tokens.as_slice() {
            return Err(Error::Checkpoint("malformed vocabulary".into()));
        }
        let table_len = r.u32()? as usize;
        let word_embeddings = WordEmbeddingTable::from_bytes(r.take(table_len)?, "checkpoint")?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("parameter too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        if word_embeddings.dim() != feature_dim || word_embeddings.rows() != vocab.len() {
            return Err(Error::Checkpoint("word embedding table does not match vocabulary or feature dim".into()));
        }
        let model = DualEncoder::from_store(config.model, feature_dim, store)?;
        Ok(Self {
            config,
            seed,
            corpus_fingerprint,
            vocab,
            word_embeddings,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
