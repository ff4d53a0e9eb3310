//! Bidirectional transformer text encoder.
//!
//! Sequences of any batch are stacked row-wise and processed together;
//! attention is confined to each sequence's own rows. Padding positions are
//! never fed to the network, which is equivalent to masking them out.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedText;
use crate::error::{Error, Result};
use crate::numeric::init::truncated_normal;
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const INIT_STD: f32 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over non-padded positions.
    #[default]
    Mean,
    /// Output at the last non-padded position.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Filled in from the corpus vocabulary when zero.
    pub vocab_size: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            max_len: 128,
            vocab_size: 0,
            output_dim: 128,
            dropout: 0.0,
            pooling: Pooling::Mean,
        }
    }
}

impl TextEncoderConfig {
    /// 12 layers, width 512, 8 heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            width: 512,
            heads: 8,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("text width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.output_dim == 0 || self.max_len == 0 || self.layers == 0 {
            return bad("text encoder layers, max_len and output_dim must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocabulary size {} too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    qkv_weight: ParamId,
    qkv_bias: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff1_weight: ParamId,
    ff1_bias: ParamId,
    ff2_weight: ParamId,
    ff2_bias: ParamId,
}

/// Parameter handles of one text encoder inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    token_embedding: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_gain: ParamId,
    final_bias: ParamId,
    projection: ParamId,
}

const BLOCK_PARAMS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "qkv.weight", "qkv.bias", "out.weight", "out.bias", "ln2.gain", "ln2.bias", "ff1.weight",
    "ff1.bias", "ff2.weight", "ff2.bias",
];

impl TextEncoder {
    /// Registers freshly initialized parameters under the `text.` prefix.
    pub fn new(config: TextEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let ones = |n| Tensor::filled(&[1, n], 1.0);
        let zeros = |n| Tensor::zeros(&[1, n]);
        let token_embedding = store.add("text.token_embedding", truncated_normal(config.vocab_size, w, INIT_STD, rng));
        let positions = store.add("text.positions", truncated_normal(config.max_len, w, INIT_STD, rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut add = |name: &str, value: Tensor| store.add(format!("text.block{l}.{name}"), value);
            blocks.push(Block {
                ln1_gain: add(BLOCK_PARAMS[0], ones(w)),
                ln1_bias: add(BLOCK_PARAMS[1], zeros(w)),
                qkv_weight: add(BLOCK_PARAMS[2], truncated_normal(w, 3 * w, INIT_STD, rng)),
                qkv_bias: add(BLOCK_PARAMS[3], zeros(3 * w)),
                out_weight: add(BLOCK_PARAMS[4], truncated_normal(w, w, INIT_STD, rng)),
                out_bias: add(BLOCK_PARAMS[5], zeros(w)),
                ln2_gain: add(BLOCK_PARAMS[6], ones(w)),
                ln2_bias: add(BLOCK_PARAMS[7], zeros(w)),
                ff1_weight: add(BLOCK_PARAMS[8], truncated_normal(w, 4 * w, INIT_STD, rng)),
                ff1_bias: add(BLOCK_PARAMS[9], zeros(4 * w)),
                ff2_weight: add(BLOCK_PARAMS[10], truncated_normal(4 * w, w, INIT_STD, rng)),
                ff2_bias: add(BLOCK_PARAMS[11], zeros(w)),
            });
        }
        let final_gain = store.add("text.final.gain", ones(w));
        let final_bias = store.add("text.final.bias", zeros(w));
        let projection = store.add("text.projection", truncated_normal(w, config.output_dim, INIT_STD, rng));
        Ok(Self {
            config,
            token_embedding,
            positions,
            blocks,
            final_gain,
            final_bias,
            projection,
        })
    }

    /// Re-binds handles to parameters already present in `store`, checking
    /// every shape against `config`.
    pub fn from_store<T: Scalar>(config: TextEncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let find = |name: String, shape: [usize; 2]| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let got = store.value(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let shapes = [
                [1, w],
                [1, w],
                [w, 3 * w],
                [1, 3 * w],
                [w, w],
                [1, w],
                [1, w],
                [1, w],
                [w, 4 * w],
                [1, 4 * w],
                [4 * w, w],
                [1, w],
            ];
            let ids: Vec<ParamId> = BLOCK_PARAMS
                .iter()
                .zip(shapes)
                .map(|(n, s)| find(format!("text.block{l}.{n}"), s))
                .collect::<Result<_>>()?;
            blocks.push(Block {
                ln1_gain: ids[0],
                ln1_bias: ids[1],
                qkv_weight: ids[2],
                qkv_bias: ids[3],
                out_weight: ids[4],
                out_bias: ids[5],
                ln2_gain: ids[6],
                ln2_bias: ids[7],
                ff1_weight: ids[8],
                ff1_bias: ids[9],
                ff2_weight: ids[10],
                ff2_bias: ids[11],
            });
        }
        Ok(Self {
            config,
            token_embedding: find("text.token_embedding".into(), [config.vocab_size, w])?,
            positions: find("text.positions".into(), [config.max_len, w])?,
            blocks,
            final_gain: find("text.final.gain".into(), [1, w])?,
            final_bias: find("text.final.bias".into(), [1, w])?,
            projection: find("text.projection".into(), [w, config.output_dim])?,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.token_embedding
    }

    /// Ids of every parameter owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.positions];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain,
                b.ln1_bias,
                b.qkv_weight,
                b.qkv_bias,
                b.out_weight,
                b.out_bias,
                b.ln2_gain,
                b.ln2_bias,
                b.ff1_weight,
                b.ff1_bias,
                b.ff2_weight,
                b.ff2_bias,
            ]);
        }
        ids.extend([self.final_gain, self.final_bias, self.projection]);
        ids
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Token plus positional embeddings for a padded id sequence of exactly
    /// `max_len` entries.
    pub fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[u32]) -> Result<Var> {
        if ids.len() != self.config.max_len {
            return Err(Error::InvalidLength {
                length: ids.len(),
                max_len: self.config.max_len,
            });
        }
        self.check_ids(ids)?;
        let table = tape.param(store, self.token_embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tokens = tape.gather_rows(table, &idx)?;
        let pos = tape.param(store, self.positions);
        Ok(tape.add(tokens, pos)?)
    }

    /// Raw token-embedding rows (no positions) for `ids`.
    pub fn token_vectors<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = tape.param(store, self.token_embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(tape.gather_rows(table, &idx)?)
    }

    /// Adds positional embeddings `0..rows` to a `rows x width` input.
    pub fn add_positions<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let rows = tape.value(input).rows();
        if rows == 0 || rows > self.config.max_len {
            return Err(Error::InvalidLength {
                length: rows,
                max_len: self.config.max_len,
            });
        }
        let table = tape.param(store, self.positions);
        let pos = tape.gather_rows(table, &(0..rows).collect::<Vec<_>>())?;
        Ok(tape.add(input, pos)?)
    }

    /// Encodes one embedded sequence; rows at or past `true_length` are ignored.
    pub fn encode_text<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
        true_length: usize,
    ) -> Result<Var> {
        self.encode_inputs(tape, store, &[(input, true_length)], None)
    }

    /// Encodes several embedded sequences at once; returns `n x d`.
    pub fn encode_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[(Var, usize)],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(inputs.len());
        let mut segments = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for &(input, len) in inputs {
            let rows = tape.value(input).rows();
            if len == 0 || len > rows || len > self.config.max_len {
                return Err(Error::InvalidLength {
                    length: len,
                    max_len: rows.min(self.config.max_len),
                });
            }
            parts.push(if len == rows { input } else { tape.slice_rows(input, 0, len)? });
            segments.push((start, len));
            start += len;
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        self.forward_stacked(tape, store, stacked, &segments, rng)
    }

    /// Encodes tokenized texts; returns `n x d`.
    pub fn encode_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        texts: &[&TokenizedText],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(texts.len());
        for t in texts {
            let len = t.length.min(self.config.max_len);
            if len == 0 {
                return Err(Error::InvalidLength {
                    length: 0,
                    max_len: self.config.max_len,
                });
            }
            segments.push((ids.len(), len));
            ids.extend(t.ids[..len].iter().map(|&i| i as usize));
            positions.extend(0..len);
        }
        if ids.is_empty() {
            return Err(Error::Config("no texts to encode".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: id as u32,
                vocab: self.config.vocab_size,
            });
        }
        let table = tape.param(store, self.token_embedding);
        let tokens = tape.gather_rows(table, &ids)?;
        let pos_table = tape.param(store, self.positions);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let x = tape.add(tokens, pos)?;
        self.forward_stacked(tape, store, x, &segments, rng)
    }

    fn forward_stacked<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        segments: &[(usize, usize)],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let eps = T::lit(LN_EPS);
        let p = self.config.dropout;
        let mut dropout = |tape: &mut Tape<T>, v: Var| match rng.as_deref_mut() {
            Some(r) if p > 0.0 => tape.dropout(v, p, &mut &mut *r),
            _ => v,
        };
        for b in &self.blocks {
            let (g, bb) = (tape.param(store, b.ln1_gain), tape.param(store, b.ln1_bias));
            let h = tape.layer_norm(x, g, bb, eps)?;
            let w = tape.param(store, b.qkv_weight);
            let qkv = tape.matmul(h, w)?;
            let bias = tape.param(store, b.qkv_bias);
            let qkv = tape.add_row(qkv, bias)?;
            let att = tape.attention(qkv, segments, self.config.heads)?;
            let w = tape.param(store, b.out_weight);
            let o = tape.matmul(att, w)?;
            let bias = tape.param(store, b.out_bias);
            let o = tape.add_row(o, bias)?;
            let o = dropout(tape, o);
            x = tape.add(x, o)?;

            let (g, bb) = (tape.param(store, b.ln2_gain), tape.param(store, b.ln2_bias));
            let h = tape.layer_norm(x, g, bb, eps)?;
            let w = tape.param(store, b.ff1_weight);
            let f = tape.matmul(h, w)?;
            let bias = tape.param(store, b.ff1_bias);
            let f = tape.add_row(f, bias)?;
            let f = tape.gelu(f);
            let w = tape.param(store, b.ff2_weight);
            let f = tape.matmul(f, w)?;
            let bias = tape.param(store, b.ff2_bias);
            let f = tape.add_row(f, bias)?;
            let f = dropout(tape, f);
            x = tape.add(x, f)?;
        }
        let (g, bb) = (tape.param(store, self.final_gain), tape.param(store, self.final_bias));
        let x = tape.layer_norm(x, g, bb, eps)?;
        let pooled = match self.config.pooling {
            Pooling::Mean => {
                let groups: Vec<Vec<usize>> = segments.iter().map(|&(s, l)| (s..s + l).collect()).collect();
                tape.group_mean(x, &groups)?
            }
            Pooling::Last => {
                let last: Vec<usize> = segments.iter().map(|&(s, l)| s + l - 1).collect();
                tape.gather_rows(x, &last)?
            }
        };
        let proj = tape.param(store, self.projection);
        Ok(tape.matmul(pooled, proj)?)
    }

    /// Inference helper: `n x d` embeddings of `texts`, computed in chunks
    /// without recording gradients.
    pub fn embed_texts(&self, store: &ParamStore, texts: &[&TokenizedText]) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let mut data = Vec::with_capacity(texts.len() * self.config.output_dim);
        for chunk in texts.chunks(CHUNK) {
            let mut tape = Tape::with_frozen_params();
            let out = self.encode_tokens(&mut tape, store, chunk, None)?;
            data.extend_from_slice(tape.value(out).data());
        }
        Ok(Tensor::new(vec![texts.len(), self.config.output_dim], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocabulary, PAD_ID};
    use crate::numeric::gradcheck::{check_input_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            max_len: 10,
            vocab_size: 12,
            output_dim: 6,
            ..Default::default()
        };
        let enc = TextEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (enc, store)
    }

    fn padded(ids: &[u32], max_len: usize) -> TokenizedText {
        let mut v = ids.to_vec();
        v.resize(max_len, PAD_ID);
        TokenizedText {
            ids: v,
            length: ids.len(),
            truncated: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TextEncoderConfig {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn embed_tokens_matches_table_lookup() {
        let (enc, store) = small();
        let ids = [3u32, 3, 5, 0, 0, 0, 0, 0, 0, 0];
        let mut tape = Tape::new();
        let e = enc.embed_tokens(&mut tape, &store, &ids).unwrap();
        let e = tape.value(e);
        assert_eq!(e.shape(), &[10, 8]);
        let table = store.value(enc.token_embedding);
        let pos = store.value(enc.positions);
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..8 {
                assert_eq!(e.at(i, j), table.at(id as usize, j) + pos.at(i, j));
            }
        }
        assert_ne!(e.row(0), e.row(1));
        assert!(matches!(
            enc.embed_tokens(&mut tape, &store, &[99; 10]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn output_shape_and_zero_length_error() {
        let (enc, store) = small();
        let mut tape = Tape::new();
        let e = enc.embed_tokens(&mut tape, &store, &[2; 10]).unwrap();
        let out = enc.encode_text(&mut tape, &store, e, 4).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 6]);
        assert!(matches!(enc.encode_text(&mut tape, &store, e, 0), Err(Error::InvalidLength { .. })));
    }

    #[test]
    fn padding_positions_do_not_matter() {
        let (enc, store) = small();
        let mut tape = Tape::new();
        let a = enc.embed_tokens(&mut tape, &store, &[2, 3, 4, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let b = enc.embed_tokens(&mut tape, &store, &[2, 3, 4, 9, 1, 7, 5, 0, 11, 6]).unwrap();
        let oa = enc.encode_text(&mut tape, &store, a, 3).unwrap();
        let ob = enc.encode_text(&mut tape, &store, b, 3).unwrap();
        assert_eq!(tape.value(oa), tape.value(ob));
    }

    #[test]
    fn batch_matches_loop() {
        let (enc, store) = small();
        let texts = [padded(&[2, 3, 4], 10), padded(&[5], 10), padded(&[6, 7, 8, 9, 10, 11, 2, 3, 4, 5], 10)];
        let refs: Vec<&TokenizedText> = texts.iter().collect();
        let batch = enc.embed_texts(&store, &refs).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let mut tape = Tape::new();
            let e = enc.embed_tokens(&mut tape, &store, &t.ids).unwrap();
            let o = enc.encode_text(&mut tape, &store, e, t.length).unwrap();
            for (a, b) in tape.value(o).data().iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_documents_identical_embeddings_and_token_sensitivity() {
        let (enc, store) = small();
        let v = Vocabulary::from_tokens(["a", "b", "c"]);
        let t1 = tokenize("a b c", &v, 10);
        let t2 = tokenize("a b c", &v, 10);
        let t3 = tokenize("a c c", &v, 10);
        let e = enc.embed_texts(&store, &[&t1, &t2, &t3]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
    }

    #[test]
    fn last_pooling_uses_final_position() {
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            layers: 1,
            width: 4,
            heads: 1,
            max_len: 6,
            vocab_size: 8,
            output_dim: 3,
            pooling: Pooling::Last,
            ..Default::default()
        };
        let enc = TextEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = enc.embed_texts(&store, &[&padded(&[2, 3], 6)]).unwrap();
        let b = enc.embed_texts(&store, &[&padded(&[2, 3, 4], 6)]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (enc, store) = small();
        let store64 = store.cast::<f64>();
        let enc = TextEncoder::from_store(*enc.config(), &store64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(10, 8, |_, _| rng.gen_range(-1.0..1.0));
        let weights = Tensor::from_fn(1, 6, |_, j| (j as f64 + 1.0) * 0.3);
        let (analytic, numeric) = check_input_gradient(
            &x,
            |tape, input| {
                let out = enc.encode_text(tape, &store64, input, 7).unwrap();
                let w = tape.leaf(weights.clone());
                let prod = tape.mul(out, w).unwrap();
                tape.sum(prod)
            },
            1e-4,
        );
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
        // Padding rows receive no gradient.
        assert!(analytic[7 * 8..].iter().all(|&g| g == 0.0));
    }
}
