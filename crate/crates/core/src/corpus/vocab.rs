use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tokenizer::words;
use super::CorpusError;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary with reserved `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved entries followed by `tokens` in order; duplicates are skipped.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        vocab.push(PAD_TOKEN.to_string());
        vocab.push(UNK_TOKEN.to_string());
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len() as u32);
            self.tokens.push(token);
        }
    }

    /// Builds a vocabulary from raw texts, keeping words seen at least
    /// `min_freq` times. Ids are assigned by descending frequency, then
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && w != PAD_TOKEN && w != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(CorpusError::Parse {
                file: path.display().to_string(),
                line: 1,
                message: format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let vocab = Self::from_tokens(lines[2..].iter().map(|s| s.to_string()));
        if vocab.len() != lines.len() {
            return Err(CorpusError::Parse {
                file: path.display().to_string(),
                line: 0,
                message: "duplicate vocabulary entries".into(),
            });
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_min_freq() {
        let v = Vocabulary::build(["a b b c", "b a d"], 2);
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "b", "a"]);
        assert_eq!(v.id("c"), UNK_ID);
        assert_eq!(Vocabulary::default().len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::from_tokens(["graph", "neural"]);
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
