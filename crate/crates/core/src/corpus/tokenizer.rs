use super::vocab::{Vocabulary, PAD_ID};

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token ids padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    /// Exactly `max_len` ids; positions at or past `length` hold `PAD`.
    pub ids: Vec<u32>,
    pub length: usize,
    pub truncated: bool,
}

impl TokenizedText {
    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

/// Keeps the first `max_len` words; the tail is dropped and flagged.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedText {
    assert!(max_len >= 1, "max_len must be positive");
    let ws = words(text);
    let truncated = ws.len() > max_len;
    let mut ids: Vec<u32> = ws.iter().take(max_len).map(|w| vocab.id(w)).collect();
    let length = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenizedText {
        ids,
        length,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK_ID;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["graph", "neural", "nets"])
    }

    #[test]
    fn basic_padding() {
        let t = tokenize("Graph Neural Nets", &vocab(), 5);
        assert_eq!(t.ids, vec![2, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(t.length, 3);
        assert!(!t.truncated);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = tokenize("graph transformers", &vocab(), 4);
        assert_eq!(t.tokens(), &[2, UNK_ID]);
    }

    #[test]
    fn long_document_is_capped() {
        let text = vec!["graph"; 200].join(" ");
        let t = tokenize(&text, &vocab(), 128);
        assert_eq!(t.ids.len(), 128);
        assert_eq!(t.length, 128);
        assert!(t.truncated);
    }

    #[test]
    fn empty_text_is_all_pad() {
        let t = tokenize("  ,.;  ", &vocab(), 3);
        assert_eq!(t.ids, vec![PAD_ID; 3]);
        assert!(t.is_empty());
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(words("Graph-neural,NETS!"), vec!["graph", "neural", "nets"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_normalized_text(text in "[a-zA-Z ,.!]{0,60}") {
            let once = words(&text).join(" ");
            prop_assert_eq!(words(&once).join(" "), once.clone());
            let v = vocab();
            prop_assert_eq!(tokenize(&text, &v, 16), tokenize(&once, &v, 16));
        }
    }
}
