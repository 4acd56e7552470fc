//! Fixed toy vocabulary with whitespace tokenization.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const WORDS: [&str; 19] = [
    "what", "does", "the", "image", "describe", "?", "which", "color", "is", "shown", "in",
    "video", "of", "object", "tell", "me", "appears", "a", "an",
];

/// Answer tokens; one per latent class.
pub const CLASS_WORDS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];

/// Query used when there is no question, e.g. captioning.
pub const NULL_QUERY: &str = "what does the image describe ?";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = SPECIALS
            .iter()
            .chain(WORDS.iter())
            .chain(CLASS_WORDS.iter())
            .copied()
            .collect();
        Vocab { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.words
            .iter()
            .position(|w| *w == word)
            .map_or(UNK, |i| i as TokenId)
    }

    pub fn word(&self, id: TokenId) -> Result<&'static str> {
        self.words.get(id as usize).copied().ok_or(Error::Index {
            what: "token id",
            index: id as usize,
            size: self.words.len(),
        })
    }

    pub fn class_token(&self, class: usize) -> Result<TokenId> {
        CLASS_WORDS.get(class).map(|w| self.id(w)).ok_or_else(|| {
            Error::Parameter(format!("at most {} classes supported", CLASS_WORDS.len()))
        })
    }

    /// Inverse of [`Vocab::class_token`].
    pub fn class_of(&self, token: TokenId) -> Option<usize> {
        let word = self.words.get(token as usize)?;
        CLASS_WORDS.iter().position(|w| w == word)
    }

    /// Lowercases, splits on whitespace and peels a trailing `?`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            match lower.strip_suffix('?') {
                Some(stem) if !stem.is_empty() => {
                    out.push(self.id(stem));
                    out.push(self.id("?"));
                }
                _ => out.push(self.id(&lower)),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed() {
        let v = Vocab::default();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert!(v.len() <= 64);
    }

    #[test]
    fn encode_splits_question_mark() {
        let v = Vocab::default();
        let ids = v.encode("Which color is shown?");
        assert_eq!(v.decode(&ids), "which color is shown ?");
        assert_eq!(v.encode("zebra"), vec![UNK]);
    }

    #[test]
    fn class_tokens_roundtrip() {
        let v = Vocab::default();
        for c in 0..CLASS_WORDS.len() {
            assert_eq!(v.class_of(v.class_token(c).unwrap()), Some(c));
        }
        assert!(v.class_token(99).is_err());
        assert_eq!(v.class_of(BOS), None);
    }
}
