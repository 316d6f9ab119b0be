use std::collections::HashMap;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::datagen::{failure_modes, PREFIXES, SUCCESS_TEMPLATE};
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const COND_SUCCESS: TokenId = 3;
pub const COND_FAILURE: TokenId = 4;
pub const COND_NONE: TokenId = 5;
pub const SEP: TokenId = 6;
pub const NUM_SPECIALS: usize = 7;

const SPECIALS: [&str; NUM_SPECIALS] = [
    "<bos>",
    "<eos>",
    "<pad>",
    "<cond_success>",
    "<cond_failure>",
    "<cond_none>",
    "<sep>",
];

/// Token inventory: the special tokens at ids `0..7`, then every word used
/// by the reasoning templates in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            let words = SUCCESS_TEMPLATE
                .iter()
                .chain(PREFIXES.iter().flat_map(|p| p.iter()))
                .chain(failure_modes().iter().flat_map(|m| m.template.iter()));
            for w in words {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
            Vocab::from_tokens(tokens).expect("standard vocabulary is well formed")
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| self.id(w.as_ref()).ok_or_else(|| Error::UnknownToken(w.as_ref().to_string())))
            .collect()
    }

    /// Maps ids back to strings, dropping EOS and PAD.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != EOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// JSON array of tokens in id order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(text)?)
    }

    /// SHA-256 of [`Vocab::to_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
