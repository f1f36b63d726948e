//! Caption tokenization and the learned text context used by cross-attention.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::scene::{ShapeKind, DIRECTION_WORDS, HUE_NAMES};
use crate::error::{Error, Result};
use crate::nn::{sha256_hex, Init, Scope};

pub const NULL_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Token strings indexed by id. Ids 0 and 1 are the reserved NULL and PAD markers.
    pub tokens: Vec<String>,
    pub max_len: usize,
}

impl Vocabulary {
    /// Closed vocabulary of the caption grammar.
    pub fn caption_grammar(max_len: usize) -> Self {
        let mut tokens: Vec<String> = vec!["<null>".into(), "<pad>".into()];
        tokens.extend(["a", "moving", "and"].map(String::from));
        tokens.extend(HUE_NAMES.iter().map(|s| s.to_string()));
        tokens.extend(ShapeKind::ALL.iter().map(|k| k.name().to_string()));
        tokens.extend(DIRECTION_WORDS.iter().map(|s| s.to_string()));
        Self { tokens, max_len }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn lookup(&self, word: &str) -> Option<u32> {
        // Reserved markers are never produced from caption text.
        self.tokens
            .iter()
            .skip(2)
            .position(|t| t == word)
            .map(|i| i as u32 + 2)
    }

    /// Lowercase, whitespace split, unknown words → PAD, truncate or pad to `max_len`.
    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = caption
            .to_lowercase()
            .split_whitespace()
            .map(|w| self.lookup(w).unwrap_or(PAD_ID))
            .take(self.max_len)
            .collect();
        ids.resize(self.max_len, PAD_ID);
        ids
    }

    /// Inverse of [`tokenize`] on known words; reserved ids are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != NULL_ID && id != PAD_ID)
            .filter_map(|&id| self.tokens.get(id as usize))
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn null_tokens(&self) -> Vec<u32> {
        vec![NULL_ID; self.max_len]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Cross-attention context `[L_txt, C_txt]` for one caption.
#[derive(Debug, Clone)]
pub struct Context {
    pub tensor: Tensor,
    pub is_null: bool,
}

/// Token plus positional embedding tables.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embedding: Tensor,
    position_embedding: Tensor,
    vocab: Vocabulary,
    dim: usize,
}

impl TextEncoder {
    pub fn new(s: &Scope, vocab: Vocabulary, dim: usize) -> Result<Self> {
        Ok(Self {
            token_embedding: s.get("token_embedding", &[vocab.len(), dim], Init::Normal(1.0))?,
            position_embedding: s.get("position_embedding", &[vocab.max_len, dim], Init::Normal(0.1))?,
            vocab,
            dim,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Context> {
        if tokens.len() != self.vocab.max_len {
            return Err(Error::shape("token sequence", self.vocab.max_len, tokens.len()));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.vocab.len(),
            });
        }
        let ids = Tensor::new(tokens, self.token_embedding.device())?;
        let tensor = self
            .token_embedding
            .index_select(&ids, 0)?
            .add(&self.position_embedding)?;
        Ok(Context {
            tensor,
            is_null: tokens.iter().all(|&t| t == NULL_ID),
        })
    }

    pub fn embed_caption(&self, caption: &str) -> Result<Context> {
        self.embed(&self.vocab.tokenize(caption))
    }

    /// Context of the all-NULL sequence; the unconditional branch of guidance.
    pub fn null_context(&self) -> Result<Context> {
        self.embed(&self.vocab.null_tokens())
    }
}

/// Cosine similarity between two contexts, flattened.
pub fn context_cosine(a: &Context, b: &Context) -> Result<f64> {
    let a = a.tensor.flatten_all()?.to_dtype(candle_core::DType::F64)?;
    let b = b.tensor.flatten_all()?.to_dtype(candle_core::DType::F64)?;
    let dot = (&a * &b)?.sum(D::Minus1)?.to_scalar::<f64>()?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?.to_scalar::<f64>()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?.to_scalar::<f64>()?;
    Ok(dot / (na * nb))
}
