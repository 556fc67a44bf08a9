//! The fixed toy vocabulary and fixed-length token prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const VOCAB_SIZE: usize = 32;
pub const PROMPT_LEN: usize = 8;

pub const WORDS: [&str; 14] = [
    "<pad>", "disc", "square", "triangle", "left", "center", "right", "top", "middle", "bottom",
    "small", "large", "dark", "bright",
];

/// Word for a token id; ids past the scene words are reserved.
pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn token(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word)
}

/// A token sequence padded to [`PROMPT_LEN`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(Vec<usize>);

impl Prompt {
    /// The null prompt φ: every position is the pad token.
    pub fn null() -> Self {
        Prompt(vec![PAD; PROMPT_LEN])
    }

    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        if tokens.len() > PROMPT_LEN {
            return Err(Error::Usage(format!(
                "prompt has {} tokens, at most {PROMPT_LEN} allowed",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::Usage(format!("token id {bad} outside the vocabulary")));
        }
        let mut v = tokens.to_vec();
        v.resize(PROMPT_LEN, PAD);
        Ok(Prompt(v))
    }

    /// Whitespace-separated words; unknown words are a usage error.
    pub fn parse(text: &str) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|w| token(w).ok_or_else(|| Error::Usage(format!("unknown prompt token {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(&ids)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&t| t == PAD)
    }

    pub fn text(&self) -> String {
        self.0
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| word(t).map(str::to_owned).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
