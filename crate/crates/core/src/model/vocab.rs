//! Fixed symbol table shared by every task family and the dispatch template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Every symbol the toy model can read or emit, in id order.
pub const SYMBOLS: [&str; 39] = [
    "<eos>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "d", "e", "f", "g",
    "h", "+", "=", "→", "?", "A", "B", "<task>", "<cat>", "math", "code", "reasoning", "others",
    "i", "j", "k", "l", "m", "n", "q", "r",
];

pub const EOS: Token = 0;
pub const PLUS: Token = 19;
pub const EQUALS: Token = 20;
pub const ARROW: Token = 21;
pub const QUERY: Token = 22;
pub const CHOICE_A: Token = 23;
pub const CHOICE_B: Token = 24;
pub const TASK_MARKER: Token = 25;
pub const CATEGORY_QUERY: Token = 26;
pub const CAT_MATH: Token = 27;
pub const CAT_CODE: Token = 28;
pub const CAT_REASONING: Token = 29;
pub const CAT_OTHERS: Token = 30;

pub fn vocab_size() -> usize {
    SYMBOLS.len()
}

pub fn digit(d: u32) -> Token {
    debug_assert!(d < 10);
    1 + d
}

/// Task letters `a`..`h`.
pub fn letter(i: u32) -> Token {
    debug_assert!(i < 8);
    11 + i
}

/// Filler letters (`i`..`n`, `q`, `r`), used only for off-task prompts. `o` is
/// skipped so that no run of single-letter tokens can spell a category name.
pub fn filler(i: u32) -> Token {
    debug_assert!(i < 8);
    31 + i
}

pub fn symbol(t: Token) -> &'static str {
    SYMBOLS.get(t as usize).copied().unwrap_or("<unk>")
}

pub fn id(symbol: &str) -> Option<Token> {
    SYMBOLS.iter().position(|s| *s == symbol).map(|i| i as Token)
}

/// Encodes text by longest-match over the symbol table.
pub fn encode(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if rest.starts_with(char::is_whitespace) {
            rest = rest.trim_start();
            continue;
        }
        let best = SYMBOLS
            .iter()
            .enumerate()
            .filter(|(_, s)| rest.starts_with(*s))
            .max_by_key(|(_, s)| s.len());
        match best {
            Some((i, s)) => {
                out.push(i as Token);
                rest = &rest[s.len()..];
            }
            None => {
                return Err(Error::Config(format!("cannot tokenize `{rest}`")));
            }
        }
    }
    Ok(out)
}

/// Renders tokens back to text; multi-character symbols are space separated.
pub fn decode(tokens: &[Token]) -> String {
    let mut s = String::new();
    for &t in tokens {
        let sym = symbol(t);
        if sym.chars().count() > 1 {
            if !s.is_empty() && !s.ends_with(' ') {
                s.push(' ');
            }
            s.push_str(sym);
            s.push(' ');
        } else {
            s.push_str(sym);
        }
    }
    s.trim_end().to_string()
}

/// A token sequence whose first `prompt_len` tokens are the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn prompt(tokens: Vec<Token>) -> Self {
        let prompt_len = tokens.len();
        Self { tokens, prompt_len }
    }

    /// An answer-only sequence (no prompt), as used for references.
    pub fn answer(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            prompt_len: 0,
        }
    }

    pub fn new(tokens: Vec<Token>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Range(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_tokens(&self) -> &[Token] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer_tokens(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }

    /// Answer tokens with a trailing end-of-answer token removed.
    pub fn answer_stripped(&self) -> &[Token] {
        let a = self.answer_tokens();
        match a.last() {
            Some(&EOS) => &a[..a.len() - 1],
            _ => a,
        }
    }

    /// Prompt followed by `answer`.
    pub fn with_answer(&self, answer: &[Token]) -> Self {
        let mut tokens = self.prompt_tokens().to_vec();
        tokens.extend_from_slice(answer);
        Self {
            tokens,
            prompt_len: self.prompt_len,
        }
    }

    pub fn text(&self) -> String {
        decode(&self.tokens)
    }
}
