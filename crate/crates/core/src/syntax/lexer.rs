use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::SyntaxError;
use crate::grammar::Grammar;

/// Which terminal a token was lexed as.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Literal,
    Class(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub class: TokenClass,
    /// Character offset in the source.
    pub offset: usize,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Maximal-munch lexer derived from a grammar's literals and token classes.
#[derive(Clone, Debug)]
pub struct Lexer {
    literals: Vec<String>,
    classes: Vec<(String, Regex)>,
}

impl Lexer {
    pub fn new(g: &Grammar) -> Lexer {
        let mut literals = g.literals();
        literals.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        let classes = g
            .token_classes()
            .iter()
            .map(|(name, pat)| {
                // Patterns were validated when the grammar was parsed.
                let re = Regex::new(&format!("^(?:{pat})")).expect("validated pattern");
                (name.clone(), re)
            })
            .collect();
        Lexer { literals, classes }
    }

    /// Longest match at the start of `rest`. Literals win ties against
    /// classes; earlier-declared classes win ties against later ones.
    fn munch(&self, rest: &str) -> Option<(usize, TokenClass)> {
        let mut best: Option<(usize, TokenClass)> = None;
        if let Some(l) = self.literals.iter().find(|l| rest.starts_with(l.as_str())) {
            best = Some((l.len(), TokenClass::Literal));
        }
        for (name, re) in &self.classes {
            if let Some(m) = re.find(rest) {
                let len = m.end();
                if len > 0 && best.as_ref().is_none_or(|(b, _)| len > *b) {
                    best = Some((len, TokenClass::Class(name.clone())));
                }
            }
        }
        best
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>, SyntaxError> {
        let mut out = Vec::new();
        let mut byte = 0;
        let mut chars_seen = 0;
        while byte < text.len() {
            let rest = &text[byte..];
            let c = rest.chars().next().unwrap();
            if c.is_whitespace() {
                byte += c.len_utf8();
                chars_seen += 1;
                continue;
            }
            let (len, class) = self
                .munch(rest)
                .ok_or(SyntaxError::Unlexable { offset: chars_seen })?;
            let lexeme = &rest[..len];
            out.push(Token {
                text: lexeme.to_string(),
                class,
                offset: chars_seen,
            });
            chars_seen += lexeme.chars().count();
            byte += len;
        }
        Ok(out)
    }

    /// Classifies already-split lexemes, one token each.
    pub fn classify(&self, lexemes: &[String]) -> Result<Vec<Token>, SyntaxError> {
        let mut out = Vec::with_capacity(lexemes.len());
        let mut offset = 0;
        for lex in lexemes {
            match self.munch(lex) {
                Some((len, class)) if len == lex.len() => out.push(Token {
                    text: lex.clone(),
                    class,
                    offset,
                }),
                _ => return Err(SyntaxError::Unlexable { offset }),
            }
            offset += lex.chars().count() + 1;
        }
        Ok(out)
    }
}

/// Tokenizes `text` with the grammar's lexing rules; whitespace is discarded.
pub fn tokenize(text: &str, g: &Grammar) -> Result<Vec<Token>, SyntaxError> {
    Lexer::new(g).tokenize(text)
}

/// Display form: tokens joined by single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}
