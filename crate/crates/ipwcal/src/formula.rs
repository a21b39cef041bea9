//! Model-formula grammar for design matrices.
//!
//! ```text
//! formula := term ("+" term)*
//! term    := factor (":" factor)*
//! factor  := IDENT ("@" INT)? | "visit" | "1"
//! ```
//!
//! `+` separates additive terms, `:` is the elementwise product of factors,
//! `IDENT@k` refers to a column's value `k` visits earlier, `visit` expands
//! into per-visit indicator columns, and `1` is the intercept. Whitespace is
//! ignored. Examples: `1 + a0@1 + a1@1`, `visit + x1@1 : a0@1`.

use std::fmt;

use crate::error::{Error, Result};

/// One multiplicand of a term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Factor {
    /// The literal `1`.
    Intercept,
    /// The `visit` keyword: expands into indicator columns I(visit = k).
    Visit,
    /// A data column, read `lag` visits before the evaluation visit.
    Column { name: String, lag: u32 },
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Intercept => write!(f, "1"),
            Factor::Visit => write!(f, "visit"),
            Factor::Column { name, lag: 0 } => write!(f, "{name}"),
            Factor::Column { name, lag } => write!(f, "{name}@{lag}"),
        }
    }
}

/// A product of factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    /// True when the term is the bare intercept `1` (possibly `1:1`).
    pub fn is_intercept(&self) -> bool {
        self.factors.iter().all(|f| matches!(f, Factor::Intercept))
    }

    /// True when any factor is the `visit` keyword.
    pub fn has_visit(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Visit))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", parts.join(":"))
    }
}

/// A parsed formula: a sum of terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub terms: Vec<Term>,
}

impl Formula {
    /// Parse the grammar above. Whitespace between tokens is ignored.
    pub fn parse(text: &str) -> Result<Formula> {
        Parser::new(text).parse()
    }

    /// True when the formula contains a bare `1` term.
    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(Term::is_intercept)
    }

    /// Deepest lag referenced anywhere in the formula.
    pub fn max_lag(&self) -> u32 {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter())
            .map(|f| match f {
                Factor::Column { lag, .. } => *lag,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// Names of all data columns referenced by the formula.
    pub fn referenced_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for f in &t.factors {
                if let Factor::Column { name, .. } = f {
                    if !out.contains(&name.as_str()) {
                        out.push(name);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, bytes: src.as_bytes(), pos: 0 }
    }

    fn parse(mut self) -> Result<Formula> {
        let mut terms = vec![self.term()?];
        loop {
            self.skip_ws();
            if self.eat(b'+') {
                terms.push(self.term()?);
            } else {
                break;
            }
        }
        self.skip_ws();
        if self.pos != self.bytes.len() {
            return Err(self.err(format!(
                "unexpected character '{}'",
                &self.src[self.pos..].chars().next().unwrap_or('?')
            )));
        }
        Ok(Formula { terms })
    }

    fn term(&mut self) -> Result<Term> {
        let mut factors = vec![self.factor()?];
        loop {
            self.skip_ws();
            if self.eat(b':') {
                factors.push(self.factor()?);
            } else {
                break;
            }
        }
        Ok(Term { factors })
    }

    fn factor(&mut self) -> Result<Factor> {
        self.skip_ws();
        match self.bytes.get(self.pos) {
            None => Err(self.err("expected a factor, found end of formula".into())),
            Some(b'1') => {
                self.pos += 1;
                // Reject `12`, `1a`, `1@…` — the literal is exactly `1`.
                if let Some(&c) = self.bytes.get(self.pos) {
                    if c.is_ascii_alphanumeric() || c == b'_' || c == b'@' {
                        return Err(self.err("the intercept literal is exactly '1'".into()));
                    }
                }
                Ok(Factor::Intercept)
            }
            Some(&c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while let Some(&c) = self.bytes.get(self.pos) {
                    if c.is_ascii_alphanumeric() || c == b'_' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let name = &self.src[start..self.pos];
                self.skip_ws();
                if name == "visit" {
                    if self.bytes.get(self.pos) == Some(&b'@') {
                        return Err(self.err("the visit factor does not take a lag".into()));
                    }
                    return Ok(Factor::Visit);
                }
                let lag = if self.eat(b'@') {
                    self.skip_ws();
                    self.lag_int()?
                } else {
                    0
                };
                Ok(Factor::Column { name: name.to_string(), lag })
            }
            Some(&c) => Err(self.err(format!("expected a factor, found '{}'", c as char))),
        }
    }

    fn lag_int(&mut self) -> Result<u32> {
        let start = self.pos;
        while let Some(&c) = self.bytes.get(self.pos) {
            if c.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(self.err("expected a lag depth after '@'".into()));
        }
        self.src[start..self.pos]
            .parse::<u32>()
            .map_err(|_| self.err("lag depth out of range".into()))
    }

    fn skip_ws(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.bytes.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn err(&self, msg: String) -> Error {
        Error::parse(format!("formula '{}' at offset {}: {}", self.src, self.pos, msg))
    }
}
