use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const MAX_SUBJECT_BYTES: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubjectError {
    #[error("subject is empty")]
    Empty,
    #[error("subject exceeds {MAX_SUBJECT_BYTES} bytes")]
    TooLong,
    #[error("invalid token {0:?}")]
    BadToken(String),
    #[error("'>' may only appear as the last token")]
    MisplacedTail,
}

fn valid_token(t: &str) -> bool {
    !t.is_empty() && t.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn split_checked(s: &str) -> Result<std::str::Split<'_, char>, SubjectError> {
    if s.is_empty() {
        return Err(SubjectError::Empty);
    }
    if s.len() > MAX_SUBJECT_BYTES {
        return Err(SubjectError::TooLong);
    }
    Ok(s.split('.'))
}

/// Dot-separated routing key, e.g. `svc.request.plumbing`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Subject {
    raw: String,
}

impl Subject {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.raw.split('.')
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl FromStr for Subject {
    type Err = SubjectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        for tok in split_checked(s)? {
            if !valid_token(tok) {
                return Err(SubjectError::BadToken(tok.to_owned()));
            }
        }
        Ok(Subject { raw: s.to_owned() })
    }
}

impl TryFrom<String> for Subject {
    type Error = SubjectError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Subject> for String {
    fn from(s: Subject) -> String {
        s.raw
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PatternToken {
    Literal(String),
    /// `*`: exactly one token.
    Star,
    /// trailing `>`: one or more tokens.
    Tail,
}

/// Subject with wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SubjectPattern {
    tokens: Vec<PatternToken>,
}

impl SubjectPattern {
    pub fn tokens(&self) -> &[PatternToken] {
        &self.tokens
    }

    pub fn matches(&self, subject: &Subject) -> bool {
        let mut subj = subject.tokens();
        for tok in &self.tokens {
            match tok {
                PatternToken::Tail => return subj.next().is_some(),
                PatternToken::Star => {
                    if subj.next().is_none() {
                        return false;
                    }
                }
                PatternToken::Literal(lit) => {
                    if subj.next() != Some(lit.as_str()) {
                        return false;
                    }
                }
            }
        }
        subj.next().is_none()
    }
}

impl FromStr for SubjectPattern {
    type Err = SubjectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw: Vec<&str> = split_checked(s)?.collect();
        let last = raw.len() - 1;
        let tokens = raw
            .iter()
            .enumerate()
            .map(|(i, tok)| match *tok {
                "*" => Ok(PatternToken::Star),
                ">" if i == last => Ok(PatternToken::Tail),
                ">" => Err(SubjectError::MisplacedTail),
                t if valid_token(t) => Ok(PatternToken::Literal(t.to_owned())),
                t => Err(SubjectError::BadToken(t.to_owned())),
            })
            .collect::<Result<_, _>>()?;
        Ok(SubjectPattern { tokens })
    }
}

impl TryFrom<String> for SubjectPattern {
    type Error = SubjectError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SubjectPattern> for String {
    fn from(p: SubjectPattern) -> String {
        p.to_string()
    }
}

impl From<Subject> for SubjectPattern {
    fn from(s: Subject) -> Self {
        SubjectPattern {
            tokens: s.tokens().map(|t| PatternToken::Literal(t.to_owned())).collect(),
        }
    }
}

impl fmt::Display for SubjectPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            match tok {
                PatternToken::Literal(l) => f.write_str(l)?,
                PatternToken::Star => f.write_str("*")?,
                PatternToken::Tail => f.write_str(">")?,
            }
        }
        Ok(())
    }
}

pub fn match_subject(pattern: &SubjectPattern, subject: &Subject) -> bool {
    pattern.matches(subject)
}
