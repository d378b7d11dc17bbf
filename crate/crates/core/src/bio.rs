//! BIO span tags, sentiment polarity labels and half-open token spans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    /// From an inclusive `[first, last]` pair as used in dataset files.
    pub fn from_inclusive(first: usize, last: usize) -> Self {
        Span {
            start: first,
            end: last + 1,
        }
    }

    pub fn to_inclusive(self) -> [usize; 2] {
        [self.start, self.end.saturating_sub(1)]
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn contains_token(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    B,
    I,
    O,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::B, BioTag::I, BioTag::O];

    pub fn index(self) -> usize {
        match self {
            BioTag::B => 0,
            BioTag::I => 1,
            BioTag::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<BioTag> {
        BioTag::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::B => "B",
            BioTag::I => "I",
            BioTag::O => "O",
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioTag {
    type Err = BioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(BioTag::B),
            "I" => Ok(BioTag::I),
            "O" => Ok(BioTag::O),
            other => Err(BioError::UnknownTag(other.to_string())),
        }
    }
}

impl Serialize for BioTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BioError {
    #[error("unknown BIO tag {0:?}")]
    UnknownTag(String),
    #[error("I without preceding B at position {0}")]
    OrphanInside(usize),
    #[error("expected {expected} tags, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("empty span")]
    EmptySpan,
    #[error("span {span} exceeds sentence length {len}")]
    OutOfBounds { span: Span, len: usize },
    #[error("target token {0} is tagged O")]
    TargetOutside(usize),
}

/// Checks the well-formedness rule: every `I` continues a `B`/`I` run.
pub fn validate(tags: &[BioTag]) -> Result<(), BioError> {
    let mut prev = BioTag::O;
    for (i, &t) in tags.iter().enumerate() {
        if t == BioTag::I && prev == BioTag::O {
            return Err(BioError::OrphanInside(i));
        }
        prev = t;
    }
    Ok(())
}

/// Encodes a single span over `n` tokens.
pub fn span_to_bio(span: Span, n: usize) -> Result<Vec<BioTag>, BioError> {
    if span.is_empty() {
        return Err(BioError::EmptySpan);
    }
    if span.end > n {
        return Err(BioError::OutOfBounds { span, len: n });
    }
    Ok((0..n)
        .map(|i| {
            if i == span.start {
                BioTag::B
            } else if span.contains_token(i) {
                BioTag::I
            } else {
                BioTag::O
            }
        })
        .collect())
}

/// Decodes spans. An `I` that does not continue a run opens a new span, so
/// any tag sequence (including ill-formed decoder output) decodes.
pub fn bio_to_spans(tags: &[BioTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            BioTag::B => {
                if let Some(s) = start.take() {
                    spans.push(Span::new(s, i));
                }
                start = Some(i);
            }
            BioTag::I => {
                if start.is_none() {
                    start = Some(i);
                }
            }
            BioTag::O => {
                if let Some(s) = start.take() {
                    spans.push(Span::new(s, i));
                }
            }
        }
    }
    if let Some(s) = start {
        spans.push(Span::new(s, tags.len()));
    }
    spans
}

pub fn parse_tags<S: AsRef<str>>(tags: &[S]) -> Result<Vec<BioTag>, BioError> {
    tags.iter().map(|t| t.as_ref().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Neutral => 1,
            Polarity::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Polarity::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "neutral" => Ok(Polarity::Neutral),
            "negative" => Ok(Polarity::Negative),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

impl Serialize for Polarity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BioTag::*;

    #[test]
    fn span_encoding() {
        assert_eq!(
            span_to_bio(Span::new(0, 2), 8).unwrap(),
            vec![B, I, O, O, O, O, O, O]
        );
        assert_eq!(span_to_bio(Span::new(0, 4), 4).unwrap(), vec![B, I, I, I]);
        assert_eq!(span_to_bio(Span::new(3, 4), 5).unwrap(), vec![O, O, O, B, O]);
        assert_eq!(span_to_bio(Span::new(2, 2), 5), Err(BioError::EmptySpan));
    }

    #[test]
    fn orphan_inside_is_rejected() {
        assert_eq!(validate(&[I, O]), Err(BioError::OrphanInside(0)));
        assert_eq!(validate(&[B, O, I]), Err(BioError::OrphanInside(2)));
        assert!(validate(&[B, I, O, B]).is_ok());
        assert_eq!(
            BioError::OrphanInside(0).to_string(),
            "I without preceding B at position 0"
        );
    }

    #[test]
    fn lenient_decoding() {
        assert_eq!(bio_to_spans(&[O, I, I, O, B]), vec![Span::new(1, 3), Span::new(4, 5)]);
        assert_eq!(bio_to_spans(&[B, B]), vec![Span::new(0, 1), Span::new(1, 2)]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(n in 1usize..30, a in 0usize..30, len in 1usize..30) {
            let start = a % n;
            let end = (start + len).min(n);
            let span = Span::new(start, end);
            let tags = span_to_bio(span, n).unwrap();
            prop_assert!(validate(&tags).is_ok());
            prop_assert_eq!(bio_to_spans(&tags), vec![span]);
        }
    }
}
