//! Parsed-sentence corpora: bracketed trees, CoNLL-U graphs, dataset files,
//! vocabularies and pretrained embedding tables.

pub mod conllu;
pub mod ptb;
mod vocab;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bio::{self, BioTag, Polarity, Span};
pub use conllu::{parse_conllu, ConlluError, DepEdge, DependencyGraph};
pub use ptb::{parse_ptb, ConstituencyTree, PtbError, TreeNode};
pub use vocab::{load_embeddings, EmbeddingTable, UnknownInit, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {record}, field `{field}`: {message}")]
    Invalid {
        record: usize,
        field: String,
        message: String,
    },
    #[error("{path}, line {line}: {message}")]
    Embedding {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid(record: usize, field: &str, message: impl ToString) -> CorpusError {
    CorpusError::Invalid {
        record,
        field: field.to_string(),
        message: message.to_string(),
    }
}

/// How a Scope annotation came about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Auto,
    AutoWeak,
    Human,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Auto => "auto",
            Provenance::AutoWeak => "auto-weak",
            Provenance::Human => "human",
        }
    }
}

/// Wire form of one target inside a dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    /// Inclusive token indices.
    pub span: [usize; 2],
    pub polarity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope_bio: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinion_spans: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Wire form of one dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub ptb: String,
    pub conllu: String,
    pub targets: Vec<TargetRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub form: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub span: Span,
    pub polarity: Polarity,
    pub scope: Option<Vec<BioTag>>,
    pub opinions: Vec<Span>,
    pub provenance: Option<Provenance>,
}

/// A sentence with both parses and its targets, all mutually aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<Token>,
    pub tree: ConstituencyTree,
    pub deps: DependencyGraph,
    pub targets: Vec<TargetInstance>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    /// Validates and converts a wire record; `index` is used in error messages.
    pub fn from_record(rec: &SentenceRecord, index: usize) -> Result<Self, CorpusError> {
        if rec.tokens.is_empty() {
            return Err(invalid(index, "tokens", "empty token list"));
        }
        let tree = parse_ptb(&rec.ptb).map_err(|e| invalid(index, "ptb", e))?;
        let deps = parse_conllu(&rec.conllu).map_err(|e| invalid(index, "conllu", e))?;
        let n = rec.tokens.len();
        let words = tree.words();
        if words.len() != n {
            return Err(invalid(
                index,
                "ptb",
                format!("tree has {} leaves but there are {n} tokens", words.len()),
            ));
        }
        if let Some(i) = (0..n).find(|&i| words[i] != rec.tokens[i]) {
            return Err(invalid(
                index,
                "ptb",
                format!("leaf {i} is {:?} but token is {:?}", words[i], rec.tokens[i]),
            ));
        }
        if deps.len() != n {
            return Err(invalid(
                index,
                "conllu",
                format!("graph has {} tokens but there are {n} tokens", deps.len()),
            ));
        }
        let mut targets = Vec::with_capacity(rec.targets.len());
        for (k, t) in rec.targets.iter().enumerate() {
            let field = |f: &str| format!("targets[{k}].{f}");
            let [a, b] = t.span;
            if a > b || b >= n {
                return Err(invalid(index, &field("span"), format!("[{a}, {b}] outside 0..{n}")));
            }
            let span = Span::from_inclusive(a, b);
            let polarity: Polarity = t
                .polarity
                .parse()
                .map_err(|e| invalid(index, &field("polarity"), e))?;
            let scope = match &t.scope_bio {
                None => None,
                Some(tags) => {
                    let tags = bio::parse_tags(tags).map_err(|e| invalid(index, &field("scope_bio"), e))?;
                    if tags.len() != n {
                        return Err(invalid(
                            index,
                            &field("scope_bio"),
                            format!("{} tags for {n} tokens", tags.len()),
                        ));
                    }
                    bio::validate(&tags).map_err(|e| invalid(index, &field("scope_bio"), e))?;
                    if let Some(i) = span.indices().find(|&i| tags[i] == BioTag::O) {
                        return Err(invalid(
                            index,
                            &field("scope_bio"),
                            bio::BioError::TargetOutside(i),
                        ));
                    }
                    Some(tags)
                }
            };
            let mut opinions = Vec::new();
            for [oa, ob] in t.opinion_spans.iter().flatten() {
                if oa > ob || *ob >= n {
                    return Err(invalid(
                        index,
                        &field("opinion_spans"),
                        format!("[{oa}, {ob}] outside 0..{n}"),
                    ));
                }
                opinions.push(Span::from_inclusive(*oa, *ob));
            }
            targets.push(TargetInstance {
                span,
                polarity,
                scope,
                opinions,
                provenance: t.provenance,
            });
        }
        let tokens = rec
            .tokens
            .iter()
            .enumerate()
            .map(|(index, form)| Token {
                form: form.clone(),
                index,
            })
            .collect();
        Ok(AnnotatedSentence {
            tokens,
            tree,
            deps,
            targets,
        })
    }

    pub fn to_record(&self) -> SentenceRecord {
        SentenceRecord {
            tokens: self.tokens.iter().map(|t| t.form.clone()).collect(),
            ptb: self.tree.to_bracketed(),
            conllu: self.deps.to_conllu(),
            targets: self
                .targets
                .iter()
                .map(|t| TargetRecord {
                    span: t.span.to_inclusive(),
                    polarity: t.polarity.as_str().to_string(),
                    scope_bio: t
                        .scope
                        .as_ref()
                        .map(|s| s.iter().map(|x| x.as_str().to_string()).collect()),
                    opinion_spans: if t.opinions.is_empty() {
                        None
                    } else {
                        Some(t.opinions.iter().map(|s| s.to_inclusive()).collect())
                    },
                    provenance: t.provenance,
                })
                .collect(),
        }
    }
}

/// Reads dataset records from either a JSON array or JSON lines.
pub fn parse_records(text: &str) -> Result<Vec<SentenceRecord>, CorpusError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<serde_json::Value> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        let mut out = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            out.push(
                serde_json::from_str(line).map_err(|e| invalid(i, "<record>", e))?,
            );
        }
        out
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).map_err(|e| invalid(i, "<record>", e)))
        .collect()
}

pub fn parse_dataset(text: &str) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    parse_records(text)?
        .iter()
        .enumerate()
        .map(|(i, r)| AnnotatedSentence::from_record(r, i))
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Serializes records as JSON lines.
pub fn records_to_jsonl(records: &[SentenceRecord]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, sentences: &[AnnotatedSentence]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let records: Vec<_> = sentences.iter().map(|s| s.to_record()).collect();
    fs::write(path, records_to_jsonl(&records)?).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
