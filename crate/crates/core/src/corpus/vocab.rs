use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, CorpusError};

pub const UNK: &str = "<unk>";

/// Word to id map. Id 0 is the unknown word; the rest follow first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    lowercase: bool,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>, lowercase: bool) -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            lowercase,
            index: HashMap::new(),
        };
        v.insert(UNK);
        for w in words {
            v.insert(&w);
        }
        v
    }

    pub fn build(sentences: &[AnnotatedSentence], lowercase: bool) -> Self {
        let mut v = Self::from_words(Vec::new(), lowercase);
        for s in sentences {
            for t in &s.tokens {
                v.insert(&t.form);
            }
        }
        v
    }

    fn key(&self, w: &str) -> String {
        if self.lowercase {
            w.to_lowercase()
        } else {
            w.to_string()
        }
    }

    fn insert(&mut self, w: &str) -> usize {
        let k = if w == UNK { w.to_string() } else { self.key(w) };
        if let Some(&id) = self.index.get(&k) {
            return id;
        }
        let id = self.words.len();
        self.index.insert(k.clone(), id);
        self.words.push(k);
        id
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn id(&self, w: &str) -> usize {
        self.index.get(&self.key(w)).copied().unwrap_or(0)
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains_key(&self.key(w))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }
}

/// Vector used for the unknown word and for vocabulary words absent from the
/// embedding file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownInit {
    #[default]
    Mean,
    Zero,
}

/// One row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub data: Vec<f64>,
    /// Vocabulary words that had no vector in the file.
    pub oov: Vec<String>,
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }
}

/// Reads `word v1 ... v_dim` lines. Words may contain spaces: the last `dim`
/// fields are the vector. A leading `count dim` header line is skipped.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    unknown: UnknownInit,
) -> Result<EmbeddingTable, CorpusError> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: pathstr.clone(),
        source,
    })?;
    let mut data = vec![0.0; vocab.len() * dim];
    let mut found = vec![false; vocab.len()];
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: pathstr.clone(),
            source,
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() < dim + 1 {
            return Err(CorpusError::Embedding {
                path: pathstr,
                line: lineno + 1,
                message: format!("expected a word and {dim} values, found {} fields", fields.len()),
            });
        }
        let split = fields.len() - dim;
        let word = fields[..split].join(" ");
        let mut vec = Vec::with_capacity(dim);
        for f in &fields[split..] {
            vec.push(f.parse::<f64>().map_err(|_| CorpusError::Embedding {
                path: pathstr.clone(),
                line: lineno + 1,
                message: format!("invalid number {f:?}"),
            })?);
        }
        for (s, v) in sum.iter_mut().zip(&vec) {
            *s += v;
        }
        count += 1;
        if vocab.contains(&word) {
            let id = vocab.id(&word);
            if !found[id] {
                found[id] = true;
                data[id * dim..(id + 1) * dim].copy_from_slice(&vec);
            }
        }
    }
    let fill: Vec<f64> = match unknown {
        UnknownInit::Mean if count > 0 => sum.iter().map(|s| s / count as f64).collect(),
        _ => vec![0.0; dim],
    };
    let mut oov = Vec::new();
    for id in 0..vocab.len() {
        if !found[id] {
            data[id * dim..(id + 1) * dim].copy_from_slice(&fill);
            if id != 0 {
                oov.push(vocab.word(id).to_string());
            }
        }
    }
    Ok(EmbeddingTable { dim, data, oov })
}
