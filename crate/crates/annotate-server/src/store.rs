//! One JSON file per document under a store directory. Every write goes to a
//! temporary file in the same directory which is then renamed over the old
//! file, so a reader never sees a half-written document.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use hgcn::bio::{self, bio_to_spans, BioError, BioTag, Span};
use hgcn::corpus::{AnnotatedSentence, Provenance, SentenceRecord};
use hgcn::scope::{pre_annotate_target, ExclusionPolicy, Lexicon, OpinionRule};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StoreError};

/// A prior state of a target's tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Milliseconds since the Unix epoch when the state was replaced.
    pub replaced_at_ms: u64,
    pub bio: Vec<String>,
    pub provenance: Provenance,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sentence_id: usize,
    pub target: usize,
    pub bio: Vec<String>,
    pub provenance: Provenance,
    /// Incremented on every save.
    pub version: u64,
    pub history: Vec<HistoryEntry>,
}

/// The stored form of a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    pub record: SentenceRecord,
    pub annotations: Vec<AnnotationRecord>,
}

impl Document {
    /// The record with every target's scope and provenance filled in from
    /// the current annotations.
    pub fn export(&self) -> SentenceRecord {
        let mut rec = self.record.clone();
        for (t, a) in rec.targets.iter_mut().zip(&self.annotations) {
            t.scope_bio = Some(a.bio.clone());
            t.provenance = Some(a.provenance);
        }
        rec
    }

    pub fn is_complete(&self) -> bool {
        self.annotations.iter().all(|a| a.provenance == Provenance::Human)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    /// Records still carrying an automatic proposal, weak ones included.
    pub auto: usize,
    pub auto_weak: usize,
    pub human: usize,
    /// `human / total`, or 0 for an empty store.
    pub adjustment_ratio: f64,
}

/// Called after the temporary file is written and before it is renamed.
/// Returning an error aborts the write, which tests use to simulate a crash.
pub type WriteHook = Arc<dyn Fn(&Path) -> std::io::Result<()> + Send + Sync>;

pub struct Store {
    dir: PathBuf,
    lexicon: Lexicon,
    policy: ExclusionPolicy,
    rule: OpinionRule,
    /// One lock per document serializes writers of that document.
    locks: Vec<Mutex<()>>,
    hook: Mutex<Option<WriteHook>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn tag_strings(tags: &[BioTag]) -> Vec<String> {
    tags.iter().map(|t| t.as_str().to_string()).collect()
}

impl Store {
    /// Opens `dir`, creating a document file for every sentence that lacks
    /// one. New documents start from the pre-annotator's proposal unless the
    /// dataset already carries an annotation with provenance.
    pub fn open(
        dir: impl AsRef<Path>,
        sentences: &[AnnotatedSentence],
        lexicon: Lexicon,
        policy: ExclusionPolicy,
        rule: OpinionRule,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let store = Store {
            dir,
            lexicon,
            policy,
            rule,
            locks: sentences.iter().map(|_| Mutex::new(())).collect(),
            hook: Mutex::new(None),
        };
        for (id, s) in sentences.iter().enumerate() {
            let path = store.path(id);
            if path.exists() {
                let doc = store.read(id)?;
                if doc.record.tokens.len() != s.len() || doc.annotations.len() != s.targets.len() {
                    return Err(StoreError::Mismatch {
                        id,
                        message: "stored document does not match the dataset".into(),
                    });
                }
                continue;
            }
            let mut annotations = Vec::with_capacity(s.targets.len());
            for (k, t) in s.targets.iter().enumerate() {
                let (bio, provenance) = match (&t.scope, t.provenance) {
                    (Some(tags), Some(p)) => (tag_strings(tags), p),
                    _ => {
                        let pre = pre_annotate_target(s, t.span, &store.lexicon, &store.policy, store.rule)
                            .map_err(|e| StoreError::Mismatch { id, message: e.to_string() })?;
                        (tag_strings(&pre.bio), pre.provenance)
                    }
                };
                annotations.push(AnnotationRecord {
                    sentence_id: id,
                    target: k,
                    bio,
                    provenance,
                    version: 0,
                    history: Vec::new(),
                });
            }
            let doc = Document {
                id,
                record: s.to_record(),
                annotations,
            };
            store.write(&doc)?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.locks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locks.is_empty()
    }

    pub fn set_write_hook(&self, hook: Option<WriteHook>) {
        *self.hook.lock().expect("hook lock") = hook;
    }

    fn path(&self, id: usize) -> PathBuf {
        self.dir.join(format!("doc-{id:06}.json"))
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(StoreError::UnknownDocument(id));
        }
        Ok(())
    }

    /// Reads a document straight from disk.
    pub fn read(&self, id: usize) -> Result<Document> {
        self.check_id(id)?;
        let path = self.path(id);
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn write(&self, doc: &Document) -> Result<()> {
        let path = self.path(doc.id);
        let body = serde_json::to_vec_pretty(doc).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".doc-")
            .suffix(".tmp")
            .tempfile_in(&self.dir)
            .map_err(|e| StoreError::io(&self.dir, e))?;
        tmp.write_all(&body).map_err(|e| StoreError::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| StoreError::io(tmp.path(), e))?;
        let hook = self.hook.lock().expect("hook lock").clone();
        if let Some(hook) = hook {
            hook(tmp.path()).map_err(|e| StoreError::io(tmp.path(), e))?;
        }
        tmp.persist(&path).map_err(|e| StoreError::io(&path, e.error))?;
        Ok(())
    }

    fn target_span(doc: &Document, target: usize) -> Result<Span> {
        let t = doc.record.targets.get(target).ok_or(StoreError::UnknownTarget {
            id: doc.id,
            target,
        })?;
        Ok(Span::from_inclusive(t.span[0], t.span[1]))
    }

    /// Checks a proposed tag sequence against the dataset rules plus the
    /// requirement that a scope is one contiguous span over the target.
    pub fn validate_bio(doc: &Document, target: usize, bio: &[String]) -> Result<Vec<BioTag>> {
        let span = Self::target_span(doc, target)?;
        let n = doc.record.tokens.len();
        let tags = bio::parse_tags(bio)?;
        if tags.len() != n {
            return Err(BioError::Length {
                expected: n,
                actual: tags.len(),
            }
            .into());
        }
        bio::validate(&tags)?;
        if let Some(i) = span.indices().find(|&i| tags[i] == BioTag::O) {
            return Err(BioError::TargetOutside(i).into());
        }
        let spans = bio_to_spans(&tags);
        if spans.len() != 1 {
            return Err(StoreError::Invalid(format!(
                "a scope is one contiguous span, found {}",
                spans.len()
            )));
        }
        Ok(tags)
    }

    /// Saves a human annotation. With `expected_version` set, the save only
    /// succeeds if the stored record still has that version.
    pub fn save(&self, id: usize, target: usize, bio: &[String], expected_version: Option<u64>) -> Result<AnnotationRecord> {
        self.check_id(id)?;
        let _guard = self.locks[id].lock().unwrap_or_else(|e| e.into_inner());
        let mut doc = self.read(id)?;
        let tags = Self::validate_bio(&doc, target, bio)?;
        let current = &doc.annotations[target];
        if let Some(v) = expected_version {
            if v != current.version {
                return Err(StoreError::Conflict {
                    expected: v,
                    actual: current.version,
                });
            }
        }
        let prior = HistoryEntry {
            replaced_at_ms: now_ms(),
            bio: current.bio.clone(),
            provenance: current.provenance,
            version: current.version,
        };
        let rec = &mut doc.annotations[target];
        rec.history.push(prior);
        rec.bio = tag_strings(&tags);
        rec.provenance = Provenance::Human;
        rec.version += 1;
        let saved = rec.clone();
        self.write(&doc)?;
        Ok(saved)
    }

    /// Reruns the pre-annotator for one target without storing anything.
    pub fn propose(&self, id: usize, target: usize) -> Result<(Vec<String>, Provenance, Vec<Span>)> {
        let doc = self.read(id)?;
        let span = Self::target_span(&doc, target)?;
        let sentence = AnnotatedSentence::from_record(&doc.record, id).map_err(|e| StoreError::Corrupt {
            path: self.path(id).display().to_string(),
            message: e.to_string(),
        })?;
        let pre = pre_annotate_target(&sentence, span, &self.lexicon, &self.policy, self.rule)
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        Ok((tag_strings(&pre.bio), pre.provenance, pre.opinions))
    }

    pub fn documents(&self) -> Result<Vec<Document>> {
        (0..self.len()).map(|id| self.read(id)).collect()
    }

    pub fn export(&self) -> Result<Vec<SentenceRecord>> {
        Ok(self.documents()?.iter().map(Document::export).collect())
    }

    /// Counts recomputed from the files on disk.
    pub fn stats(&self) -> Result<Stats> {
        let mut s = Stats::default();
        for doc in self.documents()? {
            for a in &doc.annotations {
                s.total += 1;
                match a.provenance {
                    Provenance::Human => s.human += 1,
                    Provenance::Auto => s.auto += 1,
                    Provenance::AutoWeak => {
                        s.auto += 1;
                        s.auto_weak += 1;
                    }
                }
            }
        }
        s.adjustment_ratio = if s.total == 0 {
            0.0
        } else {
            s.human as f64 / s.total as f64
        };
        Ok(s)
    }
}
