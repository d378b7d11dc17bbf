//! Scope selection: the smallest constituent covering a target and its
//! opinion words, measured in leaves that are not punctuation or otherwise
//! excluded material.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bio::{self, BioError, BioTag, Span};
use crate::corpus::{AnnotatedSentence, ConstituencyTree, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScopeError {
    #[error("span {span} is empty or exceeds sentence length {len}")]
    OutOfBounds { span: Span, len: usize },
    #[error(transparent)]
    Bio(#[from] BioError),
    #[error("cannot read lexicon {path}: {message}")]
    Lexicon { path: String, message: String },
}

/// Labels whose leaves do not count towards a constituent's size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionPolicy {
    labels: BTreeSet<String>,
}

pub const PUNCTUATION_TAGS: [&str; 7] = [".", ",", ":", "''", "``", "-LRB-", "-RRB-"];

impl Default for ExclusionPolicy {
    fn default() -> Self {
        let mut labels: BTreeSet<String> = PUNCTUATION_TAGS.iter().map(|s| s.to_string()).collect();
        labels.insert("PRN".into());
        ExclusionPolicy { labels }
    }
}

impl ExclusionPolicy {
    pub fn none() -> Self {
        ExclusionPolicy {
            labels: BTreeSet::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.labels.insert(label.into());
        self
    }

    pub fn excludes(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeSpan {
    pub span: Span,
    pub constituent: usize,
    pub effective_count: usize,
}

fn check_span(span: Span, n: usize) -> Result<(), ScopeError> {
    if span.is_empty() || span.end > n {
        return Err(ScopeError::OutOfBounds { span, len: n });
    }
    Ok(())
}

/// Constituents whose leaves cover the target and every opinion span, in
/// pre-order (outermost first).
pub fn candidate_set(
    tree: &ConstituencyTree,
    target: Span,
    opinions: &[Span],
) -> Result<Vec<usize>, ScopeError> {
    let n = tree.num_tokens();
    check_span(target, n)?;
    for o in opinions {
        check_span(*o, n)?;
    }
    Ok(tree
        .constituents()
        .into_iter()
        .filter(|&c| {
            let s = tree.node(c).span;
            s.contains(&target) && opinions.iter().all(|o| s.contains(o))
        })
        .collect())
}

/// Leaves under `node` that are not governed by an excluded label. Labels are
/// checked on the path strictly below `node`, down to the preterminal.
pub fn effective_leaf_count(tree: &ConstituencyTree, node: usize, policy: &ExclusionPolicy) -> usize {
    fn count(tree: &ConstituencyTree, id: usize, policy: &ExclusionPolicy) -> usize {
        let n = tree.node(id);
        if n.is_terminal() {
            return 1;
        }
        if policy.excludes(&n.label) {
            return 0;
        }
        n.children.iter().map(|&c| count(tree, c, policy)).sum()
    }
    let n = tree.node(node);
    if n.is_terminal() {
        return 1;
    }
    n.children.iter().map(|&c| count(tree, c, policy)).sum()
}

/// The candidate with the fewest effective leaves. Ties go to the smaller raw
/// span, then the deeper node, then the leftmost.
pub fn select_scope(
    tree: &ConstituencyTree,
    target: Span,
    opinions: &[Span],
    policy: &ExclusionPolicy,
) -> Result<ScopeSpan, ScopeError> {
    let candidates = candidate_set(tree, target, opinions)?;
    let best = candidates
        .into_iter()
        .map(|c| {
            let node = tree.node(c);
            let count = effective_leaf_count(tree, c, policy);
            ((count, node.span.len(), std::cmp::Reverse(node.depth), node.span.start), c)
        })
        .min_by_key(|(key, _)| *key)
        .expect("the root covers every span");
    let (key, c) = best;
    Ok(ScopeSpan {
        span: tree.node(c).span,
        constituent: c,
        effective_count: key.0,
    })
}

pub fn to_bio(scope: &ScopeSpan, n: usize) -> Result<Vec<BioTag>, ScopeError> {
    Ok(bio::span_to_bio(scope.span, n)?)
}

/// Opinion-word list, matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Lexicon {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScopeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ScopeError::Lexicon {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::new(text.lines().filter(|l| !l.trim_start().starts_with('#'))))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// How lexicon hits become opinion spans for a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpinionRule {
    /// The single hit closest to the target.
    #[default]
    Nearest,
    /// Every hit inside the smallest clause containing the target; falls back
    /// to the nearest hit when the clause holds none.
    Clause,
}

pub const CLAUSE_LABELS: [&str; 5] = ["S", "SBAR", "SINV", "SQ", "SBARQ"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreAnnotation {
    pub scope: ScopeSpan,
    pub bio: Vec<BioTag>,
    pub opinions: Vec<Span>,
    pub provenance: Provenance,
}

fn distance(target: Span, i: usize) -> usize {
    if i < target.start {
        target.start - i
    } else {
        i + 1 - target.end
    }
}

fn minimal_clause(tree: &ConstituencyTree, target: Span) -> Option<Span> {
    tree.constituents()
        .into_iter()
        .map(|c| tree.node(c))
        .filter(|n| n.span.contains(&target) && CLAUSE_LABELS.contains(&n.label.as_str()))
        .map(|n| n.span)
        .min_by_key(|s| s.len())
}

/// Proposes a Scope for one target from lexicon hits.
pub fn pre_annotate_target(
    sentence: &AnnotatedSentence,
    target: Span,
    lexicon: &Lexicon,
    policy: &ExclusionPolicy,
    rule: OpinionRule,
) -> Result<PreAnnotation, ScopeError> {
    let n = sentence.len();
    check_span(target, n)?;
    let hits: Vec<usize> = sentence
        .tokens
        .iter()
        .filter(|t| !target.contains_token(t.index) && lexicon.contains(&t.form))
        .map(|t| t.index)
        .collect();
    let nearest = hits
        .iter()
        .copied()
        .min_by_key(|&i| (distance(target, i), i))
        .map(|i| vec![Span::new(i, i + 1)])
        .unwrap_or_default();
    let opinions = match rule {
        OpinionRule::Nearest => nearest,
        OpinionRule::Clause => {
            let in_clause: Vec<Span> = minimal_clause(&sentence.tree, target)
                .map(|clause| {
                    hits.iter()
                        .filter(|&&i| clause.contains_token(i))
                        .map(|&i| Span::new(i, i + 1))
                        .collect()
                })
                .unwrap_or_default();
            if in_clause.is_empty() {
                nearest
            } else {
                in_clause
            }
        }
    };
    let provenance = if opinions.is_empty() {
        Provenance::AutoWeak
    } else {
        Provenance::Auto
    };
    let scope = select_scope(&sentence.tree, target, &opinions, policy)?;
    let bio = to_bio(&scope, n)?;
    Ok(PreAnnotation {
        scope,
        bio,
        opinions,
        provenance,
    })
}

/// Pre-annotates every target of a sentence.
pub fn pre_annotate(
    sentence: &AnnotatedSentence,
    lexicon: &Lexicon,
    policy: &ExclusionPolicy,
    rule: OpinionRule,
) -> Result<Vec<PreAnnotation>, ScopeError> {
    sentence
        .targets
        .iter()
        .map(|t| pre_annotate_target(sentence, t.span, lexicon, policy, rule))
        .collect()
}

/// Fraction of automatic proposals whose final tags differ.
pub fn adjustment_ratio(auto: &[Vec<BioTag>], finals: &[Vec<BioTag>]) -> f64 {
    let total = auto.len().min(finals.len());
    if total == 0 {
        return 0.0;
    }
    let changed = auto.iter().zip(finals).filter(|(a, f)| a != f).count();
    changed as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_ptb, SentenceRecord, TargetRecord};
    use BioTag::*;

    const EXAMPLE_PTB: &str = "(ROOT (S (NP (JJ Great) (NN food)) (CC but) (S (NP (DT the) (NN service)) (VP (VBD was) (ADJP (JJ dreadful)))) (. !)))";

    fn example_sentence() -> AnnotatedSentence {
        let rec = SentenceRecord {
            tokens: "Great food but the service was dreadful !"
                .split(' ')
                .map(String::from)
                .collect(),
            ptb: EXAMPLE_PTB.into(),
            conllu: "1 Great _ _ _ _ 2 amod\n2 food _ _ _ _ 0 root\n3 but _ _ _ _ 7 cc\n4 the _ _ _ _ 5 det\n5 service _ _ _ _ 7 nsubj\n6 was _ _ _ _ 7 cop\n7 dreadful _ _ _ _ 2 conj\n8 ! _ _ _ _ 2 punct\n".into(),
            targets: vec![
                TargetRecord {
                    span: [1, 1],
                    polarity: "positive".into(),
                    scope_bio: None,
                    opinion_spans: None,
                    provenance: None,
                },
                TargetRecord {
                    span: [4, 4],
                    polarity: "negative".into(),
                    scope_bio: None,
                    opinion_spans: None,
                    provenance: None,
                },
            ],
        };
        AnnotatedSentence::from_record(&rec, 0).unwrap()
    }

    #[test]
    fn candidates_are_covering_ancestors() {
        let t = parse_ptb(EXAMPLE_PTB).unwrap();
        let c = candidate_set(&t, Span::new(1, 2), &[Span::new(0, 1)]).unwrap();
        let labels: Vec<(&str, Span)> = c.iter().map(|&i| (t.node(i).label.as_str(), t.node(i).span)).collect();
        assert_eq!(
            labels,
            vec![("ROOT", Span::new(0, 8)), ("S", Span::new(0, 8)), ("NP", Span::new(0, 2))]
        );
        let c = candidate_set(&t, Span::new(0, 8), &[]).unwrap();
        assert_eq!(c.len(), 2, "ROOT and its unary S child both span the sentence");
        let bare = parse_ptb("(S (NP (JJ Great) (NN food)) (. !))").unwrap();
        assert_eq!(candidate_set(&bare, Span::new(0, 3), &[]).unwrap(), vec![bare.root()]);
        assert!(candidate_set(&t, Span::new(7, 9), &[]).is_err());
    }

    #[test]
    fn punctuation_and_parentheticals_do_not_count() {
        let t = parse_ptb("(S (NP (JJ Great) (NN food)) (. .))").unwrap();
        assert_eq!(effective_leaf_count(&t, t.root(), &ExclusionPolicy::default()), 2);
        assert_eq!(effective_leaf_count(&t, t.root(), &ExclusionPolicy::none()), 3);
        let np = t.constituents()[1];
        assert_eq!(effective_leaf_count(&t, np, &ExclusionPolicy::default()), 2);

        let t = parse_ptb("(S (NP (NN pizza)) (PRN (-LRB- -LRB-) (NP (NN crust)) (-RRB- -RRB-)) (VP (VBD was) (ADJP (JJ cold))))").unwrap();
        assert_eq!(effective_leaf_count(&t, t.root(), &ExclusionPolicy::default()), 3);
    }

    #[test]
    fn appendix_example() {
        let s = example_sentence();
        let p = ExclusionPolicy::default();
        let food = select_scope(&s.tree, Span::new(1, 2), &[Span::new(0, 1)], &p).unwrap();
        assert_eq!(food.span, Span::new(0, 2));
        assert_eq!(to_bio(&food, 8).unwrap(), vec![B, I, O, O, O, O, O, O]);
        let service = select_scope(&s.tree, Span::new(4, 5), &[Span::new(6, 7)], &p).unwrap();
        assert_eq!(service.span, Span::new(3, 7));
        assert_eq!(s.tree.node(service.constituent).label, "S");
    }

    #[test]
    fn equal_counts_prefer_deeper_node() {
        // Unary chain: NP and its parent S cover the same leaves.
        let t = parse_ptb("(ROOT (S (NP (JJ good) (NN tea))) (. .))").unwrap();
        let s = select_scope(&t, Span::new(1, 2), &[Span::new(0, 1)], &ExclusionPolicy::default()).unwrap();
        assert_eq!(t.node(s.constituent).label, "NP");
    }

    #[test]
    fn pre_annotation_with_lexicon() {
        let s = example_sentence();
        let lex = Lexicon::new(["great", "dreadful"]);
        let out = pre_annotate(&s, &lex, &ExclusionPolicy::default(), OpinionRule::Nearest).unwrap();
        assert_eq!(out[0].bio, vec![B, I, O, O, O, O, O, O]);
        assert_eq!(out[0].provenance, Provenance::Auto);
        assert_eq!(out[1].scope.span, Span::new(3, 7));
        let clause = pre_annotate(&s, &lex, &ExclusionPolicy::default(), OpinionRule::Clause).unwrap();
        assert_eq!(clause[1].scope.span, Span::new(3, 7));
    }

    #[test]
    fn no_hits_falls_back_weak() {
        let s = example_sentence();
        let out = pre_annotate(&s, &Lexicon::default(), &ExclusionPolicy::default(), OpinionRule::Nearest).unwrap();
        assert_eq!(out[0].provenance, Provenance::AutoWeak);
        assert_eq!(out[0].scope.span, Span::new(0, 2));
        assert_eq!(out[1].scope.span, Span::new(3, 5));
    }

    #[test]
    fn adjustment_ratio_counts_changes() {
        let a = vec![vec![B, O], vec![B, I], vec![O, B], vec![B, O]];
        let f = vec![vec![B, O], vec![B, O], vec![O, B], vec![B, I]];
        assert_eq!(adjustment_ratio(&a, &f), 0.5);
    }
}
