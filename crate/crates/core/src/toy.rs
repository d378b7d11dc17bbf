//! Seeded generator of small, fully parsed review sentences with gold
//! polarities and scopes.
//!
//! Each target noun lives in its own clause together with exactly one opinion
//! adjective, so its scope is that clause. Clauses are joined by conjunctions
//! and commas and the sentence ends in punctuation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};

use crate::bio::{Polarity, Span};
use crate::corpus::{SentenceRecord, TargetRecord};
use crate::nn::ModelRng;
use crate::scope::{select_scope, to_bio, ExclusionPolicy};

pub const NOUNS: [&str; 16] = [
    "food", "service", "staff", "pizza", "waiter", "decor", "menu", "price", "wine", "dessert", "ambience", "music",
    "pasta", "sushi", "bread", "coffee",
];
pub const POSITIVE: [&str; 10] = [
    "great", "delicious", "friendly", "excellent", "amazing", "lovely", "fresh", "superb", "tasty", "perfect",
];
pub const NEGATIVE: [&str; 10] = [
    "dreadful", "awful", "rude", "terrible", "bland", "slow", "horrible", "stale", "poor", "cold",
];
const INTENSIFIERS: [&str; 3] = ["very", "really", "quite"];
const COPULAS: [&str; 2] = ["was", "is"];

/// Every opinion adjective the generator uses, for lexicon-driven tools.
pub fn lexicon_words() -> Vec<&'static str> {
    POSITIVE.iter().chain(NEGATIVE.iter()).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub size: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    pub seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            size: 50,
            min_targets: 2,
            max_targets: 2,
            seed: 7,
        }
    }
}

struct Word {
    form: String,
    tag: &'static str,
    head: Option<usize>,
    rel: &'static str,
}

struct Clause {
    ptb: String,
    target: usize,
    opinion: usize,
    head: usize,
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Appends one clause to `words` and returns its bracketing and key indices.
fn clause(rng: &mut ModelRng, words: &mut Vec<Word>, noun: &str, adjective: &str) -> Clause {
    let base = words.len();
    let intensifier = rng.random_bool(0.3).then(|| *INTENSIFIERS.choose(rng).expect("nonempty"));
    if rng.random_bool(0.5) {
        // Adjective directly before the noun.
        let mut ptb = String::from("(NP ");
        let mut adj_at = base;
        if let Some(i) = intensifier {
            words.push(Word { form: i.into(), tag: "RB", head: Some(base + 1), rel: "advmod" });
            ptb += &format!("(ADJP (RB {i}) (JJ {adjective})) ");
            adj_at += 1;
        } else {
            ptb += &format!("(JJ {adjective}) ");
        }
        words.push(Word { form: adjective.into(), tag: "JJ", head: Some(adj_at + 1), rel: "amod" });
        words.push(Word { form: noun.into(), tag: "NN", head: None, rel: "root" });
        ptb += &format!("(NN {noun}))");
        Clause { ptb, target: adj_at + 1, opinion: adj_at, head: adj_at + 1 }
    } else {
        // "the NOUN was (very) ADJ"
        let cop = *COPULAS.choose(rng).expect("nonempty");
        let adj_at = base + 3 + usize::from(intensifier.is_some());
        words.push(Word { form: "the".into(), tag: "DT", head: Some(base + 1), rel: "det" });
        words.push(Word { form: noun.into(), tag: "NN", head: Some(adj_at), rel: "nsubj" });
        words.push(Word { form: cop.into(), tag: "VBD", head: Some(adj_at), rel: "cop" });
        let adjp = match intensifier {
            Some(i) => {
                words.push(Word { form: i.into(), tag: "RB", head: Some(adj_at), rel: "advmod" });
                format!("(ADJP (RB {i}) (JJ {adjective}))")
            }
            None => format!("(ADJP (JJ {adjective}))"),
        };
        words.push(Word { form: adjective.into(), tag: "JJ", head: None, rel: "root" });
        let ptb = format!("(S (NP (DT the) (NN {noun})) (VP (VBD {cop}) {adjp}))");
        Clause { ptb, target: base + 1, opinion: adj_at, head: adj_at }
    }
}

/// Polarities for `k` targets. With two or more targets both polarities occur.
fn polarities(rng: &mut ModelRng, k: usize) -> Vec<Polarity> {
    let mut out: Vec<Polarity> = (0..k)
        .map(|_| if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative })
        .collect();
    if k >= 2 && out.iter().all(|&p| p == out[0]) {
        let i = rng.random_range(0..k);
        out[i] = match out[0] {
            Polarity::Positive => Polarity::Negative,
            _ => Polarity::Positive,
        };
    }
    out
}

fn sentence(rng: &mut ModelRng, k: usize) -> SentenceRecord {
    let nouns: Vec<&str> = NOUNS.choose_multiple(rng, k).copied().collect();
    let pols = polarities(rng, k);
    let mut words: Vec<Word> = Vec::new();
    let mut clauses: Vec<Clause> = Vec::new();
    let mut pieces: Vec<String> = Vec::new();
    let mut connectors: Vec<usize> = Vec::new();
    for (c, (&noun, &pol)) in nouns.iter().zip(&pols).enumerate() {
        if c > 0 {
            let (form, tag) = if c + 1 == k {
                (if rng.random_bool(0.5) { "but" } else { "and" }, "CC")
            } else {
                (",", ",")
            };
            connectors.push(words.len());
            words.push(Word { form: form.into(), tag, head: None, rel: if tag == "CC" { "cc" } else { "punct" } });
            pieces.push(format!("({tag} {form})"));
        }
        let pool: &[&str] = if pol == Polarity::Positive { &POSITIVE } else { &NEGATIVE };
        let adjective = *pool.choose(rng).expect("nonempty");
        let cl = clause(rng, &mut words, noun, adjective);
        pieces.push(cl.ptb.clone());
        clauses.push(cl);
    }
    let end = if rng.random_bool(0.5) { "." } else { "!" };
    let end_at = words.len();
    words.push(Word { form: end.into(), tag: ".", head: None, rel: "punct" });
    pieces.push(format!("(. {end})"));

    // The first clause heads the sentence; later clauses attach to it.
    let root = clauses[0].head;
    for cl in &clauses[1..] {
        words[cl.head].head = Some(root);
        words[cl.head].rel = "conj";
    }
    for (j, &at) in connectors.iter().enumerate() {
        words[at].head = Some(if words[at].tag == "CC" { clauses[j + 1].head } else { root });
    }
    words[end_at].head = Some(root);
    words[0].form = capitalize(&words[0].form);

    let tokens: Vec<String> = words.iter().map(|w| w.form.clone()).collect();
    let ptb = format!("(ROOT (S {}))", pieces.join(" "));
    // Capitalization must match the tokens.
    let ptb = ptb.replacen(&format!(" {})", words[0].form.to_lowercase()), &format!(" {})", words[0].form), 1);
    let conllu = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let head = w.head.map_or(0, |h| h + 1);
            format!("{}\t{}\t_\t{}\t{}\t_\t{}\t{}\t_\t_", i + 1, w.form, w.tag, w.tag, head, w.rel)
        })
        .collect::<Vec<_>>()
        .join("\n");

    let tree = crate::corpus::parse_ptb(&ptb).expect("generated tree parses");
    let targets = clauses
        .iter()
        .zip(&pols)
        .map(|(cl, pol)| {
            let target = Span::new(cl.target, cl.target + 1);
            let opinion = Span::new(cl.opinion, cl.opinion + 1);
            let scope = select_scope(&tree, target, &[opinion], &ExclusionPolicy::default()).expect("valid spans");
            let bio = to_bio(&scope, tokens.len()).expect("scope inside sentence");
            TargetRecord {
                span: target.to_inclusive(),
                polarity: pol.as_str().to_string(),
                scope_bio: Some(bio.iter().map(|t| t.as_str().to_string()).collect()),
                opinion_spans: Some(vec![opinion.to_inclusive()]),
                provenance: None,
            }
        })
        .collect();
    SentenceRecord {
        tokens,
        ptb,
        conllu,
        targets,
    }
}

/// Generates `size` sentences. The same options always give the same records.
pub fn generate(opts: &ToyOptions) -> Vec<SentenceRecord> {
    let mut rng = ModelRng::seed_from_u64(opts.seed);
    let lo = opts.min_targets.max(1);
    let hi = opts.max_targets.max(lo);
    let mut out: Vec<SentenceRecord> = (0..opts.size)
        .map(|_| {
            let k = rng.random_range(lo..=hi);
            sentence(&mut rng, k)
        })
        .collect();
    // Bucket sizes stay balanced regardless of draw order.
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bio::bio_to_spans;
    use crate::corpus::{records_to_jsonl, AnnotatedSentence};

    #[test]
    fn records_validate_and_scopes_are_clauses() {
        let opts = ToyOptions {
            size: 300,
            min_targets: 1,
            max_targets: 4,
            seed: 3,
        };
        for (i, rec) in generate(&opts).iter().enumerate() {
            let s = AnnotatedSentence::from_record(rec, i).unwrap();
            let mut scopes = Vec::new();
            for t in &s.targets {
                let spans = bio_to_spans(t.scope.as_ref().unwrap());
                assert_eq!(spans.len(), 1);
                let scope = spans[0];
                assert!(scope.contains(&t.span));
                assert!(scope.contains(&t.opinions[0]));
                // With several clauses a scope never reaches the sentence level.
                if s.targets.len() > 1 {
                    assert!(scope.len() < s.len() - 1);
                }
                scopes.push(scope);
            }
            for w in scopes.windows(2) {
                assert!(w[0].end <= w[1].start);
            }
            if s.targets.len() >= 2 {
                assert!(s.targets.iter().any(|t| t.polarity == Polarity::Positive));
                assert!(s.targets.iter().any(|t| t.polarity == Polarity::Negative));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = records_to_jsonl(&generate(&ToyOptions::default())).unwrap();
        let b = records_to_jsonl(&generate(&ToyOptions::default())).unwrap();
        assert_eq!(a, b);
        let c = records_to_jsonl(&generate(&ToyOptions { seed: 8, ..Default::default() })).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_corpus_has_two_opposite_targets() {
        for rec in generate(&ToyOptions::default()) {
            assert_eq!(rec.targets.len(), 2);
            assert_ne!(rec.targets[0].polarity, rec.targets[1].polarity);
        }
    }
}
