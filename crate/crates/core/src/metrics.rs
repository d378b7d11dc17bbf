//! Polarity accuracy, accuracy by targets-per-sentence, and exact-match
//! scope precision/recall/F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bio::{bio_to_spans, Polarity};
use crate::corpus::AnnotatedSentence;
use crate::error::Result;
use crate::model::{HgcnModel, ScopePrediction};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub instances: usize,
    pub correct: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.instances == 0 {
            0.0
        } else {
            self.correct as f64 / self.instances as f64
        }
    }

    fn add(&mut self, correct: bool) {
        self.instances += 1;
        self.correct += usize::from(correct);
    }
}

/// Exact span matches. A prediction counts only when it equals the gold
/// scope boundary for boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Accuracy,
    /// Keyed by the number of targets in the sentence.
    pub by_target_count: BTreeMap<usize, Accuracy>,
    pub scope: SpanCounts,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.value()
    }

    /// Human-readable summary, one item per line.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "accuracy {:.4} ({}/{})\n",
            self.accuracy(),
            self.overall.correct,
            self.overall.instances
        );
        for (k, a) in &self.by_target_count {
            out += &format!("  {k} target(s): {:.4} ({}/{})\n", a.value(), a.correct, a.instances);
        }
        out += &format!(
            "scope exact match: P {:.4} R {:.4} F1 {:.4}\n",
            self.scope.precision(),
            self.scope.recall(),
            self.scope.f1()
        );
        out
    }
}

/// Scores predictions against gold annotations. `predictions[i][k]` belongs to
/// target `k` of sentence `i`.
pub fn score_predictions(sentences: &[AnnotatedSentence], predictions: &[Vec<ScopePrediction>]) -> EvalReport {
    let mut report = EvalReport::default();
    for (s, preds) in sentences.iter().zip(predictions) {
        let bucket = s.targets.len();
        for (t, p) in s.targets.iter().zip(preds) {
            let correct = p.polarity == t.polarity;
            report.overall.add(correct);
            report.by_target_count.entry(bucket).or_default().add(correct);
            if let Some(gold) = &t.scope {
                let gold = bio_to_spans(gold).first().copied();
                report.scope.gold += usize::from(gold.is_some());
                if let Some(pred) = p.scope {
                    report.scope.predicted += 1;
                    report.scope.matched += usize::from(Some(pred) == gold);
                }
            }
        }
    }
    report
}

pub fn evaluate(model: &HgcnModel, sentences: &[AnnotatedSentence]) -> Result<EvalReport> {
    let predictions = sentences
        .iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_predictions(sentences, &predictions))
}

/// The most frequent gold polarity, ties going to the earlier class.
pub fn majority_polarity(sentences: &[AnnotatedSentence]) -> Polarity {
    let mut counts = [0usize; 3];
    for t in sentences.iter().flat_map(|s| &s.targets) {
        counts[t.polarity.index()] += 1;
    }
    let mut best = 0;
    for i in 1..3 {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    Polarity::from_index(best).expect("three classes")
}
