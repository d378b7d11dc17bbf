//! Adam optimization over shuffled mini-batches of target instances.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{HgcnModel, Prepared};
use crate::nn::ModelRng;
use crate::tensor::{Gradients, ParamId, ParamSet, Tape};

/// Stream offsets so shuffling and dropout never share random draws with
/// initialization.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const DROPOUT_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads.params() {
            if !params.get(id).requires_grad() {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let data = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Statistics of one pass over the training instances. Accuracy and scope
/// matches are measured on the forward passes made during the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sum over batches of the full objective, L2 included.
    pub loss: f64,
    pub polarity_loss: f64,
    pub scope_loss: f64,
    pub l2_loss: f64,
    pub train_accuracy: f64,
    /// Fraction of instances with a gold scope whose decoded scope matched it.
    pub scope_match: f64,
    pub dev_accuracy: Option<f64>,
    /// Largest magnitude of the CRF transition gradient coming from the data
    /// terms (the L2 term excluded).
    pub crf_transition_grad: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch number, dev accuracy and parameters of the best dev epoch.
    pub best: Option<(usize, f64, ParamSet)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Instance {
    sentence: usize,
    target: usize,
}

/// Trains for `config.epochs` epochs. `on_epoch` sees each epoch's log and may
/// break out of the loop.
pub fn train<F>(model: &mut HgcnModel, data: &[AnnotatedSentence], dev: Option<&[AnnotatedSentence]>, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(&EpochLog) -> ControlFlow<()>,
{
    let cfg = model.config.clone();
    let prepared: Vec<Prepared> = data.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let mut instances: Vec<Instance> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.targets.len()).map(move |k| Instance { sentence: i, target: k }))
        .collect();
    if instances.is_empty() {
        return Err(Error::Config("training corpus has no target instances".into()));
    }
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut shuffle_rng = ModelRng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ModelRng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let use_dropout = cfg.dropout > 0.0;
    let transitions: ParamId = model.arch.crf.transitions;
    let mut report = TrainReport {
        epochs: Vec::new(),
        best: None,
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        instances.shuffle(&mut shuffle_rng);
        let mut log = EpochLog {
            epoch,
            loss: 0.0,
            polarity_loss: 0.0,
            scope_loss: 0.0,
            l2_loss: 0.0,
            train_accuracy: 0.0,
            scope_match: 0.0,
            dev_accuracy: None,
            crf_transition_grad: 0.0,
            seconds: 0.0,
        };
        let (mut seen, mut correct, mut scope_gold, mut scope_exact) = (0, 0, 0, 0);
        for batch in instances.chunks(cfg.batch_size) {
            let mut by_sentence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for inst in batch {
                by_sentence.entry(inst.sentence).or_default().push(inst.target);
            }
            let mut grads = Gradients::default();
            for (&i, targets) in &by_sentence {
                let mut tape = Tape::new();
                let rng = use_dropout.then_some(&mut dropout_rng);
                let (loss, parts) = model.sentence_loss(&mut tape, &model.params, &data[i], &prepared[i], targets, rng)?;
                if let Some(loss) = loss {
                    log.loss += tape.scalar(loss);
                    grads.merge(&tape.backward(loss)?);
                }
                log.polarity_loss += parts.polarity;
                log.scope_loss += parts.scope;
                seen += parts.instances;
                correct += parts.correct;
                scope_gold += parts.scope_gold;
                scope_exact += parts.scope_exact;
            }
            if let Some(g) = grads.get(transitions) {
                let max = g.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                log.crf_transition_grad = log.crf_transition_grad.max(max);
            }
            if cfg.lambda > 0.0 {
                let mut tape = Tape::new();
                let l2 = model.l2(&mut tape, &model.params);
                let value = tape.scalar(l2);
                log.l2_loss += value;
                log.loss += value;
                grads.merge(&tape.backward(l2)?);
            }
            adam.update(&mut model.params, &grads);
        }
        log.train_accuracy = correct as f64 / seen.max(1) as f64;
        log.scope_match = scope_exact as f64 / scope_gold.max(1) as f64;
        if let Some(dev) = dev {
            let acc = evaluate(model, dev)?.accuracy();
            log.dev_accuracy = Some(acc);
            if report.best.as_ref().is_none_or(|(_, best, _)| acc > *best) {
                report.best = Some((epoch, acc, model.params.clone()));
            }
        }
        log.seconds = started.elapsed().as_secs_f64();
        let flow = on_epoch(&log);
        report.epochs.push(log);
        if flow.is_break() {
            break;
        }
    }
    Ok(report)
}
