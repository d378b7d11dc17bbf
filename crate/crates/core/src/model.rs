//! The full network: encoder, both syntactic branches, the scope tagger and
//! the polarity classifier.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::bio::{bio_to_spans, BioTag, Polarity, Span};
use crate::cgcn::{Cgcn, CgcnOutput, ConstituentGraph, LabelSet};
use crate::config::ModelConfig;
use crate::corpus::{load_embeddings, AnnotatedSentence, EmbeddingTable, Vocabulary};
use crate::crf::Crf;
use crate::dgcn::{DependencyStructure, Dgcn, RelationSet};
use crate::encoder::{BiLstm, ContextEncoder};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ModelRng};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Parameter handles for every component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub encoder: BiLstm,
    pub cgcn: Option<Cgcn>,
    pub dgcn: Option<Dgcn>,
    pub crf: Crf,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct HgcnModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub relations: RelationSet,
    pub params: ParamSet,
    pub arch: Architecture,
}

/// Parameter-independent structures derived from one sentence.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub token_ids: Vec<usize>,
    pub graph: Option<ConstituentGraph>,
    pub deps: Option<DependencyStructure>,
}

#[derive(Debug, Clone, Copy)]
pub struct SentenceForward {
    pub h: Var,
    /// Per-token syntactic representation (`n x syntactic_dim`).
    pub h_syn: Var,
    pub cgcn: Option<CgcnOutput>,
}

#[derive(Debug, Clone, Copy)]
pub struct TargetForward {
    /// Log polarity distribution (`1 x 3`).
    pub log_probs: Var,
    /// CRF emission scores (`n x 3`).
    pub emissions: Var,
}

/// Loss components of one sentence, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub polarity: f64,
    pub scope: f64,
    pub instances: usize,
    pub correct: usize,
    /// Instances with a gold scope, and how many of those decode to it exactly.
    pub scope_gold: usize,
    pub scope_exact: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopePrediction {
    pub target: Span,
    pub tags: Vec<BioTag>,
    /// The decoded scope: the tagged span containing the target, else the
    /// first tagged span.
    pub scope: Option<Span>,
    pub spans: Vec<Span>,
    pub probabilities: [f64; 3],
    pub polarity: Polarity,
}

/// Constituent-token attention weights for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub words: Vec<String>,
    pub constituents: Vec<String>,
    /// `words x constituents`.
    pub matrix: Vec<Vec<f64>>,
}

impl HgcnModel {
    /// Builds a freshly initialized model. `embeddings`, when given, must have
    /// one row per vocabulary entry.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        labels: LabelSet,
        relations: RelationSet,
        embeddings: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ModelRng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let range = config.init_range;
        let pretrained = match embeddings {
            Some(t) => {
                if t.dim != config.embedding_dim || t.rows() != vocab.len() {
                    return Err(Error::Config(format!(
                        "embedding table is {}x{}, expected {}x{}",
                        t.rows(),
                        t.dim,
                        vocab.len(),
                        config.embedding_dim
                    )));
                }
                Some(t.data.clone())
            }
            None => None,
        };
        let dim = config.model_dim();
        let encoder = BiLstm::new(
            &mut params,
            vocab.len(),
            config.embedding_dim,
            config.hidden_dim,
            pretrained,
            config.freeze_embeddings,
            range,
            config.forget_bias,
            &mut rng,
        )?;
        let cgcn = config.uses_cgcn().then(|| {
            Cgcn::new(
                &mut params,
                labels.len(),
                config.label_dim,
                dim,
                config.cgcn_layers,
                config.cgcn_layer_norm,
                config.attention_mask,
                &mut rng,
                range,
            )
        });
        let dgcn = config.uses_dgcn().then(|| {
            Dgcn::new(
                &mut params,
                relations.len(),
                config.relation_dim,
                dim,
                config.dgcn_layers,
                &mut rng,
                range,
            )
        });
        let syn = config.syntactic_dim();
        let crf_input = syn + usize::from(config.target_indicator);
        let crf = Crf::new(&mut params, crf_input, config.hard_bio, &mut rng, range);
        let classifier = Linear::new(&mut params, "classifier", syn, 3, true, &mut rng, range);
        Ok(HgcnModel {
            config,
            vocab,
            labels,
            relations,
            params,
            arch: Architecture {
                encoder,
                cgcn,
                dgcn,
                crf,
                classifier,
            },
        })
    }

    /// Builds vocabularies from `sentences` and, if a path is given, loads
    /// pretrained word vectors for them.
    pub fn for_corpus(config: ModelConfig, sentences: &[AnnotatedSentence], embeddings: Option<&Path>) -> Result<Self> {
        let vocab = Vocabulary::build(sentences, config.lowercase);
        let labels = LabelSet::build(sentences);
        let relations = RelationSet::build(sentences);
        let table = match embeddings {
            Some(p) => Some(load_embeddings(p, &vocab, config.embedding_dim, config.unknown_init)?),
            None => None,
        };
        Self::new(config, vocab, labels, relations, table.as_ref())
    }

    pub fn prepare(&self, s: &AnnotatedSentence) -> Result<Prepared> {
        if s.is_empty() {
            return Err(Error::EmptySentence);
        }
        let token_ids = s.tokens.iter().map(|t| self.vocab.id(&t.form)).collect();
        let graph = match self.arch.cgcn {
            Some(_) => Some(ConstituentGraph::build(&s.tree, &self.labels)?),
            None => None,
        };
        let deps = self
            .arch
            .dgcn
            .as_ref()
            .map(|_| DependencyStructure::build(&s.deps, &self.relations));
        Ok(Prepared { token_ids, graph, deps })
    }

    /// Encoder and syntactic branches, shared by every target of a sentence.
    pub fn forward_sentence(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        s: &AnnotatedSentence,
        prep: &Prepared,
        mut dropout: Option<&mut ModelRng>,
    ) -> Result<SentenceForward> {
        let rate = self.config.dropout;
        let mut h = self.arch.encoder.encode(tape, params, &prep.token_ids)?;
        if let Some(rng) = dropout.as_deref_mut() {
            h = nn::dropout(tape, h, rate, rng)?;
        }
        let mut parts = Vec::with_capacity(2);
        let mut cgcn_out = None;
        if let (Some(cgcn), Some(graph)) = (&self.arch.cgcn, &prep.graph) {
            let out = cgcn.forward(tape, params, &s.tree, graph, h)?;
            parts.push(out.tokens);
            cgcn_out = Some(out);
        }
        if let (Some(dgcn), Some(deps)) = (&self.arch.dgcn, &prep.deps) {
            parts.push(dgcn.propagate(tape, params, deps, h)?);
        }
        let mut h_syn = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        if let Some(rng) = dropout {
            h_syn = nn::dropout(tape, h_syn, rate, rng)?;
        }
        Ok(SentenceForward {
            h,
            h_syn,
            cgcn: cgcn_out,
        })
    }

    /// Polarity distribution and scope emissions for one target.
    pub fn forward_target(&self, tape: &mut Tape, params: &ParamSet, sf: &SentenceForward, target: Span) -> Result<TargetForward> {
        if target.is_empty() {
            return Err(Error::EmptyTarget { index: target.start });
        }
        let rows: Vec<usize> = target.indices().collect();
        let pooled = tape.mean_rows(sf.h_syn, &rows)?;
        let logits = self.arch.classifier.forward(tape, params, pooled)?;
        let log_probs = tape.log_softmax(logits)?;
        let n = tape.shape(sf.h_syn)[0];
        let input = if self.config.target_indicator {
            let ind: Vec<f64> = (0..n).map(|i| if target.contains_token(i) { 1.0 } else { 0.0 }).collect();
            let col = tape.constant(Tensor::matrix(n, 1, ind)?);
            tape.concat(&[sf.h_syn, col])?
        } else {
            sf.h_syn
        };
        let emissions = self.arch.crf.emissions(tape, params, input)?;
        Ok(TargetForward { log_probs, emissions })
    }

    /// Summed cross-entropy plus `gamma` times the summed CRF loss over the
    /// selected targets of a sentence. The L2 term is not included.
    pub fn sentence_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        s: &AnnotatedSentence,
        prep: &Prepared,
        targets: &[usize],
        dropout: Option<&mut ModelRng>,
    ) -> Result<(Option<Var>, LossParts)> {
        let sf = self.forward_sentence(tape, params, s, prep, dropout)?;
        let mut terms = Vec::new();
        let mut parts = LossParts::default();
        for &k in targets {
            let t = &s.targets[k];
            let tf = self.forward_target(tape, params, &sf, t.span)?;
            let gold = t.polarity.index();
            let lp = tape.pick(tf.log_probs, gold)?;
            let ce = tape.scale(lp, -1.0);
            parts.polarity += tape.scalar(ce);
            parts.instances += 1;
            if argmax(tape.value(tf.log_probs)) == gold {
                parts.correct += 1;
            }
            terms.push(ce);
            if let Some(scope) = &t.scope {
                parts.scope_gold += 1;
                let emissions = tape.tensor(tf.emissions);
                let (tags, _) = self.arch.crf.decode(params, &emissions);
                if decoded_scope(&tags, t.span) == bio_to_spans(scope).first().copied() {
                    parts.scope_exact += 1;
                }
                if self.config.gamma > 0.0 {
                    let nll = self.arch.crf.nll(tape, params, tf.emissions, scope)?;
                    parts.scope += tape.scalar(nll);
                    terms.push(tape.scale(nll, self.config.gamma));
                }
            }
        }
        if terms.is_empty() {
            return Ok((None, parts));
        }
        let stacked = tape.concat(&terms)?;
        Ok((Some(tape.sum(stacked)), parts))
    }

    /// `lambda * ||theta||^2` over trainable parameters. With `gamma == 0`
    /// the CRF is outside the objective, so its parameters are left out too.
    pub fn l2(&self, tape: &mut Tape, params: &ParamSet) -> Var {
        let c = &self.arch.crf;
        let mut crf = vec![c.transitions, c.start, c.end, c.emission.weight];
        crf.extend(c.emission.bias);
        let skip_crf = self.config.gamma == 0.0;
        let ids: Vec<_> = params.trainable().filter(|id| !(skip_crf && crf.contains(id))).collect();
        let vars: Vec<Var> = ids.into_iter().map(|id| tape.param(params, id)).collect();
        let sq = tape.sq_norm(&vars);
        tape.scale(sq, self.config.lambda)
    }

    /// The full objective over a batch of sentences on one tape.
    pub fn joint_loss(&self, tape: &mut Tape, params: &ParamSet, batch: &[AnnotatedSentence]) -> Result<Var> {
        let mut terms = Vec::new();
        for s in batch {
            let prep = self.prepare(s)?;
            let all: Vec<usize> = (0..s.targets.len()).collect();
            if let (Some(l), _) = self.sentence_loss(tape, params, s, &prep, &all, None)? {
                terms.push(l);
            }
        }
        terms.push(self.l2(tape, params));
        let stacked = tape.concat(&terms)?;
        Ok(tape.sum(stacked))
    }

    pub fn predict(&self, s: &AnnotatedSentence) -> Result<Vec<ScopePrediction>> {
        let spans: Vec<Span> = s.targets.iter().map(|t| t.span).collect();
        self.predict_targets(s, &spans)
    }

    /// Predictions for arbitrary target spans of a sentence.
    pub fn predict_targets(&self, s: &AnnotatedSentence, targets: &[Span]) -> Result<Vec<ScopePrediction>> {
        let prep = self.prepare(s)?;
        let mut tape = Tape::new();
        let sf = self.forward_sentence(&mut tape, &self.params, s, &prep, None)?;
        let mut out = Vec::with_capacity(targets.len());
        for &target in targets {
            let tf = self.forward_target(&mut tape, &self.params, &sf, target)?;
            let lp = tape.value(tf.log_probs);
            let probabilities = [lp[0].exp(), lp[1].exp(), lp[2].exp()];
            let polarity = Polarity::from_index(argmax(lp)).expect("three classes");
            let (tags, _) = self.arch.crf.decode(&self.params, &tape.tensor(tf.emissions));
            let spans = bio_to_spans(&tags);
            let scope = decoded_scope(&tags, target);
            out.push(ScopePrediction {
                target,
                tags,
                scope,
                spans,
                probabilities,
                polarity,
            });
        }
        Ok(out)
    }

    pub fn attention(&self, s: &AnnotatedSentence) -> Result<AttentionDump> {
        if self.arch.cgcn.is_none() {
            return Err(Error::Config("model has no constituency branch".into()));
        }
        let prep = self.prepare(s)?;
        let graph = prep.graph.as_ref().expect("prepared with constituency branch");
        let mut tape = Tape::new();
        let sf = self.forward_sentence(&mut tape, &self.params, s, &prep, None)?;
        let attn = tape.tensor(sf.cgcn.expect("constituency output").attention);
        let words = s.tokens.iter().map(|t| t.form.clone()).collect();
        let constituents = graph
            .nodes
            .iter()
            .map(|&id| {
                let n = s.tree.node(id);
                format!("{}{}", n.label, n.span)
            })
            .collect();
        let matrix = (0..attn.rows()).map(|r| attn.row(r).to_vec()).collect();
        Ok(AttentionDump {
            words,
            constituents,
            matrix,
        })
    }
}

/// The tagged span containing the start of `target`, else the first one.
pub fn decoded_scope(tags: &[BioTag], target: Span) -> Option<Span> {
    let spans = bio_to_spans(tags);
    spans
        .iter()
        .find(|sp| sp.contains_token(target.start))
        .or(spans.first())
        .copied()
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Branches;
    use crate::corpus::parse_dataset;
    use crate::tensor::{grad_check, GradCheckOptions};

    pub(crate) const SAMPLE: &str = r#"{"tokens":["Great","food","but","the","service","was","dreadful","!"],"ptb":"(ROOT (S (NP (JJ Great) (NN food)) (CC but) (S (NP (DT the) (NN service)) (VP (VBD was) (ADJP (JJ dreadful)))) (. !)))","conllu":"1\tGreat\t_\tJJ\t_\t_\t2\tamod\t_\t_\n2\tfood\t_\tNN\t_\t_\t0\troot\t_\t_\n3\tbut\t_\tCC\t_\t_\t7\tcc\t_\t_\n4\tthe\t_\tDT\t_\t_\t5\tdet\t_\t_\n5\tservice\t_\tNN\t_\t_\t7\tnsubj\t_\t_\n6\twas\t_\tVBD\t_\t_\t7\tcop\t_\t_\n7\tdreadful\t_\tJJ\t_\t_\t2\tconj\t_\t_\n8\t!\t_\t.\t_\t_\t2\tpunct\t_\t_","targets":[{"span":[1,1],"polarity":"positive","scope_bio":["B","I","O","O","O","O","O","O"]},{"span":[4,4],"polarity":"negative","scope_bio":["O","O","O","B","I","I","I","O"]}]}"#;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 3,
            hidden_dim: 2,
            label_dim: 2,
            relation_dim: 2,
            init_range: 0.5,
            freeze_embeddings: false,
            gamma: 0.5,
            lambda: 1e-3,
            ..Default::default()
        }
    }

    fn sample() -> Vec<AnnotatedSentence> {
        parse_dataset(SAMPLE).unwrap()
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let data = sample();
        let mut model = HgcnModel::for_corpus(ModelConfig::default(), &data, None).unwrap();
        let c = model.arch.classifier;
        model.params.get_mut(c.weight).data_mut().iter_mut().for_each(|x| *x = 0.0);
        model.params.get_mut(c.bias.unwrap()).data_mut().iter_mut().for_each(|x| *x = 0.0);
        for p in model.predict(&data[0]).unwrap() {
            for q in p.probabilities {
                assert!((q - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let config = ModelConfig {
            gamma: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let mut model = HgcnModel::for_corpus(config, &data, None).unwrap();
        model.params.get_mut(c.weight).data_mut().iter_mut().for_each(|x| *x = 0.0);
        model.params.get_mut(c.bias.unwrap()).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::new();
        let one = vec![{
            let mut s = data[0].clone();
            s.targets.truncate(1);
            s
        }];
        let loss = model.joint_loss(&mut tape, &model.params, &one).unwrap();
        assert!((tape.scalar(loss) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let data = sample();
        let model = HgcnModel::for_corpus(ModelConfig::default(), &data, None).unwrap();
        let preds = model.predict(&data[0]).unwrap();
        assert_eq!(preds.len(), 2);
        for p in preds {
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p.tags.len(), 8);
        }
    }

    #[test]
    fn single_token_target_pools_its_row() {
        let data = sample();
        let model = HgcnModel::for_corpus(ModelConfig::default(), &data, None).unwrap();
        let prep = model.prepare(&data[0]).unwrap();
        let mut tape = Tape::new();
        let sf = model.forward_sentence(&mut tape, &model.params, &data[0], &prep, None).unwrap();
        assert_eq!(tape.shape(sf.h_syn), &[8, 400]);
        let pooled = tape.mean_rows(sf.h_syn, &[4]).unwrap();
        assert_eq!(tape.value(pooled), tape.tensor(sf.h_syn).row(4));
    }

    #[test]
    fn single_branch_halves_width() {
        let data = sample();
        for branches in [Branches::CgcnOnly, Branches::DgcnOnly] {
            let config = ModelConfig {
                branches,
                ..tiny_config()
            };
            let model = HgcnModel::for_corpus(config, &data, None).unwrap();
            let prep = model.prepare(&data[0]).unwrap();
            let mut tape = Tape::new();
            let sf = model.forward_sentence(&mut tape, &model.params, &data[0], &prep, None).unwrap();
            assert_eq!(tape.shape(sf.h_syn), &[8, 4]);
        }
    }

    #[test]
    fn crf_gets_gradient_only_with_scope_weight() {
        let data = sample();
        for (gamma, expect_nonzero) in [(0.0, false), (0.03, true)] {
            let config = ModelConfig {
                gamma,
                lambda: 0.0,
                ..tiny_config()
            };
            let model = HgcnModel::for_corpus(config, &data, None).unwrap();
            let mut tape = Tape::new();
            let loss = model.joint_loss(&mut tape, &model.params, &data).unwrap();
            let grads = tape.backward(loss).unwrap();
            let tr = grads.get(model.arch.crf.transitions).unwrap_or(&[]);
            assert_eq!(tr.iter().any(|&x| x != 0.0), expect_nonzero);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let data = sample();
        let model = HgcnModel::for_corpus(tiny_config(), &data, None).unwrap();
        assert!(matches!(
            model.predict_targets(&data[0], &[Span::new(2, 2)]),
            Err(Error::EmptyTarget { .. })
        ));
    }

    #[test]
    fn attention_dump_has_one_row_per_word() {
        let data = sample();
        let model = HgcnModel::for_corpus(tiny_config(), &data, None).unwrap();
        let dump = model.attention(&data[0]).unwrap();
        assert_eq!(dump.words.len(), 8);
        assert_eq!(dump.constituents.len(), 7);
        assert_eq!(dump.constituents[0], "ROOT[0, 8)");
        assert!(dump.matrix.iter().all(|r| r.len() == 7));
    }

    #[test]
    fn joint_loss_passes_gradient_check() {
        let data = sample();
        let model = HgcnModel::for_corpus(tiny_config(), &data, None).unwrap();
        let mut params = model.params.clone();
        let report = grad_check(
            &mut params,
            |tape: &mut Tape, p: &ParamSet| model.joint_loss(tape, p, &data),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), model.params.len());
    }
}
