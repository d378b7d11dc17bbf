//! Constituency GCN: constituent composition, graph propagation and masked
//! constituent-to-token attention.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::AttentionMask;
use crate::corpus::{AnnotatedSentence, ConstituencyTree};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ModelRng};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Closed inventory of constituent and part-of-speech labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn from_labels(labels: Vec<String>) -> Self {
        let mut set = LabelSet {
            labels,
            index: HashMap::new(),
        };
        set.reindex();
        set
    }

    /// Every non-terminal label in the corpus, in order of first appearance.
    pub fn build(sentences: &[AnnotatedSentence]) -> Self {
        let mut labels = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in sentences {
            for id in s.tree.preorder() {
                let n = s.tree.node(id);
                if !n.is_terminal() && seen.insert(n.label.clone()) {
                    labels.push(n.label.clone());
                }
            }
        }
        Self::from_labels(labels)
    }

    pub fn reindex(&mut self) {
        self.index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One summand of a constituent's initial representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// Projected label embedding of a tree node.
    Label(usize),
    /// Contextual row of a token.
    Word(usize),
}

/// Structure of one sentence's constituency graph, independent of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstituentGraph {
    /// Tree node id of each graph node, in pre-order.
    pub nodes: Vec<usize>,
    /// Binary adjacency with self-loops, row-major `m x m`.
    pub adjacency: Vec<f64>,
    /// Terms averaged into each node's initial representation.
    pub terms: Vec<Vec<Term>>,
    /// Label id of every non-terminal tree node that appears in a term, with
    /// the tree node id.
    label_rows: Vec<(usize, usize)>,
    num_tokens: usize,
}

impl ConstituentGraph {
    pub fn build(tree: &ConstituencyTree, labels: &LabelSet) -> Result<Self> {
        let nodes = tree.constituents();
        let m = nodes.len();
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut adjacency = vec![0.0; m * m];
        let mut terms = Vec::with_capacity(m);
        let mut label_rows = Vec::new();
        let mut row_of: HashMap<usize, usize> = HashMap::new();
        let mut label_term = |node: usize, label_rows: &mut Vec<(usize, usize)>| -> Result<Term> {
            if !row_of.contains_key(&node) {
                let id = labels.id(&tree.node(node).label)?;
                row_of.insert(node, label_rows.len());
                label_rows.push((id, node));
            }
            Ok(Term::Label(node))
        };
        for (i, &t) in nodes.iter().enumerate() {
            adjacency[i * m + i] = 1.0;
            let node = tree.node(t);
            let mut ts = vec![label_term(t, &mut label_rows)?];
            for &c in &node.children {
                let child = tree.node(c);
                if let Some(tok) = child.token {
                    ts.push(Term::Word(tok));
                } else if let Some(&j) = pos.get(&c) {
                    adjacency[i * m + j] = 1.0;
                    adjacency[j * m + i] = 1.0;
                    ts.push(label_term(c, &mut label_rows)?);
                } else {
                    // Preterminal: its tag and its word both contribute.
                    ts.push(label_term(c, &mut label_rows)?);
                    let word = tree.node(child.children[0]).token.expect("preterminal child is a word");
                    ts.push(Term::Word(word));
                }
            }
            terms.push(ts);
        }
        Ok(ConstituentGraph {
            nodes,
            adjacency,
            terms,
            label_rows,
            num_tokens: tree.num_tokens(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn degree(&self, i: usize) -> f64 {
        let m = self.len();
        self.adjacency[i * m..(i + 1) * m].iter().sum()
    }

    /// `A` with each row scaled by the inverse degree.
    pub fn normalized(&self) -> Tensor {
        let m = self.len();
        let mut out = self.adjacency.clone();
        for i in 0..m {
            let d = self.degree(i);
            out[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
        }
        Tensor::matrix(m, m, out).expect("square adjacency")
    }

    /// `n x m` mask; entry `(w, c)` allows word `w` to read constituent `c`.
    pub fn mask(&self, tree: &ConstituencyTree, mode: AttentionMask) -> Vec<bool> {
        let (n, m) = (self.num_tokens, self.len());
        let pos: HashMap<usize, usize> = self.nodes.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut out = vec![false; n * m];
        for w in 0..n {
            let row = &mut out[w * m..(w + 1) * m];
            if mode == AttentionMask::Unmasked {
                row.iter_mut().for_each(|x| *x = true);
                continue;
            }
            for a in tree.ancestors(tree.leaf(w)) {
                if let Some(&c) = pos.get(&a) {
                    row[c] = true;
                    if mode == AttentionMask::Parent {
                        break;
                    }
                }
            }
        }
        out
    }

    /// Averaging matrix over the stacked `[labels; words]` rows.
    fn averaging(&self) -> Tensor {
        let k = self.label_rows.len();
        let width = k + self.num_tokens;
        let row_of: HashMap<usize, usize> = self
            .label_rows
            .iter()
            .enumerate()
            .map(|(r, &(_, node))| (node, r))
            .collect();
        let m = self.len();
        let mut data = vec![0.0; m * width];
        for (i, ts) in self.terms.iter().enumerate() {
            let w = 1.0 / ts.len() as f64;
            for t in ts {
                let col = match *t {
                    Term::Label(node) => row_of[&node],
                    Term::Word(tok) => k + tok,
                };
                data[i * width + col] += w;
            }
        }
        Tensor::matrix(m, width, data).expect("averaging shape")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnLayer {
    pub linear: Linear,
    pub norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cgcn {
    pub label_embedding: ParamId,
    /// Bias-free projection from label width to model width.
    pub label_projection: ParamId,
    pub layers: Vec<GcnLayer>,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub mask: AttentionMask,
    dim: usize,
}

/// Everything the branch computes for one sentence.
#[derive(Debug, Clone, Copy)]
pub struct CgcnOutput {
    /// Initial constituent representations (`m x d`).
    pub constituents: Var,
    /// Propagated constituent representations (`m x d`).
    pub propagated: Var,
    /// Attention weights (`n x m`).
    pub attention: Var,
    /// Token-level output (`n x d`).
    pub tokens: Var,
}

impl Cgcn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        num_labels: usize,
        label_dim: usize,
        dim: usize,
        layers: usize,
        layer_norm: bool,
        mask: AttentionMask,
        rng: &mut ModelRng,
        range: f64,
    ) -> Self {
        let label_embedding = params.add("cgcn.label_embedding", nn::uniform(rng, vec![num_labels, label_dim], range));
        let label_projection = params.add("cgcn.label_projection", nn::uniform(rng, vec![label_dim, dim], range));
        let layers = (0..layers)
            .map(|l| {
                let name = format!("cgcn.layer{l}");
                let linear = Linear::new(params, &name, dim, dim, true, rng, range);
                let norm = layer_norm.then(|| {
                    (
                        params.add(format!("{name}.ln_gain"), nn::filled(vec![dim], 1.0)),
                        params.add(format!("{name}.ln_bias"), nn::zeros(vec![dim])),
                    )
                });
                GcnLayer { linear, norm }
            })
            .collect();
        let w_query = params.add("cgcn.w_query", nn::uniform(rng, vec![dim, dim], range));
        let w_key = params.add("cgcn.w_key", nn::uniform(rng, vec![dim, dim], range));
        Cgcn {
            label_embedding,
            label_projection,
            layers,
            w_query,
            w_key,
            mask,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Initial representation of every constituent: the mean of its own
    /// projected label, its children's projected labels and its child words.
    pub fn constituent_encode(&self, tape: &mut Tape, params: &ParamSet, graph: &ConstituentGraph, h: Var) -> Result<Var> {
        let ids: Vec<usize> = graph.label_rows.iter().map(|&(id, _)| id).collect();
        let table = tape.param(params, self.label_embedding);
        let emb = tape.gather_rows(table, &ids)?;
        let proj = tape.param(params, self.label_projection);
        let labels = tape.matmul(emb, proj)?;
        let stacked = tape.vstack(&[labels, h])?;
        let avg = tape.constant(graph.averaging());
        Ok(tape.matmul(avg, stacked)?)
    }

    /// Stacked `LayerNorm(relu(Â (h W + b)))` layers.
    pub fn propagate(&self, tape: &mut Tape, params: &ParamSet, graph: &ConstituentGraph, x: Var) -> Result<Var> {
        let a = tape.constant(graph.normalized());
        let mut h = x;
        for layer in &self.layers {
            let z = layer.linear.forward(tape, params, h)?;
            let z = tape.matmul(a, z)?;
            h = tape.relu(z);
            if let Some((g, b)) = layer.norm {
                let g = tape.param(params, g);
                let b = tape.param(params, b);
                h = tape.layer_norm(h, g, b, LAYER_NORM_EPS)?;
            }
        }
        Ok(h)
    }

    /// Returns the attention weights (`n x m`) and the attended token rows.
    pub fn ct_attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        query: Var,
        keys: Var,
        values: Var,
        mask: Vec<bool>,
    ) -> Result<(Var, Var)> {
        let wq = tape.param(params, self.w_query);
        let wk = tape.param(params, self.w_key);
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(keys, wk)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let m = tape.shape(keys)[0];
        for (w, row) in mask.chunks(m.max(1)).enumerate() {
            if !row.iter().any(|&x| x) {
                return Err(Error::UnmaskedWord { word: w });
            }
        }
        let attn = tape.masked_softmax(scores, mask)?;
        let out = tape.matmul(attn, values)?;
        Ok((attn, out))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        tree: &ConstituencyTree,
        graph: &ConstituentGraph,
        h: Var,
    ) -> Result<CgcnOutput> {
        let constituents = self.constituent_encode(tape, params, graph, h)?;
        let propagated = self.propagate(tape, params, graph, constituents)?;
        let mask = graph.mask(tree, self.mask);
        let (attention, tokens) = self.ct_attention(tape, params, h, constituents, propagated, mask)?;
        Ok(CgcnOutput {
            constituents,
            propagated,
            attention,
            tokens,
        })
    }
}
