//! Dependency GCN with relation-gated edges.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, DependencyGraph};
use crate::error::Result;
use crate::nn::{self, Linear, ModelRng};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

pub const UNKNOWN_RELATION: &str = "<unk>";
pub const SELF_RELATION: &str = "self";
pub const INVERSE_PREFIX: &str = "inv:";

/// Relation inventory: unknown, self, then each relation followed by its
/// inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSet {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl RelationSet {
    pub fn from_names(names: Vec<String>) -> Self {
        let mut set = RelationSet {
            names,
            index: HashMap::new(),
        };
        set.reindex();
        set
    }

    pub fn build(sentences: &[AnnotatedSentence]) -> Self {
        let mut names = vec![UNKNOWN_RELATION.to_string(), SELF_RELATION.to_string()];
        let mut seen = std::collections::HashSet::new();
        for s in sentences {
            for e in s.deps.edges() {
                if e.head.is_some() && seen.insert(e.relation.clone()) {
                    names.push(e.relation.clone());
                    names.push(format!("{INVERSE_PREFIX}{}", e.relation));
                }
            }
        }
        Self::from_names(names)
    }

    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    /// Unseen relations map to the unknown row.
    pub fn id(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(0)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entry `(row, col, relation id)` of the gated adjacency.
pub type Entry = (usize, usize, usize);

/// Structural part of the gated adjacency for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyStructure {
    pub entries: Vec<Entry>,
    pub n: usize,
}

impl DependencyStructure {
    pub fn build(deps: &DependencyGraph, relations: &RelationSet) -> Self {
        let n = deps.len();
        let self_id = relations.id(SELF_RELATION);
        let mut entries: Vec<Entry> = (0..n).map(|i| (i, i, self_id)).collect();
        for e in deps.edges() {
            if let Some(h) = e.head {
                entries.push((h, e.dependent, relations.id(&e.relation)));
                entries.push((e.dependent, h, relations.id(&format!("{INVERSE_PREFIX}{}", e.relation))));
            }
        }
        entries.sort_unstable();
        DependencyStructure { entries, n }
    }

    /// Structural edge count per row, self-loop included.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n];
        for &(i, _, _) in &self.entries {
            c[i] += 1;
        }
        c
    }

    fn positions(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|&(i, j, _)| (i, j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dgcn {
    pub relation_embedding: ParamId,
    /// Maps a relation embedding to its gate logit.
    pub gate: Linear,
    pub layers: Vec<Linear>,
}

impl Dgcn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        num_relations: usize,
        relation_dim: usize,
        dim: usize,
        layers: usize,
        rng: &mut ModelRng,
        range: f64,
    ) -> Self {
        let relation_embedding = params.add(
            "dgcn.relation_embedding",
            nn::uniform(rng, vec![num_relations, relation_dim], range),
        );
        let gate = Linear::new(params, "dgcn.gate", relation_dim, 1, true, rng, range);
        let layers = (0..layers)
            .map(|l| Linear::new(params, &format!("dgcn.layer{l}"), dim, dim, true, rng, range))
            .collect();
        Dgcn {
            relation_embedding,
            gate,
            layers,
        }
    }

    /// Gate value of every structural entry, as an `e x 1` column.
    fn gates(&self, tape: &mut Tape, params: &ParamSet, s: &DependencyStructure) -> Result<Var> {
        let ids: Vec<usize> = s.entries.iter().map(|&(_, _, r)| r).collect();
        let table = tape.param(params, self.relation_embedding);
        let emb = tape.gather_rows(table, &ids)?;
        let logits = self.gate.forward(tape, params, emb)?;
        Ok(tape.sigmoid(logits))
    }

    /// Dense `n x n` gated adjacency; absent entries are exactly zero.
    pub fn gated_adjacency(&self, tape: &mut Tape, params: &ParamSet, s: &DependencyStructure) -> Result<Var> {
        let g = self.gates(tape, params, s)?;
        Ok(tape.scatter(g, &s.positions(), s.n, s.n)?)
    }

    /// Stacked `relu(c A (h W + b))` layers, with `c` the inverse structural
    /// row count.
    pub fn propagate(&self, tape: &mut Tape, params: &ParamSet, s: &DependencyStructure, h: Var) -> Result<Var> {
        let g = self.gates(tape, params, s)?;
        let counts = s.counts();
        let norm: Vec<f64> = s.entries.iter().map(|&(i, _, _)| 1.0 / counts[i] as f64).collect();
        let e = norm.len();
        let norm = tape.constant(Tensor::matrix(e, 1, norm)?);
        let scaled = tape.mul(g, norm)?;
        let a = tape.scatter(scaled, &s.positions(), s.n, s.n)?;
        let mut x = h;
        for layer in &self.layers {
            let z = layer.forward(tape, params, x)?;
            let z = tape.matmul(a, z)?;
            x = tape.relu(z);
        }
        Ok(x)
    }
}
