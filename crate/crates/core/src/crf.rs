//! Linear-chain CRF over B/I/O tags.

use crate::bio::BioTag;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ModelRng};
use crate::tensor::{CustomOp, ParamId, ParamSet, Tape, Tensor, Var};

pub const NUM_TAGS: usize = 3;
const I: usize = 1;
const O: usize = 2;

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Concrete CRF scores for one sequence, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfScores {
    /// Row-major `n x 3`.
    pub emissions: Vec<f64>,
    /// `transitions[a * 3 + b]` scores tag `a` followed by tag `b`.
    pub transitions: [f64; 9],
    pub start: [f64; 3],
    pub end: [f64; 3],
}

impl CrfScores {
    pub fn new(emissions: Vec<f64>, transitions: &[f64], start: &[f64], end: &[f64], hard_bio: bool) -> Self {
        let mut s = CrfScores {
            emissions,
            transitions: transitions.try_into().expect("3x3 transitions"),
            start: start.try_into().expect("3 start scores"),
            end: end.try_into().expect("3 end scores"),
        };
        if hard_bio {
            s.transitions[O * NUM_TAGS + I] = f64::NEG_INFINITY;
            s.start[I] = f64::NEG_INFINITY;
        }
        s
    }

    pub fn len(&self) -> usize {
        self.emissions.len() / NUM_TAGS
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    fn e(&self, t: usize, y: usize) -> f64 {
        self.emissions[t * NUM_TAGS + y]
    }

    fn tr(&self, a: usize, b: usize) -> f64 {
        self.transitions[a * NUM_TAGS + b]
    }

    pub fn score(&self, tags: &[usize]) -> f64 {
        let n = tags.len();
        let mut s = self.start[tags[0]] + self.end[tags[n - 1]];
        for (t, &y) in tags.iter().enumerate() {
            s += self.e(t, y);
            if t + 1 < n {
                s += self.tr(y, tags[t + 1]);
            }
        }
        s
    }

    fn alpha(&self) -> Vec<[f64; 3]> {
        let n = self.len();
        let mut alpha = vec![[0.0; 3]; n];
        for y in 0..NUM_TAGS {
            alpha[0][y] = self.start[y] + self.e(0, y);
        }
        for t in 1..n {
            for y in 0..NUM_TAGS {
                let terms: Vec<f64> = (0..NUM_TAGS).map(|p| alpha[t - 1][p] + self.tr(p, y)).collect();
                alpha[t][y] = logsumexp(&terms) + self.e(t, y);
            }
        }
        alpha
    }

    fn beta(&self) -> Vec<[f64; 3]> {
        let n = self.len();
        let mut beta = vec![[0.0; 3]; n];
        beta[n - 1] = self.end;
        for t in (0..n - 1).rev() {
            for y in 0..NUM_TAGS {
                let terms: Vec<f64> = (0..NUM_TAGS)
                    .map(|q| self.tr(y, q) + self.e(t + 1, q) + beta[t + 1][q])
                    .collect();
                beta[t][y] = logsumexp(&terms);
            }
        }
        beta
    }

    /// Log partition function by the forward recursion.
    pub fn log_partition(&self) -> f64 {
        let alpha = self.alpha();
        let last = alpha[self.len() - 1];
        let terms: Vec<f64> = (0..NUM_TAGS).map(|y| last[y] + self.end[y]).collect();
        logsumexp(&terms)
    }

    pub fn nll(&self, tags: &[usize]) -> f64 {
        self.log_partition() - self.score(tags)
    }

    /// Unary marginals (`n x 3`) and expected transition counts (`3 x 3`).
    pub fn marginals(&self) -> (Vec<f64>, [f64; 9]) {
        let n = self.len();
        let (alpha, beta) = (self.alpha(), self.beta());
        let z = self.log_partition();
        let mut unary = vec![0.0; n * NUM_TAGS];
        for t in 0..n {
            for y in 0..NUM_TAGS {
                unary[t * NUM_TAGS + y] = (alpha[t][y] + beta[t][y] - z).exp();
            }
        }
        let mut pair = [0.0; 9];
        for t in 0..n.saturating_sub(1) {
            for a in 0..NUM_TAGS {
                for b in 0..NUM_TAGS {
                    let lp = alpha[t][a] + self.tr(a, b) + self.e(t + 1, b) + beta[t + 1][b] - z;
                    pair[a * NUM_TAGS + b] += lp.exp();
                }
            }
        }
        (unary, pair)
    }

    /// Highest-scoring tag sequence and its score. Ties go to the lower tag
    /// index.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let n = self.len();
        let mut delta = vec![[0.0; 3]; n];
        let mut back = vec![[0usize; 3]; n];
        for y in 0..NUM_TAGS {
            delta[0][y] = self.start[y] + self.e(0, y);
        }
        for t in 1..n {
            for y in 0..NUM_TAGS {
                let mut best = (f64::NEG_INFINITY, 0);
                for p in 0..NUM_TAGS {
                    let s = delta[t - 1][p] + self.tr(p, y);
                    if s > best.0 {
                        best = (s, p);
                    }
                }
                delta[t][y] = best.0 + self.e(t, y);
                back[t][y] = best.1;
            }
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for y in 0..NUM_TAGS {
            let s = delta[n - 1][y] + self.end[y];
            if s > best.0 {
                best = (s, y);
            }
        }
        let mut path = vec![best.1; n];
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        (path, best.0)
    }
}

/// Fused negative log-likelihood. Inputs are emissions, transitions, start
/// and end scores.
struct CrfNll {
    gold: Vec<usize>,
    hard_bio: bool,
}

impl CustomOp for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let scores = CrfScores::new(inputs[0].to_vec(), inputs[1], inputs[2], inputs[3], self.hard_bio);
        let g = grad_output[0];
        let n = scores.len();
        let (mut unary, pair) = scores.marginals();
        let mut trans = pair.to_vec();
        let mut start = unary[..NUM_TAGS].to_vec();
        let mut end = unary[(n - 1) * NUM_TAGS..].to_vec();
        for (t, &y) in self.gold.iter().enumerate() {
            unary[t * NUM_TAGS + y] -= 1.0;
            if t + 1 < n {
                trans[y * NUM_TAGS + self.gold[t + 1]] -= 1.0;
            }
        }
        start[self.gold[0]] -= 1.0;
        end[self.gold[n - 1]] -= 1.0;
        [unary, trans, start, end]
            .into_iter()
            .map(|v| Some(v.into_iter().map(|x| x * g).collect()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crf {
    pub emission: Linear,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub hard_bio: bool,
}

impl Crf {
    pub fn new(params: &mut ParamSet, input_dim: usize, hard_bio: bool, rng: &mut ModelRng, range: f64) -> Self {
        let emission = Linear::new(params, "crf.emission", input_dim, NUM_TAGS, true, rng, range);
        let transitions = params.add("crf.transitions", nn::uniform(rng, vec![NUM_TAGS, NUM_TAGS], range));
        let start = params.add("crf.start", nn::uniform(rng, vec![NUM_TAGS], range));
        let end = params.add("crf.end", nn::uniform(rng, vec![NUM_TAGS], range));
        Crf {
            emission,
            transitions,
            start,
            end,
            hard_bio,
        }
    }

    /// Emission scores (`n x 3`) from the tagger input rows.
    pub fn emissions(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        Ok(self.emission.forward(tape, params, x)?)
    }

    pub fn scores(&self, params: &ParamSet, emissions: Vec<f64>) -> CrfScores {
        CrfScores::new(
            emissions,
            params.get(self.transitions).data(),
            params.get(self.start).data(),
            params.get(self.end).data(),
            self.hard_bio,
        )
    }

    /// `-log P(gold | x)` recorded as a single tape node.
    pub fn nll(&self, tape: &mut Tape, params: &ParamSet, emissions: Var, gold: &[BioTag]) -> Result<Var> {
        let n = tape.shape(emissions).first().copied().unwrap_or(0);
        if n == 0 || tape.value(emissions).is_empty() {
            return Err(Error::EmptySentence);
        }
        if gold.len() != n {
            return Err(Error::GoldLength { gold: gold.len(), len: n });
        }
        let gold: Vec<usize> = gold.iter().map(|t| t.index()).collect();
        let scores = self.scores(params, tape.value(emissions).to_vec());
        let value = scores.nll(&gold);
        if !value.is_finite() {
            return Err(Error::Config("gold tags violate the hard BIO constraint".into()));
        }
        let inputs = [
            emissions,
            tape.param(params, self.transitions),
            tape.param(params, self.start),
            tape.param(params, self.end),
        ];
        let op = CrfNll {
            gold,
            hard_bio: self.hard_bio,
        };
        Ok(tape.custom(Box::new(op), &inputs, vec![], vec![value])?)
    }

    /// Best tag sequence for concrete emission scores.
    pub fn decode(&self, params: &ParamSet, emissions: &Tensor) -> (Vec<BioTag>, f64) {
        let (path, score) = self.scores(params, emissions.data().to_vec()).viterbi();
        (path.into_iter().filter_map(BioTag::from_index).collect(), score)
    }
}
