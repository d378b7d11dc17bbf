//! Word embeddings followed by a single-layer bidirectional LSTM.

use crate::error::{Error, Result};
use crate::nn::{self, ModelRng};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

/// Produces one contextual row per token.
pub trait ContextEncoder {
    fn output_dim(&self) -> usize;
    fn encode(&self, tape: &mut Tape, params: &ParamSet, token_ids: &[usize]) -> Result<Var>;
}

/// One LSTM direction. Gate blocks are laid out as input, forget, candidate,
/// output along the columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut ModelRng, range: f64, forget_bias: f64) -> Self {
        let w_ih = params.add(format!("{name}.w_ih"), nn::uniform(rng, vec![input, 4 * hidden], range));
        let w_hh = params.add(format!("{name}.w_hh"), nn::uniform(rng, vec![hidden, 4 * hidden], range));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = forget_bias);
        let bias = params.add(
            format!("{name}.bias"),
            Tensor::vector(b).with_requires_grad(true),
        );
        LstmParams { w_ih, w_hh, bias }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    input_dim: usize,
    hidden_dim: usize,
}

impl BiLstm {
    /// Registers the embedding table and both directions. `pretrained`, when
    /// given, holds `vocab_size * input_dim` values; otherwise the table is
    /// drawn uniformly.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        vocab_size: usize,
        input_dim: usize,
        hidden_dim: usize,
        pretrained: Option<Vec<f64>>,
        freeze: bool,
        range: f64,
        forget_bias: f64,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let table = match pretrained {
            Some(data) => Tensor::new(vec![vocab_size, input_dim], data)?,
            None => nn::uniform(rng, vec![vocab_size, input_dim], range),
        }
        .with_requires_grad(!freeze);
        let embedding = params.add("encoder.embedding", table);
        let forward = LstmParams::new(params, "encoder.fwd", input_dim, hidden_dim, rng, range, forget_bias);
        let backward = LstmParams::new(params, "encoder.bwd", input_dim, hidden_dim, rng, range, forget_bias);
        Ok(BiLstm {
            embedding,
            forward,
            backward,
            input_dim,
            hidden_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Runs one direction over `x` (n x input) and returns the states in
    /// sentence order.
    fn run(&self, tape: &mut Tape, params: &ParamSet, p: &LstmParams, x: Var, n: usize, reverse: bool) -> Result<Var> {
        let h = self.hidden_dim;
        let w_ih = tape.param(params, p.w_ih);
        let w_hh = tape.param(params, p.w_hh);
        let bias = tape.param(params, p.bias);
        let xw = tape.matmul(x, w_ih)?;
        let pre = tape.add(xw, bias)?;
        let mut states: Vec<Var> = Vec::with_capacity(n);
        let mut prev: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let mut z = tape.gather_rows(pre, &[t])?;
            if let Some((h_prev, _)) = prev {
                let rec = tape.matmul(h_prev, w_hh)?;
                z = tape.add(z, rec)?;
            }
            let zi = tape.slice_cols(z, 0, h)?;
            let zf = tape.slice_cols(z, h, 2 * h)?;
            let zg = tape.slice_cols(z, 2 * h, 3 * h)?;
            let zo = tape.slice_cols(z, 3 * h, 4 * h)?;
            let i = tape.sigmoid(zi);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let ig = tape.mul(i, g)?;
            let c = match prev {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(zf);
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let hs = tape.mul(o, tc)?;
            states.push(hs);
            prev = Some((hs, c));
        }
        if reverse {
            states.reverse();
        }
        Ok(tape.vstack(&states)?)
    }
}

impl ContextEncoder for BiLstm {
    fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn encode(&self, tape: &mut Tape, params: &ParamSet, token_ids: &[usize]) -> Result<Var> {
        if token_ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        let table = tape.param(params, self.embedding);
        let x = tape.gather_rows(table, token_ids)?;
        let n = token_ids.len();
        let fwd = self.run(tape, params, &self.forward, x, n, false)?;
        let bwd = self.run(tape, params, &self.backward, x, n, true)?;
        Ok(tape.concat(&[fwd, bwd])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;

    fn small(params: &mut ParamSet, hidden: usize) -> BiLstm {
        let mut rng = ModelRng::seed_from_u64(3);
        BiLstm::new(params, 7, 4, hidden, None, true, 0.5, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut params = ParamSet::new();
        let enc = small(&mut params, 3);
        for id in params.ids().collect::<Vec<_>>() {
            if id != enc.embedding {
                params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let h = enc.encode(&mut tape, &params, &[1, 2, 3]).unwrap();
        assert_eq!(tape.shape(h), &[3, 6]);
        assert!(tape.value(h).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_shape() {
        let mut params = ParamSet::new();
        let mut rng = ModelRng::seed_from_u64(0);
        let enc = BiLstm::new(&mut params, 5, 300, 100, None, true, 0.1, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = enc.encode(&mut tape, &params, &[2]).unwrap();
        assert_eq!(tape.shape(h), &[1, 200]);
    }

    #[test]
    fn reversal_swaps_directions_when_tied() {
        let mut params = ParamSet::new();
        let enc = small(&mut params, 3);
        for (a, b) in [
            (enc.forward.w_ih, enc.backward.w_ih),
            (enc.forward.w_hh, enc.backward.w_hh),
            (enc.forward.bias, enc.backward.bias),
        ] {
            let src = params.get(a).data().to_vec();
            params.get_mut(b).data_mut().copy_from_slice(&src);
        }
        let ids = [1, 4, 2, 6, 3];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let mut tape = Tape::new();
        let h = enc.encode(&mut tape, &params, &ids).unwrap();
        let hr = enc.encode(&mut tape, &params, &rev).unwrap();
        let (hv, hrv) = (tape.tensor(h), tape.tensor(hr));
        for t in 0..5 {
            let a = hv.row(t);
            let b = hrv.row(4 - t);
            assert_eq!(&a[..3], &b[3..]);
            assert_eq!(&a[3..], &b[..3]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let enc = small(&mut params, 3);
        let report = grad_check(
            &mut params,
            |tape: &mut Tape, p: &ParamSet| -> Result<Var> {
                let h = enc.encode(tape, p, &[1, 2, 3, 4, 5])?;
                let pooled = tape.mean_rows(h, &[0, 2, 4])?;
                let sq = tape.mul(pooled, pooled)?;
                let t = tape.tanh(sq);
                Ok(tape.sum(t))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 6);
    }
}
