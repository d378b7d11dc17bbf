use std::collections::HashMap;

use super::{dims2, ParamId, ParamSet, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused primitive supplied from outside the engine.
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and returns one gradient per input (`None` where the input is
/// treated as constant).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogSumExp { x: Var, axis: usize },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    MeanRows { x: Var, rows: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    SqNorm(Vec<Var>),
    Sum(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize, end: usize },
    Scatter { values: Var, positions: Vec<(usize, usize)> },
    Pick { x: Var, index: usize },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward traversal.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.params() {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => self.params.push((id, g.to_vec())),
            }
        }
    }
}

/// Wengert list of primitive operations. Nodes are appended in evaluation
/// order, so every input precedes its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<Var, Vec<f64>>,
}

// C = op(A) * op(B) (+ C when `accumulate`), all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold m*k, k*n and m*n values laid out with the
    // strides computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp_slice(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(op, &self.nodes[v.0].shape)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is kept on the tape (see [`Tape::grad`])
    /// when `t.requires_grad()` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, rg)
    }

    /// Records a parameter leaf. Repeated calls return the same variable.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = params.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Accumulated gradient of a requires-grad input leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v).map(|g| g.as_slice())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // Either identical shapes or `b` is a single row broadcast over `a`'s rows.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        if self.shape(a) == self.shape(b) {
            return Ok(false);
        }
        let (_, ca) = self.dims(op, a)?;
        let (rb, cb) = self.dims(op, b)?;
        if rb == 1 && cb == ca {
            Ok(true)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
        let broadcast = self.broadcast_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out = if broadcast {
            let c = bv.len();
            av.iter().enumerate().map(|(i, x)| f(*x, bv[i % c])).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        };
        Ok((out, self.shape(a).to_vec()))
    }

    /// Elementwise sum; `b` may be a row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Sub(a, b), ng))
    }

    /// Elementwise product; `b` may be a row broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Log-sum-exp reduction. For a matrix, `axis` 1 reduces each row and
    /// `axis` 0 each column; a vector only has axis 0.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        let (r, c) = self.dims("logsumexp", a)?;
        let v = self.value(a);
        let (out, shape) = match (rank, axis) {
            (1, 0) | (0, 0) => (vec![logsumexp_slice(v.iter().copied())], vec![]),
            (2, 1) => (
                (0..r)
                    .map(|i| logsumexp_slice(v[i * c..(i + 1) * c].iter().copied()))
                    .collect(),
                vec![r],
            ),
            (2, 0) => (
                (0..c)
                    .map(|j| logsumexp_slice((0..r).map(|i| v[i * c + j])))
                    .collect(),
                vec![c],
            ),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "logsumexp",
                    reason: format!("axis {axis} invalid for rank {rank}"),
                })
            }
        };
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::LogSumExp { x: a, axis }, ng))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries are exactly zero and take no part in normalization.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.dims("masked_softmax", a)?;
        if mask.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = i * c..(i + 1) * c;
            let max = row
                .clone()
                .filter(|&k| mask[k])
                .map(|k| v[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::InvalidArgument {
                    op: "masked_softmax",
                    reason: format!("row {i} has no unmasked entry"),
                });
            }
            let mut z = 0.0;
            for k in row.clone() {
                if mask[k] {
                    out[k] = (v[k] - max).exp();
                    z += out[k];
                }
            }
            for k in row {
                out[k] /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::MaskedSoftmax { x: a, mask }, ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.masked_softmax(a, vec![true; n])
    }

    /// `x - logsumexp(x)` over a vector or a single-row matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let axis = match self.shape(a) {
            [1, _] => 1,
            [_, _] => {
                return Err(TensorError::InvalidArgument {
                    op: "log_softmax",
                    reason: "expected a vector or a single row".into(),
                })
            }
            _ => 0,
        };
        let lse = self.logsumexp(a, axis)?;
        let n = self.value(a).len();
        let lse_row = self.reshape_scalar_row(lse, n)?;
        self.sub(a, lse_row)
    }

    fn reshape_scalar_row(&mut self, s: Var, n: usize) -> Result<Var> {
        // Broadcast a scalar to a length-n vector as concat of n copies.
        let parts = vec![s; n];
        let cat = self.concat(&parts)?;
        Ok(cat)
    }

    /// Concatenation along the last axis. All parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let (r, _) = self.dims("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rp, cp) = self.dims("concat", *p)?;
            if rp != r {
                return Err(self.mismatch("concat", parts[0], *p));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[i * w..(i + 1) * w]);
            }
        }
        let vector = self.shape(parts[0]).len() < 2;
        let shape = if vector { vec![total] } else { vec![r, total] };
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    /// Stacks parts along rows. All parts share the column count.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "vstack",
                reason: "no inputs".into(),
            });
        }
        let (_, c) = self.dims("vstack", parts[0])?;
        let mut rows = 0;
        for p in parts {
            let (rp, cp) = self.dims("vstack", *p)?;
            if cp != c {
                return Err(self.mismatch("vstack", parts[0], *p));
            }
            rows += rp;
        }
        let mut out = Vec::with_capacity(rows * c);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(vec![rows, c], out, Op::VStack(parts.to_vec()), ng))
    }

    /// Mean of the selected rows, as a vector.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("mean_rows", a)?;
        if rows.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean_rows",
                reason: "empty row set".into(),
            });
        }
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "mean_rows",
                    index: i,
                    bound: r,
                });
            }
            for (o, x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let ng = self.needs(a);
        Ok(self.push(
            vec![c],
            out,
            Op::MeanRows {
                x: a,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Row lookup (embedding gather).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("gather_rows", table)?;
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let v = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    /// Sum of squares over every value of every part.
    pub fn sq_norm(&mut self, parts: &[Var]) -> Var {
        let s = parts
            .iter()
            .map(|p| self.value(*p).iter().map(|x| x * x).sum::<f64>())
            .sum();
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(vec![], vec![s], Op::SqNorm(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims("transpose", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_cols", a)?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let v = self.value(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let vector = self.shape(a).len() < 2;
        let shape = if vector { vec![w] } else { vec![r, w] };
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::SliceCols { x: a, start, end }, ng))
    }

    /// Writes `values[k]` at `positions[k]` of a zero `rows x cols` matrix.
    /// Repeated positions accumulate.
    pub fn scatter(&mut self, values: Var, positions: &[(usize, usize)], rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(values);
        if v.len() != positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter",
                left: self.shape(values).to_vec(),
                right: vec![positions.len()],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (k, &(i, j)) in positions.iter().enumerate() {
            if i >= rows || j >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter",
                    index: i.max(j),
                    bound: rows.min(cols),
                });
            }
            out[i * cols + j] += v[k];
        }
        let ng = self.needs(values);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::Scatter {
                values,
                positions: positions.to_vec(),
            },
            ng,
        ))
    }

    /// A single element (flat row-major index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).len();
        if index >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index,
                bound: n,
            });
        }
        let x = self.value(a)[index];
        let ng = self.needs(a);
        Ok(self.push(vec![], vec![x], Op::Pick { x: a, index }, ng))
    }

    /// Records a fused primitive whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != value.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: value.len(),
            });
        }
        let ng = inputs.iter().any(|p| self.needs(*p));
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Input-leaf gradients accumulate on
    /// the tape across calls; parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let len = |v: Var| nodes[v.0].value.len();
            let val = |v: Var| nodes[v.0].value.as_slice();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2("matmul", &nodes[a.0].shape)?;
                    let (_, n) = dims2("matmul", &nodes[b.0].shape)?;
                    if nodes[a.0].needs_grad {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, val(*b), true, ga, true);
                    }
                    if nodes[b.0].needs_grad {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm(k, m, n, val(*a), true, &g, false, gb, true);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if nodes[a.0].needs_grad {
                        let ga = acc(&mut grads, *a, g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if nodes[b.0].needs_grad {
                        let nb = len(*b);
                        let gb = acc(&mut grads, *b, nb);
                        for (i, y) in g.iter().enumerate() {
                            gb[i % nb] += sign * y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let nb = len(*b);
                    if nodes[a.0].needs_grad {
                        let bv = val(*b);
                        let ga = acc(&mut grads, *a, g.len());
                        for (i, y) in g.iter().enumerate() {
                            ga[i] += y * bv[i % nb];
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let av = val(*a);
                        let gb = acc(&mut grads, *b, nb);
                        for (i, y) in g.iter().enumerate() {
                            gb[i % nb] += y * av[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
                Op::LogSumExp { x, axis } => {
                    let (r, c) = dims2("logsumexp", &nodes[x.0].shape)?;
                    let rank = nodes[x.0].shape.len();
                    let xv = val(*x);
                    let out = &node.value;
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let o = if rank < 2 {
                                0
                            } else if *axis == 1 {
                                i
                            } else {
                                j
                            };
                            if out[o] > f64::NEG_INFINITY {
                                gx[k] += g[o] * (xv[k] - out[o]).exp();
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { x, mask } => {
                    let (r, c) = dims2("masked_softmax", &nodes[x.0].shape)?;
                    let p = &node.value;
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = row.clone().map(|k| g[k] * p[k]).sum();
                        for k in row {
                            if mask[k] {
                                gx[k] += p[k] * (g[k] - dot);
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let (r, total) = dims2("concat", &node.shape)?;
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = dims2("concat", &nodes[p.0].shape)?;
                        if nodes[p.0].needs_grad {
                            let gp = acc(&mut grads, *p, r * w);
                            for i in 0..r {
                                for j in 0..w {
                                    gp[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = len(*p);
                        if nodes[p.0].needs_grad {
                            let gp = acc(&mut grads, *p, n);
                            gp.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(a, b)| *a += b);
                        }
                        offset += n;
                    }
                }
                Op::MeanRows { x, rows } => {
                    let c = g.len();
                    let k = rows.len() as f64;
                    let gx = acc(&mut grads, *x, len(*x));
                    for &i in rows {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / k;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let (_, c) = dims2("gather_rows", &nodes[table.0].shape)?;
                    let gt = acc(&mut grads, *table, len(*table));
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[row * c + j];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (r, c) = dims2("layer_norm", &nodes[x.0].shape)?;
                    let gv = val(*gain);
                    if nodes[gain.0].needs_grad {
                        let gg = acc(&mut grads, *gain, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * normed[i * c + j];
                            }
                        }
                    }
                    if nodes[bias.0].needs_grad {
                        let gb = acc(&mut grads, *bias, c);
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j];
                            }
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let gx = acc(&mut grads, *x, r * c);
                        let cf = c as f64;
                        for i in 0..r {
                            let row = i * c..(i + 1) * c;
                            let dn: Vec<f64> = row.clone().map(|k| g[k] * gv[k - i * c]).collect();
                            let mean_dn = dn.iter().sum::<f64>() / cf;
                            let mean_dn_n = dn
                                .iter()
                                .zip(&normed[row.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / cf;
                            for (j, k) in row.enumerate() {
                                gx[k] += inv_std[i] * (dn[j] - mean_dn - normed[k] * mean_dn_n);
                            }
                        }
                    }
                }
                Op::SqNorm(parts) => {
                    for p in parts {
                        if nodes[p.0].needs_grad {
                            let pv = val(*p);
                            let gp = acc(&mut grads, *p, pv.len());
                            gp.iter_mut()
                                .zip(pv)
                                .for_each(|(a, x)| *a += 2.0 * x * g[0]);
                        }
                    }
                }
                Op::Sum(a) => {
                    let ga = acc(&mut grads, *a, len(*a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Transpose(a) => {
                    let (r, c) = dims2("transpose", &nodes[a.0].shape)?;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let (r, c) = dims2("slice_cols", &nodes[x.0].shape)?;
                    let w = end - start;
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::Scatter { values, positions } => {
                    let cols = node.shape[1];
                    let gv = acc(&mut grads, *values, positions.len());
                    for (k, &(i, j)) in positions.iter().enumerate() {
                        gv[k] += g[i * cols + j];
                    }
                }
                Op::Pick { x, index } => {
                    let gx = acc(&mut grads, *x, len(*x));
                    gx[*index] += g[0];
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&[f64]> = inputs.iter().map(|v| val(*v)).collect();
                    let local = op.backward(&ins, &node.value, &g);
                    for (v, lg) in inputs.iter().zip(local) {
                        if let (true, Some(lg)) = (nodes[v.0].needs_grad, lg) {
                            let gv = acc(&mut grads, *v, lg.len());
                            gv.iter_mut().zip(&lg).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            match node.param {
                Some(id) => out.params.push((id, g)),
                None => {
                    let slot = self
                        .leaf_grads
                        .entry(Var(idx))
                        .or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecv(t: &mut Tape, xs: &[f64], rg: bool) -> Var {
        t.input(Tensor::vector(xs.to_vec()).with_requires_grad(rg))
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[-1.0, 0.0, 2.0], false);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn masked_softmax_single_unmasked_entry() {
        let mut t = Tape::new();
        for (a, b) in [(0.3, -7.0), (1e3, 2.0), (-50.0, 50.0)] {
            let x = vecv(&mut t, &[a, b], false);
            let p = t.masked_softmax(x, vec![true, false]).unwrap();
            assert_eq!(t.value(p), &[1.0, 0.0]);
        }
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[1.0, 2.0], false);
        assert!(t.masked_softmax(x, vec![false, false]).is_err());
    }

    #[test]
    fn logsumexp_of_zeros_is_ln3() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[0.0, 0.0, 0.0], false);
        let y = t.logsumexp(x, 0).unwrap();
        let naive = (0..3).map(|_| 0f64.exp()).sum::<f64>().ln();
        assert!((t.scalar(y) - 3f64.ln()).abs() < 1e-15);
        assert!((t.scalar(y) - naive).abs() < 1e-15);
        assert!((t.scalar(y) - 1.0986123).abs() < 1e-7);
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut t = Tape::new();
        let x = t.input(
            Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn repeated_backward_doubles_gradients() {
        let mut params = ParamSet::new();
        let w = params.add(
            "w",
            Tensor::vector(vec![0.3, -1.2]).with_requires_grad(true),
        );
        let mut t = Tape::new();
        let x = vecv(&mut t, &[2.0, 5.0], true);
        let wv = t.param(&params, w);
        let s = t.sigmoid(wv);
        let m = t.mul(s, x).unwrap();
        let loss = t.sum(m);
        let g1 = t.backward(loss).unwrap();
        params.accumulate(&g1);
        let once_w = params.get(w).grad().unwrap().to_vec();
        let once_x = t.grad(x).unwrap().to_vec();
        let g2 = t.backward(loss).unwrap();
        params.accumulate(&g2);
        let twice_w = params.get(w).grad().unwrap();
        for (a, b) in once_w.iter().zip(twice_w) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in once_x.iter().zip(t.grad(x).unwrap()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[1.0, 2.0], true);
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn broadcast_add_over_rows() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::vector(vec![10.0, 20.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut params = ParamSet::new();
        let frozen = params.add("e", Tensor::vector(vec![1.0, 2.0]));
        let live = params.add("w", Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true));
        let mut t = Tape::new();
        let e = t.param(&params, frozen);
        let w = t.param(&params, live);
        let m = t.mul(e, w).unwrap();
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(live).unwrap(), &[1.0, 2.0]);
    }
}
