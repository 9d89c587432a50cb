use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{matmul_into, ParamId, Params, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for reporting and for the sign-flip fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Exp,
    Log,
    Scale,
    Shift,
    Sum,
    Mean,
    Softmax,
    LogSoftmax,
    MaskedSoftmax,
    LayerNorm,
    MaskedMeanPool,
    L2Normalize,
    AddRow,
    AddCol,
    Diag,
    SliceCols,
    ConcatCols,
    StackRows,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Scale,
        OpKind::Shift,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::MaskedSoftmax,
        OpKind::LayerNorm,
        OpKind::MaskedMeanPool,
        OpKind::L2Normalize,
        OpKind::AddRow,
        OpKind::AddCol,
        OpKind::Diag,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::StackRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::MaskedMeanPool => "masked_mean_pool",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::AddRow => "add_row",
            OpKind::AddCol => "add_col",
            OpKind::Diag => "diag",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::StackRows => "stack_rows",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, F),
    Shift(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MaskedSoftmax(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    AddRow(Var, Var),
    AddCol(Var, Var),
    Diag(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MaskedMeanPool { .. } => OpKind::MaskedMeanPool,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddCol(..) => OpKind::AddCol,
            Op::Diag(..) => OpKind::Diag,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::StackRows(..) => OpKind::StackRows,
        }
    }
}

/// Gradient map produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when nothing flowed there.
    pub fn get_or_zeros(&self, tape: &Tape<F>, var: Var) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()))
    }
}

/// Records a forward computation and replays it in reverse.
///
/// Records are appended after their inputs, so reverse index order is a valid
/// topological order and each record is visited once per backward pass.
#[derive(Debug)]
pub struct Tape<F> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    tracked: Vec<bool>,
    bindings: Vec<(Var, ParamId)>,
    bound: HashMap<(ParamId, u8), Var>,
    flip: Option<OpKind>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            flip: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Debug hook: negate the local gradient of every record of `kind`.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.flip = Some(kind);
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (frozen inputs, masks).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter group as a leaf; repeated binds return the same leaf.
    pub fn param(&mut self, params: &Params<F>, id: ParamId) -> Var {
        self.param_tagged(params, id, 0)
    }

    /// Like [`Tape::param`], but distinct tags produce distinct leaves for the
    /// same parameter. Used to separate per-path gradient contributions.
    pub fn param_tagged(&mut self, params: &Params<F>, id: ParamId, tag: u8) -> Var {
        if let Some(&v) = self.bound.get(&(id, tag)) {
            return v;
        }
        let v = self.leaf(params.value(id).clone());
        self.bound.insert((id, tag), v);
        self.bindings.push((v, id));
        v
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.bindings.iter().copied()
    }

    /// Every leaf bound to `id`, across tags.
    pub fn leaves_of(&self, id: ParamId) -> Vec<Var> {
        self.bindings
            .iter()
            .filter(|(_, p)| *p == id)
            .map(|(v, _)| *v)
            .collect()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} needs a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let tr = self.any_tracked(&[a, b]);
        Ok(self.push(t, Op::Matmul(a, b), tr))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let tr = self.tracked[a.0];
        Ok(self.push(t, Op::Transpose(a), tr))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let pick = |t: &Tensor<F>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(pick(ta, i), pick(tb, i))).collect();
        let t = Tensor::new(shape, data)?;
        let tr = self.any_tracked(&[a, b]);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(t, op, tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(a).map(f);
        let tr = self.tracked[a.0];
        self.push(t, op, tr)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > F::zero() { x } else { F::zero() })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), F::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), F::ln)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tr = self.tracked[a.0];
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / F::of(t.numel() as f64);
        let tr = self.tracked[a.0];
        self.push(Tensor::scalar(s), Op::Mean(a), tr)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Contract(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilised by subtracting the max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let m = (0..len).map(|a| src[idx(a)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for a in 0..len {
                    let e = (src[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z = z + e;
                }
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] / z;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let tr = self.tracked[x.0];
        Ok(self.push(t, Op::Softmax(x, axis), tr))
    }

    /// Log-softmax along `axis` via the log-sum-exp shift.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let m = (0..len).map(|a| src[idx(a)]).fold(F::neg_infinity(), F::max);
                let z: F = (0..len).map(|a| (src[idx(a)] - m).exp()).sum();
                let lse = m + z.ln();
                for a in 0..len {
                    out[idx(a)] = src[idx(a)] - lse;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let tr = self.tracked[x.0];
        Ok(self.push(t, Op::LogSoftmax(x, axis), tr))
    }

    /// Row softmax of a matrix where columns with `keep[j] == false` get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "masked_softmax_rows")?;
        if keep.len() != n {
            return Err(Error::dim("masked_softmax_rows", &[m, n], &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::EmptySequence);
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..n {
                if keep[j] {
                    let e = (row[j] - mx).exp();
                    out[r * n + j] = e;
                    z = z + e;
                }
            }
            for j in 0..n {
                out[r * n + j] = out[r * n + j] / z;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let tr = self.tracked[x.0];
        Ok(self.push(t, Op::MaskedSoftmax(x, keep.to_vec()), tr))
    }

    /// Normalises over the last axis with population variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &xs, self.shape(p)));
            }
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = F::of(eps);
        let inv_d = F::of(1.0 / d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        let tr = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tr,
        ))
    }

    /// Mean over the rows of `x[T×d]` whose mask entry is set.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.matrix_dims(x, "masked_mean_pool")?;
        if mask.len() != t {
            return Err(Error::dim("masked_mean_pool", &[t, d], &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySequence);
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o = *o + v;
            }
        }
        let inv = F::of(1.0 / count as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let tr = self.tracked[x.0];
        Ok(self.push(
            Tensor::vector(out),
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
            tr,
        ))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if nrm == F::zero() {
                return Err(Error::Numeric("cannot normalise a zero row".into()));
            }
            norms.push(nrm);
            for j in 0..n {
                out[r * n + j] = row[j] / nrm;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let tr = self.tracked[x.0];
        Ok(self.push(t, Op::L2Normalize { x, norms }, tr))
    }

    /// `x[m×n] + v[n]` added to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.shape(v) != [n] {
            return Err(Error::dim("add_row", &[m, n], self.shape(v)));
        }
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i % n])
            .collect();
        let t = Tensor::new(vec![m, n], data)?;
        let tr = self.any_tracked(&[x, v]);
        Ok(self.push(t, Op::AddRow(x, v), tr))
    }

    /// `x[m×n] + v[m]` added to every column.
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_col")?;
        if self.shape(v) != [m] {
            return Err(Error::dim("add_col", &[m, n], self.shape(v)));
        }
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / n])
            .collect();
        let t = Tensor::new(vec![m, n], data)?;
        let tr = self.any_tracked(&[x, v]);
        Ok(self.push(t, Op::AddCol(x, v), tr))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "diag")?;
        if m != n {
            return Err(Error::dim("diag", &[m, n], &[n, m]));
        }
        let t = self.value(x);
        let data = (0..n).map(|i| t.data()[i * n + i]).collect();
        let tr = self.tracked[x.0];
        Ok(self.push(Tensor::vector(data), Op::Diag(x), tr))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let tr = self.tracked[x.0];
        Ok(self.push(t, Op::SliceCols { x, start }, tr))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let tr = self.any_tracked(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tr))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Contract("stack_rows of nothing".into()));
        };
        let d = self.value(first).numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.numel() != d {
                return Err(Error::dim("stack_rows", self.shape(first), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let tr = self.any_tracked(rows);
        Ok(self.push(t, Op::StackRows(rows.to_vec()), tr))
    }

    /// Reverse replay from a scalar `loss`. Returns a fresh gradient map every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if loss.0 >= self.values.len() {
            return Err(Error::Contract(format!("{loss:?} is not on this tape")));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = Vec::new();
            self.local_grads(i, &g, &mut contribs);
            if self.flip == Some(self.ops[i].kind()) {
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, c) in contribs {
                if !self.tracked[v.0] {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(c).for_each(|(a, b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.values[i].shape().to_vec(), d).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Convenience: backward from `loss` and accumulate into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut Params<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        params.accumulate(self, &grads);
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[F], out: &mut Vec<(Var, Vec<F>)>) {
        let y = &self.values[i];
        let need = |v: Var| self.tracked[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(a) {
                    // dA = G · Bᵀ
                    let bd = tb.data();
                    let mut da = vec![F::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    out.push((a, da));
                }
                if need(b) {
                    // dB = Aᵀ · G
                    let ad = ta.data();
                    let mut db = vec![F::zero(); k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == F::zero() {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut d = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[c * m + r] = g[r * n + c];
                    }
                }
                out.push((a, d));
            }
            &Op::Add(a, b) => {
                out.push((a, self.reduce_to(a, g.to_vec())));
                out.push((b, self.reduce_to(b, g.to_vec())));
            }
            &Op::Sub(a, b) => {
                out.push((a, self.reduce_to(a, g.to_vec())));
                out.push((b, self.reduce_to(b, g.iter().map(|&v| -v).collect())));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let pick = |t: &Tensor<F>, j: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[j] };
                if need(a) {
                    let d = g.iter().enumerate().map(|(j, &gv)| gv * pick(tb, j)).collect();
                    out.push((a, self.reduce_to(a, d)));
                }
                if need(b) {
                    let d = g.iter().enumerate().map(|(j, &gv)| gv * pick(ta, j)).collect();
                    out.push((b, self.reduce_to(b, d)));
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                out.push((a, d));
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()));
            }
            &Op::Exp(a) => {
                out.push((a, g.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect()));
            }
            &Op::Log(a) => {
                let x = self.value(a).data();
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect()));
            }
            &Op::Scale(a, c) => out.push((a, g.iter().map(|&gv| gv * c).collect())),
            &Op::Shift(a) => out.push((a, g.to_vec())),
            &Op::Sum(a) => out.push((a, vec![g[0]; self.value(a).numel()])),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                out.push((a, vec![g[0] / F::of(n as f64); n]));
            }
            &Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let yd = y.data();
                let mut d = vec![F::zero(); yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + k;
                        let dot: F = (0..len).map(|a| g[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                out.push((x, d));
            }
            &Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let yd = y.data();
                let mut d = vec![F::zero(); yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + k;
                        let gs: F = (0..len).map(|a| g[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = g[idx(a)] - yd[idx(a)].exp() * gs;
                        }
                    }
                }
                out.push((x, d));
            }
            Op::MaskedSoftmax(x, keep) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let yd = y.data();
                let mut d = vec![F::zero(); m * n];
                for r in 0..m {
                    let dot: F = (0..n).map(|j| g[r * n + j] * yd[r * n + j]).sum();
                    for j in 0..n {
                        if keep[j] {
                            d[r * n + j] = yd[r * n + j] * (g[r * n + j] - dot);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                if need(*gamma) || need(*beta) {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                if need(*x) {
                    let inv_d = F::of(1.0 / d as f64);
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let dxh: Vec<F> = (0..d).map(|j| g[r * d + j] * gam[j]).collect();
                        let m1 = dxh.iter().copied().sum::<F>() * inv_d;
                        let m2 = dxh
                            .iter()
                            .zip(&xhat[r * d..(r + 1) * d])
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MaskedMeanPool { x, mask, count } => {
                let d = y.numel();
                let inv = F::of(1.0 / *count as f64);
                let mut dx = vec![F::zero(); mask.len() * d];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..d {
                        dx[r * d + j] = g[j] * inv;
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let n = y.shape()[1];
                let yd = y.data();
                let mut dx = vec![F::zero(); yd.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let s = r * n;
                    let dot: F = (0..n).map(|j| g[s + j] * yd[s + j]).sum();
                    for j in 0..n {
                        dx[s + j] = (g[s + j] - yd[s + j] * dot) / nrm;
                    }
                }
                out.push((*x, dx));
            }
            &Op::AddRow(x, v) => {
                let n = y.shape()[1];
                let mut dv = vec![F::zero(); n];
                for (j, &gv) in g.iter().enumerate() {
                    dv[j % n] = dv[j % n] + gv;
                }
                out.push((x, g.to_vec()));
                out.push((v, dv));
            }
            &Op::AddCol(x, v) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let dv = (0..m).map(|r| g[r * n..(r + 1) * n].iter().copied().sum()).collect();
                out.push((x, g.to_vec()));
                out.push((v, dv));
            }
            &Op::Diag(x) => {
                let n = y.numel();
                let mut dx = vec![F::zero(); n * n];
                for k in 0..n {
                    dx[k * n + k] = g[k];
                }
                out.push((x, dx));
            }
            &Op::SliceCols { x, start } => {
                let (m, len) = (y.shape()[0], y.shape()[1]);
                let n = self.shape(x)[1];
                let mut dx = vec![F::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((x, dx));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.shape()[0], y.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    out.push((p, dp));
                }
            }
            Op::StackRows(rows) => {
                let d = y.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    out.push((v, g[r * d..(r + 1) * d].to_vec()));
                }
            }
        }
    }

    /// Sums a full-size gradient down to a broadcast scalar operand.
    fn reduce_to(&self, v: Var, d: Vec<F>) -> Vec<F> {
        if self.value(v).numel() == d.len() {
            d
        } else {
            vec![d.into_iter().sum()]
        }
    }
}
