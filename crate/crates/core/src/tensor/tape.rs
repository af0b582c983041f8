// Wengert-list reverse-mode AD. Every forward op appends a node holding its
// value and whatever it needs for the vector-Jacobian product; `backward`
// walks the list once in reverse and consumes the tape.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Scale,
}

/// Second operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Sse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a vector repeated over every leading index of lhs
    RhsRow,
    LhsRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary { kind: BinKind, a: Var, b: Var, bcast: Bcast },
    AddScalar(Var),
    Scale(Var, f64),
    Unary(UnKind, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Sse(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Select { x: Var, index: usize },
    Reshape(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    NceRows { logits: Var, weights: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Added under the square root when normalizing rows so all-zero rows stay finite.
pub const NORMALIZE_EPS: f64 = 1e-24;

/// Records one forward graph. Single use: a second `backward` is an error.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    consumed: bool,
}

/// Per-node adjoints from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// (parameter name, leaf) pairs bound on the tape that produced these gradients.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
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

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Records a leaf. Gradient flows to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, rg)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter from `store` as a differentiable leaf.
    /// Repeated binds of the same name on one tape return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        check_finite("matmul_nt", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt { a, b, m, k, n },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    /// Dispatches any elementwise kind. Binary kinds need `y`; `Scale` needs a scalar.
    pub fn elementwise(&mut self, kind: Elementwise, x: Var, y: Option<Operand>) -> Result<Var> {
        use Elementwise as E;
        match (kind, y) {
            (E::Add, Some(Operand::Var(y))) => self.add(x, y),
            (E::Add, Some(Operand::Scalar(c))) => self.add_scalar(x, c),
            (E::Sub, Some(Operand::Var(y))) => self.sub(x, y),
            (E::Sub, Some(Operand::Scalar(c))) => self.add_scalar(x, -c),
            (E::Mul, Some(Operand::Var(y))) => self.mul(x, y),
            (E::Mul, Some(Operand::Scalar(c))) | (E::Scale, Some(Operand::Scalar(c))) => {
                self.scale(x, c)
            }
            (E::Relu, None) => self.relu(x),
            (E::Sigmoid, None) => self.sigmoid(x),
            (E::Tanh, None) => self.tanh(x),
            (E::Exp, None) => self.exp(x),
            (E::Log, None) => self.log(x),
            (kind, y) => Err(Error::shape(
                "elementwise",
                format!("{kind:?} does not accept operand {y:?}"),
            )),
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            Bcast::Same
        } else if sb.len() == 1 && sa.len() >= 2 && sa.last() == sb.last() {
            Bcast::RhsRow
        } else if sa.len() == 1 && sb.len() >= 2 && sa.last() == sb.last() {
            Bcast::LhsRow
        } else {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (out, shape) = match bcast {
            Bcast::Same => (ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(), sa),
            Bcast::RhsRow => {
                let w = bd.len();
                (ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % w])).collect(), sa)
            }
            Bcast::LhsRow => {
                let w = ad.len();
                (bd.iter().enumerate().map(|(i, &y)| f(ad[i % w], y)).collect(), sb)
            }
        };
        let out: Vec<f64> = out;
        check_finite(name, &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.live()?;
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v + c).collect();
        check_finite("add_scalar", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddScalar(x), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.live()?;
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), rg))
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Result<Var> {
        self.live()?;
        let xd = self.value(x).data();
        let (name, out): (&'static str, Vec<f64>) = match kind {
            UnKind::Relu => ("relu", xd.iter().map(|&v| v.max(0.0)).collect()),
            UnKind::Sigmoid => ("sigmoid", xd.iter().map(|&v| sigmoid(v)).collect()),
            UnKind::Tanh => ("tanh", xd.iter().map(|v| v.tanh()).collect()),
            UnKind::Exp => ("exp", xd.iter().map(|v| v.exp()).collect()),
            UnKind::Log => {
                if let Some(bad) = xd.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                ("log", xd.iter().map(|v| v.ln()).collect())
            }
        };
        check_finite(name, &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Unary(kind, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Log, x)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let w = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        check_finite("softmax", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// LayerNorm over the last axis: population variance, `eps` inside the root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let w = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "features {w}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / w;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Max over `axis`, removing it. Ties resolve to the first index.
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let idx = base + k * inner;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MaxPool { x, argmax }, rg))
    }

    /// Rows of the last axis scaled to unit L2 norm (`sqrt(Σx² + NORMALIZE_EPS)`).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let w = *self.shape(x).last().unwrap_or(&1);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / w);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(w) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        check_finite("normalize_rows", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::NormalizeRows { x, norms }, rg))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, y: Option<Var>) -> Result<Var> {
        match (kind, y) {
            (ReduceKind::Sum, None) => self.sum(x),
            (ReduceKind::Mean, None) => self.mean(x),
            (ReduceKind::Sse, Some(y)) => self.sse(x, y),
            (kind, y) => Err(Error::shape(
                "reduce",
                format!("{kind:?} with second operand {y:?}"),
            )),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let s: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), Op::Mean(x), rg))
    }

    /// Sum of squared differences.
    pub fn sse(&mut self, x: Var, y: Var) -> Result<Var> {
        self.live()?;
        if self.shape(x) != self.shape(y) {
            return Err(Error::shape(
                "sse",
                format!("{:?} vs {:?}", self.shape(x), self.shape(y)),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        check_finite("sse", &[s])?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), Op::Sse(x, y), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.live()?;
        let ld = self.value(logits).data();
        if ld.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", ld.len(), targets.len()),
            ));
        }
        let n = ld.len() as f64;
        let s: f64 = ld
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        check_finite("bce_with_logits", &[s])?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![s]),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// For square `logits: [B, B]`, returns `[B]` with
    /// `u_i = -logits[i,i] + log Σ_{j≠i} exp(logits[i,j])`.
    /// The positive pair is excluded from the denominator.
    pub fn nce_rows(&mut self, logits: Var) -> Result<Var> {
        self.live()?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("nce_rows", format!("need square matrix, got {s:?}")));
        }
        let b = s[0];
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let ld = self.value(logits).data();
        let mut out = Vec::with_capacity(b);
        let mut weights = vec![0.0; b * b];
        for i in 0..b {
            let row = &ld[i * b..(i + 1) * b];
            let mx = (0..b)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..b).filter(|&j| j != i).map(|j| (row[j] - mx).exp()).sum();
            for j in (0..b).filter(|&j| j != i) {
                weights[i * b + j] = (row[j] - mx).exp() / z;
            }
            out.push(-row[i] + mx + z.ln());
        }
        check_finite("nce_rows", &out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![b], out),
            Op::NceRows { logits, weights },
            rg,
        ))
    }

    // ---- structure ------------------------------------------------------

    /// Flat concatenation of the inputs' data into a vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.live()?;
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let n = out.len();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Concat(xs.to_vec()), rg))
    }

    /// Stacks equal-shaped inputs along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        self.live()?;
        let Some(&first) = xs.first() else {
            return Err(Error::shape("stack", "no inputs"));
        };
        let inner = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(xs.len() * inner.iter().product::<usize>());
        for &x in xs {
            if self.shape(x) != inner.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {inner:?}", self.shape(x)),
                ));
            }
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Stack(xs.to_vec()), rg))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        self.live()?;
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::shape("select", format!("index {index} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape[1..].to_vec(), out),
            Op::Select { x, index },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_ref().map(|p| (p.clone(), Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    // dA = dC · Bᵀ
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    // dB = Aᵀ · dC
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.rg(a) {
                    // dA = dC · B
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    // dB = dCᵀ · A
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                db[j * k + p] += gv * ad[i * k + p];
                            }
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Binary { kind, a, b, bcast } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                // d out / d a and d out / d b at flat output index i
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinKind::Add => (g.to_vec(), g.to_vec()),
                    BinKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinKind::Mul => {
                        let (wa, wb) = (ad.len(), bd.len());
                        (
                            g.iter().enumerate().map(|(i, gv)| gv * bd[i % wb]).collect(),
                            g.iter().enumerate().map(|(i, gv)| gv * ad[i % wa]).collect(),
                        )
                    }
                };
                let fold = |full: Vec<f64>, w: usize| {
                    let mut r = vec![0.0; w];
                    for (i, v) in full.into_iter().enumerate() {
                        r[i % w] += v;
                    }
                    r
                };
                match bcast {
                    Bcast::Same => {
                        self.accumulate(grads, a, ga);
                        self.accumulate(grads, b, gb);
                    }
                    Bcast::RhsRow => {
                        self.accumulate(grads, a, ga);
                        self.accumulate(grads, b, fold(gb, bd.len()));
                    }
                    Bcast::LhsRow => {
                        self.accumulate(grads, a, fold(ga, ad.len()));
                        self.accumulate(grads, b, gb);
                    }
                }
            }
            &Op::AddScalar(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Scale(x, c) => self.accumulate(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::Unary(kind, x) => {
                let xd = self.value(x).data();
                let dx: Vec<f64> = match kind {
                    UnKind::Relu => g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    UnKind::Sigmoid => g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                    UnKind::Tanh => g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                    UnKind::Exp => g.iter().zip(out).map(|(gv, y)| gv * y).collect(),
                    UnKind::Log => g.iter().zip(xd).map(|(gv, xv)| gv / xv).collect(),
                };
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.len() / w {
                    let (y, gr) = (&out[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dx[r * w + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let gd = self.value(*gamma).data();
                let rows = xhat.len() / w;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for r in 0..rows {
                        for j in 0..w {
                            dg[j] += g[r * w + j] * xhat[r * w + j];
                            db[j] += g[r * w + j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.rg(*x) {
                    let nf = w as f64;
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let xh = &xhat[r * w..(r + 1) * w];
                        let dxh: Vec<f64> = (0..w).map(|j| g[r * w + j] * gd[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dx[r * w + j] = inv_std[r] / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            &Op::Sse(x, y) => {
                let diff: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(self.value(y).data())
                    .map(|(a, b)| 2.0 * g[0] * (a - b))
                    .collect();
                if self.rg(y) {
                    self.accumulate(grads, y, diff.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, x, diff);
            }
            Op::BceWithLogits { logits, targets } => {
                let ld = self.value(*logits).data();
                let n = ld.len() as f64;
                let dx = ld
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
            Op::NceRows { logits, weights } => {
                let b = out.len();
                let mut dx = vec![0.0; b * b];
                for i in 0..b {
                    for j in 0..b {
                        dx[i * b + j] = g[i] * weights[i * b + j];
                    }
                    dx[i * b + i] = -g[i];
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (y, gr) = (&out[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dx[r * w + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) | Op::Stack(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.accumulate(grads, x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            &Op::Select { x, index } => {
                let mut dx = vec![0.0; self.value(x).numel()];
                let n = g.len();
                dx[index * n..(index + 1) * n].copy_from_slice(g);
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
        }
    }
}
