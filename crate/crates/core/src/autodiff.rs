//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records operations in execution order. Each recorded node keeps
//! its output value and enough saved state to apply its vector-Jacobian
//! product. [`Tape::backward`] walks the nodes once in reverse order, which is
//! a valid topological order because inputs are always recorded first.
//!
//! An inference tape (`Tape::inference`) evaluates the same operations but
//! records no backward rules.

use crate::error::{Error, Result};
use crate::tensor::{bmm, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias { x: Var, bias: Var },
    Silu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(S, S)> },
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    Mse(Var, Var),
    Softmax(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable input; gradients are produced for it on recording tapes.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let rg = self.recording;
        self.push_leaf(value, rg)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = bmm(self.value(a), false, self.value(b), false)?;
        self.push("matmul", out, Op::MatMul { a, b, tb: false }, &[a, b])
    }

    /// `a x b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = bmm(self.value(a), false, self.value(b), true)?;
        self.push("matmul", out, Op::MatMul { a, b, tb: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).silu();
        self.push("silu", out, Op::Silu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) =
            self.value(x)
                .layer_norm_with_stats(self.value(gain), self.value(bias), LAYER_NORM_EPS)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            &[x, gain, bias],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).embedding_lookup(ids)?;
        self.push(
            "embedding_lookup",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mse(self.value(b))?);
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_lastdim()?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Inserts a value computed outside the tape in place of `x`.
    ///
    /// Used for attention transforms. The replacement has no backward rule,
    /// so it is rejected when `x` participates in a gradient computation.
    pub fn substitute(&mut self, x: Var, value: Tensor<S>) -> Result<Var> {
        if self.requires_grad(x) {
            return Err(Error::Contract(
                "external transforms cannot be applied on a gradient path".into(),
            ));
        }
        if value.shape() != self.value(x).shape() {
            return Err(Error::dim(
                "substitute",
                format!(
                    "replacement {:?} differs from {:?}",
                    value.shape(),
                    self.value(x).shape()
                ),
            ));
        }
        self.push("attention transform", value, Op::Leaf, &[])
    }

    /// Populates gradients of `loss` with respect to every recorded ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contrib) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb) = if *tb {
                    // C = A B^T: dA = dC B, dB = dC^T A
                    (bmm(g, false, bv, false)?, bmm(g, true, av, false)?)
                } else {
                    // C = A B: dA = dC B^T, dB = A^T dC
                    (bmm(g, false, bv, true)?, bmm(av, true, g, false)?)
                };
                vec![
                    (*a, ga.reduce_to(av.shape())?),
                    (*b, gb.reduce_to(bv.shape())?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-S::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddBias { x, bias } => {
                let d = val(*bias).numel();
                let mut gb = vec![S::zero(); d];
                for row in g.data().chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::new(&[d], gb)?)]
            }
            Op::Silu(x) => {
                let dx = val(*x).zip_with(g, "silu", |x, g| {
                    let s = S::one() / (S::one() + (-x).exp());
                    g * s * (S::one() + x * (S::one() - s))
                })?;
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = gv.len();
                let dn = S::of(d as f64);
                let mut dx = vec![S::zero(); xv.numel()];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut xhat = vec![S::zero(); d];
                let mut dxhat = vec![S::zero(); d];
                for (r, ((xrow, grow), &(mean, rstd))) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(stats)
                    .enumerate()
                {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape(), dx)?),
                    (*gain, Tensor::new(&[d], dgain)?),
                    (*bias, Tensor::new(&[d], dbias)?),
                ]
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![S::zero(); tv.numel()];
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    for (acc, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*table, Tensor::new(tv.shape(), dt)?)]
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let c = g.item()? / S::of(xv.numel() as f64);
                vec![(*x, Tensor::full(xv.shape(), c))]
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = S::of(2.0) * g.item()? / S::of(av.numel() as f64);
                let da = av.zip_with(bv, "mse", |x, y| c * (x - y))?;
                let db = da.scale(-S::one());
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.numel()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape(), dx)?)]
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
        })
    }
}
