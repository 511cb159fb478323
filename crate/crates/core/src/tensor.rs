//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable shape plus a shared buffer. Every operation
//! returns a fresh tensor, so cloning is cheap and inputs are never mutated.
//! Shapes are checked explicitly; the only broadcasting supported is over the
//! leading batch dimensions of [`Tensor::matmul`] and the trailing-vector bias
//! of [`Tensor::add_bias`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for all model math; `f64` is
/// available so gradient checks can run without single-precision round-off.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on strided views.
    ///
    /// # Safety
    /// The strides must address memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Arc<[S]>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("new", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn silu(&self) -> Self {
        self.map(|x| x / (S::one() + (-x).exp()))
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let d = *self.shape.last().unwrap();
        if bias.shape != [d] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match last dim of {:?}", bias.shape, self.shape),
            ));
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        Self::new(&self.shape, out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::of(self.numel() as f64)
    }

    pub fn mse(&self, other: &Self) -> Result<S> {
        self.same_shape(other, "mse")?;
        let sq: S = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(sq / S::of(self.numel() as f64))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let d = *self.shape.last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(&self.shape, out)
    }

    /// Layer normalisation over the last dimension. Returns the output and
    /// the per-row `(mean, 1/std)` pairs used by the backward rule.
    pub fn layer_norm_with_stats(
        &self,
        gain: &Self,
        bias: &Self,
        eps: f64,
    ) -> Result<(Self, Vec<(S, S)>)> {
        let d = *self.shape.last().unwrap();
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs input {:?}",
                    gain.shape, bias.shape, self.shape
                ),
            ));
        }
        let dn = S::of(d as f64);
        let mut out = vec![S::zero(); self.numel()];
        let mut stats = Vec::with_capacity(self.numel() / d);
        for (row, orow) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / dn;
            let rstd = S::one() / (var + S::of(eps)).sqrt();
            for i in 0..d {
                orow[i] = (row[i] - mean) * rstd * gain.data[i] + bias.data[i];
            }
            stats.push((mean, rstd));
        }
        Ok((Self::new(&self.shape, out)?, stats))
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        Ok(self.layer_norm_with_stats(gain, bias, eps)?.0)
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim(
                "embedding_lookup",
                format!("table must be 2-D, got {:?}", self.shape),
            ));
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        if ids.is_empty() {
            return Err(Error::dim("embedding_lookup", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim(
                    "embedding_lookup",
                    format!("id {id} out of range for table of {v} rows"),
                ));
            }
            out.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Self::new(&[ids.len(), d], out)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[offset]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Self::new(&out_shape, out)
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::dim("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        bmm(self, false, other, false)
    }

    /// `self x other^T` for `other` stored as `[.., n, k]`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        bmm(self, false, other, true)
    }

    /// Sums a broadcast gradient back down to `shape` over leading dims.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let rank = self.rank();
        if shape.len() > rank || shape.len() < 2 {
            return Err(Error::dim(
                "reduce_to",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        let pad = rank - shape.len();
        let target: Vec<usize> = std::iter::repeat(1)
            .take(pad)
            .chain(shape.iter().copied())
            .collect();
        let tstrides = strides(&target);
        let mut out = vec![S::zero(); shape.iter().product()];
        let mut idx = vec![0usize; rank];
        for &v in self.data.iter() {
            let mut off = 0;
            for ax in 0..rank {
                if target[ax] != 1 {
                    off += idx[ax] * tstrides[ax];
                }
            }
            out[off] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(shape, out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Logical matrix dims of `t` (after optional transpose) and its batch dims.
fn mat_view(t: &[usize], trans: bool) -> (usize, usize, &[usize]) {
    let r = t.len();
    let (rows, cols) = (t[r - 2], t[r - 1]);
    if trans {
        (cols, rows, &t[..r - 2])
    } else {
        (rows, cols, &t[..r - 2])
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offsets (in matrices) of each broadcast batch index into `src`.
fn batch_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let sstr = strides(src);
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        let mut off = 0;
        for ax in pad..out.len() {
            let dim = src[ax - pad];
            if dim != 1 {
                off += idx[ax] * sstr[ax - pad];
            }
        }
        offsets.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

pub(crate) fn bmm<S: Scalar>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Result<Tensor<S>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim(
            "matmul",
            format!("operands must be at least 2-D: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, abatch) = mat_view(&a.shape, ta);
    let (k2, n, bbatch) = mat_view(&b.shape, tb);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a.shape,
                if ta { "^T" } else { "" },
                b.shape,
                if tb { "^T" } else { "" }
            ),
        ));
    }
    let batch = broadcast_batch(abatch, bbatch).ok_or_else(|| {
        Error::dim(
            "matmul",
            format!("batch dims not broadcastable: {:?} x {:?}", a.shape, b.shape),
        )
    })?;
    let a_off = batch_offsets(abatch, &batch);
    let b_off = batch_offsets(bbatch, &batch);
    let (a_rows, a_cols) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (b_rows, b_cols) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let amat = a_rows * a_cols;
    let bmat = b_rows * b_cols;
    let mut out = vec![S::zero(); a_off.len() * m * n];
    for (i, cmat) in out.chunks_mut(m * n).enumerate() {
        let asl = &a.data[a_off[i] * amat..(a_off[i] + 1) * amat];
        let bsl = &b.data[b_off[i] * bmat..(b_off[i] + 1) * bmat];
        // SAFETY: the strides describe exactly the `amat`/`bmat`/`m*n`
        // element slices borrowed above.
        unsafe {
            S::gemm_raw(
                m,
                k,
                n,
                asl.as_ptr(),
                rsa,
                csa,
                bsl.as_ptr(),
                rsb,
                csb,
                S::zero(),
                cmat.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(eye.matmul(&a).unwrap(), a);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let w = t(&[2, 2], &[1., 1., 0., 1.]);
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.data(), &[1., 3., 3., 7.]);
        let nt = a.matmul_nt(&w).unwrap();
        assert_eq!(nt.data(), &[3., 2., 7., 4.]);
    }

    #[test]
    fn reduce_to_sums_broadcast_dims() {
        let g = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        assert_eq!(g.reduce_to(&[1, 2]).unwrap().data(), &[4., 6.]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn softmax_uniform_and_empty() {
        let s = Tensor::<f32>::zeros(&[3]).softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
    }
}
