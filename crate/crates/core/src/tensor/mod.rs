//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value (shape + shared buffer). Computations that
//! need gradients are recorded on a [`Tape`] through [`Var`] handles; the
//! tape replays them in reverse in [`Tape::backward`].
//!
//! Precision is a type parameter: everything is generic over [`Scalar`],
//! implemented for `f32` (training default) and `f64` (gradient checks).

mod ops;
mod optim;
mod rng;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{kl_divergence, softmax};
pub use optim::{Adam, AdamConfig};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};

/// Floor applied to the second argument of KL divergences.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
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
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix product over row-major slices: `c += a(m×k) · b(k×n)`, with either
/// operand optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // strides chosen above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            F::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major n-dimensional array.
///
/// The buffer is reference counted so tensors can be recorded on a tape or
/// stored in a cache without copying; mutation goes through copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| F::of(std * rng.normal())).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (tape-free) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_acc(m, k, n, &self.data, false, &other.data, false, &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Copy of `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::Index {
                what: "narrow range",
                index: start + len,
                len: self.shape.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Converts to another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        )
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::Index {
            what: "concat axis",
            index: axis,
            len: first.rank(),
        });
    }
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = Tensor::eye(2).matmul(&a).unwrap();
        assert_eq!(out, a);
        let row = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let col = Tensor::<f64>::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let mut rng = Rng::new(1, 0);
        let t = Tensor::<f32>::randn(&[2, 5, 3], 1.0, &mut rng);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn copy_on_write_keeps_clones_intact() {
        let a = Tensor::<f32>::ones(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0, 1.0]);
    }
}
