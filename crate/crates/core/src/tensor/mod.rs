//! Dense row-major tensors, a tape-based reverse-mode differentiator and the
//! AdamW optimizer with its warmup/cosine schedule.

mod gradcheck;
mod graph;
mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use gradcheck::check_gradients;
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, lr_at, AdamW, AdamWConfig, LrSchedule, OptimizerState};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index { op: &'static str, index: usize, extent: usize },
    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type. Training runs in `f32`; oracle and gradient
/// checks run in `f64`.
pub trait Real: Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose lengths cover the strided extents
                // (checked by `matmul_ex`).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(TensorError::Shape { op: "new", shapes: vec![shape, vec![data.len()]] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (0, 0),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let (_, c) = self.dims2();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape { op: "reshape", shapes: vec![self.shape, shape.to_vec()] });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape { op, shapes: vec![self.shape.clone(), other.shape.clone()] });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap()).collect(),
        }
    }

    /// Matrix product `self * other`, or `self * other^T` when `trans_other`.
    pub fn matmul(&self, other: &Self, trans_other: bool) -> Result<Self> {
        self.matmul_ex(false, other, trans_other)
    }

    /// `op(self) * op(other)` where `op` optionally transposes; transposes
    /// are expressed as strides, never materialized.
    pub fn matmul_ex(&self, trans_self: bool, other: &Self, trans_other: bool) -> Result<Self> {
        let (ar, ac) = self.dims2();
        let (br, bc) = other.dims2();
        let (m, k) = if trans_self { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_other { (bc, br) } else { (br, bc) };
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(TensorError::Shape {
                op: if trans_other { "matmul_t" } else { "matmul" },
                shapes: vec![self.shape.clone(), other.shape.clone()],
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if trans_self { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_other { (1, bc as isize) } else { (bc as isize, 1) };
        T::gemm(m, k, n, T::one(), &self.data, rsa, csa, &other.data, rsb, csb, T::zero(), &mut out, n as isize, 1);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Adds `bias` (length = columns) to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2();
        if self.shape.len() != 2 || bias.len() != c {
            return Err(TensorError::Shape { op: "add_row", shapes: vec![self.shape.clone(), bias.shape.clone()] });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Row-wise softmax computed through the max-shifted log-sum-exp.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.log_softmax_rows();
        for v in &mut out.data {
            *v = v.exp();
        }
        out
    }

    pub fn log_softmax_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Self { shape: self.shape.clone(), data: out }
    }

    /// Indices of the row maxima (first index on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (r, _) = self.dims2();
        (0..r).map(|i| argmax(self.row(i))).collect()
    }

    /// Stacks equally sized rows into a matrix.
    pub fn stack_rows(rows: &[&[T]]) -> Result<Self> {
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != c) {
            return Err(TensorError::Shape {
                op: "stack_rows",
                shapes: rows.iter().map(|r| vec![r.len()]).collect(),
            });
        }
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), c], data)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::<f64>::matrix(1, 3, vec![0.0; 3]).unwrap();
        for &p in t.softmax_rows().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn identity_matmul_returns_vector() {
        let v = Tensor::<f64>::matrix(3, 1, vec![0.3, -1.7, 2.25]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&v, false).unwrap(), v);
    }

    #[test]
    fn matmul_transposed_matches_plain() {
        let a = Tensor::<f64>::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::matrix(3, 2, vec![1., 0., -1., 2., 0.5, 1.]).unwrap();
        let bt = Tensor::<f64>::matrix(2, 3, vec![1., -1., 0.5, 0., 2., 1.]).unwrap();
        assert_eq!(a.matmul(&b, false).unwrap(), a.matmul(&bt, true).unwrap());
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&a, false).unwrap_err();
        assert_eq!(err, TensorError::Shape { op: "matmul", shapes: vec![vec![2, 3], vec![2, 3]] });
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let t = Tensor::<f64>::matrix(1, 3, vec![1e4, 1e4 - 1.0, -1e4]).unwrap();
        let p = t.softmax_rows();
        assert!(p.all_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
