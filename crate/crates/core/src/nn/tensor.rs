use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::LinalgScalar;
use ndarray::{ArrayView2, ArrayViewMut2};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Four-dimensional NHWC tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            dims.iter().product::<usize>(),
            "tensor data does not match dims {dims:?}"
        );
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Values per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
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

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor4<T>]) -> Self {
        let first = parts.first().expect("at least one tensor");
        let inner = [first.dims[1], first.dims[2], first.dims[3]];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut batch = 0;
        for p in parts {
            assert_eq!([p.dims[1], p.dims[2], p.dims[3]], inner, "shape mismatch in concat");
            data.extend_from_slice(&p.data);
            batch += p.dims[0];
        }
        Self {
            dims: [batch, inner[0], inner[1], inner[2]],
            data,
        }
    }
}

/// `c = op(a) * op(b) + beta * c` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[T],
    b_shape: (usize, usize),
    trans_b: bool,
    beta: T,
    c: &mut [T],
    c_shape: (usize, usize),
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("gemm a shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("gemm b shape");
    let mut cv = ArrayViewMut2::from_shape(c_shape, c).expect("gemm c shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}
