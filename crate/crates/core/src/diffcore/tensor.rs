use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type tag used by the checkpoint container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Floating point element type; implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major matrix. Vectors are `1 x n`; batches put samples in rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Copy of rows `start..start + n`.
    pub fn row_block(&self, start: usize, n: usize) -> Self {
        Tensor {
            rows: n,
            cols: self.cols,
            data: self.data[start * self.cols..(start + n) * self.cols].to_vec(),
        }
    }

    /// Stack row blocks vertically; all blocks must share the column count.
    pub fn vstack(blocks: &[&Tensor<T>]) -> Self {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.len()).sum());
        let mut rows = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Tensor { rows, cols, data }
    }
}

/// Operand orientation for [`matmul_into`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

fn strides<T>(t: &Tensor<T>, tr: Trans) -> (usize, usize, isize, isize) {
    match tr {
        Trans::No => (t.rows, t.cols, t.cols as isize, 1),
        Trans::Yes => (t.cols, t.rows, 1, t.cols as isize),
    }
}

/// `out = op(a) op(b) + beta * out`.
pub fn matmul_into<T: Real>(a: &Tensor<T>, ta: Trans, b: &Tensor<T>, tb: Trans, beta: T, out: &mut Tensor<T>) {
    let (m, k, rsa, csa) = strides(a, ta);
    let (k2, n, rsb, csb) = strides(b, tb);
    assert_eq!(k, k2, "matmul inner dimension");
    assert_eq!(out.shape(), (m, n), "matmul output shape");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the shapes are checked above and `out` is borrowed mutably, so
    // it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, ta: Trans, b: &Tensor<T>, tb: Trans) -> Tensor<T> {
    let m = if ta == Trans::No { a.rows } else { a.cols };
    let n = if tb == Trans::No { b.cols } else { b.rows };
    let mut out = Tensor::zeros(m, n);
    matmul_into(a, ta, b, tb, T::zero(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a = Tensor::<f64>::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, Trans::No, &b, Trans::No);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        // a^T a
        let ata = matmul(&a, Trans::Yes, &a, Trans::No);
        assert_eq!(ata.shape(), (3, 3));
        assert_eq!(ata.get(0, 0), 17.);
        assert_eq!(ata.get(1, 2), 2. * 3. + 5. * 6.);
        // a b^T with b^T being 2x3
        let bt = Tensor::<f64>::from_vec(2, 3, vec![7., 9., 11., 8., 10., 12.]);
        let c2 = matmul(&a, Trans::No, &bt, Trans::Yes);
        assert_eq!(c2.data(), c.data());
    }

    #[test]
    fn vstack_concatenates_rows() {
        let a = Tensor::<f32>::from_vec(1, 2, vec![1., 2.]);
        let b = Tensor::<f32>::from_vec(2, 2, vec![3., 4., 5., 6.]);
        let s = Tensor::vstack(&[&a, &b]);
        assert_eq!(s.shape(), (3, 2));
        assert_eq!(s.row(2), &[5., 6.]);
    }
}
