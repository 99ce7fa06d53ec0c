//! Dense rank-4 tensors in (batch, channel, row, column) order.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs on `f32`, gradient checks on `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Width of one serialized element.
    const BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a · b + beta · c` on strided row/column views.
    ///
    /// # Safety
    /// Every element addressed by the strides must lie inside its slice.
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
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view over a slice: `(slice, row_stride, col_stride)`.
pub type MatRef<'a, T> = (&'a [T], usize, usize);

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// Safe matrix product `c (m×n) = a (m×k) · b (k×n) + beta · c`, `c` row-major.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last_index(m, k, a.1, a.2) < a.0.len(), "gemm lhs out of bounds");
    assert!(last_index(k, n, b.1, b.2) < b.0.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::shape(format!("zero dimension in {self}")));
        }
        self.checked_len().map(|_| ())
    }

    pub fn checked_len(&self) -> Result<usize> {
        self.batch
            .checked_mul(self.channels)
            .and_then(|v| v.checked_mul(self.height))
            .and_then(|v| v.checked_mul(self.width))
            .filter(|&v| v <= isize::MAX as usize)
            .ok_or_else(|| Error::Overflow(self.to_string()))
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape4, fill: T) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![fill; shape.len()],
        })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!("{} values cannot fill shape {shape}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Zero tensor with the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check_bounds(&self, b: usize, c: usize, y: usize, x: usize) {
        let s = self.shape;
        assert!(
            b < s.batch && c < s.channels && y < s.height && x < s.width,
            "index ({b}, {c}, {y}, {x}) out of bounds for {s}"
        );
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.check_bounds(b, c, y, x);
        self.data[self.shape.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        self.check_bounds(b, c, y, x);
        let i = self.shape.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// Same data under a new shape of equal length.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map_binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} of {} and {}", op, self.shape, other.shape)));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
            })
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k · other`
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("axpy of {} and {}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn reduce(&self, op: ReduceOp) -> T {
        match op {
            ReduceOp::Sum => self.data.iter().copied().sum(),
            ReduceOp::Max => self.data.iter().copied().fold(T::neg_infinity(), T::max),
            ReduceOp::Mean => self.reduce(ReduceOp::Sum) / T::of(self.data.len() as f64),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Converts element type, rounding through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Batch item `b` as a one-item tensor.
    pub fn item(&self, b: usize) -> Tensor4<T> {
        let n = self.shape.item_len();
        Tensor4 {
            shape: Shape4::new(1, self.shape.channels, self.shape.height, self.shape.width),
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Appends four little-endian `u64` dims followed by the little-endian payload.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(out);
        }
    }

    /// Reads one serialized tensor from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn read_le(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 32 {
            return Err(Error::Format("truncated tensor header".into()));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let raw = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
            *d = usize::try_from(raw).map_err(|_| Error::Format(format!("dimension {raw} too large")))?;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        let payload = shape
            .len()
            .checked_mul(T::BYTES)
            .ok_or_else(|| Error::Overflow(shape.to_string()))?;
        let body = &bytes[32..];
        if body.len() < payload {
            return Err(Error::Format(format!(
                "tensor {shape} needs {payload} payload bytes, {} available",
                body.len()
            )));
        }
        let data = body[..payload].chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok((Self { shape, data }, 32 + payload))
    }
}

impl<T: Scalar> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor4<{}>{} {:?}", T::NAME, self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
