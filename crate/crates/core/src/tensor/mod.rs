//! Dense row-major tensors and the exact geometric primitives (quarter-turn
//! rotation, cyclic roll, convolution) that every equivariance guarantee in
//! the crate reduces to.

mod conv;
pub mod io;
mod sparse;

pub use conv::conv2d_grouped;
pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weight, conv2d_naive, ConvSpec};
pub use sparse::SparseLinear;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar element type. Implemented for `f32` (training and inference) and
/// `f64` (finite-difference oracles).
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
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

impl Float for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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

impl Float for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.normal()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// `(N, C, H, W)` of a 4-d tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .ensure_finite(op)
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

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map(|v| v * c).ensure_finite("scale")
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn silu(&self) -> Result<Self> {
        self.map(silu).ensure_finite("silu")
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Mean over `H x W` of each channel of an NCHW tensor, giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self
            .data
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_parts(vec![n, c], data))
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(Error::shape(format!("matmul lhs shape {:?}", self.shape))),
        };
        let (k2, n) = match other.shape[..] {
            [k2, n] => (k2, n),
            _ => return Err(Error::shape(format!("matmul rhs shape {:?}", other.shape))),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        // SAFETY: all three buffers are dense row-major with the given extents.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::shape(format!("transpose of shape {:?}", self.shape))),
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Zero-pad the last two axes by `pad` on every side.
    pub fn pad2d(&self, pad: usize) -> Result<Self> {
        if self.ndim() < 2 {
            return Err(Error::shape("pad2d needs at least two axes"));
        }
        let nd = self.ndim();
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let outer = self.numel() / (h * w);
        let mut out = vec![T::zero(); outer * ph * pw];
        for b in 0..outer {
            for y in 0..h {
                let src = &self.data[(b * h + y) * w..(b * h + y + 1) * w];
                let dst = (b * ph + y + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[nd - 2] = ph;
        shape[nd - 1] = pw;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Inverse of [`Tensor::pad2d`].
    pub fn crop2d(&self, pad: usize) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("crop2d needs at least two axes"));
        }
        let (ph, pw) = (self.shape[nd - 2], self.shape[nd - 1]);
        if ph <= 2 * pad || pw <= 2 * pad {
            return Err(Error::shape(format!("cannot crop {pad} from {ph}x{pw}")));
        }
        let (h, w) = (ph - 2 * pad, pw - 2 * pad);
        let outer = self.numel() / (ph * pw);
        let mut out = Vec::with_capacity(outer * h * w);
        for b in 0..outer {
            for y in 0..h {
                let src = (b * ph + y + pad) * pw + pad;
                out.extend_from_slice(&self.data[src..src + w]);
            }
        }
        let mut shape = self.shape.clone();
        shape[nd - 2] = h;
        shape[nd - 1] = w;
        Ok(Tensor::from_parts(shape, out))
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for i in (0..self.ndim().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Rotate the plane spanned by `axes = (row_axis, col_axis)` by
    /// `quarter_turns` clockwise quarter turns (negative values turn
    /// counter-clockwise). Pure index permutation.
    pub fn rot90(&self, quarter_turns: i64, axes: (usize, usize)) -> Result<Self> {
        let (ra, ca) = axes;
        if ra >= self.ndim() || ca >= self.ndim() || ra == ca {
            return Err(Error::shape(format!(
                "rot90 axes {axes:?} invalid for shape {:?}",
                self.shape
            )));
        }
        let q = quarter_turns.rem_euclid(4);
        let (h, w) = (self.shape[ra], self.shape[ca]);
        if q % 2 == 1 && h != w {
            return Err(Error::shape(format!(
                "odd quarter turns need equal extents, got {h}x{w}"
            )));
        }
        if q == 0 {
            return Ok(self.clone());
        }
        let nd = self.ndim();
        // Fast path: rotation of the two trailing axes.
        if ra == nd - 2 && ca == nd - 1 {
            let plane = h * w;
            let mut out = vec![T::zero(); self.numel()];
            for (src, dst) in self
                .data
                .chunks_exact(plane)
                .zip(out.chunks_exact_mut(plane))
            {
                for i in 0..h {
                    for j in 0..w {
                        let (si, sj) = rot_source(q, i, j, h, w);
                        dst[i * w + j] = src[si * w + sj];
                    }
                }
            }
            return Ok(Tensor::from_parts(self.shape.clone(), out));
        }
        let strides = self.strides();
        let mut idx = vec![0usize; nd];
        let mut out = Vec::with_capacity(self.numel());
        for _ in 0..self.numel() {
            let (si, sj) = rot_source(q, idx[ra], idx[ca], h, w);
            let mut off = 0;
            for (d, &ix) in idx.iter().enumerate() {
                let ix = if d == ra {
                    si
                } else if d == ca {
                    sj
                } else {
                    ix
                };
                off += ix * strides[d];
            }
            out.push(self.data[off]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Cyclic shift along `axis`: `out[i] = in[(i - shift) mod extent]`.
    pub fn roll(&self, shift: i64, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!(
                "roll axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let n = self.shape[axis];
        let s = shift.rem_euclid(n as i64) as usize;
        if s == 0 {
            return Ok(self.clone());
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..outer {
            let base = b * n * inner;
            for i in 0..n {
                let src = (i + n - s) % n;
                out[base + i * inner..base + (i + 1) * inner]
                    .copy_from_slice(&self.data[base + src * inner..base + (src + 1) * inner]);
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Concatenate along axis 0.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "stack: shapes {:?} and {:?} differ",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Slice `[start, end)` along axis 0.
    pub fn narrow0(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::shape(format!(
                "narrow0 [{start}, {end}) of extent {}",
                self.shape[0]
            )));
        }
        let inner = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }
}

/// Source coordinates of output pixel `(i, j)` under `q` clockwise quarter
/// turns of an `h x w` plane.
#[inline]
fn rot_source(q: i64, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
    match q {
        1 => (h - 1 - j, i),
        2 => (h - 1 - i, w - 1 - j),
        3 => (j, w - 1 - i),
        _ => (i, j),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn silu<T: Float>(v: T) -> T {
    v * sigmoid(v)
}
