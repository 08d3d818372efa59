//! Dense row-major N-dimensional arrays and the raw (non-differentiable) kernels
//! the autodiff tape is built on.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of an [`NdArray`]. Implemented for `f32`
/// (training) and `f64` (gradient checking).
pub trait Element:
    Float
    + FromPrimitive
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
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be in
    /// bounds of the corresponding slice. Callers go through [`gemm`], which checks.
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
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn as_f64(self) -> f64 {
        self
    }

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided 2-D view into a slice, used to describe gemm operands.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked `C = alpha * A * B + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "gemm output dimension");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let o = i * cv.row_stride + j * cv.col_stride;
                c[o] = if beta == T::zero() { T::zero() } else { c[o] * beta };
            }
        }
        return;
    }
    assert!(av.max_offset() < a.len(), "gemm A view out of bounds");
    assert!(bv.max_offset() < b.len(), "gemm B view out of bounds");
    assert!(cv.max_offset() < c.len(), "gemm C view out of bounds");
    // SAFETY: all views were checked against their slices above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        )
    }
}

/// Dense row-major array. A zero-length shape denotes a scalar.
#[derive(Clone, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for NdArray<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "NdArray{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..SHOWN])
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy broadcasting of two shapes (trailing dimensions aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every index of `shape`, passing the flat offsets under each stride set.
fn for_each_offset<const K: usize>(
    shape: &[usize],
    stride_sets: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    if shape.is_empty() {
        f([0; K]);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let nd = shape.len();
    let last = shape[nd - 1];
    let inner: [usize; K] = std::array::from_fn(|k| stride_sets[k][nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = [0usize; K];
    loop {
        let mut off = base;
        for _ in 0..last {
            f(off);
            for k in 0..K {
                off[k] += inner[k];
            }
        }
        // odometer over the leading axes
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += stride_sets[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                base[k] -= stride_sets[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

impl<T: Element> NdArray<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        NdArray {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        NdArray {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let off: usize = index
            .iter()
            .zip(strides(&self.shape))
            .zip(&self.shape)
            .map(|((&i, s), &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum();
        self.data[off]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise combination of two arrays of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shapes");
        NdArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Element>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshaped(shape)
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Combines two arrays under NumPy broadcasting.
    pub fn broadcast_zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(self.zip_map(other, f));
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape).map_err(|_| {
            Error::shape(
                op,
                format!("{:?} and {:?} are not broadcast-compatible", self.shape, other.shape),
            )
        })?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, [&sa, &sb], |[ia, ib]| {
            data.push(f(self.data[ia], other.data[ib]))
        });
        Ok(NdArray {
            shape: out_shape,
            data,
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shapes(&self.shape, shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", self.shape),
            ));
        }
        if out == self.shape {
            return Ok(self.clone());
        }
        let sa = broadcast_strides(&self.shape, &out);
        let mut data = Vec::with_capacity(numel(&out));
        for_each_offset(&out, [&sa], |[i]| data.push(self.data[i]));
        Ok(NdArray { shape: out, data })
    }

    /// Sums a broadcast result back down to `shape`; the adjoint of [`broadcast_to`](Self::broadcast_to).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shapes(shape, &self.shape)?;
        if check != self.shape {
            return Err(Error::shape(
                "sum_to_shape",
                format!("{:?} is not a broadcast of {shape:?}", self.shape),
            ));
        }
        let so = broadcast_strides(shape, &self.shape);
        let si = strides(&self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_offset(&self.shape, [&si, &so], |[i, o]| data[o] += self.data[i]);
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if order.len() != nd
            || order.iter().any(|&o| o >= nd || std::mem::replace(&mut seen[o], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{order:?} is not a permutation of {nd} axes"),
            ));
        }
        let own = strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&o| self.shape[o]).collect();
        let src: Vec<usize> = order.iter().map(|&o| own[o]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&out_shape, [&src], |[i]| data.push(self.data[i]));
        Ok(NdArray {
            shape: out_shape,
            data,
        })
    }

    /// Sums over `axes`; reduced axes are kept with size 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Self> {
        let nd = self.shape.len();
        if let Some(&a) = axes.iter().find(|&&a| a >= nd) {
            return Err(Error::shape(
                "sum_axes",
                format!("axis {a} out of range for {:?}", self.shape),
            ));
        }
        let kept: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let reduced = self.sum_to_shape(&kept)?;
        if keepdim {
            Ok(reduced)
        } else {
            let squeezed: Vec<usize> = self
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            reduced.into_reshaped(&squeezed)
        }
    }

    /// Maximum along one axis (kept with size 1).
    pub fn max_axis_keepdim(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::shape("max_axis", format!("axis {axis} out of range")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (m, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(NdArray { shape, data: out })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(NdArray { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let compatible = p.shape.len() == nd
                && (0..nd).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape, p.shape),
                ));
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
        Ok(NdArray { shape, data })
    }

    /// Batched matrix product over the last two axes, optionally transposing
    /// either operand's matrices. Batch axes must match unless one side is 2-D.
    pub fn matmul_t(&self, ta: bool, other: &Self, tb: bool) -> Result<Self> {
        let (a, b) = (self, other);
        if a.ndim() < 2 || b.ndim() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {:?} and {:?}", a.shape, b.shape),
            ));
        }
        let mat = |s: &[usize], t: bool| {
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let v = MatView::row_major(r, c);
            if t {
                v.t()
            } else {
                v
            }
        };
        let av = mat(&a.shape, ta);
        let bv = mat(&b.shape, tb);
        if av.cols != bv.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?}{} x {:?}{}",
                    a.shape,
                    if ta { "^T" } else { "" },
                    b.shape,
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let a_batch = &a.shape[..a.ndim() - 2];
        let b_batch = &b.shape[..b.ndim() - 2];

        // A batched with a shared 2-D right operand collapses to one large product.
        if b_batch.is_empty() && !ta {
            let rows = a.len() / k;
            let mut data = vec![T::zero(); rows * n];
            gemm(
                T::one(),
                &a.data,
                MatView::row_major(rows, k),
                &b.data,
                bv,
                T::zero(),
                &mut data,
                MatView::row_major(rows, n),
            );
            let mut shape = a_batch.to_vec();
            shape.extend([m, n]);
            return Ok(NdArray { shape, data });
        }

        let batch_shape = if a_batch == b_batch || b_batch.is_empty() {
            a_batch.to_vec()
        } else if a_batch.is_empty() {
            b_batch.to_vec()
        } else {
            return Err(Error::shape(
                "matmul",
                format!("batch axes {a_batch:?} and {b_batch:?} differ"),
            ));
        };
        let batches = numel(&batch_shape);
        let a_step = if a_batch.is_empty() { 0 } else { m * k };
        let b_step = if b_batch.is_empty() { 0 } else { k * n };
        let mut data = vec![T::zero(); batches * m * n];
        for i in 0..batches {
            gemm(
                T::one(),
                &a.data[i * a_step..i * a_step + m * k],
                av,
                &b.data[i * b_step..i * b_step + k * n],
                bv,
                T::zero(),
                &mut data[i * m * n..(i + 1) * m * n],
                MatView::row_major(m, n),
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(NdArray { shape, data })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arange(shape: &[usize]) -> NdArray<f64> {
        NdArray::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(NdArray::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(NdArray::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn permute_moves_axes() {
        let x = arange(&[2, 3, 4]);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]), x.get(&[i, j, k]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcasting_follows_trailing_alignment() {
        let a = arange(&[2, 3]);
        let b = NdArray::<f64>::from_f64(&[3], &[10.0, 20.0, 30.0]).unwrap();
        let c = a.broadcast_zip(&b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let col = NdArray::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let d = b.broadcast_zip(&col, "mul", |x, y| x * y).unwrap();
        assert_eq!(d.shape(), &[2, 3]);
        assert_eq!(d.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn sum_to_shape_is_adjoint_of_broadcast() {
        let b = NdArray::<f64>::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let big = b.broadcast_to(&[2, 3, 4]).unwrap();
        let back = big.sum_to_shape(&[3, 1]).unwrap();
        assert_eq!(back.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn sum_axes_and_max() {
        let x = arange(&[2, 3]);
        assert_eq!(x.sum_axes(&[1], false).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(x.sum_axes(&[0], true).unwrap().shape(), &[1, 3]);
        assert_eq!(x.max_axis_keepdim(1).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = arange(&[2, 5, 3]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(NdArray::concat(&[&a, &b], 1).unwrap(), x);
        assert!(x.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn matmul_shapes_and_values() {
        let a = NdArray::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = NdArray::<f64>::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul_t(true, &b, false).unwrap().data(), &[26.0, 30.0, 38.0, 44.0]);
        assert_eq!(a.matmul_t(false, &b, true).unwrap().data(), &[17.0, 23.0, 39.0, 53.0]);
        let x = arange(&[3, 4, 5]);
        let w = arange(&[5, 6]);
        assert_eq!(x.matmul(&w).unwrap().shape(), &[3, 4, 6]);
        assert!(arange(&[4, 5]).matmul(&arange(&[7, 6])).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_batch_products() {
        let a = arange(&[2, 3, 4]);
        let b = arange(&[2, 4, 2]).map(|v| v * 0.5 - 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..2 {
            let ai = a.narrow(0, i, 1).unwrap().into_reshaped(&[3, 4]).unwrap();
            let bi = b.narrow(0, i, 1).unwrap().into_reshaped(&[4, 2]).unwrap();
            let ci = c.narrow(0, i, 1).unwrap().into_reshaped(&[3, 2]).unwrap();
            assert_eq!(ai.matmul(&bi).unwrap(), ci);
        }
    }
}
