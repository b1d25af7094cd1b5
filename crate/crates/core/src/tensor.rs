//! Dense row-major tensors of `f64` and the handful of primitives the rest
//! of the crate is built from: axis-list contraction, outer products,
//! concatenation, permutation and reshaping.
//!
//! Contraction follows Einstein summation with explicit axis lists instead
//! of a subscript string. `contract(x, w, &[0], &[0])` with `x` of shape
//! `[I]` and `w` of shape `[I, J, K]` computes `y[j, k] = Σ_i x[i] w[i, j, k]`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense N-order array stored row-major (last index fastest).
///
/// A tensor of order 0 is a scalar with an empty shape and one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "dimension sizes must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Order-1 tensor from a vector of values. Panics on an empty vector.
    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "vector must be non-empty");
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Order-2 tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("matrix rows have unequal lengths".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "dimension sizes must be positive");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            for v in &mut t.data {
                *v = rng.random_range(-bound..bound);
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of an order-0 tensor (or the sole element of any one-element tensor).
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index order mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for shape {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let n = self.order();
        if axes.len() != n {
            return Err(Error::Shape(format!(
                "permutation {axes:?} does not match order {n}"
            )));
        }
        let mut seen = vec![false; n];
        for &a in axes {
            if a >= n || std::mem::replace(&mut seen[a], true) {
                return Err(Error::Shape(format!("{axes:?} is not a permutation of 0..{n}")));
            }
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        let mut src = 0usize;
        let inner = n - 1;
        let inner_len = out_shape[inner];
        let inner_stride = gather[inner];
        loop {
            let mut s = src;
            for _ in 0..inner_len {
                out.push(self.data[s]);
                s += inner_stride;
            }
            // advance the outer odometer
            let mut k = inner;
            loop {
                if k == 0 {
                    return Ok(Tensor::from_parts(out_shape, out));
                }
                k -= 1;
                idx[k] += 1;
                src += gather[k];
                if idx[k] < out_shape[k] {
                    break;
                }
                src -= gather[k] * idx[k];
                idx[k] = 0;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`, shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise `|a - b| / max(1, |b|)`.
    pub fn max_rel_diff(&self, reference: &Tensor) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(Error::Shape(format!(
                "comparing {:?} with {:?}",
                self.shape, reference.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max))
    }

    /// Binary layout: order as little-endian `u32`, each dimension as `u64`,
    /// then the elements as little-endian `f64` in row-major order.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let bad = |msg: String| Error::InvalidArgument(format!("tensor file: {msg}"));
        let io = |e: std::io::Error| bad(e.to_string());
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let order = u32::from_le_bytes(b4) as usize;
        if order > 64 {
            return Err(bad(format!("implausible order {order}")));
        }
        let mut shape = Vec::with_capacity(order);
        let mut b8 = [0u8; 8];
        for _ in 0..order {
            r.read_exact(&mut b8).map_err(io)?;
            let d = u64::from_le_bytes(b8);
            shape.push(usize::try_from(d).map_err(|_| bad(format!("dimension {d}")))?);
        }
        check_shape(&shape)?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() != n * 8 {
            return Err(bad(format!(
                "shape {shape:?} needs {} payload bytes, found {}",
                n * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn check_axes(t: &Tensor, axes: &[usize], which: &str) -> Result<()> {
    let mut seen = vec![false; t.order()];
    for &a in axes {
        if a >= t.order() {
            return Err(Error::Shape(format!(
                "axis {a} out of range for {which} of shape {:?}",
                t.shape
            )));
        }
        if std::mem::replace(&mut seen[a], true) {
            return Err(Error::Shape(format!("axis {a} repeated in {which} axis list")));
        }
    }
    Ok(())
}

/// Row-major `c = a · b` (+ `c` when `accumulate`), with explicit strides
/// for the two operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every index the
    // stride/shape pairs address; `c` is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sums products over the paired axes `axes_a[i]` ↔ `axes_b[i]`.
///
/// The result's axes are the free axes of `a` followed by the free axes of
/// `b`, each in their original order. Contracting every axis yields a scalar.
pub fn contract(a: &Tensor, b: &Tensor, axes_a: &[usize], axes_b: &[usize]) -> Result<Tensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::Shape(format!(
            "axis lists {axes_a:?} and {axes_b:?} differ in length"
        )));
    }
    check_axes(a, axes_a, "left operand")?;
    check_axes(b, axes_b, "right operand")?;
    for (&ia, &ib) in axes_a.iter().zip(axes_b) {
        if a.shape[ia] != b.shape[ib] {
            return Err(Error::Shape(format!(
                "cannot contract {:?} with {:?}: axis {ia} has size {} but axis {ib} has size {}",
                a.shape, b.shape, a.shape[ia], b.shape[ib]
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.order()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|i| !axes_b.contains(i)).collect();
    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = axes_a.iter().map(|&i| a.shape[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    // Left operand as an m×k matrix: either [free.., paired..] (row-major)
    // or [paired.., free..] (transposed view), otherwise permute.
    let a_free_first: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let a_paired_first: Vec<usize> = axes_a.iter().chain(&free_a).copied().collect();
    let is_identity = |p: &[usize]| p.iter().enumerate().all(|(i, &v)| i == v);
    let a_perm;
    let (a_data, a_rs, a_cs): (&[f64], isize, isize) = if is_identity(&a_free_first) {
        (&a.data, k as isize, 1)
    } else if is_identity(&a_paired_first) {
        (&a.data, 1, m as isize)
    } else {
        a_perm = a.permute(&a_free_first)?;
        (&a_perm.data, k as isize, 1)
    };

    let b_paired_first: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let b_free_first: Vec<usize> = free_b.iter().chain(axes_b).copied().collect();
    let b_perm;
    let (b_data, b_rs, b_cs): (&[f64], isize, isize) = if is_identity(&b_paired_first) {
        (&b.data, n as isize, 1)
    } else if is_identity(&b_free_first) {
        (&b.data, 1, k as isize)
    } else {
        b_perm = b.permute(&b_paired_first)?;
        (&b_perm.data, n as isize, 1)
    };

    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a_data, a_rs, a_cs, b_data, b_rs, b_cs, &mut out, false);
    let shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    Ok(Tensor::from_parts(shape, out))
}

/// Outer product of order-1 tensors: `out[i1, .., in] = Π_k vs[k][i_k]`.
pub fn outer(vs: &[&Tensor]) -> Result<Tensor> {
    if vs.is_empty() {
        return Err(Error::InvalidArgument("outer product of zero vectors".into()));
    }
    for v in vs {
        if v.order() != 1 {
            return Err(Error::Shape(format!(
                "outer product needs order-1 inputs, got shape {:?}",
                v.shape
            )));
        }
    }
    let mut data = vs[0].data.clone();
    for v in &vs[1..] {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &x in &data {
            next.extend(v.data.iter().map(|&y| x * y));
        }
        data = next;
    }
    let shape = vs.iter().map(|v| v.shape[0]).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenates order-1 tensors in argument order.
pub fn concat(vs: &[&Tensor]) -> Result<Tensor> {
    if vs.is_empty() {
        return Err(Error::InvalidArgument("concatenation of zero vectors".into()));
    }
    let mut data = Vec::new();
    for v in vs {
        if v.order() != 1 {
            return Err(Error::Shape(format!(
                "concatenation needs order-1 inputs, got shape {:?}",
                v.shape
            )));
        }
        data.extend_from_slice(&v.data);
    }
    Ok(Tensor::vector(data))
}
