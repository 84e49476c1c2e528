use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (default) and `f64` (used to
/// tighten gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Self {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| T::of(x)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn identity(n: usize) -> Self {
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

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count: the product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, p],
            data: matmul_raw(&self.data, &other.data, m, k, p),
        })
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let out = &mut c[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    c
}

/// A·Bᵀ for A[m×k], B[p×k].
pub(crate) fn matmul_nt_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            c[i * p + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// Aᵀ·B for A[k×m], B[k×p].
pub(crate) fn matmul_tn_raw<T: Real>(a: &[T], b: &[T], k: usize, m: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for t in 0..k {
        let brow = &b[t * p..(t + 1) * p];
        for i in 0..m {
            let av = a[t * m + i];
            if av == T::zero() {
                continue;
            }
            let out = &mut c[i * p..(i + 1) * p];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    c
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Guard used for zero-norm vectors in cosine and normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Row-wise `softmax(scale · row)` with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if !(scale > T::zero()) {
        return Err(Error::Contract(format!("softmax scale must be > 0, got {scale}")));
    }
    x.ensure_finite("softmax_rows input")?;
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row, scale, None);
    }
    Ok(out)
}

/// Softmax over `row` scaled by `scale`; columns with `mask[j] == false` get 0.
/// At least one column must be valid.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], scale: T, mask: Option<&[bool]>) {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if valid(j) && v * scale > max {
            max = v * scale;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v * scale - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize<T: Real>(v: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Contract(format!("normalize eps must be > 0, got {eps}")));
    }
    let n = norm(&v.data).max(eps);
    Ok(v.map(|x| x / n))
}

/// Cosine similarity with a zero-norm guard; 0 when either side is zero.
pub fn cosine<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked<T: Real>(u: &[T], v: &[T]) -> T {
    let eps = T::of(NORM_EPS);
    let c = dot(u, v) / (norm(u).max(eps) * norm(v).max(eps));
    c.max(-T::one()).min(T::one())
}
