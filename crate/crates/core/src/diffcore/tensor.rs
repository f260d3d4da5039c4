use std::fmt;

use crate::error::{invalid, Result};

/// Dense row-major `f64` tensor. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {idx:?} out of bounds for shape {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy broadcast of two shapes: align on the right, sizes must match or
/// one of them must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return invalid(format!("shapes {a:?} and {b:?} are not broadcast-compatible"));
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the linear index of the broadcast
/// source element in a tensor of shape `in_shape`.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> BroadcastIndex {
    let out_len: usize = out_shape.iter().product();
    let in_len: usize = in_shape.iter().product();
    if out_shape == in_shape {
        return BroadcastIndex::Same;
    }
    if in_len == 1 {
        return BroadcastIndex::Scalar;
    }
    let trimmed: &[usize] = {
        let lead = in_shape.iter().take_while(|&&d| d == 1).count();
        &in_shape[lead..]
    };
    if trimmed.len() <= out_shape.len() && out_shape[out_shape.len() - trimmed.len()..] == *trimmed {
        return BroadcastIndex::Cycle(in_len);
    }
    let n = out_shape.len();
    let in_strides = strides_of(in_shape);
    let mut eff = vec![0; n];
    for i in 0..in_shape.len() {
        let k = n - in_shape.len() + i;
        eff[k] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let mut idx = vec![0usize; n];
    let mut map = Vec::with_capacity(out_len);
    let mut off = 0usize;
    for _ in 0..out_len {
        map.push(off);
        for k in (0..n).rev() {
            idx[k] += 1;
            off += eff[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= eff[k] * idx[k];
            idx[k] = 0;
        }
    }
    BroadcastIndex::Map(map)
}

pub(crate) enum BroadcastIndex {
    Same,
    Scalar,
    Cycle(usize),
    Map(Vec<usize>),
}

impl BroadcastIndex {
    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            BroadcastIndex::Same => i,
            BroadcastIndex::Scalar => 0,
            BroadcastIndex::Cycle(n) => i % n,
            BroadcastIndex::Map(m) => m[i],
        }
    }
}
