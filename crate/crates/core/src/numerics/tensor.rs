//! Dense row-major `f64` tensors.
//!
//! Values are plain data; gradient tracking lives in [`super::tape`], which
//! stores tensors as node values. Broadcasting follows the usual
//! right-aligned rules: two extents are compatible when they are equal or one
//! of them is 1.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of broadcasting `a` against `b`, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `dst` (row-major), the flat offset of the `src`
/// element that broadcasts onto it. `src` must be broadcast-compatible with
/// `dst` and not larger in any extent.
fn broadcast_offsets(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let total = numel(dst);
    if src == dst {
        return (0..total).collect();
    }
    if numel(src) == 1 {
        return vec![0; total];
    }
    let nd = dst.len();
    let lead = nd - src.len();
    // Strides of src, aligned to dst axes, zero where broadcast.
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[lead + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut out = Vec::with_capacity(total);
    let mut index = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for ax in (0..nd).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < dst[ax] {
                break;
            }
            offset -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    out
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape.to_vec(), data).expect("Tensor::from_vec")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
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

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary map with broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("{:?} vs {:?}", self.shape, other.shape),
            )
        })?;
        let oa = broadcast_offsets(&self.shape, &shape);
        let ob = broadcast_offsets(&other.shape, &shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(self.data[i], other.data[j]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} -> {:?}", self.shape, shape),
                ))
            }
        }
        let offs = broadcast_offsets(&self.shape, shape);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: offs.iter().map(|&i| self.data[i]).collect(),
        })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of
    /// [`Tensor::broadcast_to`]).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(Error::shape(
                    "sum_to_shape",
                    format!("{:?} -> {:?}", self.shape, shape),
                ))
            }
        }
        let mut out = vec![0.0; numel(shape)];
        let offs = broadcast_offsets(shape, &self.shape);
        for (&o, &v) in offs.iter().zip(&self.data) {
            out[o] += v;
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Shape obtained by reducing `axes` to extent 1.
    pub fn reduced_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mut shape = self.shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape(
                    "reduce",
                    format!("axis {} out of range for {:?}", ax, self.shape),
                ));
            }
            shape[ax] = 1;
        }
        Ok(shape)
    }

    /// Sum over `axes`, keeping reduced axes with extent 1.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let shape = self.reduced_shape(axes)?;
        self.sum_to_shape(&shape)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.matrix_dims("matmul")?;
        let (k2, m) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        let (k, n) = self.matrix_dims("matmul_tn")?;
        let (k2, m) = other.matrix_dims("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.matrix_dims("matmul_nt")?;
        let (m, k2) = other.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Numerically stable `ln Σ exp` over the last axis; the last axis is
    /// dropped from the result shape.
    pub fn logsumexp_last(&self) -> Result<Self> {
        let last = *self
            .shape
            .last()
            .ok_or_else(|| Error::shape("logsumexp", "scalar input"))?;
        if last == 0 {
            return Err(Error::shape("logsumexp", "empty last axis"));
        }
        let data = self
            .data
            .chunks(last)
            .map(logsumexp_slice)
            .collect();
        Ok(Tensor {
            shape: self.shape[..self.shape.len() - 1].to_vec(),
            data,
        })
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {} range {}..{} of {:?}", axis, start, start + len, self.shape),
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
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {} for rank {}", axis, nd)));
        }
        for p in parts {
            let ok = p.ndim() == nd
                && (0..nd).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", first.shape, p.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
