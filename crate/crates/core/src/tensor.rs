//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Every kernel is a pure function of its inputs with a fixed summation
//! order, so repeated runs on one platform are bit-identical.

use crate::error::{Error, Result};

/// Rank-N row-major array of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected = checked_numel(&shape)?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extents of a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::Shape(format!("expected rank-3 tensor, got shape {s:?}"))),
        }
    }

    /// Size of the trailing dimension (the "row" length for row-wise kernels).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other` for identically shaped tensors.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count overflows for {shape:?}")))
}

/// `a[M,K] × b[K,P]`. Each output element accumulates over `K` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: [{m},{k}] x [{k2},{p}]"
        )));
    }
    let mut out = vec![0.0f32; m * p];
    let bd = b.data();
    for (i, out_row) in out.chunks_exact_mut(p).enumerate() {
        let a_row = a.row(i);
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, p], out)
}

/// `x[T,K] × w[K,P] + bias[P]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        let p = y.last_dim();
        if b.len() != p {
            return Err(Error::Shape(format!(
                "bias length {} does not match output width {p}",
                b.len()
            )));
        }
        for row in y.data_mut().chunks_exact_mut(p) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Numerically stable softmax of one row, in place.
///
/// The normalizer is accumulated in `f64` so rows sum to one within a few
/// ulps even for rows of a few thousand entries.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the trailing dimension of `x`.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.last_dim();
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Indices of the `k` largest entries of `v`, returned in ascending index
/// order. Equal values prefer the lower index.
pub fn topk_indices(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::Argument(format!(
            "top-k count {k} outside [1, {}]",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() {
        // Total order: larger value first, then lower index.
        idx.select_nth_unstable_by(k - 1, |&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Select rows `idx` of a time-major `[T,N]` tensor.
pub fn gather_time(z: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (t, n) = z.dims2()?;
    if idx.is_empty() {
        return Err(Error::Argument("gather with empty index list".into()));
    }
    for (j, &i) in idx.iter().enumerate() {
        if i >= t {
            return Err(Error::Argument(format!(
                "gather index {i} at position {j} out of range for length {t}"
            )));
        }
        if j > 0 && idx[j - 1] >= i {
            return Err(Error::Argument(format!(
                "gather indices not strictly ascending at position {j} ({} then {i})",
                idx[j - 1]
            )));
        }
    }
    let mut out = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        out.extend_from_slice(z.row(i));
    }
    Tensor::new(vec![idx.len(), n], out)
}

/// Layer normalization over the trailing dimension.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "layernorm parameters ({}, {}) do not match width {c}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    gelu_in_place(&mut out);
    out
}

pub fn gelu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = gelu_scalar(*v);
    }
}

/// 1-D convolution over time.
///
/// `x` is time-major `[T_in, C_in]`, `w` is `[C_out, C_in, K]`, `b` is
/// `[C_out]`. Output is `[T_out, C_out]` with
/// `T_out = (T_in + 2*padding - K) / stride + 1`; out-of-range taps read zero.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (t_in, c_in) = x.dims2()?;
    let (c_out, c_in_w, k) = w.dims3()?;
    if c_in != c_in_w {
        return Err(Error::Shape(format!(
            "conv1d input channels {c_in} vs kernel channels {c_in_w}"
        )));
    }
    if b.len() != c_out {
        return Err(Error::Shape(format!(
            "conv1d bias length {} vs output channels {c_out}",
            b.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("conv1d stride must be positive".into()));
    }
    let padded = t_in + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "conv1d kernel {k} longer than padded input {padded}"
        )));
    }
    let t_out = (padded - k) / stride + 1;

    // Repack to [K, C_in, C_out] so each tap is a row-vector x matrix product.
    let wd = w.data();
    let mut taps = vec![0.0f32; k * c_in * c_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            for kk in 0..k {
                taps[(kk * c_in + ci) * c_out + co] = wd[(co * c_in + ci) * k + kk];
            }
        }
    }

    let mut out = vec![0.0f32; t_out * c_out];
    for (to, out_row) in out.chunks_exact_mut(c_out).enumerate() {
        out_row.copy_from_slice(b.data());
        for kk in 0..k {
            let pos = to * stride + kk;
            if pos < padding || pos - padding >= t_in {
                continue;
            }
            let x_row = x.row(pos - padding);
            let tap = &taps[kk * c_in * c_out..(kk + 1) * c_in * c_out];
            for (ci, &xv) in x_row.iter().enumerate() {
                let w_row = &tap[ci * c_out..(ci + 1) * c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_out, c_out], out)
}
