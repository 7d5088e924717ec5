//! Dense row-major `f64` tensors and the instrumented kernels built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::counter::{Category, Meter};
use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 3. Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must have rank 1-3 with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Entries drawn uniformly from `[-1, 1)` with a ChaCha8 stream seeded by
    /// `seed`.
    pub fn random_uniform(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for kernels that already guarantee the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor kernel"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Rows of a matrix; a vector is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Same data, different shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), data)
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over rows, giving a vector of length `cols`.
    pub fn col_sums(&self) -> Self {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![c],
            data: out,
        }
    }

    /// Columns `[start, end)` of a matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("col_slice")?;
        if start >= end || end > n {
            return Err(Error::dim("col_slice", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Self {
            shape: vec![m, w],
            data,
        })
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let (m, _) = first.require_matrix("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.require_matrix("concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", &first.shape, &p.shape));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![m, total],
            data,
        })
    }

    /// Rows gathered by index, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.require_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::dim("gather_rows", &self.shape, &[i]));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), n],
            data,
        })
    }
}

/// `C = A·B`. Records `m·n·k` MACs under `category`.
pub fn matmul(a: &Tensor, b: &Tensor, category: Category, meter: Meter<'_>) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    meter.record(category, (m * n * k) as u64);
    Tensor::from_parts(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(x, false)
}

/// Row-wise softmax; with `causal`, row `i` only spans columns `0..=i` and
/// the remaining weights are exactly zero.
pub(crate) fn softmax_rows_masked(x: &Tensor, causal: bool) -> Result<Tensor> {
    let (m, n) = x.require_matrix("softmax_rows")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let width = if causal { (i + 1).min(n) } else { n };
        let row = &x.row(i)[..width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..i * n + width];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` with population variance.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = x.require_matrix("layer_norm_rows")?;
    if n < 2 {
        return Err(Error::Contract(
            "layer norm needs at least two columns".into(),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Contract(format!(
            "layer norm eps must be positive, got {eps}"
        )));
    }
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::dim("layer_norm_rows", x.shape(), gamma.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let (mean, inv_std) = row_moments(x.row(i), eps);
        for j in 0..n {
            let xhat = (x.at(i, j) - mean) * inv_std;
            out[i * n + j] = xhat * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Averages each run of `r` consecutive rows. Records `T·d` pooling adds.
pub fn mean_pool_strided(x: &Tensor, r: usize, meter: Meter<'_>) -> Result<Tensor> {
    let (t, d) = x.require_matrix("mean_pool_strided")?;
    if r == 0 || t % r != 0 {
        return Err(Error::dim("mean_pool_strided", x.shape(), &[r]));
    }
    let out_rows = t / r;
    let mut out = vec![0.0; out_rows * d];
    for i in 0..out_rows {
        let orow = &mut out[i * d..(i + 1) * d];
        for src in i * r..(i + 1) * r {
            for (o, v) in orow.iter_mut().zip(x.row(src)) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o /= r as f64;
        }
    }
    meter.record(Category::Pooling, (t * d) as u64);
    Tensor::from_parts(vec![out_rows, d], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v.max(0.0))
}

/// Adds a length-`n` vector to every row of an `m×n` matrix.
pub fn add_row_broadcast(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, n) = x.require_matrix("add_row_broadcast")?;
    if b.shape() != [n] {
        return Err(Error::dim("add_row_broadcast", x.shape(), b.shape()));
    }
    let data = x
        .data
        .chunks(n)
        .flat_map(|row| row.iter().zip(&b.data).map(|(v, c)| v + c))
        .collect();
    Tensor::from_parts(x.shape.clone(), data)
}
