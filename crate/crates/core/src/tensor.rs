//! Dense row-major `f64` tensors and flat-vector helpers.
//!
//! Every constructor rejects NaN and infinities, so a `Tensor` that exists
//! holds only finite values. Matrix kernels are written for the shapes this
//! crate sees in practice: tall data matrices times narrow weight matrices.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

/// Norms below this are treated as zero when normalizing or measuring angles.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim(format!("shape {shape:?} needs {expected} values, got {}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a tensor without the finiteness scan. Callers must guarantee it.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return dim(format!("{what} must be 2-d, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose operand")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul lhs")?;
        let (k2, n) = other.require_matrix("matmul rhs")?;
        if k != k2 {
            return dim(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let bt = other.transpose()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot_unchecked(a, &bt.data[j * k..(j + 1) * k]);
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul_tn lhs")?;
        let (m2, n) = other.require_matrix("matmul_tn rhs")?;
        if m != m2 {
            return dim(format!("matmul_tn ({m}x{k})ᵀ by {m2}x{n}"));
        }
        // Accumulate column j of the result as a contiguous row of `acc`.
        let mut acc = vec![0.0; n * k];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let s = other.data[i * n + j];
                if s != 0.0 {
                    axpy(&mut acc[j * k..(j + 1) * k], s, a);
                }
            }
        }
        Tensor::from_raw(vec![n, k], acc).transpose()
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul_nt lhs")?;
        let (n, k2) = other.require_matrix("matmul_nt rhs")?;
        if k != k2 {
            return dim(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot_unchecked(a, &other.data[j * k..(j + 1) * k]);
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Copies the listed rows of a 2-d tensor into a new tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.require_matrix("gather source")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return dim(format!("row {i} out of range for {r} rows"));
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_raw(vec![rows.len(), c], out))
    }
}

/// Dot product with four accumulators so the loop vectorizes.
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `y += s * x`.
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim(format!("dot of lengths {} and {}", a.len(), b.len()));
    }
    Ok(dot_unchecked(a, b))
}

pub fn l2_norm(a: &[f64]) -> f64 {
    // Scale first so huge or tiny entries do not overflow or underflow.
    let m = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let s: f64 = a.iter().map(|v| (v / m) * (v / m)).sum();
    m * s.sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Returns `None` when either vector has norm below [`EPS_NORM`]; the angle is
/// undefined there and callers flag it instead of propagating NaN.
pub fn cosine_angle(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return dim(format!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < EPS_NORM || nb < EPS_NORM {
        return Ok(None);
    }
    let c = dot_unchecked(a, b) / (na * nb);
    Ok(Some(c.clamp(-1.0, 1.0)))
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Sum of equally long vectors; empty input gives an empty vector.
pub fn sum_vectors<V: AsRef<[f64]>>(vs: &[V]) -> Vec<f64> {
    let Some(first) = vs.first() else {
        return Vec::new();
    };
    let mut out = first.as_ref().to_vec();
    for v in &vs[1..] {
        axpy(&mut out, 1.0, v.as_ref());
    }
    out
}

/// `a / ‖a‖`, or `None` when the norm is below [`EPS_NORM`].
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(a);
    (n >= EPS_NORM).then(|| scaled(a, 1.0 / n))
}
