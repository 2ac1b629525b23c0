//! Dense row-major float64 tensors and the raw kernels shared by the
//! tape-recorded and inference-only forward paths.
//!
//! Keeping one set of kernels means the recorded and unrecorded passes run
//! bit-identical arithmetic, which the determinism checks rely on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense multi-dimensional float64 array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::scalar(0.0)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn row(v: Vec<f64>) -> Self {
        Tensor { shape: vec![1, v.len()], data: v }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::shape("from_rows", "no rows"));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix-shaped tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a matrix-shaped tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

pub(crate) fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, "non-finite value in result"))
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. All operate on row-major slices with explicit dimensions.
// ---------------------------------------------------------------------------

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cij) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cij = s;
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Row-wise temperature-scaled softmax, stabilized by max subtraction.
/// `n` is the row width; the buffer is treated as rows of that width.
pub fn softmax_rows(x: &[f64], n: usize, temperature: f64, out: &mut [f64]) {
    debug_assert!(temperature > 0.0);
    debug_assert_eq!(x.len() % n, 0);
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = ((v - mx) / temperature).exp();
            *o = e;
            z += e;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
}

/// Per-column L2 norms of a d_out x d_in matrix: entry j = sqrt(sum_i W[i,j]^2).
pub fn column_norms(w: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut sq = vec![0.0; d_in];
    for row in w.chunks_exact(d_in) {
        for (s, &v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    for s in sq.iter_mut() {
        *s = s.sqrt();
    }
    debug_assert_eq!(w.len(), d_out * d_in);
    sq
}

/// Row-wise layer normalization: per row, (x - mean) / sqrt(var + eps) * gamma + beta.
/// Returns (normalized output, per-row inverse stddev, per-row centered/scaled x-hat)
/// so the backward pass can reuse the saved statistics.
pub fn layer_norm_rows(
    x: &[f64],
    n: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut xhat = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            let h = (xr[j] - mean) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (out, inv_std, xhat)
}

/// Entropy of a discrete distribution in nats, with 0 ln 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
