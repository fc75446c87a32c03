//! Dense f32 kernels.
//!
//! Every reduction runs left to right over its index range, so results are
//! bit-reproducible for identical inputs. Transcendentals go through `libm`
//! so they do not depend on the platform's C math library.

use std::ops::Range;

use crate::error::{Error, Result};

/// Row-major matrix of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of a contiguous band of rows.
    pub fn slice_rows(&self, range: Range<usize>) -> Tensor2D {
        assert!(range.end <= self.rows, "row range out of bounds");
        Tensor2D {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Copy of a contiguous band of columns.
    pub fn slice_cols(&self, range: Range<usize>) -> Tensor2D {
        assert!(range.end <= self.cols, "column range out of bounds");
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Tensor2D {
            rows: self.rows,
            cols: range.len(),
            data,
        }
    }

    /// Copy of the sub-block `rows × cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Tensor2D {
        assert!(rows.end <= self.rows && cols.end <= self.cols);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Tensor2D {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(format!(
                    "vstack: {} columns vs {cols}",
                    p.cols
                )));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Concatenates matrices side by side; all must share a row count.
    pub fn hstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let rows = parts.first().map_or(0, |t| t.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(format!("hstack: {} rows vs {rows}", p.rows)));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Overwrites the rows starting at `start` with `src`.
    pub fn write_rows(&mut self, start: usize, src: &Tensor2D) {
        assert_eq!(src.cols, self.cols);
        assert!(start + src.rows <= self.rows);
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.check_same(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor2D { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor2D {
        Tensor2D {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor2D {
        Tensor2D {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Tensor2D, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// `‖a − b‖_F / ‖b‖_F` in f64. Returns the absolute difference norm when `b` is zero.
pub fn relative_frobenius_error(a: &Tensor2D, b: &Tensor2D) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    let mut diff = 0.0f64;
    let mut base = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = f64::from(x) - f64::from(y);
        diff += d * d;
        base += f64::from(y) * f64::from(y);
    }
    if base == 0.0 {
        diff.sqrt()
    } else {
        (diff / base).sqrt()
    }
}

/// Matrix product. Each output entry accumulates over the shared dimension
/// in increasing index order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transposed: {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let br = b.row(j);
            let mut acc = 0.0f32;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Softmax of `scale · row` for every row, stabilised by subtracting the row
/// maximum. Entries equal to −∞ receive zero weight; a row that is entirely
/// −∞ comes back as all zeros.
pub fn row_softmax(a: &Tensor2D, scale: f32) -> Tensor2D {
    let mut out = Tensor2D::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        softmax_into(a.row(r), scale, out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_into(src: &[f32], scale: f32, dst: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in src {
        let s = scaled_logit(v, scale);
        if s > max {
            max = s;
        }
    }
    if max == f32::NEG_INFINITY {
        dst.fill(0.0);
        return;
    }
    let mut sum = 0.0f32;
    for (d, &v) in dst.iter_mut().zip(src) {
        let e = libm::expf(scaled_logit(v, scale) - max);
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

#[inline]
fn scaled_logit(v: f32, scale: f32) -> f32 {
    // keep masked entries at -inf even when scale is 0
    if v == f32::NEG_INFINITY {
        v
    } else {
        v * scale
    }
}

/// Per-row standardisation followed by an affine `gain`/`bias`.
pub fn layer_norm(a: &Tensor2D, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor2D> {
    if gain.len() != a.cols || bias.len() != a.cols {
        return Err(Error::shape(format!(
            "layer_norm: gain {} / bias {} for {} columns",
            gain.len(),
            bias.len(),
            a.cols
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let n = a.cols as f32;
    let mut out = Tensor2D::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let src = a.row(r);
        let mut sum = 0.0f32;
        for &v in src {
            sum += v;
        }
        let mean = sum / n;
        let mut sq = 0.0f32;
        for &v in src {
            let d = v - mean;
            sq += d * d;
        }
        let inv = 1.0 / libm::sqrtf(sq / n + eps);
        let row = out.row_mut(r);
        let mut drift = 0.0f32;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = (v - mean) * inv;
            drift += *o;
        }
        // the rounded mean leaves a residual offset; remove it
        let drift = drift / n;
        for ((o, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *o = (*o - drift) * g + b;
        }
    }
    Ok(out)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanhf(C * (x + 0.044_715 * x * x * x)))
}
