//! Dense row-major f32 tensors with the handful of kernels the runtime needs.
//!
//! Every matmul accumulates along the shared dimension in ascending index
//! order, one output row at a time. Results for a row therefore never depend
//! on which other rows share the call, which is what lets batched, masked and
//! head-sliced execution reproduce sequential decoding bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (last dimension in general).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected 2-D tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · rhs` for 2-D operands, or a batched product when both are 3-D
    /// with a shared leading dimension.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` where the transpose is taken over the last two dims.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor, transpose_rhs: bool) -> Result<Tensor> {
        let (batch, m, k) = batch_dims(&self.shape)?;
        let (rbatch, r0, r1) = batch_dims(&rhs.shape)?;
        let (rk, n) = if transpose_rhs { (r1, r0) } else { (r0, r1) };
        if rk != k || (rbatch != batch && rbatch != 1) || self.rank() != rhs.rank() && rhs.rank() != 2 {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}{}",
                self.shape,
                rhs.shape,
                if transpose_rhs { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0f32; batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let rb = if rbatch == 1 { 0 } else { b };
            let w = &rhs.data[rb * r0 * r1..(rb + 1) * r0 * r1];
            let o = &mut out[b * m * n..(b + 1) * m * n];
            if transpose_rhs {
                for i in 0..m {
                    let ar = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let wr = &w[j * k..(j + 1) * k];
                        let mut acc = 0.0f32;
                        for t in 0..k {
                            acc += ar[t] * wr[t];
                        }
                        o[i * n + j] = acc;
                    }
                }
            } else {
                for i in 0..m {
                    let orow = &mut o[i * n..(i + 1) * n];
                    for t in 0..k {
                        let av = a[i * k + t];
                        let wr = &w[t * n..(t + 1) * n];
                        for (dst, &wv) in orow.iter_mut().zip(wr) {
                            *dst += av * wv;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.extend([m, n]);
        Tensor::new(shape, out)
    }

    /// Swap the last two dimensions.
    pub fn transpose(&self) -> Result<Tensor> {
        let (batch, r, c) = batch_dims(&self.shape)?;
        let mut out = vec![0.0f32; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Tensor::new(shape, out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, |a, b| a + b, "add")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, |a, b| a * b, "mul")
    }

    /// Elementwise op where `rhs` may be broadcast over leading dimensions
    /// (its shape must equal a suffix of `self`'s shape).
    fn zip_broadcast(&self, rhs: &Tensor, f: impl Fn(f32, f32) -> f32, what: &str) -> Result<Tensor> {
        if rhs.shape.len() > self.shape.len()
            || self.shape[self.shape.len() - rhs.shape.len()..] != rhs.shape[..]
        {
            return Err(Error::dim(format!("{what} {:?} with {:?}", self.shape, rhs.shape)));
        }
        let period = rhs.data.len().max(1);
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rhs.data[i % period]))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("slice_cols")?;
        if start > end || end > c {
            return Err(Error::dim(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(vec![r, w], data)
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("slice_rows")?;
        if start > end || end > r {
            return Err(Error::dim(format!("row slice {start}..{end} of {r}")));
        }
        Tensor::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, |t| t.rows());
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols row mismatch"));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![r, total], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Interpret a shape as (batch, rows, cols); 2-D shapes have batch 1.
fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        n if n > 2 => Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1])),
        _ => Err(Error::dim(format!("expected at least 2-D tensor, got {shape:?}"))),
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, ties by lower index.
pub fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = a.matmul_t(&b.transpose().unwrap()).unwrap();
        assert_eq!(c, ct);
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 8.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
        assert!(a.add(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn top_k_tie_break() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.5], 3), vec![1, 2, 3]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn broadcast_add() {
        let a = Tensor::zeros(&[2, 2, 2]);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = a.add(&m).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
