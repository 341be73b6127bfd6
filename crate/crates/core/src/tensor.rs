//! Dense row-major `f64` tensors and the forward kernels the graph builds on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
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

    /// Leading dimension when viewed as a matrix (all but the last axis).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.data.len() == other.data.len() && self.rows() == other.rows()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
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
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax. Entries equal to `-inf` are masked and map to exactly 0.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateSlice { index: r });
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                math::exp(*v - max)
            };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateSlice { index: r });
        }
        let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    match axis {
        0 => Ok(softmax_rows(&x.transpose())?
            .transpose()
            .reshape(x.shape())?),
        1 => softmax_rows(x),
        _ => Err(Error::Config(alloc::format!(
            "softmax axis {axis} out of range"
        ))),
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row standardisation; returns the normalised rows and the inverse std per row.
pub fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = x.data.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        inv_std,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), ab);
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), ab);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_mask_and_degenerate() {
        let x = Tensor::row_vector(vec![f64::NEG_INFINITY, 0.0]);
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.0, 1.0]);
        let all = Tensor::row_vector(vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(softmax_rows(&all), Err(Error::DegenerateSlice { index: 0 }));
        let z = Tensor::row_vector(vec![0.0, 0.0]);
        assert_eq!(softmax_rows(&z).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_axis0_normalises_columns() {
        let x = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.get(0, 0) + s.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((s.get(0, 1) + s.get(1, 1) - 1.0).abs() < 1e-12);
    }
}
