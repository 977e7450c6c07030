use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim("from_vec", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec()).expect("row vector must be non-empty")
    }

    /// Xavier/Glorot uniform initialisation for a `fan_in x fan_out` weight.
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = Self::zeros(rows, cols);
        for x in &mut m.data {
            *x = rng.random_range(-limit..limit);
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ))
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "t_matmul",
                format!("({}x{})^T times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_t",
                format!("{}x{} times ({}x{})^T", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = super::dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows).map(|i| super::dot(self.row(i), v)).collect())
    }

    /// Row vector times matrix: `v^T * self`.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::dim(
                "vecmat",
                format!("vector of length {} times {}x{}", v.len(), self.rows, self.cols),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &a) in v.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Adds the single-row matrix `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dim(
                "add_row_broadcast",
                format!("{}x{} plus bias {}x{}", self.rows, self.cols, bias.rows, bias.cols),
            ));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a single-row matrix (bias gradient of a broadcast add).
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Accumulates the outer product `u v^T` into `self`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::dim(
                "add_outer",
                format!("{}x{} += outer({}, {})", self.rows, self.cols, u.len(), v.len()),
            ));
        }
        for (i, &a) in u.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in self.row_mut(i).iter_mut().zip(v) {
                *o += a * b;
            }
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// SHA-256 of the shape and little-endian bytes of every entry.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        h.finalize().into()
    }

    pub(crate) fn feed_hash(&self, h: &mut Sha256) {
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_is_left_neutral() {
        let a = m(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_evaluated_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(4, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::xavier(3, 4, &mut rng);
        let b = Matrix::xavier(3, 5, &mut rng);
        let c = Matrix::xavier(6, 4, &mut rng);
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-15);
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn from_vec_rejects_bad_lengths() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, p in 1usize..6, q in 1usize..6, r in 1usize..6, s in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::xavier(p, q, &mut rng);
            let b = Matrix::xavier(q, r, &mut rng);
            let c = Matrix::xavier(r, s, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(right.max_abs()).max(1e-12);
            prop_assert!(left.sub(&right).unwrap().max_abs() / scale <= 1e-9);
        }
    }
}
