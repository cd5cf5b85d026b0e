//! Dense linear algebra used throughout the crate.
//!
//! Vectors are plain `&[f64]` / `Vec<f64>`. Reductions that feed the
//! Lanczos recurrence go through [`ExactSum`] so that a sharded computation
//! rounds to the same bits as the unsharded one; everything else uses a fixed
//! left-to-right order.

mod exact;
mod tridiag;

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub use exact::{exact_dot, ExactSum};
pub use tridiag::tridiag_eig;

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("dot", a.len(), b.len()));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn is_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Column-major `rows x cols` matrix, typically tall (`rows >> cols`).
#[derive(Clone, Debug, PartialEq)]
pub struct TallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("TallMatrix::from_col_major", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::dim("TallMatrix::from_columns", rows, c.len()));
            }
            m.col_mut(j).copy_from_slice(c);
        }
        Ok(m)
    }

    /// Builds a matrix from row-major storage.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("TallMatrix::from_row_major", rows * cols, data.len()));
        }
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = data[i * cols + j];
            }
        }
        Ok(m)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored floats.
    pub fn slots(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Leading `cols` columns as a new matrix.
    pub fn leading_cols(&self, cols: usize) -> TallMatrix {
        let cols = cols.min(self.cols);
        Self {
            rows: self.rows,
            cols,
            data: self.data[..cols * self.rows].to_vec(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim("TallMatrix::matvec", self.cols, x.len()));
        }
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            axpy(xj, self.col(j), &mut y);
        }
        Ok(y)
    }

    /// `A^T x` with one left-to-right dot per column.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dim("TallMatrix::tr_matvec", self.rows, x.len()));
        }
        Ok((0..self.cols).map(|j| dot_unchecked(self.col(j), x)).collect())
    }

    /// `self * rhs` where `rhs` is small (`self.cols x k`).
    pub fn matmul(&self, rhs: &TallMatrix) -> Result<TallMatrix> {
        if rhs.rows != self.cols {
            return Err(Error::dim("TallMatrix::matmul", self.cols, rhs.rows));
        }
        let mut out = TallMatrix::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            let dst = out.col_mut(j);
            for (c, &coef) in rhs.col(j).iter().enumerate() {
                axpy(coef, &self.data[c * self.rows..(c + 1) * self.rows], dst);
            }
        }
        Ok(out)
    }

    /// `A^T A` as a row-major `cols x cols` buffer.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.cols;
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = dot_unchecked(self.col(i), self.col(j));
            }
        }
        g
    }

    /// `max |(A^T A - I)_{ij}|`
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.cols;
        self.gram()
            .iter()
            .enumerate()
            .map(|(idx, g)| {
                let want = if idx / k == idx % k { 1.0 } else { 0.0 };
                (g - want).abs()
            })
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for TallMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[c * self.rows + r]
    }
}

impl IndexMut<(usize, usize)> for TallMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[c * self.rows + r]
    }
}

/// Symmetric tridiagonal matrix storing the diagonal and one off-diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TridiagMatrix {
    diag: Vec<f64>,
    offdiag: Vec<f64>,
}

impl TridiagMatrix {
    pub fn new(diag: Vec<f64>, offdiag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::arg("tridiagonal matrix must have dim >= 1"));
        }
        if offdiag.len() + 1 != diag.len() {
            return Err(Error::dim("TridiagMatrix::new offdiag", diag.len() - 1, offdiag.len()));
        }
        Ok(Self { diag, offdiag })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "tridiagonal matrix must have dim >= 1");
        Self {
            diag: vec![0.0; dim],
            offdiag: vec![0.0; dim - 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[f64] {
        &self.offdiag
    }

    pub fn set_diag(&mut self, i: usize, value: f64) {
        self.diag[i] = value;
    }

    /// Sets `B[i+1, i] = B[i, i+1] = value`.
    pub fn set_offdiag(&mut self, i: usize, value: f64) {
        self.offdiag[i] = value;
    }

    /// Leading `dim x dim` block.
    pub fn leading(&self, dim: usize) -> Result<TridiagMatrix> {
        if dim == 0 || dim > self.dim() {
            return Err(Error::arg(format!(
                "leading block of size {dim} out of range 1..={}",
                self.dim()
            )));
        }
        TridiagMatrix::new(self.diag[..dim].to_vec(), self.offdiag[..dim - 1].to_vec())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut y = self.diag[i] * x[i];
                if i > 0 {
                    y += self.offdiag[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    y += self.offdiag[i] * x[i + 1];
                }
                y
            })
            .collect()
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n + i] = self.diag[i];
            if i + 1 < n {
                out[i * n + i + 1] = self.offdiag[i];
                out[(i + 1) * n + i] = self.offdiag[i];
            }
        }
        out
    }

    /// Stable 64-bit digest of the stored entries (FNV-1a over the bit
    /// patterns), used to verify replication across workers.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::default();
        for x in self.diag.iter().chain(&self.offdiag) {
            h.write_u64(x.to_bits());
        }
        h.finish()
    }
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
#[derive(Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write_u64(&mut self, x: u64) {
        for byte in x.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.write_u64(x.to_bits());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// `h - D_act (D_act^T h)` where `D_act` is the first `active_cols` columns.
///
/// Coefficients are exact-sum dot products, so the result does not depend on
/// how the rows of `h` and `D` might be split across workers.
pub fn project_out(h: &[f64], d: &TallMatrix, active_cols: usize) -> Result<Vec<f64>> {
    if h.len() != d.rows() {
        return Err(Error::dim("project_out", d.rows(), h.len()));
    }
    if active_cols > d.cols() {
        return Err(Error::dim("project_out active_cols", d.cols(), active_cols));
    }
    let coeffs: Vec<f64> = (0..active_cols)
        .map(|j| exact_dot(d.col(j), h).value())
        .collect();
    let mut out = h.to_vec();
    subtract_combination(&mut out, d, &coeffs);
    Ok(out)
}

/// `h -= sum_j D[:, j] * coeffs[j]`, one column at a time in ascending `j`.
pub(crate) fn subtract_combination(h: &mut [f64], d: &TallMatrix, coeffs: &[f64]) {
    for (j, &c) in coeffs.iter().enumerate() {
        axpy(-c, d.col(j), h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Modified Gram-Schmidt on random columns.
    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> TallMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols_v: Vec<Vec<f64>> = Vec::new();
        while cols_v.len() < cols {
            let mut v = gaussian(rows, &mut rng);
            for _ in 0..2 {
                for q in &cols_v {
                    let c = dot_unchecked(q, &v);
                    axpy(-c, q, &mut v);
                }
            }
            let nv = norm2(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            cols_v.push(v);
        }
        TallMatrix::from_columns(rows, &cols_v).unwrap()
    }

    fn kahan(a: &[f64], b: &[f64]) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(b) {
            let t = x * y - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        }
        sum
    }

    #[test]
    fn dot_small_cases() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(dot(&[1.5, -2.0, 7.0], &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(dot(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dot_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = gaussian(64, &mut rng);
            let b = gaussian(64, &mut rng);
            let got = dot(&a, &b).unwrap();
            let want = kahan(&a, &b);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn dot_is_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = gaussian(257, &mut rng);
        let b = gaussian(257, &mut rng);
        let first = dot(&a, &b).unwrap().to_bits();
        for _ in 0..10 {
            assert_eq!(dot(&a, &b).unwrap().to_bits(), first);
        }
    }

    #[test]
    fn project_out_self_column_vanishes() {
        let d = random_orthonormal(8, 3, 1);
        let h = d.col(0).to_vec();
        let r = project_out(&h, &d, 1).unwrap();
        assert!(r.iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn project_out_orthogonal_input_unchanged() {
        let d = random_orthonormal(8, 4, 2);
        // Column 3 is orthogonal to the first three.
        let h = d.col(3).to_vec();
        let r = project_out(&h, &d, 3).unwrap();
        for (a, b) in r.iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn project_out_matches_materialized_projector() {
        let d = random_orthonormal(8, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = gaussian(8, &mut rng);
        // (I - D D^T) h
        let mut p = vec![0.0; 64];
        for i in 0..8 {
            for j in 0..8 {
                let ddt: f64 = (0..3).map(|c| d[(i, c)] * d[(j, c)]).sum();
                p[i * 8 + j] = if i == j { 1.0 } else { 0.0 } - ddt;
            }
        }
        let want: Vec<f64> = (0..8).map(|i| (0..8).map(|j| p[i * 8 + j] * h[j]).sum()).collect();
        let got = project_out(&h, &d, 3).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn project_out_dimension_errors() {
        let d = random_orthonormal(8, 3, 5);
        assert!(project_out(&[1.0; 7], &d, 1).is_err());
        assert!(project_out(&[1.0; 8], &d, 4).is_err());
    }

    proptest! {
        #[test]
        fn project_out_is_idempotent_and_orthogonal(seed in 0u64..500, active in 1usize..5) {
            let d = random_orthonormal(12, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let h = gaussian(12, &mut rng);
            let once = project_out(&h, &d, active).unwrap();
            let twice = project_out(&once, &d, active).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            let hn = norm2(&h);
            for j in 0..active {
                prop_assert!(dot_unchecked(d.col(j), &once).abs() <= 1e-8 * hn);
            }
        }
    }

    #[test]
    fn tall_matrix_products() {
        let a = TallMatrix::from_row_major(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.tr_matvec(&[1.0, 0.0, 1.0]).unwrap(), vec![6.0, 8.0]);
        let b = TallMatrix::from_row_major(2, 1, &[1.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().col(0), &[-1.0, -1.0, -1.0]);
        assert_eq!(a.to_row_major(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
