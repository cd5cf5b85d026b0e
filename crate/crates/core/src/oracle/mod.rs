//! Objective oracles: value, gradient and Hessian-vector product on a batch.

mod data;
mod mlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot_unchecked, TallMatrix};

pub use data::{
    generate_synthetic_dataset, load_csv_dataset, worker_part, write_csv, Batch, Dataset, DatasetKind, Targets,
};
pub use mlp::{mlp_oracle, Activation, Loss, MlpOracle};

/// An objective `f(w; batch)` over a flat parameter vector.
///
/// Implementations must be pure: the same `(w, batch)` gives bitwise
/// identical results on every call and every thread.
pub trait Oracle: Sync {
    /// Number of parameters.
    fn dim(&self) -> usize;

    fn value(&self, w: &[f64], batch: &Batch) -> Result<f64>;

    fn grad(&self, w: &[f64], batch: &Batch) -> Result<Vec<f64>>;

    /// `H(w) v` on `batch`.
    fn hvp(&self, w: &[f64], v: &[f64], batch: &Batch) -> Result<Vec<f64>>;

    /// Fraction of correctly classified samples, for classifiers.
    fn accuracy(&self, _w: &[f64], _batch: &Batch) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Approximate floating-point operations for one gradient on `samples`
    /// samples. Used only for modeled timings.
    fn grad_flops(&self, samples: usize) -> u64 {
        6 * (self.dim() * samples.max(1)) as u64
    }

    fn hvp_flops(&self, samples: usize) -> u64 {
        2 * self.grad_flops(samples)
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(context, expected, v.len()));
    }
    Ok(())
}

/// `f(w) = 0.5 w^T H w` with `H = Q^T diag(spectrum) Q`.
///
/// The batch is ignored, so the minimizer is always `w = 0`.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    spectrum: Vec<f64>,
    h: TallMatrix,
}

/// Builds a quadratic with the given eigenvalues. `rotation_seed == 0` keeps
/// `H` diagonal; any other seed draws a random orthogonal `Q`.
pub fn quadratic_oracle(spectrum: &[f64], rotation_seed: u64) -> Result<QuadraticOracle> {
    if spectrum.is_empty() {
        return Err(Error::arg("quadratic spectrum must be non-empty"));
    }
    if spectrum.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::arg("quadratic spectrum entries must be finite and nonzero"));
    }
    let n = spectrum.len();
    let mut h = TallMatrix::zeros(n, n);
    if rotation_seed == 0 {
        for (i, &s) in spectrum.iter().enumerate() {
            h[(i, i)] = s;
        }
    } else {
        let q = random_orthogonal(n, rotation_seed);
        // H[i][j] = sum_k Q[k][i] s_k Q[k][j]
        for j in 0..n {
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &s) in spectrum.iter().enumerate() {
                    acc += q[(k, i)] * s * q[(k, j)];
                }
                h[(i, j)] = acc;
            }
        }
        // Exact symmetry so that u^T H v == v^T H u bit for bit.
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = avg;
                h[(j, i)] = avg;
            }
        }
    }
    Ok(QuadraticOracle {
        spectrum: spectrum.to_vec(),
        h,
    })
}

/// Haar-ish random orthogonal matrix: Gram-Schmidt (applied twice) on a
/// Gaussian matrix.
fn random_orthogonal(n: usize, seed: u64) -> TallMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = TallMatrix::zeros(n, n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for p in 0..j {
                let c = dot_unchecked(q.col(p), &v);
                for (vi, qi) in v.iter_mut().zip(q.col(p)) {
                    *vi -= c * qi;
                }
            }
        }
        let norm = dot_unchecked(&v, &v).sqrt();
        for (dst, x) in q.col_mut(j).iter_mut().zip(&v) {
            *dst = x / norm;
        }
    }
    q
}

impl QuadraticOracle {
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// The materialized Hessian.
    pub fn matrix(&self) -> &TallMatrix {
        &self.h
    }

    /// Standard normal starting point scaled by `scale`.
    pub fn init_params(&self, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.spectrum.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        // H is symmetric, so row i equals column i.
        (0..self.h.cols()).map(|i| dot_unchecked(self.h.col(i), v)).collect()
    }
}

impl Oracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.spectrum.len()
    }

    fn value(&self, w: &[f64], _batch: &Batch) -> Result<f64> {
        check_len("quadratic value", self.dim(), w)?;
        Ok(0.5 * dot_unchecked(w, &self.apply(w)))
    }

    fn grad(&self, w: &[f64], _batch: &Batch) -> Result<Vec<f64>> {
        check_len("quadratic grad", self.dim(), w)?;
        Ok(self.apply(w))
    }

    fn hvp(&self, w: &[f64], v: &[f64], _batch: &Batch) -> Result<Vec<f64>> {
        check_len("quadratic hvp (w)", self.dim(), w)?;
        check_len("quadratic hvp (v)", self.dim(), v)?;
        Ok(self.apply(v))
    }

    fn grad_flops(&self, _samples: usize) -> u64 {
        2 * (self.dim() * self.dim()) as u64
    }

    fn hvp_flops(&self, _samples: usize) -> u64 {
        self.grad_flops(0)
    }
}

/// Ill-conditioned spectrum: `spikes` eigenvalues log-spaced over `high`,
/// the rest log-spaced over `low`, largest first.
pub fn spiked_spectrum(n: usize, spikes: usize, high: (f64, f64), low: (f64, f64)) -> Result<Vec<f64>> {
    if spikes > n || n == 0 {
        return Err(Error::arg(format!("need 0 <= spikes <= n and n >= 1, got spikes={spikes}, n={n}")));
    }
    let logspace = |count: usize, (a, b): (f64, f64)| -> Vec<f64> {
        (0..count)
            .map(|i| {
                let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
                (b.ln() + t * (a.ln() - b.ln())).exp()
            })
            .collect()
    };
    let mut out = logspace(spikes, high);
    out.extend(logspace(n - spikes, low));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty() -> Batch {
        Batch::empty()
    }

    #[test]
    fn diagonal_quadratic_arithmetic() {
        let q = quadratic_oracle(&[4.0, 1.0], 0).unwrap();
        assert_eq!(q.value(&[1.0, 1.0], &empty()).unwrap(), 2.5);
        assert_eq!(q.grad(&[1.0, 1.0], &empty()).unwrap(), vec![4.0, 1.0]);
        assert_eq!(q.hvp(&[3.0, -2.0], &[1.0, 0.0], &empty()).unwrap(), vec![4.0, 0.0]);
    }

    #[test]
    fn rejects_bad_spectrum() {
        assert!(matches!(quadratic_oracle(&[], 0), Err(Error::Argument(_))));
        assert!(matches!(quadratic_oracle(&[1.0, 0.0], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn rotated_grad_matches_central_differences() {
        let q = quadratic_oracle(&[3.0, -1.0, 0.5, 7.0, 2.0], 11).unwrap();
        let w = [0.3, -0.7, 1.1, 0.2, -0.4];
        let g = q.grad(&w, &empty()).unwrap();
        let eps = 1e-5;
        for i in 0..w.len() {
            let mut wp = w;
            let mut wm = w;
            wp[i] += eps;
            wm[i] -= eps;
            let fd = (q.value(&wp, &empty()).unwrap() - q.value(&wm, &empty()).unwrap()) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rotated_matrix_has_requested_spectrum() {
        let spectrum = [5.0, 4.0, 1.0, -2.0];
        let q = quadratic_oracle(&spectrum, 3).unwrap();
        let h = q.matrix();
        let dense = nalgebra::DMatrix::from_fn(4, 4, |i, j| h[(i, j)]);
        let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in eig.iter().zip(&spectrum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spiked_spectrum_bounds() {
        let s = spiked_spectrum(100, 8, (1e3, 1e4), (1.0, 10.0)).unwrap();
        assert_eq!(s.len(), 100);
        assert!((s[0] - 1e4).abs() < 1e-9 && (s[99] - 1.0).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn quadratic_hvp_is_symmetric(seed in 1u64..500) {
            let spectrum: Vec<f64> = (1..=6).map(|i| i as f64 * 0.7).collect();
            let q = quadratic_oracle(&spectrum, seed).unwrap();
            let u: Vec<f64> = (0..6).map(|i| ((i as u64 * 31 + seed) as f64).sin()).collect();
            let v: Vec<f64> = (0..6).map(|i| ((i as u64 * 17 + seed) as f64).cos()).collect();
            let w = vec![0.0; 6];
            let a = dot_unchecked(&u, &q.hvp(&w, &v, &empty()).unwrap());
            let b = dot_unchecked(&v, &q.hvp(&w, &u, &empty()).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
