//! Lanczos iteration with full reorthogonalization and extreme-spectrum
//! extraction.
//!
//! The arithmetic here is shared with [`crate::dist_lanczos`]: projection
//! coefficients and norms are exact sums, and everything else is computed
//! elementwise, so a sharded run reproduces this one bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot_unchecked, exact_dot, subtract_combination, tridiag_eig, ExactSum, TallMatrix, TridiagMatrix};

/// Relative size of `beta` below which the Krylov space is exhausted.
pub const BREAKDOWN_TOL: f64 = 1e-10;

/// Estimated loss of orthogonality above which a second Gram-Schmidt pass runs.
pub const REORTH_TOL: f64 = 1e-8;

/// `max(4(k+l), ceil(2 ln n))`, before clamping to `n`.
pub fn budget_formula(k_plus_l: usize, ln_n: f64) -> usize {
    let log_term = (2.0 * ln_n).ceil().max(0.0) as usize;
    (4 * k_plus_l).max(log_term)
}

/// Number of Lanczos iterations for `k` largest and `l` smallest eigenpairs
/// of an `n`-dimensional operator.
pub fn lanczos_budget(k: usize, l: usize, n: usize) -> Result<usize> {
    if k + l == 0 || n == 0 {
        return Err(Error::arg("lanczos budget needs k + l >= 1 and n >= 1"));
    }
    if k + l > n {
        return Err(Error::arg(format!("k + l = {} exceeds n = {n}", k + l)));
    }
    Ok(budget_formula(k + l, (n as f64).ln()).min(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LanczosOptions {
    /// Run a second Gram-Schmidt pass when the first may have lost
    /// orthogonality. Disable for the plain single-pass recurrence.
    pub safeguard: bool,
    /// Compare a digest of `B` across workers after every iteration.
    /// Only used by the distributed variant.
    pub divergence_check: bool,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            safeguard: true,
            divergence_check: true,
        }
    }
}

/// Basis `D` (`n x (m+1)`) and tridiagonal `B` (`(m+1) x (m+1)`).
#[derive(Clone, Debug)]
pub struct LanczosState {
    pub(crate) d: TallMatrix,
    pub(crate) b: TridiagMatrix,
    pub(crate) m: usize,
    pub(crate) filled: usize,
    pub(crate) breakdown: bool,
    pub(crate) second_passes: usize,
}

impl LanczosState {
    pub fn d(&self) -> &TallMatrix {
        &self.d
    }

    pub fn b(&self) -> &TridiagMatrix {
        &self.b
    }

    /// Iteration budget requested.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Completed iterations; equals `m` unless the run broke down early.
    pub fn m_eff(&self) -> usize {
        self.filled
    }

    pub fn broke_down(&self) -> bool {
        self.breakdown
    }

    /// How many iterations needed the second Gram-Schmidt pass.
    pub fn second_passes(&self) -> usize {
        self.second_passes
    }

    /// The leading `m_eff` columns of `D`.
    pub fn active_d(&self) -> TallMatrix {
        self.d.leading_cols(self.filled)
    }

    /// The leading `m_eff x m_eff` block of `B`.
    pub fn active_b(&self) -> TridiagMatrix {
        self.b.leading(self.filled).expect("m_eff >= 1")
    }
}

/// Seeded standard-Gaussian start vector of unit norm.
pub(crate) fn start_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = exact_dot(&v, &v).value().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub(crate) fn validate(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 || m > n {
        return Err(Error::arg(format!("lanczos needs 1 <= m <= n, got m={m}, n={n}")));
    }
    Ok(())
}

/// Running bound on the loss of orthogonality of the basis.
///
/// One classical Gram-Schmidt pass against a basis with error `omega`
/// leaves the new column with error about `(eps + omega sqrt(k)) |h| / beta`,
/// so the error compounds by `|h| / beta` per iteration unless a second
/// pass runs. Every input is a replicated scalar, so all workers agree on
/// when the second pass fires.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct OrthoEstimate {
    omega: f64,
}

impl OrthoEstimate {
    /// Error of a column after one pass over `cols` columns that took the
    /// norm from `norm_in` to `beta`, where the input already carried error
    /// `err_in` relative to `norm_in`.
    fn after_pass(&self, cols: usize, norm_in: f64, err_in: f64, beta: f64) -> f64 {
        (f64::EPSILON + self.omega * (cols as f64).sqrt() * err_in) * norm_in / beta
    }

    /// Error after the first pass.
    pub(crate) fn first(&self, cols: usize, h_norm: f64, beta: f64) -> f64 {
        self.after_pass(cols, h_norm, 1.0, beta)
    }

    /// Error after a second pass that took the norm from `beta1` to `beta2`.
    pub(crate) fn second(&self, cols: usize, first: f64, beta1: f64, beta2: f64) -> f64 {
        self.after_pass(cols, beta1, first, beta2)
    }

    pub(crate) fn accept(&mut self, err: f64) {
        self.omega = self.omega.max(err);
    }
}

pub(crate) fn needs_second_pass(err: f64) -> bool {
    err > REORTH_TOL
}

pub(crate) fn is_breakdown(h_norm: f64, beta: f64) -> bool {
    beta <= BREAKDOWN_TOL * h_norm
}

/// Exact partial dot products of `h` with the first `filled` columns of `d`,
/// padded with zeros to `d.cols()` entries.
pub(crate) fn local_coefficients(d: &TallMatrix, h: &[f64], filled: usize) -> Vec<ExactSum> {
    (0..d.cols())
        .map(|j| if j < filled { exact_dot(d.col(j), h) } else { ExactSum::new() })
        .collect()
}

pub(crate) fn round_all(sums: &[ExactSum], filled: usize) -> Vec<f64> {
    sums[..filled].iter().map(ExactSum::value).collect()
}

/// Single-device Lanczos with full reorthogonalization.
///
/// `hvp` is applied to `m` unit vectors. On breakdown the run stops and
/// `m_eff` records how many iterations completed.
pub fn lanczos_single<F>(n: usize, m: usize, mut hvp: F, seed: u64, opts: &LanczosOptions) -> Result<LanczosState>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    validate(n, m)?;
    let mut d = TallMatrix::zeros(n, m + 1);
    let mut b = TridiagMatrix::zeros(m + 1);
    d.col_mut(0).copy_from_slice(&start_vector(n, seed));
    let mut filled = m;
    let mut breakdown = false;
    let mut second_passes = 0;
    let mut ortho = OrthoEstimate::default();

    for i in 0..m {
        let v = d.col(i).to_vec();
        let mut h = hvp(&v)?;
        if h.len() != n {
            return Err(Error::dim("hvp output", n, h.len()));
        }
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("hvp returned non-finite values at iteration {i}")));
        }
        let h_norm = exact_dot(&h, &h).value().sqrt();
        b.set_diag(i, dot_unchecked(&h, &v));

        let coeffs = round_all(&local_coefficients(&d, &h, i + 1), i + 1);
        subtract_combination(&mut h, &d, &coeffs);
        let mut beta = exact_dot(&h, &h).value().sqrt();
        let mut err = ortho.first(i + 1, h_norm, beta);
        if opts.safeguard && needs_second_pass(err) {
            second_passes += 1;
            let coeffs = round_all(&local_coefficients(&d, &h, i + 1), i + 1);
            subtract_combination(&mut h, &d, &coeffs);
            let beta1 = beta;
            beta = exact_dot(&h, &h).value().sqrt();
            err = ortho.second(i + 1, err, beta1, beta);
        }
        ortho.accept(err);
        if is_breakdown(h_norm, beta) {
            filled = i + 1;
            breakdown = true;
            break;
        }
        b.set_offdiag(i, beta);
        for (dst, x) in d.col_mut(i + 1).iter_mut().zip(&h) {
            *dst = x / beta;
        }
    }

    Ok(LanczosState {
        d,
        b,
        m,
        filled,
        breakdown,
        second_passes,
    })
}

/// Extreme-spectrum estimate: the `k` largest Ritz pairs (descending) then
/// the `l` smallest (ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct EseResult {
    pub eigvals: Vec<f64>,
    pub eigvecs: TallMatrix,
    pub k: usize,
    pub l: usize,
}

impl EseResult {
    pub fn new(eigvals: Vec<f64>, eigvecs: TallMatrix, k: usize, l: usize) -> Result<Self> {
        if eigvals.len() != k + l || eigvecs.cols() != k + l {
            return Err(Error::dim("EseResult columns", k + l, eigvecs.cols().min(eigvals.len())));
        }
        Ok(Self { eigvals, eigvecs, k, l })
    }

    /// No curvature information; every update reduces to the base optimizer.
    pub fn empty(n: usize) -> Self {
        Self {
            eigvals: Vec::new(),
            eigvecs: TallMatrix::zeros(n, 0),
            k: 0,
            l: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.eigvecs.rows()
    }

    pub fn width(&self) -> usize {
        self.k + self.l
    }
}

/// Eigendecomposes the leading `m_eff` block of `b` and returns the selected
/// eigenvalues and the matching columns of `U`.
pub(crate) fn select_ritz(b: &TridiagMatrix, m_eff: usize, k: usize, l: usize) -> Result<(Vec<f64>, TallMatrix)> {
    if k + l > m_eff {
        return Err(Error::arg(format!("k + l = {} exceeds m_eff = {m_eff}", k + l)));
    }
    let (u, vecs) = tridiag_eig(&b.leading(m_eff)?)?;
    let order: Vec<usize> = (0..k).map(|j| m_eff - 1 - j).chain(0..l).collect();
    let mut sel = TallMatrix::zeros(m_eff, k + l);
    for (dst, &src) in order.iter().enumerate() {
        sel.col_mut(dst).copy_from_slice(vecs.col(src));
    }
    Ok((order.iter().map(|&j| u[j]).collect(), sel))
}

/// `D[:, ..m_eff] * U_sel`, each entry summed over `p` in ascending order so
/// that any row subset of `D` yields the same rows of the product.
pub(crate) fn ritz_vectors(d: &TallMatrix, u_sel: &TallMatrix) -> TallMatrix {
    let rows = d.rows();
    let mut out = TallMatrix::zeros(rows, u_sel.cols());
    for j in 0..u_sel.cols() {
        let coeffs = u_sel.col(j);
        let col = out.col_mut(j);
        for (p, &c) in coeffs.iter().enumerate() {
            for (o, x) in col.iter_mut().zip(d.col(p)) {
                *o += x * c;
            }
        }
    }
    out
}

/// Flips each column so its first non-negligible entry is nonnegative.
pub(crate) fn normalize_signs(v: &mut TallMatrix) {
    for j in 0..v.cols() {
        let col = v.col_mut(j);
        let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let pivot = col.iter().copied().find(|x| x.abs() > f64::EPSILON * max);
        if pivot.is_some_and(|p| p < 0.0) {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Ritz values and vectors from a completed run.
pub fn extract_ese(state: &LanczosState, k: usize, l: usize) -> Result<EseResult> {
    let (eigvals, u_sel) = select_ritz(&state.b, state.filled, k, l)?;
    let mut eigvecs = ritz_vectors(&state.d, &u_sel);
    normalize_signs(&mut eigvecs);
    Ok(EseResult { eigvals, eigvecs, k, l })
}
