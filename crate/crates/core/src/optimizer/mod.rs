//! Update rules: the base first-order optimizer, the hybrid subspace step,
//! and the augmented-Lagrangian outer loop.

mod train;

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lanczos::EseResult;
use crate::linalg::is_finite;

pub use train::{
    dho2_train, fosi_train, sgd_train, train, EpochRecord, TrainConfig, TrainResult, TrainerKind,
};

/// Magnitude floor applied to Ritz values before inversion.
pub const DEFAULT_EIGVAL_FLOOR: f64 = 1e-6;

/// Penalty values used for the large image models, from smallest network to
/// largest.
pub const SIGMA_PRESETS: [(&str, f64); 3] = [("resnet101", 5e-4), ("vgg16", 5e-6), ("resnet152", 5e-7)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseKind {
    Sgd,
    Momentum,
    Adam,
    AdamW,
    /// Always returns a zero step; isolates the curvature update in tests.
    Zero,
}

impl BaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseKind::Sgd => "sgd",
            BaseKind::Momentum => "momentum",
            BaseKind::Adam => "adam",
            BaseKind::AdamW => "adamw",
            BaseKind::Zero => "zero",
        }
    }
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(BaseKind::Sgd),
            "momentum" => Ok(BaseKind::Momentum),
            "adam" => Ok(BaseKind::Adam),
            "adamw" => Ok(BaseKind::AdamW),
            "zero" => Ok(BaseKind::Zero),
            other => Err(Error::arg(format!("unknown base optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseConfig {
    pub kind: BaseKind,
    pub lr: f64,
    /// Decoupled decay, used by `adamw` only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball coefficient for `momentum`.
    pub momentum: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            kind: BaseKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

/// Moments and step count of the base optimizer.
#[derive(Clone, Debug)]
pub struct BaseOptimizerState {
    pub config: BaseConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl BaseOptimizerState {
    pub fn new(config: BaseConfig, n: usize) -> Self {
        let (m, v) = match config.kind {
            BaseKind::Sgd | BaseKind::Zero => (Vec::new(), Vec::new()),
            BaseKind::Momentum => (vec![0.0; n], Vec::new()),
            BaseKind::Adam | BaseKind::AdamW => (vec![0.0; n], vec![0.0; n]),
        };
        Self { config, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Floats held in moment buffers.
    pub fn moment_slots(&self) -> usize {
        self.m.len() + self.v.len()
    }

    /// The descent vector for gradient `g`, already scaled by `-lr`.
    /// `w` is needed only for decoupled weight decay.
    pub fn step(&mut self, g: &[f64], w: Option<&[f64]>) -> Result<Vec<f64>> {
        if !is_finite(g) {
            return Err(Error::Numeric("base optimizer received a non-finite gradient".into()));
        }
        let c = self.config;
        let n = g.len();
        if !self.m.is_empty() && self.m.len() != n {
            return Err(Error::dim("base optimizer gradient", self.m.len(), n));
        }
        self.step += 1;
        let out = match c.kind {
            BaseKind::Zero => vec![0.0; n],
            BaseKind::Sgd => g.iter().map(|x| -c.lr * x).collect(),
            BaseKind::Momentum => {
                for (b, x) in self.m.iter_mut().zip(g) {
                    *b = c.momentum * *b + x;
                }
                self.m.iter().map(|b| -c.lr * b).collect()
            }
            BaseKind::Adam | BaseKind::AdamW => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let mut out = Vec::with_capacity(n);
                for ((m, v), gi) in self.m.iter_mut().zip(self.v.iter_mut()).zip(g) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    out.push(-c.lr * m_hat / (v_hat.sqrt() + c.eps));
                }
                if c.kind == BaseKind::AdamW && c.weight_decay != 0.0 {
                    let w = w.ok_or_else(|| Error::arg("adamw needs the parameters for weight decay"))?;
                    if w.len() != n {
                        return Err(Error::dim("adamw parameters", n, w.len()));
                    }
                    for (o, wi) in out.iter_mut().zip(w) {
                        *o -= c.lr * c.weight_decay * wi;
                    }
                }
                out
            }
        };
        Ok(out)
    }
}

/// `sign(a) * max(|a|, floor)`; zero maps to `+floor`.
pub fn floor_eigval(a: f64, floor: f64) -> f64 {
    if a.abs() >= floor {
        a
    } else if a < 0.0 {
        -floor
    } else {
        floor
    }
}

/// `V^T x`.
fn project_coeffs(ese: &EseResult, x: &[f64]) -> Result<Vec<f64>> {
    ese.eigvecs.tr_matvec(x)
}

/// `V c`, or zeros when the subspace is empty.
fn lift(ese: &EseResult, c: &[f64]) -> Result<Vec<f64>> {
    ese.eigvecs.matvec(c)
}

/// `(I - V V^T) x`.
pub fn complement(ese: &EseResult, x: &[f64]) -> Result<Vec<f64>> {
    let back = lift(ese, &project_coeffs(ese, x)?)?;
    Ok(x.iter().zip(&back).map(|(a, b)| a - b).collect())
}

/// Shared body of the hybrid step for an effective gradient `g` and shift
/// `sigma` added to every Ritz value before flooring.
fn hybrid_deltas(
    g: &[f64],
    ese: &EseResult,
    base: &mut BaseOptimizerState,
    alpha: f64,
    sigma: f64,
    floor: f64,
    w: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if g.len() != ese.n() {
        return Err(Error::dim("hybrid step gradient", ese.n(), g.len()));
    }
    if ese.width() == 0 {
        return Ok((vec![0.0; g.len()], base.step(g, w)?));
    }
    let c = project_coeffs(ese, g)?;
    let scaled: Vec<f64> = c
        .iter()
        .zip(&ese.eigvals)
        .map(|(ci, a)| ci / floor_eigval(a + sigma, floor))
        .collect();
    let delta1: Vec<f64> = lift(ese, &scaled)?.into_iter().map(|x| -alpha * x).collect();
    let g1 = lift(ese, &c)?;
    let g2: Vec<f64> = g.iter().zip(&g1).map(|(a, b)| a - b).collect();
    let o = base.step(&g2, w)?;
    let delta2 = complement(ese, &o)?;
    Ok((delta1, delta2))
}

/// Newton step in the Ritz subspace plus the projected base step on the
/// complement: `D1 = -alpha V A^-1 V^T g`, `D2 = (I - V V^T) O(g - V V^T g)`.
pub fn fosi_deltas(
    g: &[f64],
    ese: &EseResult,
    base: &mut BaseOptimizerState,
    alpha: f64,
    eigval_floor: f64,
    w: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    hybrid_deltas(g, ese, base, alpha, 0.0, eigval_floor, w)
}

/// The hybrid step on the augmented Lagrangian: the gradient becomes
/// `g + pi` and the Ritz values are shifted by `sigma`.
///
/// `V^T (V V^T x)` is evaluated as `V^T x`, which is equal because `V` has
/// orthonormal columns. `sigma = 0` with `pi = 0` gives exactly
/// [`fosi_deltas`].
#[allow(clippy::too_many_arguments)]
pub fn admm_deltas(
    g: &[f64],
    pi: &[f64],
    ese: &EseResult,
    base: &mut BaseOptimizerState,
    alpha: f64,
    sigma: f64,
    eigval_floor: f64,
    w: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pi.len() != g.len() {
        return Err(Error::dim("admm multiplier", g.len(), pi.len()));
    }
    if sigma < 0.0 {
        return Err(Error::arg("sigma must be nonnegative"));
    }
    let shifted: Vec<f64> = g.iter().zip(pi).map(|(a, b)| a + b).collect();
    hybrid_deltas(&shifted, ese, base, alpha, sigma, eigval_floor, w)
}

/// Primal, auxiliary and multiplier vectors of the outer loop.
///
/// `sigma == 0` is accepted as a reduction mode: the multiplier stays zero
/// and `w` tracks `w_a`, which turns the outer loop into plain FOSI.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub w: Vec<f64>,
    pub w_a: Vec<f64>,
    pub pi: Vec<f64>,
    pub sigma: f64,
    pub k_outer: usize,
}

impl AdmmState {
    /// `w = w_a = w0`, `pi = 0`.
    pub fn new(w0: &[f64], sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::arg(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self {
            w: w0.to_vec(),
            w_a: w0.to_vec(),
            pi: vec![0.0; w0.len()],
            sigma,
            k_outer: 0,
        })
    }

    /// Augmented Lagrangian `f + <w_a - w, pi> + sigma/2 ||w_a - w||^2`
    /// given `f = f(w_a)`.
    pub fn lagrangian(&self, f: f64, w: &[f64]) -> f64 {
        let mut inner = 0.0;
        let mut sq = 0.0;
        for ((a, wi), p) in self.w_a.iter().zip(w).zip(&self.pi) {
            let r = a - wi;
            inner += r * p;
            sq += r * r;
        }
        f + inner + 0.5 * self.sigma * sq
    }

    /// `||w_a - w||`.
    pub fn residual(&self) -> f64 {
        self.w_a
            .iter()
            .zip(&self.w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `w = w_a + pi / sigma`, the exact minimizer of the Lagrangian over `w`.
pub fn admm_w_update(state: &mut AdmmState) -> &[f64] {
    if state.sigma == 0.0 {
        state.w.copy_from_slice(&state.w_a);
    } else {
        for i in 0..state.w.len() {
            state.w[i] = state.w_a[i] + state.pi[i] / state.sigma;
        }
    }
    &state.w
}

/// `pi += sigma (w_a - w)`.
pub fn admm_dual_update(state: &mut AdmmState) -> &[f64] {
    if state.sigma != 0.0 {
        for i in 0..state.pi.len() {
            state.pi[i] += state.sigma * (state.w_a[i] - state.w[i]);
        }
    }
    state.k_outer += 1;
    &state.pi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::TallMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sgd(lr: f64) -> BaseConfig {
        BaseConfig {
            kind: BaseKind::Sgd,
            lr,
            ..BaseConfig::default()
        }
    }

    fn zero_base(n: usize) -> BaseOptimizerState {
        BaseOptimizerState::new(
            BaseConfig {
                kind: BaseKind::Zero,
                ..BaseConfig::default()
            },
            n,
        )
    }

    fn e1_ese() -> EseResult {
        let v = TallMatrix::from_columns(2, &[vec![1.0, 0.0]]).unwrap();
        EseResult::new(vec![4.0], v, 1, 0).unwrap()
    }

    /// Random orthonormal block via modified Gram-Schmidt.
    fn random_ese(n: usize, width: usize, rng: &mut ChaCha8Rng) -> EseResult {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < width {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for _ in 0..2 {
                for c in &cols {
                    let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.iter().map(|x| x / norm).collect());
        }
        let vals: Vec<f64> = (0..width).map(|_| rng.random_range(-5.0..50.0)).collect();
        EseResult::new(vals, TallMatrix::from_columns(n, &cols).unwrap(), width, 0).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn sgd_step() {
        let mut s = BaseOptimizerState::new(sgd(0.1), 2);
        assert_eq!(s.step(&[1.0, -2.0], None).unwrap(), vec![-0.1, 0.2]);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let cfg = BaseConfig {
            kind: BaseKind::Adam,
            lr: 0.01,
            ..BaseConfig::default()
        };
        let mut s = BaseOptimizerState::new(cfg, 3);
        let g = [0.5, -3.0, 1e-3];
        let step = s.step(&g, None).unwrap();
        for (o, gi) in step.iter().zip(g) {
            // m_hat = g, v_hat = g^2 after bias correction.
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((o - want).abs() <= 1e-15, "{o} vs {want}");
        }
        // Second step by hand.
        let g2 = [1.0, 1.0, 1.0];
        let step2 = s.step(&g2, None).unwrap();
        for i in 0..3 {
            let m = 0.9 * (0.1 * g[i]) + 0.1 * g2[i];
            let v = 0.999 * (0.001 * g[i] * g[i]) + 0.001 * g2[i] * g2[i];
            let want = -0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
            assert!((step2[i] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_gradient_cases() {
        for kind in [BaseKind::Sgd, BaseKind::Momentum, BaseKind::Adam] {
            let mut s = BaseOptimizerState::new(BaseConfig { kind, ..BaseConfig::default() }, 2);
            assert_eq!(s.step(&[0.0, 0.0], Some(&[1.0, 2.0])).unwrap(), vec![0.0, 0.0]);
        }
        let mut s = BaseOptimizerState::new(BaseConfig::default(), 2);
        let step = s.step(&[0.0, 0.0], Some(&[1.0, -2.0])).unwrap();
        assert_eq!(step, vec![-1e-3 * 0.05, 1e-3 * 0.05 * 2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = BaseConfig {
            kind: BaseKind::Momentum,
            lr: 0.1,
            momentum: 0.5,
            ..BaseConfig::default()
        };
        let mut s = BaseOptimizerState::new(cfg, 1);
        assert_eq!(s.step(&[1.0], None).unwrap(), vec![-0.1]);
        assert!((s.step(&[1.0], None).unwrap()[0] + 0.15).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = BaseOptimizerState::new(sgd(0.1), 2);
        assert!(matches!(s.step(&[f64::NAN, 0.0], None), Err(Error::Numeric(_))));
    }

    #[test]
    fn fosi_two_by_two() {
        let (d1, d2) = fosi_deltas(&[4.0, 1.0], &e1_ese(), &mut zero_base(2), 1.0, 1e-6, None).unwrap();
        assert_eq!(d1, vec![-1.0, 0.0]);
        assert_eq!(d2, vec![0.0, 0.0]);
    }

    #[test]
    fn fosi_orthogonal_gradient() {
        let g = [0.0, 3.0];
        let (d1, d2) = fosi_deltas(&g, &e1_ese(), &mut BaseOptimizerState::new(sgd(0.5), 2), 1.0, 1e-6, None).unwrap();
        assert_eq!(d1, vec![0.0, 0.0]);
        assert_eq!(d2, vec![0.0, -1.5]);
    }

    #[test]
    fn fosi_full_spectrum_is_newton() {
        let spectrum = [9.0, 4.0, 2.5, 1.0, 0.5];
        let q = crate::oracle::quadratic_oracle(&spectrum, 6).unwrap();
        let h = q.matrix().clone();
        let lanczos = crate::lanczos::lanczos_single(5, 5, |v: &[f64]| h.matvec(v), 1, &Default::default()).unwrap();
        let ese = crate::lanczos::extract_ese(&lanczos, 5, 0).unwrap();
        let w0 = [1.0, -2.0, 0.5, 3.0, -1.0];
        let g = h.matvec(&w0).unwrap();
        let (d1, d2) = fosi_deltas(&g, &ese, &mut zero_base(5), 1.0, 1e-6, None).unwrap();
        for i in 0..5 {
            assert!((w0[i] + d1[i] + d2[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn eigval_floor_prevents_blowup() {
        let v = TallMatrix::from_columns(2, &[vec![1.0, 0.0]]).unwrap();
        let ese = EseResult::new(vec![0.0], v, 1, 0).unwrap();
        let (d1, _) = fosi_deltas(&[1e-3, 0.0], &ese, &mut zero_base(2), 1.0, 1e-6, None).unwrap();
        assert!((d1[0] + 1e3).abs() < 1e-9);
        assert_eq!(floor_eigval(-1e-9, 1e-6), -1e-6);
        assert_eq!(floor_eigval(-2.0, 1e-6), -2.0);
    }

    #[test]
    fn admm_analytic_damping() {
        let (d1, _) = admm_deltas(&[4.0, 1.0], &[0.0, 0.0], &e1_ese(), &mut zero_base(2), 1.0, 1.0, 1e-6, None).unwrap();
        assert_eq!(d1, vec![-4.0 / 5.0, 0.0]);
    }

    #[test]
    fn admm_reduces_to_fosi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ese = random_ese(12, 3, &mut rng);
        let g: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = BaseOptimizerState::new(BaseConfig::default(), 12);
        let mut b = a.clone();
        let f = fosi_deltas(&g, &ese, &mut a, 0.3, 1e-6, Some(&w)).unwrap();
        let d = admm_deltas(&g, &[0.0; 12], &ese, &mut b, 0.3, 0.0, 1e-6, Some(&w)).unwrap();
        assert_eq!(f, d);
    }

    #[test]
    fn w_update_examples() {
        let sigma = 0.25;
        let mut s = AdmmState::new(&[0.0; 3], sigma).unwrap();
        s.pi = vec![sigma; 3];
        assert_eq!(admm_w_update(&mut s), &[1.0, 1.0, 1.0]);
        let mut s = AdmmState::new(&[1.0, -2.0], 3.0).unwrap();
        assert_eq!(admm_w_update(&mut s), &[1.0, -2.0]);
    }

    #[test]
    fn w_update_is_stationary_point_of_lagrangian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 6;
            let sigma = rng.random_range(0.1..5.0);
            let mut s = AdmmState::new(&vec![0.0; n], sigma).unwrap();
            s.w_a = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            s.pi = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = admm_w_update(&mut s).to_vec();
            let eps = 1e-6;
            for i in 0..n {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += eps;
                wm[i] -= eps;
                let grad = (s.lagrangian(0.0, &wp) - s.lagrangian(0.0, &wm)) / (2.0 * eps);
                assert!(grad.abs() <= 1e-6, "dL/dw[{i}] = {grad}");
            }
        }
    }

    #[test]
    fn dual_update_examples() {
        let mut s = AdmmState::new(&[1.0, 2.0], 2.0).unwrap();
        s.pi = vec![0.5, -0.5];
        admm_dual_update(&mut s);
        assert_eq!(s.pi, vec![0.5, -0.5]);
        let mut s = AdmmState::new(&[0.0, 0.0], 2.0).unwrap();
        s.w_a = vec![1.0, 1.0];
        admm_dual_update(&mut s);
        assert_eq!(s.pi, vec![2.0, 2.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subspace_split_and_update_orthogonality(seed in 0u64..100_000, width in 1usize..5, kind in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let ese = random_ese(n, width, &mut rng);
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pi: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = ese.eigvecs.tr_matvec(&g).unwrap();
            let g1 = ese.eigvecs.matvec(&c).unwrap();
            let g2: Vec<f64> = g.iter().zip(&g1).map(|(a, b)| a - b).collect();
            for i in 0..n {
                prop_assert!((g1[i] + g2[i] - g[i]).abs() <= 1e-10);
            }
            prop_assert!(dot(&g1, &g2).abs() <= 1e-8 * dot(&g, &g));

            let kinds = [BaseKind::Sgd, BaseKind::Momentum, BaseKind::Adam, BaseKind::AdamW];
            let cfg = BaseConfig { kind: kinds[kind], lr: 0.1, ..BaseConfig::default() };
            let mut base = BaseOptimizerState::new(cfg, n);
            let (d1, d2) = fosi_deltas(&g, &ese, &mut base, 0.5, 1e-6, Some(&w)).unwrap();
            prop_assert!(dot(&d1, &d2).abs() <= 1e-8 * norm(&d1) * norm(&d2) + 1e-300);
            let sigma = rng.random_range(0.0..2.0);
            let (d1, d2) = admm_deltas(&g, &pi, &ese, &mut base, 0.5, sigma, 1e-6, Some(&w)).unwrap();
            prop_assert!(dot(&d1, &d2).abs() <= 1e-8 * norm(&d1) * norm(&d2) + 1e-300);
        }
    }
}
