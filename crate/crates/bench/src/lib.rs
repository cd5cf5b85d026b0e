//! Shared fixtures for the criterion benches.

use dho2_core::oracle::{generate_synthetic_dataset, mlp_oracle, spiked_spectrum, Activation, Dataset, MlpOracle};
use dho2_core::{quadratic_oracle, Oracle};

/// A rotated quadratic with eight large outliers over a `[1, 10]` bulk.
pub fn spiked_quadratic(n: usize) -> dho2_core::oracle::QuadraticOracle {
    let spectrum = spiked_spectrum(n, 8.min(n), (1e3, 1e4), (1.0, 10.0)).expect("valid spectrum");
    quadratic_oracle(&spectrum, 1).expect("valid quadratic")
}

/// Two-Gaussians classifier with a `[2, hidden, 2]` tanh network.
pub fn gaussian_mlp(samples: usize, hidden: usize) -> (MlpOracle, Dataset, Vec<f64>) {
    let data = generate_synthetic_dataset(dho2_core::DatasetKind::TwoGaussians, samples, 7).expect("dataset");
    let oracle = mlp_oracle(&[2, hidden, 2], Activation::Tanh, &data).expect("oracle");
    let w = oracle.init_params(1);
    assert_eq!(w.len(), oracle.dim());
    (oracle, data, w)
}
