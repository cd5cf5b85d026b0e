//! Fully connected network with exact gradients and Hessian-vector products.
//!
//! Parameters are flattened layer by layer; within a layer the weight
//! matrix (row-major, `out x in`) precedes the bias vector.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::data::{Batch, Dataset, Targets};
use super::{check_len, Oracle};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::arg(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Softmax cross-entropy against class labels, averaged over samples.
    CrossEntropy,
    /// `1/(2N) * sum ||o - y||^2`.
    MeanSquared,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    inp: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug)]
pub struct MlpOracle {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
    loss: Loss,
    dim: usize,
}

impl MlpOracle {
    /// `layer_sizes = [input, hidden..., output]`. Two entries give a purely
    /// linear model.
    pub fn new(layer_sizes: &[usize], activation: Activation, loss: Loss) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::arg("layer sizes need at least input and output, all positive"));
        }
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        let mut off = 0;
        for pair in layer_sizes.windows(2) {
            let (inp, out) = (pair[0], pair[1]);
            layers.push(Layer {
                inp,
                out,
                w_off: off,
                b_off: off + inp * out,
            });
            off += (inp + 1) * out;
        }
        Ok(Self {
            sizes: layer_sizes.to_vec(),
            layers,
            activation,
            loss,
            dim: off,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; self.dim];
        for layer in &self.layers {
            let scale = 1.0 / (layer.inp as f64).sqrt();
            for x in &mut w[layer.w_off..layer.b_off] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = scale * z;
            }
        }
        w
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let input = self.sizes[0];
        let output = *self.sizes.last().unwrap();
        if batch.feature_dim() != input {
            return Err(Error::arg(format!(
                "network input {input} does not match feature dim {}",
                batch.feature_dim()
            )));
        }
        match (self.loss, batch.targets()) {
            (Loss::CrossEntropy, Targets::Classes { classes, .. }) if *classes <= output => Ok(()),
            (Loss::MeanSquared, Targets::Values { dim, .. }) if *dim == output => Ok(()),
            _ => Err(Error::arg(format!(
                "network output {output} and {:?} loss do not fit the batch targets",
                self.loss
            ))),
        }
    }

    /// Shared forward / backward / R-op pass. Accumulates summed (not
    /// averaged) gradient and Hessian-vector product; returns summed loss.
    fn pass(&self, w: &[f64], v: Option<&[f64]>, batch: &Batch, grad: Option<&mut [f64]>, rgrad: Option<&mut [f64]>) -> f64 {
        let nl = self.layers.len();
        let want_grad = grad.is_some() || rgrad.is_some();
        let mut grad_local = grad;
        let mut rgrad_local = rgrad;
        let mut total = 0.0;

        // acts[l] is the input of layer l; zs[l] its pre-activation.
        let mut acts: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut zs: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.out]).collect();
        let mut racts: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut rzs: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.out]).collect();

        for s in 0..batch.len() {
            acts[0].copy_from_slice(batch.row(s));
            for (l, layer) in self.layers.iter().enumerate() {
                let (head, tail) = acts.split_at_mut(l + 1);
                let a = &head[l];
                let (rhead, rtail) = racts.split_at_mut(l + 1);
                let ra = &rhead[l];
                for o in 0..layer.out {
                    let row = &w[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                    let mut z = w[layer.b_off + o];
                    for (wi, ai) in row.iter().zip(a) {
                        z += wi * ai;
                    }
                    zs[l][o] = z;
                    if let Some(v) = v {
                        let vrow = &v[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                        let mut rz = v[layer.b_off + o];
                        for i in 0..layer.inp {
                            rz += vrow[i] * a[i] + row[i] * ra[i];
                        }
                        rzs[l][o] = rz;
                    }
                }
                let next = &mut tail[0];
                let rnext = &mut rtail[0];
                if l + 1 < nl {
                    for o in 0..layer.out {
                        let (act, d1) = self.activate(zs[l][o]);
                        next[o] = act;
                        rnext[o] = d1 * rzs[l][o];
                    }
                } else {
                    next.copy_from_slice(&zs[l]);
                    rnext.copy_from_slice(&rzs[l]);
                }
            }

            let out = &acts[nl];
            let rout = &racts[nl];
            let mut delta = vec![0.0; out.len()];
            let mut rdelta = vec![0.0; out.len()];
            match (self.loss, batch.targets()) {
                (Loss::CrossEntropy, Targets::Classes { labels, .. }) => {
                    let y = labels[s];
                    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = out.iter().map(|o| (o - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    total += max + sum.ln() - out[y];
                    let soft: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                    let srout: f64 = soft.iter().zip(rout).map(|(p, r)| p * r).sum();
                    for j in 0..out.len() {
                        delta[j] = soft[j] - if j == y { 1.0 } else { 0.0 };
                        rdelta[j] = soft[j] * (rout[j] - srout);
                    }
                }
                (Loss::MeanSquared, Targets::Values { values, dim }) => {
                    let y = &values[s * dim..(s + 1) * dim];
                    for j in 0..out.len() {
                        let r = out[j] - y[j];
                        total += 0.5 * r * r;
                        delta[j] = r;
                        rdelta[j] = rout[j];
                    }
                }
                _ => unreachable!("targets validated by check_batch"),
            }
            if !want_grad {
                continue;
            }

            for (l, layer) in self.layers.iter().enumerate().rev() {
                let a = &acts[l];
                let ra = &racts[l];
                if let Some(g) = grad_local.as_deref_mut() {
                    for o in 0..layer.out {
                        let row = &mut g[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                        for (gi, ai) in row.iter_mut().zip(a) {
                            *gi += delta[o] * ai;
                        }
                        g[layer.b_off + o] += delta[o];
                    }
                }
                if let Some(rg) = rgrad_local.as_deref_mut() {
                    for o in 0..layer.out {
                        let row = &mut rg[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                        for i in 0..layer.inp {
                            row[i] += rdelta[o] * a[i] + delta[o] * ra[i];
                        }
                        rg[layer.b_off + o] += rdelta[o];
                    }
                }
                if l == 0 {
                    break;
                }
                let mut ga = vec![0.0; layer.inp];
                let mut rga = vec![0.0; layer.inp];
                for o in 0..layer.out {
                    let row = &w[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                    for i in 0..layer.inp {
                        ga[i] += row[i] * delta[o];
                    }
                    if let Some(v) = v {
                        let vrow = &v[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                        for i in 0..layer.inp {
                            rga[i] += vrow[i] * delta[o] + row[i] * rdelta[o];
                        }
                    }
                }
                let z_prev = &zs[l - 1];
                let rz_prev = &rzs[l - 1];
                delta = vec![0.0; layer.inp];
                rdelta = vec![0.0; layer.inp];
                for i in 0..layer.inp {
                    let (_, d1, d2) = self.derivatives(z_prev[i], a[i]);
                    delta[i] = d1 * ga[i];
                    rdelta[i] = d2 * rz_prev[i] * ga[i] + d1 * rga[i];
                }
            }
        }
        total
    }

    /// `(phi(z), phi'(z))`.
    fn activate(&self, z: f64) -> (f64, f64) {
        match self.activation {
            Activation::Tanh => {
                let a = z.tanh();
                (a, 1.0 - a * a)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// `(phi, phi', phi'')` given the pre-activation and the activation.
    fn derivatives(&self, z: f64, a: f64) -> (f64, f64, f64) {
        match self.activation {
            Activation::Tanh => {
                let d1 = 1.0 - a * a;
                (a, d1, -2.0 * a * d1)
            }
            Activation::Relu => (a, if z > 0.0 { 1.0 } else { 0.0 }, 0.0),
        }
    }
}

/// Network sized for `dataset`: cross-entropy for class labels, mean squared
/// error for real targets.
pub fn mlp_oracle(layer_sizes: &[usize], activation: Activation, dataset: &Dataset) -> Result<MlpOracle> {
    let loss = match dataset.classes() {
        Some(_) => Loss::CrossEntropy,
        None => Loss::MeanSquared,
    };
    let oracle = MlpOracle::new(layer_sizes, activation, loss)?;
    oracle.check_batch(dataset.all())?;
    if dataset.is_empty() {
        return Err(Error::arg("dataset is empty"));
    }
    let output = *layer_sizes.last().unwrap();
    if dataset.target_dim() != output {
        return Err(Error::arg(format!(
            "network output {output} does not match target dim {}",
            dataset.target_dim()
        )));
    }
    Ok(oracle)
}

fn inv_len(batch: &Batch) -> f64 {
    if batch.is_empty() {
        0.0
    } else {
        1.0 / batch.len() as f64
    }
}

impl Oracle for MlpOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, w: &[f64], batch: &Batch) -> Result<f64> {
        check_len("mlp value", self.dim, w)?;
        self.check_batch(batch)?;
        Ok(self.pass(w, None, batch, None, None) * inv_len(batch))
    }

    fn grad(&self, w: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        check_len("mlp grad", self.dim, w)?;
        self.check_batch(batch)?;
        let mut g = vec![0.0; self.dim];
        self.pass(w, None, batch, Some(&mut g), None);
        let s = inv_len(batch);
        g.iter_mut().for_each(|x| *x *= s);
        Ok(g)
    }

    fn hvp(&self, w: &[f64], v: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        check_len("mlp hvp (w)", self.dim, w)?;
        check_len("mlp hvp (v)", self.dim, v)?;
        self.check_batch(batch)?;
        let mut hv = vec![0.0; self.dim];
        self.pass(w, Some(v), batch, None, Some(&mut hv));
        let s = inv_len(batch);
        hv.iter_mut().for_each(|x| *x *= s);
        Ok(hv)
    }

    fn accuracy(&self, w: &[f64], batch: &Batch) -> Result<Option<f64>> {
        check_len("mlp accuracy", self.dim, w)?;
        self.check_batch(batch)?;
        let Targets::Classes { labels, .. } = batch.targets() else {
            return Ok(None);
        };
        if batch.is_empty() {
            return Ok(None);
        }
        let mut correct = 0usize;
        for (s, &label) in labels.iter().enumerate() {
            let out = self.outputs(w, batch.row(s));
            let mut best = 0;
            for j in 1..out.len() {
                if out[j] > out[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
        Ok(Some(correct as f64 / labels.len() as f64))
    }
}

impl MlpOracle {
    /// Network output for one input row.
    pub fn outputs(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let nl = self.layers.len();
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out];
            for (o, slot) in next.iter_mut().enumerate() {
                let row = &w[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                let mut z = w[layer.b_off + o];
                for (wi, ai) in row.iter().zip(&a) {
                    z += wi * ai;
                }
                *slot = if l + 1 < nl { self.activate(z).0 } else { z };
            }
            a = next;
        }
        a
    }
}
