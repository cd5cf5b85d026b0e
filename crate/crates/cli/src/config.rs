//! Experiment configuration files.
//!
//! A config is TOML with four sections. Every key is optional except
//! `problem.kind`; see `configs/` for complete examples.
//!
//! ```toml
//! [experiment]
//! name = "quadratic"
//! trainer = "dho2"        # sgd | fosi | dho2
//! workers = 2
//! seed = 1
//! backend = "threaded"    # threaded | round-robin
//!
//! [problem]
//! kind = "quadratic"      # quadratic | mlp
//! n = 100
//!
//! [optimizer]
//! base = "sgd"
//! lr = 0.05
//! sigma = 2.0             # or a preset name: "resnet101", "vgg16", "resnet152"
//!
//! [output]
//! dir = "runs/quadratic"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use dho2_core::collectives::Backend;
use dho2_core::lanczos::LanczosOptions;
use dho2_core::optimizer::{BaseConfig, BaseKind, SIGMA_PRESETS};
use dho2_core::oracle::Activation;
use dho2_core::{DatasetKind, TrainConfig, TrainerKind};
use serde::{Deserialize, Serialize};

pub const QUADRATIC_PRESET: &str = include_str!("../configs/quadratic.toml");
pub const TWO_GAUSSIANS_PRESET: &str = include_str!("../configs/two_gaussians.toml");
pub const RINGS_PRESET: &str = include_str!("../configs/rings.toml");

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Io { path: PathBuf, message: String },
    Parse(String),
    Field { field: &'static str, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, message } => write!(f, "cannot read config {}: {message}", path.display()),
            ConfigError::Parse(msg) => write!(f, "malformed config: {msg}"),
            ConfigError::Field { field, message } => write!(f, "invalid config field `{field}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub trainer: String,
    pub workers: usize,
    pub seed: u64,
    pub backend: String,
    pub schedule_seed: Option<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            trainer: "dho2".into(),
            workers: 1,
            seed: 0,
            backend: "threaded".into(),
            schedule_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSection {
    Quadratic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_spikes")]
        spikes: usize,
        #[serde(default = "default_spike_range")]
        spike_range: [f64; 2],
        #[serde(default = "default_bulk_range")]
        bulk_range: [f64; 2],
        /// Defaults to `seed + 1`; 0 keeps the Hessian diagonal.
        rotation_seed: Option<u64>,
        #[serde(default = "one")]
        init_scale: f64,
    },
    Mlp {
        /// A synthetic generator name or a path to a CSV file.
        dataset: String,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        data_seed: u64,
        layers: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: String,
        feature_columns: Option<Vec<String>>,
        label_column: Option<String>,
    },
}

fn default_n() -> usize {
    100
}
fn default_spikes() -> usize {
    8
}
fn default_spike_range() -> [f64; 2] {
    [1e3, 1e4]
}
fn default_bulk_range() -> [f64; 2] {
    [1.0, 10.0]
}
fn one() -> f64 {
    1.0
}
fn default_samples() -> usize {
    512
}
fn default_activation() -> String {
    "tanh".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Value(f64),
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub base: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub k: usize,
    pub l: usize,
    pub eigval_floor: f64,
    pub lanczos_m: Option<usize>,
    pub safeguard: bool,
    pub divergence_check: bool,
    pub curvature_batch: usize,
    pub refresh_interval: Option<usize>,
    pub outer_rounds: usize,
    pub inner_epochs: usize,
    pub sigma: SigmaSpec,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub inner_tol: Option<f64>,
    pub target_loss: Option<f64>,
    pub stop_at_target: bool,
    pub replication_check: bool,
    pub compute_gflops: f64,
    pub bandwidth_gbps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let b = t.base;
        Self {
            base: b.kind.as_str().into(),
            lr: b.lr,
            weight_decay: b.weight_decay,
            beta1: b.beta1,
            beta2: b.beta2,
            eps: b.eps,
            momentum: b.momentum,
            alpha: t.alpha,
            k: t.k,
            l: t.l,
            eigval_floor: t.eigval_floor,
            lanczos_m: t.lanczos_m,
            safeguard: t.lanczos.safeguard,
            divergence_check: t.lanczos.divergence_check,
            curvature_batch: t.curvature_batch,
            refresh_interval: t.refresh_interval,
            outer_rounds: t.outer_rounds,
            inner_epochs: t.inner_epochs,
            sigma: SigmaSpec::Value(t.sigma),
            epochs: t.epochs,
            batch_size: t.batch_size,
            inner_tol: t.inner_tol,
            target_loss: t.target_loss,
            stop_at_target: t.stop_at_target,
            replication_check: t.replication_check,
            compute_gflops: t.compute_gflops,
            bandwidth_gbps: t.bandwidth_gbps,
        }
    }
}

/// Base optimizer settings that replace `[optimizer]` values when the
/// trainer is `sgd`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub base: Option<String>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Fill the `wallclock_ms` metrics column. Off by default so that
    /// reruns produce identical files.
    pub record_wallclock: bool,
}

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub trainer: Option<String>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub base: Option<String>,
    pub lr: Option<f64>,
    pub backend: Option<String>,
    pub schedule_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads and validates a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let ProblemSection::Mlp { dataset, .. } = &mut cfg.problem {
            if dataset.ends_with(".csv") && Path::new(dataset.as_str()).is_relative() {
                if let Some(dir) = path.parent() {
                    let joined = dir.join(&*dataset);
                    let resolved = std::fs::canonicalize(&joined).unwrap_or(joined);
                    *dataset = resolved.to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let text = match name {
            "quadratic" => QUADRATIC_PRESET,
            "two-gaussians" => TWO_GAUSSIANS_PRESET,
            "rings" => RINGS_PRESET,
            other => return Err(field("preset", format!("unknown preset '{other}'"))),
        };
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = &o.trainer {
            self.experiment.trainer = t.clone();
        }
        if let Some(c) = o.workers {
            self.experiment.workers = c;
        }
        if let Some(s) = o.seed {
            self.experiment.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = Some(d.clone());
        }
        if let Some(b) = &o.base {
            self.optimizer.base = b.clone();
            self.baseline.base = None;
        }
        if let Some(lr) = o.lr {
            self.optimizer.lr = lr;
            self.baseline.lr = None;
        }
        if let Some(b) = &o.backend {
            self.experiment.backend = b.clone();
        }
        if o.schedule_seed.is_some() {
            self.experiment.schedule_seed = o.schedule_seed;
        }
    }

    pub fn trainer(&self) -> Result<TrainerKind, ConfigError> {
        self.experiment
            .trainer
            .parse()
            .map_err(|_| field("experiment.trainer", format!("expected sgd, fosi or dho2, got '{}'", self.experiment.trainer)))
    }

    pub fn backend(&self) -> Result<Backend, ConfigError> {
        match self.experiment.backend.as_str() {
            "threaded" => Ok(Backend::Threaded),
            "round-robin" => Ok(Backend::RoundRobin {
                schedule_seed: self.experiment.schedule_seed,
            }),
            other => Err(field("experiment.backend", format!("expected threaded or round-robin, got '{other}'"))),
        }
    }

    pub fn sigma(&self) -> Result<f64, ConfigError> {
        match &self.optimizer.sigma {
            SigmaSpec::Value(v) => Ok(*v),
            SigmaSpec::Preset(name) => SIGMA_PRESETS
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| field("optimizer.sigma", format!("unknown sigma preset '{name}'"))),
        }
    }

    /// Checks every field and returns the trainer settings.
    pub fn validate(&self) -> Result<TrainConfig, ConfigError> {
        let e = &self.experiment;
        if e.workers == 0 {
            return Err(field("experiment.workers", "must be >= 1"));
        }
        let trainer = self.trainer()?;
        self.backend()?;
        match &self.problem {
            ProblemSection::Quadratic {
                n,
                spikes,
                spike_range,
                bulk_range,
                init_scale,
                ..
            } => {
                if *n == 0 {
                    return Err(field("problem.n", "must be >= 1"));
                }
                if spikes > n {
                    return Err(field("problem.spikes", "must not exceed problem.n"));
                }
                for (name, r) in [("problem.spike_range", spike_range), ("problem.bulk_range", bulk_range)] {
                    if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                        return Err(field(name, "must be [low, high] with 0 < low <= high"));
                    }
                }
                if !init_scale.is_finite() {
                    return Err(field("problem.init_scale", "must be finite"));
                }
            }
            ProblemSection::Mlp {
                dataset,
                samples,
                layers,
                activation,
                feature_columns,
                label_column,
                ..
            } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(field("problem.layers", "needs at least two nonzero sizes"));
                }
                activation
                    .parse::<Activation>()
                    .map_err(|_| field("problem.activation", format!("expected tanh or relu, got '{activation}'")))?;
                if dataset.ends_with(".csv") {
                    if !Path::new(dataset).is_file() {
                        return Err(field("problem.dataset", format!("file not found: {dataset}")));
                    }
                    if feature_columns.is_none() || label_column.is_none() {
                        return Err(field(
                            "problem.feature_columns",
                            "CSV datasets need feature_columns and label_column",
                        ));
                    }
                } else {
                    dataset.parse::<DatasetKind>().map_err(|_| {
                        field(
                            "problem.dataset",
                            format!("expected two-gaussians, concentric-rings, linear-regression or a .csv path, got '{dataset}'"),
                        )
                    })?;
                    if *samples == 0 {
                        return Err(field("problem.samples", "must be >= 1"));
                    }
                }
            }
        }
        let mut o = self.optimizer.clone();
        let mut base_field = "optimizer.base";
        if trainer == TrainerKind::Sgd {
            let b = &self.baseline;
            if let Some(base) = &b.base {
                o.base = base.clone();
                base_field = "baseline.base";
            }
            o.lr = b.lr.unwrap_or(o.lr);
            o.weight_decay = b.weight_decay.unwrap_or(o.weight_decay);
            o.epochs = b.epochs.unwrap_or(o.epochs);
        }
        let kind: BaseKind = o
            .base
            .parse()
            .map_err(|_| field(base_field, format!("expected sgd, momentum, adam, adamw or zero, got '{}'", o.base)))?;
        let positive = [
            ("optimizer.lr", o.lr),
            ("optimizer.eps", o.eps),
            ("optimizer.alpha", o.alpha),
            ("optimizer.eigval_floor", o.eigval_floor),
            ("optimizer.compute_gflops", o.compute_gflops),
            ("optimizer.bandwidth_gbps", o.bandwidth_gbps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("optimizer.beta1", o.beta1),
            ("optimizer.beta2", o.beta2),
            ("optimizer.momentum", o.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(field("optimizer.weight_decay", "must be >= 0"));
        }
        let sigma = self.sigma()?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(field("optimizer.sigma", format!("must be >= 0, got {sigma}")));
        }
        if o.inner_epochs == 0 {
            return Err(field("optimizer.inner_epochs", "must be >= 1"));
        }
        if o.curvature_batch == 0 {
            return Err(field("optimizer.curvature_batch", "must be >= 1"));
        }
        for (name, v) in [
            ("optimizer.batch_size", o.batch_size),
            ("optimizer.refresh_interval", o.refresh_interval),
            ("optimizer.lanczos_m", o.lanczos_m),
        ] {
            if v == Some(0) {
                return Err(field(name, "must be >= 1"));
            }
        }
        if let Some(m) = o.lanczos_m {
            if trainer != TrainerKind::Sgd && m < o.k + o.l {
                return Err(field("optimizer.lanczos_m", "must be >= k + l"));
            }
        }
        if let ProblemSection::Quadratic { n, .. } = &self.problem {
            if trainer != TrainerKind::Sgd && o.k + o.l > *n {
                return Err(field("optimizer.k", "k + l must not exceed the parameter count"));
            }
        }
        Ok(TrainConfig {
            trainer,
            base: BaseConfig {
                kind,
                lr: o.lr,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                momentum: o.momentum,
            },
            k: o.k,
            l: o.l,
            alpha: o.alpha,
            eigval_floor: o.eigval_floor,
            lanczos_m: o.lanczos_m,
            lanczos: LanczosOptions {
                safeguard: o.safeguard,
                divergence_check: o.divergence_check,
            },
            curvature_batch: o.curvature_batch,
            refresh_interval: o.refresh_interval,
            outer_rounds: o.outer_rounds,
            inner_epochs: o.inner_epochs,
            sigma,
            epochs: o.epochs,
            batch_size: o.batch_size,
            seed: e.seed,
            inner_tol: o.inner_tol,
            target_loss: o.target_loss,
            stop_at_target: o.stop_at_target,
            replication_check: o.replication_check,
            compute_gflops: o.compute_gflops,
            bandwidth_gbps: o.bandwidth_gbps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["quadratic", "two-gaussians", "rings"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = ExperimentConfig::preset("two-gaussians").unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("[problem]\nkind = \"quadratic\"\n").unwrap();
        let t = cfg.validate().unwrap();
        assert_eq!(t.k, 8);
        assert_eq!(t.sigma, 5e-4);
        assert_eq!(t.base.kind, BaseKind::AdamW);
    }

    #[test]
    fn sigma_presets() {
        let cfg = ExperimentConfig::from_toml("[problem]\nkind = \"quadratic\"\n[optimizer]\nsigma = \"vgg16\"\n").unwrap();
        assert_eq!(cfg.sigma().unwrap(), 5e-6);
        let cfg = ExperimentConfig::from_toml("[problem]\nkind = \"quadratic\"\n[optimizer]\nsigma = \"nope\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Field { field: "optimizer.sigma", .. })));
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[experiment]\nworkers = 0\n[problem]\nkind = \"quadratic\"\n", "experiment.workers"),
            ("[experiment]\ntrainer = \"lbfgs\"\n[problem]\nkind = \"quadratic\"\n", "experiment.trainer"),
            ("[problem]\nkind = \"quadratic\"\n[optimizer]\nlr = -1.0\n", "optimizer.lr"),
            ("[problem]\nkind = \"quadratic\"\n[optimizer]\nbeta2 = 1.0\n", "optimizer.beta2"),
            ("[problem]\nkind = \"quadratic\"\nn = 4\nspikes = 2\n[optimizer]\nk = 5\n", "optimizer.k"),
            (
                "[problem]\nkind = \"mlp\"\ndataset = \"missing.csv\"\nlayers = [2, 2]\n",
                "problem.dataset",
            ),
        ];
        for (text, name) in cases {
            match ExperimentConfig::from_toml(text).unwrap().validate() {
                Err(ConfigError::Field { field, .. }) => assert_eq!(field, name),
                other => panic!("expected error on {name}, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[problem]\nkind = \"quadratic\"\n[optimizer]\nlearning_rate = 1.0\n")
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn baseline_section_applies_to_sgd_only() {
        let text = "[problem]\nkind = \"quadratic\"\n[optimizer]\nbase = \"sgd\"\nlr = 0.05\n[baseline]\nbase = \"adam\"\nlr = 0.1\nepochs = 7\n";
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        let t = cfg.validate().unwrap();
        assert_eq!((t.base.kind, t.base.lr), (BaseKind::Sgd, 0.05));
        cfg.experiment.trainer = "sgd".into();
        let t = cfg.validate().unwrap();
        assert_eq!((t.base.kind, t.base.lr, t.epochs), (BaseKind::Adam, 0.1, 7));
        cfg.apply(&Overrides {
            lr: Some(0.2),
            ..Overrides::default()
        });
        assert_eq!(cfg.validate().unwrap().base.lr, 0.2);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::preset("quadratic").unwrap();
        cfg.apply(&Overrides {
            trainer: Some("fosi".into()),
            workers: Some(5),
            seed: Some(42),
            lr: Some(0.5),
            ..Overrides::default()
        });
        let t = cfg.validate().unwrap();
        assert_eq!(t.trainer, TrainerKind::Fosi);
        assert_eq!(cfg.experiment.workers, 5);
        assert_eq!(t.seed, 42);
        assert_eq!(t.base.lr, 0.5);
    }
}
