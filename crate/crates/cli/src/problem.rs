use std::path::Path;

use anyhow::{Context, Result};
use dho2_core::oracle::{
    generate_synthetic_dataset, load_csv_dataset, mlp_oracle, quadratic_oracle, spiked_spectrum, Activation,
};
use dho2_core::{Dataset, DatasetKind, Oracle};

use crate::config::{ExperimentConfig, ProblemSection};

/// An objective ready for training.
pub struct Problem {
    pub oracle: Box<dyn Oracle>,
    pub dataset: Option<Dataset>,
    pub w0: Vec<f64>,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.oracle.dim()
    }
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let seed = cfg.experiment.seed;
    match &cfg.problem {
        ProblemSection::Quadratic {
            n,
            spikes,
            spike_range,
            bulk_range,
            rotation_seed,
            init_scale,
        } => {
            let spectrum = spiked_spectrum(
                *n,
                *spikes,
                (spike_range[0], spike_range[1]),
                (bulk_range[0], bulk_range[1]),
            )?;
            let q = quadratic_oracle(&spectrum, rotation_seed.unwrap_or(seed.wrapping_add(1)))?;
            let w0 = q.init_params(seed, *init_scale);
            Ok(Problem {
                oracle: Box::new(q),
                dataset: None,
                w0,
            })
        }
        ProblemSection::Mlp {
            dataset,
            samples,
            data_seed,
            layers,
            activation,
            feature_columns,
            label_column,
        } => {
            let data = if dataset.ends_with(".csv") {
                let cols: Vec<&str> = feature_columns.iter().flatten().map(String::as_str).collect();
                let label = label_column.as_deref().unwrap_or_default();
                load_csv_dataset(Path::new(dataset), &cols, label).with_context(|| format!("loading {dataset}"))?
            } else {
                let kind: DatasetKind = dataset.parse()?;
                generate_synthetic_dataset(kind, *samples, *data_seed)?
            };
            let act: Activation = activation.parse()?;
            let mlp = mlp_oracle(layers, act, &data)?;
            let w0 = mlp.init_params(seed);
            Ok(Problem {
                oracle: Box::new(mlp),
                dataset: Some(data),
                w0,
            })
        }
    }
}
