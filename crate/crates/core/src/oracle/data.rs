use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Integer class labels in `0..classes`.
    Classes { labels: Vec<usize>, classes: usize },
    /// Real-valued targets, `dim` per sample, row-major.
    Values { values: Vec<f64>, dim: usize },
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values { values, dim } if *dim > 0 => values.len() / dim,
            Targets::Values { .. } => 0,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values { values, dim } => Targets::Values {
                values: idx.iter().flat_map(|&i| &values[i * dim..(i + 1) * dim]).copied().collect(),
                dim: *dim,
            },
        }
    }
}

/// A set of samples: row-major features plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    feature_dim: usize,
    targets: Targets,
}

impl Batch {
    pub fn new(features: Vec<f64>, feature_dim: usize, targets: Targets) -> Result<Self> {
        let rows = targets.len();
        if features.len() != rows * feature_dim {
            return Err(Error::dim("batch features", rows * feature_dim, features.len()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("batch features must be finite".into()));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(Self {
            features,
            feature_dim,
            targets,
        })
    }

    /// A batch with no samples, for oracles that ignore data.
    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            feature_dim: 0,
            targets: Targets::Values {
                values: Vec::new(),
                dim: 0,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: idx.iter().flat_map(|&i| self.row(i)).copied().collect(),
            feature_dim: self.feature_dim,
            targets: self.targets.select(idx),
        }
    }
}

/// Built-in synthetic problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Two isotropic 2-D Gaussians centred at `(1, 1)` and `(-1, -1)`.
    TwoGaussians,
    /// Two noisy circles of radius 0.5 and 1.5.
    ConcentricRings,
    /// `y = x . beta + noise` with 5 features and a seeded `beta`.
    LinearRegression,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TwoGaussians => "two-gaussians",
            DatasetKind::ConcentricRings => "concentric-rings",
            DatasetKind::LinearRegression => "linear-regression",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(DatasetKind::TwoGaussians),
            "concentric-rings" => Ok(DatasetKind::ConcentricRings),
            "linear-regression" => Ok(DatasetKind::LinearRegression),
            other => Err(Error::arg(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// An ordered collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    data: Batch,
    label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(data: Batch) -> Self {
        Self { data, label_names: None }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.feature_dim()
    }

    /// Number of classes, or `None` for regression targets.
    pub fn classes(&self) -> Option<usize> {
        match self.data.targets() {
            Targets::Classes { classes, .. } => Some(*classes),
            Targets::Values { .. } => None,
        }
    }

    pub fn target_dim(&self) -> usize {
        match self.data.targets() {
            Targets::Classes { classes, .. } => *classes,
            Targets::Values { dim, .. } => *dim,
        }
    }

    /// Original label strings from a CSV file, indexed by encoded label.
    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    pub fn all(&self) -> &Batch {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        self.data.select(idx)
    }

    /// The first `count` samples (all of them if fewer).
    pub fn head(&self, count: usize) -> Batch {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.select(&idx)
    }

    /// Sample order for one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    /// Global batches of one epoch. The last batch may be short.
    pub fn epoch_batches(&self, seed: u64, epoch: u64, batch_size: usize) -> Vec<Vec<usize>> {
        let size = batch_size.max(1);
        self.epoch_order(seed, epoch).chunks(size).map(|c| c.to_vec()).collect()
    }
}

/// The part of a global batch handled by `rank`: a balanced contiguous
/// split, so the parts of all ranks partition `batch`.
pub fn worker_part(batch: &[usize], rank: usize, size: usize) -> &[usize] {
    let lo = rank * batch.len() / size;
    let hi = (rank + 1) * batch.len() / size;
    &batch[lo..hi]
}

/// Reproducible synthetic dataset. Classification kinds alternate labels
/// so class counts differ by at most one.
pub fn generate_synthetic_dataset(kind: DatasetKind, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::arg("n_samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let batch = match kind {
        DatasetKind::TwoGaussians => {
            let mut features = Vec::with_capacity(2 * n_samples);
            let labels: Vec<usize> = (0..n_samples).map(|i| i % 2).collect();
            for &label in &labels {
                let centre = if label == 0 { 1.0 } else { -1.0 };
                features.push(centre + gauss(&mut rng));
                features.push(centre + gauss(&mut rng));
            }
            Batch::new(features, 2, Targets::Classes { labels, classes: 2 })?
        }
        DatasetKind::ConcentricRings => {
            let mut features = Vec::with_capacity(2 * n_samples);
            let labels: Vec<usize> = (0..n_samples).map(|i| i % 2).collect();
            for &label in &labels {
                let radius = if label == 0 { 0.5 } else { 1.5 } + 0.1 * gauss(&mut rng);
                let angle = rng.random_range(0.0..2.0 * PI);
                features.push(radius * angle.cos());
                features.push(radius * angle.sin());
            }
            Batch::new(features, 2, Targets::Classes { labels, classes: 2 })?
        }
        DatasetKind::LinearRegression => {
            const DIM: usize = 5;
            let beta: Vec<f64> = (0..DIM).map(|_| gauss(&mut rng)).collect();
            let mut features = Vec::with_capacity(DIM * n_samples);
            let mut values = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let x: Vec<f64> = (0..DIM).map(|_| gauss(&mut rng)).collect();
                let y = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + 0.1 * gauss(&mut rng);
                features.extend_from_slice(&x);
                values.push(y);
            }
            Batch::new(features, DIM, Targets::Values { values, dim: 1 })?
        }
    };
    Ok(Dataset::new(batch))
}

/// Reads a headered CSV. Labels are encoded `0..K-1` in order of first
/// appearance.
pub fn load_csv_dataset(path: &Path, feature_cols: &[&str], label_col: &str) -> Result<Dataset> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(source),
        other => Error::Parse {
            row: 0,
            col: 0,
            message: format!("{other:?}"),
        },
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            row: 0,
            col: 0,
            message: format!("missing column '{name}'"),
        })
    };
    let feature_idx: Vec<usize> = feature_cols.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let label_idx = find(label_col)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = r + 1;
        for &c in &feature_idx {
            let cell = record.get(c).unwrap_or("").trim();
            let x: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                message: format!("non-numeric feature '{cell}'"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    message: format!("non-finite feature '{cell}'"),
                });
            }
            features.push(x);
        }
        let label = record.get(label_idx).unwrap_or("").trim().to_string();
        let next = codes.len();
        let code = *codes.entry(label.clone()).or_insert_with(|| {
            names.push(label);
            next
        });
        labels.push(code);
    }
    let classes = names.len();
    let data = Batch::new(features, feature_idx.len(), Targets::Classes { labels, classes })?;
    Ok(Dataset {
        data,
        label_names: Some(names),
    })
}

/// Writes features as `x0..x{d-1}` and targets as `label` (classes) or
/// `y0..` (values). Floats use the shortest round-trip representation.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let to_io = |e: csv::Error| std::io::Error::other(e.to_string());
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_err(to_io(e)))?;
    let d = dataset.feature_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    match dataset.all().targets() {
        Targets::Classes { .. } => header.push("label".into()),
        Targets::Values { dim, .. } => header.extend((0..*dim).map(|i| format!("y{i}"))),
    }
    writer.write_record(&header).map_err(|e| io_err(to_io(e)))?;
    let batch = dataset.all();
    for i in 0..batch.len() {
        let mut rec: Vec<String> = batch.row(i).iter().map(|x| x.to_string()).collect();
        match batch.targets() {
            Targets::Classes { labels, .. } => rec.push(labels[i].to_string()),
            Targets::Values { values, dim } => {
                rec.extend(values[i * dim..(i + 1) * dim].iter().map(|x| x.to_string()));
            }
        }
        writer.write_record(&rec).map_err(|e| io_err(to_io(e)))?;
    }
    writer.flush().map_err(io_err)
}
