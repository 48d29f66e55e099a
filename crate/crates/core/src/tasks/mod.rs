//! Optimizee problems: a generalized Rastrigin family and relu-MLP
//! classification.

pub mod data;
mod mlp;
mod rastrigin;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::Dataset;
pub use mlp::Mlp;
pub use rastrigin::Rastrigin;

use crate::util::{derive_seed, rng_for};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Rastrigin,
    MlpClassify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian mixture with class means drawn from N(0, mean_scale²).
    Synthetic {
        samples: usize,
        dim: usize,
        classes: usize,
        mean_scale: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { samples: 2048, dim: 16, classes: 10, mean_scale: 1.0, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Rastrigin dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Hidden layer widths of the MLP.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    10
}
fn default_batch() -> usize {
    128
}

impl TaskSpec {
    /// 10-dimensional Rastrigin-like problems.
    pub fn p1() -> Self {
        Self {
            family: TaskFamily::Rastrigin,
            dim: 10,
            layers: Vec::new(),
            dataset: DatasetSpec::default(),
            batch_size: default_batch(),
            seed: 0,
        }
    }

    pub fn mlp(layers: &[usize]) -> Self {
        Self { family: TaskFamily::MlpClassify, layers: layers.to_vec(), ..Self::p1() }
    }

    /// MLP with hidden widths (50, 20).
    pub fn p2() -> Self {
        Self::mlp(&[50, 20])
    }

    /// MLP with hidden widths (50, 20, 20, 12).
    pub fn p3() -> Self {
        Self::mlp(&[50, 20, 20, 12])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self.family {
            TaskFamily::Rastrigin if self.dim == 0 => Err(TaskError::Spec("rastrigin dim must be ≥ 1".into())),
            TaskFamily::MlpClassify if self.layers.contains(&0) => {
                Err(TaskError::Spec("layer sizes must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Draws task instances; holds the (shared) dataset for MLP families.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    spec: TaskSpec,
    data: Option<Arc<Dataset>>,
}

impl TaskSampler {
    pub fn new(spec: &TaskSpec) -> Result<Self, TaskError> {
        spec.validate()?;
        let data = match spec.family {
            TaskFamily::Rastrigin => None,
            TaskFamily::MlpClassify => Some(Arc::new(match &spec.dataset {
                DatasetSpec::Synthetic { samples, dim, classes, mean_scale, seed } => {
                    if *samples == 0 || *dim == 0 || *classes < 2 {
                        return Err(TaskError::Spec("synthetic dataset needs samples, dim ≥ 1 and ≥ 2 classes".into()));
                    }
                    data::gaussian_mixture(*samples, *dim, *classes, *mean_scale, *seed)
                }
                DatasetSpec::Idx { images, labels } => data::load_idx(images, labels)?,
            })),
        };
        Ok(Self { spec: spec.clone(), data })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Instance number `index`; identical for identical (spec.seed, index).
    pub fn sample(&self, index: u64) -> Task {
        let mut rng = rng_for(self.spec.seed, &[index]);
        match self.spec.family {
            TaskFamily::Rastrigin => Task::Rastrigin(Rastrigin::sample(self.spec.dim, &mut rng)),
            TaskFamily::MlpClassify => {
                let data = self.data.clone().expect("loaded in new");
                let shuffle = derive_seed(self.spec.seed, &[index, 1]);
                Task::Mlp(Mlp::sample(data, &self.spec.layers, self.spec.batch_size, shuffle, &mut rng))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Task {
    Rastrigin(Rastrigin),
    Mlp(Mlp),
}

impl Task {
    pub fn dim(&self) -> usize {
        match self {
            Task::Rastrigin(r) => r.dim(),
            Task::Mlp(m) => m.dim(),
        }
    }

    pub fn x0(&self) -> &[f64] {
        match self {
            Task::Rastrigin(r) => &r.x0,
            Task::Mlp(m) => &m.x0,
        }
    }

    /// Loss and gradient of the objective seen at inner step `step`
    /// (the minibatch for MLP tasks).
    pub fn loss_grad(&self, x: &[f64], step: usize) -> Result<(f64, Vec<f64>), TaskError> {
        if x.len() != self.dim() {
            return Err(TaskError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(match self {
            Task::Rastrigin(r) => r.loss_grad(x),
            Task::Mlp(m) => m.loss_grad(x, step),
        })
    }

    /// Deterministic evaluation loss (full objective / whole dataset).
    pub fn eval_loss(&self, x: &[f64]) -> f64 {
        match self {
            Task::Rastrigin(r) => r.loss(x),
            Task::Mlp(m) => m.full_loss(x),
        }
    }
}
