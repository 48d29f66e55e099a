//! Numerical learned optimizer: a coordinate-wise LSTM reading gradient
//! features and emitting one update per coordinate.

pub mod lstm;
pub mod meta;

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizers::features::{STREAM_G, STREAM_GHAT, STREAM_MHAT, STREAM_NHAT};
use crate::optimizers::{FeatureParams, FeatureTracker, UpdateRule};
use crate::util::rng_for;
pub use lstm::{Hidden, Layout, Tape, TapeOp};
pub use meta::{meta_train, unroll_loss, CurvePoint, MetaTrainConfig, MetaTrainLog};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("expected {expected} input streams, got {got}")]
    StreamMismatch { expected: usize, got: usize },
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dm,
    Rp,
    RpSmall,
    RpSmallExtra,
}

impl Variant {
    pub fn streams(self) -> &'static [&'static str] {
        match self {
            Variant::Dm => &[STREAM_G],
            Variant::Rp | Variant::RpSmall => &[STREAM_MHAT, STREAM_GHAT],
            Variant::RpSmallExtra => &[STREAM_MHAT, STREAM_GHAT, STREAM_NHAT],
        }
    }

    pub fn default_projection(self) -> Option<usize> {
        match self {
            Variant::Dm => None,
            Variant::Rp => Some(20),
            Variant::RpSmall | Variant::RpSmallExtra => Some(6),
        }
    }

    pub fn default_layers(self) -> usize {
        match self {
            Variant::Dm | Variant::Rp => 2,
            Variant::RpSmall | Variant::RpSmallExtra => 1,
        }
    }

    pub fn default_preprocess(self) -> Preprocess {
        match self {
            Variant::Dm => Preprocess::LogSign { k: 5.0 },
            _ => Preprocess::Raw,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Variant::Dm => "dm",
            Variant::Rp => "rp",
            Variant::RpSmall => "rp_small",
            Variant::RpSmallExtra => "rp_small_extra",
        }
    }
}

/// How each input stream is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preprocess {
    Raw,
    /// Two channels per stream: max(ln(|v|+ε)/k, −1) and clamp(v·eᵏ, ±1).
    /// Raw gradients of MLP tasks are far too small for the LSTM otherwise.
    LogSign { k: f64 },
}

impl Preprocess {
    pub fn width(self) -> usize {
        match self {
            Preprocess::Raw => 1,
            Preprocess::LogSign { .. } => 2,
        }
    }

    fn apply(self, v: f64, out: &mut [f64]) {
        match self {
            Preprocess::Raw => out[0] = v,
            Preprocess::LogSign { k } => {
                out[0] = ((v.abs() + f64::EPSILON).ln() / k).max(-1.0);
                out[1] = (v * k.exp()).clamp(-1.0, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub variant: Variant,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Overrides the variant's projection width; 0 disables the projection.
    #[serde(default)]
    pub projection: Option<usize>,
    #[serde(default)]
    pub layers: Option<usize>,
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
    /// Overrides the variant's input preprocessing.
    #[serde(default)]
    pub preprocess: Option<Preprocess>,
    #[serde(default)]
    pub features: FeatureParams,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_hidden() -> usize {
    20
}

fn default_output_scale() -> f64 {
    0.1
}

impl TeacherConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            hidden: default_hidden(),
            projection: None,
            layers: None,
            output_scale: default_output_scale(),
            preprocess: None,
            features: FeatureParams::default(),
            init_seed: 0,
        }
    }

    pub fn streams(&self) -> &'static [&'static str] {
        self.variant.streams()
    }

    pub fn projection_dim(&self) -> Option<usize> {
        match self.projection {
            Some(0) => None,
            Some(p) => Some(p),
            None => self.variant.default_projection(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.unwrap_or_else(|| self.variant.default_layers())
    }

    pub fn input_preprocess(&self) -> Preprocess {
        self.preprocess.unwrap_or_else(|| self.variant.default_preprocess())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.streams().len() * self.input_preprocess().width(), self.projection_dim(), self.hidden, self.n_layers())
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.hidden == 0 || self.n_layers() == 0 {
            return Err(TeacherError::Config("hidden size and layer count must be positive".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(TeacherError::Config("output_scale must be positive".into()));
        }
        if let Preprocess::LogSign { k } = self.input_preprocess() {
            if !(k.is_finite() && k > 0.0) {
                return Err(TeacherError::Config("log-sign k must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    config: TeacherConfig,
    layout: Layout,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBlock {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: TeacherConfig,
    params: Vec<CheckpointBlock>,
}

impl TeacherModel {
    /// Randomly initialized from `config.init_seed`.
    pub fn new(config: TeacherConfig) -> Result<Self, TeacherError> {
        config.validate()?;
        let layout = config.layout();
        let params = layout.init(&mut rng_for(config.init_seed, &[0x7465_6163]));
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: TeacherConfig, params: Vec<f64>) -> Result<Self, TeacherError> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.len() {
            return Err(TeacherError::Config(format!("expected {} parameters, got {}", layout.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TeacherError::Config("non-finite parameter".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn id(&self) -> &'static str {
        self.config.variant.id()
    }

    /// Current lag-0 inputs for every coordinate, preprocessed, one block of
    /// columns per stream.
    pub fn inputs(&self, features: &FeatureTracker) -> Array2<f64> {
        let streams = self.config.streams();
        let pre = self.config.input_preprocess();
        let w = pre.width();
        let mut z = Array2::zeros((features.dim(), streams.len() * w));
        for (j, s) in streams.iter().enumerate() {
            let col = features.column_of(s, 0).expect("known stream");
            for (i, v) in col.iter().enumerate() {
                pre.apply(*v, z.row_mut(i).as_slice_mut().expect("row-major")[j * w..(j + 1) * w].as_mut());
            }
        }
        z
    }

    /// Update magnitudes `u` (the step is `x ← x − u`) and the new hidden state.
    pub fn predict(&self, z: &Array2<f64>, hidden: &mut Hidden) -> Result<Vec<f64>, TeacherError> {
        if z.ncols() != self.layout.inputs {
            return Err(TeacherError::StreamMismatch { expected: self.layout.inputs, got: z.ncols() });
        }
        Ok(lstm::forward(&self.layout, &self.params, z, hidden, self.config.output_scale, None).to_vec())
    }

    pub fn to_json(&self) -> String {
        let params = self
            .layout
            .blocks()
            .iter()
            .map(|b| CheckpointBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                values: self.params[b.offset..b.offset + b.len()].to_vec(),
            })
            .collect();
        serde_json::to_string_pretty(&Checkpoint { config: self.config.clone(), params }).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TeacherError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| TeacherError::Checkpoint(e.to_string()))?;
        let layout = ck.config.layout();
        if ck.params.len() != layout.blocks().len() {
            return Err(TeacherError::Checkpoint("block count does not match config".into()));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (b, c) in layout.blocks().iter().zip(ck.params) {
            if b.name != c.name || b.shape != c.shape || c.values.len() != b.len() {
                return Err(TeacherError::Checkpoint(format!("block {} has the wrong name or shape", c.name)));
            }
            params.extend(c.values);
        }
        Self::from_params(ck.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), TeacherError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TeacherError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A teacher applied as an [`UpdateRule`], with per-run hidden state.
#[derive(Debug, Clone)]
pub struct TeacherRule {
    model: Arc<TeacherModel>,
    hidden: Hidden,
}

impl TeacherRule {
    pub fn new(model: Arc<TeacherModel>) -> Self {
        let hidden = Hidden::zeros(model.layout(), 0);
        Self { model, hidden }
    }
}

impl UpdateRule for TeacherRule {
    fn reset(&mut self, dim: usize) {
        self.hidden = Hidden::zeros(self.model.layout(), dim);
    }

    fn step(&mut self, grad: &[f64], features: &FeatureTracker) -> Vec<f64> {
        if self.hidden.h.first().is_none_or(|h| h.nrows() != grad.len()) {
            self.reset(grad.len());
        }
        let z = self.model.inputs(features);
        let u = self.model.predict(&z, &mut self.hidden).expect("inputs built from the variant streams");
        u.into_iter().map(|v| -v).collect()
    }

    fn label(&self) -> String {
        format!("teacher:{}", self.model.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_shapes() {
        let rp = TeacherConfig::new(Variant::Rp);
        assert_eq!((rp.projection_dim(), rp.n_layers(), rp.streams().len()), (Some(20), 2, 2));
        let small = TeacherConfig::new(Variant::RpSmallExtra);
        assert_eq!((small.projection_dim(), small.n_layers(), small.streams()), (Some(6), 1, &["mhat", "ghat", "nhat"][..]));
        let dm = TeacherConfig::new(Variant::Dm);
        assert_eq!((dm.projection_dim(), dm.n_layers()), (None, 2));
    }

    #[test]
    fn log_sign_channels() {
        let mut out = [0.0; 2];
        let p = Preprocess::LogSign { k: 5.0 };
        p.apply(1e-3, &mut out);
        assert!(out[0] == -1.0 && (out[1] - 1e-3 * 5f64.exp()).abs() < 1e-12);
        p.apply(0.1, &mut out);
        assert!((out[0] - 0.1f64.ln() / 5.0).abs() < 1e-12 && out[1] == 1.0);
        p.apply(-1.0, &mut out);
        assert!(out[0].abs() < 1e-15 && out[1] == -1.0);
        p.apply(0.0, &mut out);
        assert_eq!(out, [-1.0, 0.0]);
        let dm = TeacherModel::new(TeacherConfig::new(Variant::Dm)).unwrap();
        assert_eq!(dm.layout().inputs, 2);
    }

    #[test]
    fn stream_mismatch_is_an_error() {
        let m = TeacherModel::new(TeacherConfig::new(Variant::Rp)).unwrap();
        let mut h = Hidden::zeros(m.layout(), 2);
        assert!(matches!(m.predict(&Array2::zeros((2, 3)), &mut h), Err(TeacherError::StreamMismatch { .. })));
    }

    #[test]
    fn shared_weights_across_coordinates() {
        let m = TeacherModel::new(TeacherConfig::new(Variant::RpSmall)).unwrap();
        let mut h = Hidden::zeros(m.layout(), 3);
        let z = Array2::from_shape_vec((3, 2), vec![0.3, -1.0, 0.3, -1.0, 2.0, 0.5]).unwrap();
        let u = m.predict(&z, &mut h).unwrap();
        assert_eq!(u[0], u[1]);
        assert_ne!(u[0], u[2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = TeacherConfig::new(Variant::Dm);
        cfg.init_seed = 9;
        let m = TeacherModel::new(cfg).unwrap();
        let back = TeacherModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        let broken = m.to_json().replacen("\"out.w\"", "\"out.x\"", 1);
        assert!(TeacherModel::from_json(&broken).is_err());
    }
}
