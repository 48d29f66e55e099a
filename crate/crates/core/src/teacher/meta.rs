//! Meta-training by backpropagation through truncated unrolls.
//!
//! Within a segment of T steps the meta-loss is Σ_t w_t f_t(x_t) with
//! x_{t+1} = x_t − u_t. Feature inputs are constants, so
//! ∂L/∂u_k = −Σ_{j>k} w_j ∇f_j(x_j), and the gradients needed for that sum are
//! the ones the optimizee already produced while unrolling.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lstm::{self, Hidden, Tape};
use super::{TeacherError, TeacherModel};
use crate::optimizers::FeatureTracker;
use crate::tasks::{Task, TaskSampler, TaskSpec};
use crate::util::{clip_norm, Adam};

/// Task indices at or above this offset are reserved for meta-training, so
/// evaluation sets drawn from low indices never overlap with training tasks.
pub const META_TASK_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    pub unroll: usize,
    /// Per-step weights w_t; defaults to all ones.
    pub weights: Option<Vec<f64>>,
    /// Truncated segments per task; the hidden state carries over between them.
    pub segments: usize,
    pub tasks_per_batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub divergence_factor: f64,
    pub workers: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            unroll: 20,
            weights: None,
            segments: 5,
            tasks_per_batch: 1,
            iterations: 200,
            lr: 1e-3,
            grad_clip: None,
            divergence_factor: 1e6,
            workers: 1,
        }
    }
}

impl MetaTrainConfig {
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.unroll])
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        let w = self.weights();
        if self.unroll == 0 || w.len() != self.unroll {
            return Err(TeacherError::Config("unroll must be ≥ 1 and match the weight count".into()));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(TeacherError::Config("weights must be non-negative and not all zero".into()));
        }
        if self.segments == 0 || self.tasks_per_batch == 0 || !(self.lr > 0.0) {
            return Err(TeacherError::Config("segments, tasks_per_batch and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub segment: usize,
    /// Weighted mean loss over the segment, averaged over the meta-batch.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainLog {
    pub curve: Vec<CurvePoint>,
    /// Meta-batches dropped because the unrolled loss was not finite.
    pub skipped: usize,
    pub stopped_early: Option<String>,
}

impl MetaTrainLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "segment", "loss"]).expect("in-memory write");
        for p in &self.curve {
            w.serialize((p.iteration, p.segment, p.loss)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

pub(crate) struct RunState {
    x: Vec<f64>,
    tracker: FeatureTracker,
    hidden: Hidden,
    step: usize,
}

impl RunState {
    fn new(model: &TeacherModel, task: &Task, horizon: usize) -> Self {
        let dim = task.dim();
        Self {
            x: task.x0().to_vec(),
            tracker: FeatureTracker::new(dim, horizon, model.config().features),
            hidden: Hidden::zeros(model.layout(), dim),
            step: 0,
        }
    }
}

pub(crate) struct Segment {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub inputs: Vec<Array2<f64>>,
}

fn run_segment(model: &TeacherModel, task: &Task, state: &mut RunState, weights: &[f64], want_grad: bool) -> Segment {
    let layout = model.layout();
    let scale = model.config().output_scale;
    let mut tape = Tape::default();
    let mut grads = Vec::with_capacity(weights.len());
    let mut inputs = Vec::with_capacity(weights.len());
    let mut loss = 0.0;
    for (k, w) in weights.iter().enumerate() {
        let (f, g) = task.loss_grad(&state.x, state.step).expect("state has the task dimension");
        loss += w * f;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Segment { loss: f64::NAN, grad: None, inputs };
        }
        state.tracker.observe(&g);
        let z = model.inputs(&state.tracker);
        let rec = if want_grad { Some((&mut tape, k)) } else { None };
        let u = lstm::forward(layout, model.params(), &z, &mut state.hidden, scale, rec);
        state.x.iter_mut().zip(u.iter()).for_each(|(x, u)| *x -= u);
        state.step += 1;
        grads.push(g);
        inputs.push(z);
    }
    let grad = want_grad.then(|| {
        let n = state.x.len();
        let mut acc = Array1::<f64>::zeros(n);
        let mut du = vec![Array1::zeros(n); weights.len()];
        for k in (0..weights.len()).rev() {
            du[k] = -&acc;
            acc.scaled_add(weights[k], &Array1::from(grads[k].clone()));
        }
        lstm::backward(layout, model.params(), &tape, &du, scale)
    });
    Segment { loss, grad, inputs }
}

/// Σ_t w_t f(x_t) over one fresh unroll of `weights.len()` steps.
pub fn unroll_loss(model: &TeacherModel, task: &Task, weights: &[f64]) -> f64 {
    let mut st = RunState::new(model, task, crate::expr::DEFAULT_HORIZON);
    run_segment(model, task, &mut st, weights, false).loss
}

/// Loss, meta-gradient and the feature inputs seen along the way.
pub fn unroll_loss_grad(model: &TeacherModel, task: &Task, weights: &[f64]) -> (f64, Option<Vec<f64>>, Vec<Array2<f64>>) {
    let mut st = RunState::new(model, task, crate::expr::DEFAULT_HORIZON);
    let s = run_segment(model, task, &mut st, weights, true);
    (s.loss, s.grad, s.inputs)
}

/// The unrolled loss with the feature inputs held at `inputs` instead of
/// being recomputed; the function whose derivative the meta-gradient is.
pub fn frozen_unroll_loss(model: &TeacherModel, task: &Task, inputs: &[Array2<f64>], weights: &[f64]) -> f64 {
    let mut x = task.x0().to_vec();
    let mut hidden = Hidden::zeros(model.layout(), x.len());
    let mut loss = 0.0;
    for (k, (w, z)) in weights.iter().zip(inputs).enumerate() {
        loss += w * task.loss_grad(&x, k).expect("dimension").0;
        let u = lstm::forward(model.layout(), model.params(), z, &mut hidden, model.config().output_scale, None);
        x.iter_mut().zip(u.iter()).for_each(|(x, u)| *x -= u);
    }
    loss
}

/// Meta-trains a copy of `model` on tasks drawn from `spec`.
pub fn meta_train(
    model: &TeacherModel,
    spec: &TaskSpec,
    cfg: &MetaTrainConfig,
) -> Result<(TeacherModel, MetaTrainLog), TeacherError> {
    meta_train_with_observer(model, spec, cfg, |_| {})
}

pub fn meta_train_with_observer(
    model: &TeacherModel,
    spec: &TaskSpec,
    cfg: &MetaTrainConfig,
    mut observe: impl FnMut(&CurvePoint),
) -> Result<(TeacherModel, MetaTrainLog), TeacherError> {
    cfg.validate()?;
    let sampler = TaskSampler::new(spec).map_err(|e| TeacherError::Config(e.to_string()))?;
    let weights = cfg.weights();
    let wsum: f64 = weights.iter().sum();
    let mut m = model.clone();
    let mut adam = Adam::new(cfg.lr, m.params().len());
    let mut log = MetaTrainLog::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| TeacherError::Config(e.to_string()))?;
    let mut reference: Option<f64> = None;
    let batch = cfg.tasks_per_batch;
    for it in 0..cfg.iterations {
        let tasks: Vec<Task> = (0..batch)
            .map(|b| sampler.sample(META_TASK_OFFSET + (it * batch + b) as u64))
            .collect();
        let mut states: Vec<RunState> = tasks.iter().map(|t| RunState::new(&m, t, crate::expr::DEFAULT_HORIZON)).collect();
        for seg in 0..cfg.segments {
            let current = &m;
            let results: Vec<Segment> = pool.install(|| {
                tasks
                    .par_iter()
                    .zip(states.par_iter_mut())
                    .map(|(t, s)| run_segment(current, t, s, &weights, true))
                    .collect()
            });
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / (batch as f64 * wsum);
            if !loss.is_finite() || results.iter().any(|r| r.grad.is_none()) {
                log.skipped += 1;
                break;
            }
            let r = *reference.get_or_insert(loss.abs().max(1.0));
            if loss.abs() > cfg.divergence_factor * r {
                let msg = format!("meta-loss {loss:.4e} at iteration {it} exceeds {:.0e} x initial {r:.4e}", cfg.divergence_factor);
                log::warn!("{msg}");
                log.stopped_early = Some(msg);
                return Ok((m, log));
            }
            let mut g = vec![0.0; m.params().len()];
            for res in &results {
                for (a, b) in g.iter_mut().zip(res.grad.as_ref().expect("checked")) {
                    *a += b;
                }
            }
            let norm = 1.0 / (batch as f64 * wsum);
            g.iter_mut().for_each(|v| *v *= norm);
            if let Some(c) = cfg.grad_clip {
                clip_norm(&mut g, c);
            }
            let before = m.params().to_vec();
            adam.step(m.params_mut(), &g);
            if m.params().iter().any(|p| !p.is_finite()) {
                m.params_mut().copy_from_slice(&before);
                log.stopped_early = Some(format!("non-finite parameters at iteration {it}"));
                return Ok((m, log));
            }
            let point = CurvePoint { iteration: it, segment: seg, loss };
            observe(&point);
            log.curve.push(point);
        }
    }
    Ok((m, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{TeacherConfig, Variant};

    fn tiny(variant: Variant, seed: u64) -> TeacherModel {
        let mut cfg = TeacherConfig::new(variant);
        cfg.hidden = 2;
        cfg.init_seed = seed;
        cfg.output_scale = 0.5;
        TeacherModel::new(cfg).unwrap()
    }

    fn task2(seed: u64) -> Task {
        let mut spec = TaskSpec::p1();
        spec.dim = 2;
        TaskSampler::new(&spec.with_seed(seed)).unwrap().sample(0)
    }

    #[test]
    fn zero_model_never_moves() {
        let m0 = tiny(Variant::Rp, 1);
        let m = TeacherModel::from_params(m0.config().clone(), vec![0.0; m0.params().len()]).unwrap();
        let t = task2(3);
        let f0 = t.eval_loss(t.x0());
        assert!((unroll_loss(&m, &t, &[1.0; 5]) - 5.0 * f0).abs() < 1e-9 * f0.abs().max(1.0));
    }

    #[test]
    fn single_step_unroll_ignores_parameters() {
        let t = task2(4);
        let a = unroll_loss(&tiny(Variant::Dm, 1), &t, &[2.0]);
        let b = unroll_loss(&tiny(Variant::Dm, 2), &t, &[2.0]);
        assert_eq!(a, b);
        let (_, g, _) = unroll_loss_grad(&tiny(Variant::Dm, 1), &t, &[2.0]);
        assert!(g.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        for variant in [Variant::Dm, Variant::RpSmallExtra, Variant::Rp] {
            let m = tiny(variant, 7);
            let t = task2(11);
            let w = [1.0, 0.5, 2.0];
            let (_, g, inputs) = unroll_loss_grad(&m, &t, &w);
            let g = g.unwrap();
            let mut fd = vec![0.0; g.len()];
            for (j, d) in fd.iter_mut().enumerate() {
                let h = 1e-6;
                let mut p = m.params().to_vec();
                p[j] += h;
                let up = frozen_unroll_loss(&TeacherModel::from_params(m.config().clone(), p.clone()).unwrap(), &t, &inputs, &w);
                p[j] -= 2.0 * h;
                let dn = frozen_unroll_loss(&TeacherModel::from_params(m.config().clone(), p).unwrap(), &t, &inputs, &w);
                *d = (up - dn) / (2.0 * h);
            }
            let err = fd.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0 && err / norm <= 1e-4, "{variant:?}: relative error {}", err / norm);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let m = tiny(Variant::RpSmall, 3);
        let cfg = MetaTrainConfig { iterations: 0, ..Default::default() };
        let (out, log) = meta_train(&m, &TaskSpec::p1(), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(log.curve.is_empty());
    }

    #[test]
    fn meta_training_is_deterministic_across_workers() {
        let m = TeacherModel::new(TeacherConfig::new(Variant::RpSmall)).unwrap();
        let mut cfg = MetaTrainConfig { iterations: 3, segments: 2, unroll: 5, tasks_per_batch: 3, ..Default::default() };
        let (a, _) = meta_train(&m, &TaskSpec::p1(), &cfg).unwrap();
        cfg.workers = 3;
        let (b, log) = meta_train(&m, &TaskSpec::p1(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.curve.len(), 6);
        assert!(log.to_csv().starts_with("iteration,segment,loss\n0,0,"));
    }
}
