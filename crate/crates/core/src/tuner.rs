//! Skeletons (distilled equations with trainable constants), their
//! meta-fine-tuning on a new task distribution, and optimizer evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expression, Node, Operator, Program, DEFAULT_HORIZON};
use crate::optimizers::features::{N_FEATURE_PARAMS, STREAM_NHAT};
use crate::optimizers::{EquationRule, FeatureParams, FeatureTracker, UpdateRule};
use crate::tasks::{Task, TaskSampler, TaskSpec};
use crate::teacher::meta::META_TASK_OFFSET;
use crate::trajectory::{run, RunSpec};
use crate::util::{derive_seed, mean_std, rng_for, Adam};
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuning configuration: {0}")]
    Config(String),
    #[error("skeleton: {0}")]
    Skeleton(String),
}

/// Validation tasks used to keep the best parameters during tuning.
pub const VALIDATION_TASK_OFFSET: u64 = 1 << 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SkeletonForm {
    /// Every constant of the template is a parameter.
    Generic,
    /// Δx = −Σ_s Σ_τ W[s,τ]·γ·tanh(s[τ]/γ); θ = (W row-major, γ).
    ThresholdSum { streams: Vec<String>, lags: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub template: String,
    pub form: SkeletonForm,
    /// Equation parameters, followed by the six feature parameters when
    /// `tune_features` is set.
    pub theta: Vec<f64>,
    pub features: FeatureParams,
    pub tune_features: bool,
    pub horizon: usize,
}

fn threshold_term(a: f64, b: f64, stream: &str, lag: usize) -> Node {
    Node::mul(Node::constant(a), Node::unary(Operator::Tanh, Node::mul(Node::constant(b), Node::var(stream, lag))))
}

/// Matches a·tanh(b·v) in either factor order.
fn match_threshold(n: &Node) -> Option<(f64, f64, &crate::expr::VarRef)> {
    let Node::Binary(Operator::Mul, l, r) = n else { return None };
    let (a, t) = match (l.as_ref(), r.as_ref()) {
        (Node::Const(a), t) | (t, Node::Const(a)) => (*a, t),
        _ => return None,
    };
    let Node::Unary(Operator::Tanh, inner) = t else { return None };
    let Node::Binary(Operator::Mul, l, r) = inner.as_ref() else { return None };
    match (l.as_ref(), r.as_ref()) {
        (Node::Const(b), Node::Var(v)) | (Node::Var(v), Node::Const(b)) => Some((a, *b, v)),
        _ => None,
    }
}

fn collect_terms<'a>(n: &'a Node, sign: f64, out: &mut Vec<(f64, &'a Node)>) {
    match n {
        Node::Binary(Operator::Add, l, r) => {
            collect_terms(l, sign, out);
            collect_terms(r, sign, out);
        }
        Node::Binary(Operator::Sub, l, r) => {
            collect_terms(l, sign, out);
            collect_terms(r, -sign, out);
        }
        _ => out.push((sign, n)),
    }
}

impl Skeleton {
    /// Threshold-sum skeleton over `streams` × lags 0..=`lags`, with `w`
    /// row-major by stream.
    pub fn threshold_sum(
        streams: &[&str],
        lags: usize,
        w: &[f64],
        gamma: f64,
        features: FeatureParams,
    ) -> Result<Self, TuneError> {
        if w.len() != streams.len() * (lags + 1) || streams.is_empty() {
            return Err(TuneError::Skeleton("W must have one entry per stream and lag".into()));
        }
        if gamma == 0.0 || !gamma.is_finite() {
            return Err(TuneError::Skeleton("γ must be finite and non-zero".into()));
        }
        let mut theta = w.to_vec();
        theta.push(gamma);
        let tune_features = streams.contains(&STREAM_NHAT);
        if tune_features {
            theta.extend(features.trainable());
        }
        let mut s = Self {
            template: String::new(),
            form: SkeletonForm::ThresholdSum { streams: streams.iter().map(|s| s.to_string()).collect(), lags },
            theta,
            features,
            tune_features,
            horizon: DEFAULT_HORIZON.max(lags + 1),
        };
        s.template = s.instantiate().to_sexpr();
        Ok(s)
    }

    /// Every constant becomes a slot. Sums of a·tanh(b·v) terms sharing one b
    /// are promoted to the threshold-sum form.
    pub fn skeletonize(expr: &Expression, features: FeatureParams) -> Self {
        if let Some(s) = Self::try_threshold(expr, features) {
            return s;
        }
        let mut theta = expr.constants();
        let tune_features = expr.streams().contains(STREAM_NHAT);
        if tune_features {
            theta.extend(features.trainable());
        }
        Self {
            template: expr.to_sexpr(),
            form: SkeletonForm::Generic,
            theta,
            features,
            tune_features,
            horizon: expr.horizon(),
        }
    }

    fn try_threshold(expr: &Expression, features: FeatureParams) -> Option<Self> {
        let mut terms = Vec::new();
        collect_terms(expr.root(), 1.0, &mut terms);
        let mut found = Vec::new();
        for (sign, t) in terms {
            let (a, b, v) = match_threshold(t)?;
            found.push((sign * a, b, v.clone()));
        }
        let b0 = found.first()?.1;
        if b0 == 0.0 || found.iter().any(|f| f.1 != b0) {
            return None;
        }
        let mut streams: Vec<String> = found.iter().map(|f| f.2.stream.clone()).collect();
        streams.sort();
        streams.dedup();
        let lags = found.iter().map(|f| f.2.lag).max()?;
        let gamma = 1.0 / b0;
        let mut w = vec![0.0; streams.len() * (lags + 1)];
        for (a, _, v) in &found {
            let s = streams.iter().position(|x| *x == v.stream).expect("collected");
            w[s * (lags + 1) + v.lag] += -a / gamma;
        }
        let names: Vec<&str> = streams.iter().map(String::as_str).collect();
        let mut sk = Self::threshold_sum(&names, lags, &w, gamma, features).ok()?;
        sk.horizon = expr.horizon();
        Some(sk)
    }

    fn n_equation(&self) -> usize {
        self.theta.len() - if self.tune_features { N_FEATURE_PARAMS } else { 0 }
    }

    /// Template with its constants set from θ.
    pub fn instantiate(&self) -> Expression {
        match &self.form {
            SkeletonForm::Generic => Expression::parse_sexpr(&self.template, self.horizon)
                .expect("template written by this crate")
                .with_constants(&self.theta[..self.n_equation()])
                .expect("one slot per constant"),
            SkeletonForm::ThresholdSum { streams, lags } => {
                let gamma = self.theta[self.n_equation() - 1];
                let mut root: Option<Node> = None;
                for (s, name) in streams.iter().enumerate() {
                    for lag in 0..=*lags {
                        let w = self.theta[s * (lags + 1) + lag];
                        let term = threshold_term(-w * gamma, 1.0 / gamma, name, lag);
                        root = Some(match root {
                            None => term,
                            Some(r) => Node::add(r, term),
                        });
                    }
                }
                Expression::new(root.expect("at least one term"), self.horizon).expect("lags below horizon")
            }
        }
    }

    /// Feature parameters with the trainable ones taken from θ.
    pub fn feature_params(&self) -> FeatureParams {
        if self.tune_features {
            self.features.with_trainable(&self.theta[self.n_equation()..])
        } else {
            self.features
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self.form {
            SkeletonForm::ThresholdSum { .. } => Some(self.theta[self.n_equation() - 1]),
            SkeletonForm::Generic => None,
        }
    }

    /// Maps ∂L/∂(expression constants) to ∂L/∂(equation part of θ).
    fn chain(&self, dconst: &[f64]) -> Vec<f64> {
        match &self.form {
            SkeletonForm::Generic => dconst.to_vec(),
            SkeletonForm::ThresholdSum { .. } => {
                let n = self.n_equation() - 1;
                let gamma = self.theta[n];
                let mut out = vec![0.0; n + 1];
                for k in 0..n {
                    let (da, db) = (dconst[2 * k], dconst[2 * k + 1]);
                    out[k] = -gamma * da;
                    out[n] += -self.theta[k] * da - db / (gamma * gamma);
                }
                out
            }
        }
    }

    pub fn rule(&self) -> EquationRule {
        EquationRule::new(self.instantiate())
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        Self { theta: theta.to_vec(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMethod {
    Analytic,
    Spsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub unroll: usize,
    pub segments: usize,
    /// Meta-iterations; each samples a fresh task.
    pub steps: usize,
    pub method: TuneMethod,
    /// Adam step size, relative to each parameter's initial magnitude.
    pub lr: f64,
    /// Floor of the per-parameter step scale.
    pub min_scale: f64,
    pub spsa_c: f64,
    pub validation_tasks: usize,
    pub validation_steps: usize,
    pub validate_every: usize,
    pub divergence_factor: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            unroll: 20,
            segments: 5,
            steps: 100,
            method: TuneMethod::Analytic,
            lr: 0.01,
            min_scale: 1e-3,
            spsa_c: 0.01,
            validation_tasks: 8,
            validation_steps: 100,
            validate_every: 10,
            divergence_factor: 1e6,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    /// (iteration, mean weighted segment loss).
    #[serde(with = "crate::util::nan_null::series")]
    pub curve: Vec<(usize, f64)>,
    /// (iteration, validation mean final loss).
    #[serde(with = "crate::util::nan_null::series")]
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub stopped_early: Option<String>,
}

struct Unroll {
    loss: f64,
    grad: Option<Vec<f64>>,
}

struct StepRecord {
    cols: Vec<Vec<f64>>,
    /// ∂nhat[lag]/∂p per coordinate for each program input reading nhat.
    tangents: Vec<Option<Vec<[f64; N_FEATURE_PARAMS]>>>,
}

/// One segment of the unrolled objective Σ_t w_t f(x_t), continuing from
/// `x`/`tracker`, and optionally its gradient w.r.t. θ. Features are inputs,
/// not functions of x.
fn unroll_segment(
    skel: &Skeleton,
    program: &Program,
    task: &Task,
    x: &mut [f64],
    tracker: &mut FeatureTracker,
    step0: usize,
    weights: &[f64],
    want_grad: bool,
) -> Unroll {
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut records: Vec<StepRecord> = Vec::new();
    for (k, w) in weights.iter().enumerate() {
        let (f, g) = task.loss_grad(x, step0 + k).expect("dimension");
        loss += w * f;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Unroll { loss: f64::NAN, grad: None };
        }
        tracker.observe(&g);
        let delta = program.evaluate(&*tracker).expect("streams tracked");
        if delta.iter().any(|d| !d.is_finite()) {
            return Unroll { loss: f64::NAN, grad: None };
        }
        x.iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
        if want_grad {
            let cols = program
                .inputs()
                .iter()
                .map(|v| tracker.column_of(&v.stream, v.lag).expect("tracked").to_vec())
                .collect();
            let tangents = program
                .inputs()
                .iter()
                .map(|v| {
                    (skel.tune_features && v.stream == STREAM_NHAT)
                        .then(|| tracker.nhat_tangent(v.lag).expect("tangents enabled").to_vec())
                })
                .collect();
            records.push(StepRecord { cols, tangents });
            grads.push(g);
        }
    }
    let grad = want_grad.then(|| {
        let n = x.len();
        let n_eq = skel.n_equation();
        let mut dconst = vec![0.0; program.constants().len()];
        let mut dfeat = [0.0; N_FEATURE_PARAMS];
        let mut seed = vec![0.0; n];
        for k in (0..weights.len()).rev() {
            if k + 1 < weights.len() {
                for (s, g) in seed.iter_mut().zip(&grads[k + 1]) {
                    *s += weights[k + 1] * g;
                }
            }
            let rec = &records[k];
            let slices: Vec<&[f64]> = rec.cols.iter().map(Vec::as_slice).collect();
            let fwd = program.forward_slices(&slices).expect("recorded columns");
            let back = program.backward(&fwd, &seed);
            for (d, c) in dconst.iter_mut().zip(back.constant_gradients()) {
                *d += c;
            }
            if skel.tune_features {
                for (gin, tan) in back.input_gradients().iter().zip(&rec.tangents) {
                    if let Some(tan) = tan {
                        for (row, t) in tan.iter().enumerate().take(n) {
                            for (p, tp) in dfeat.iter_mut().zip(t) {
                                *p += gin[row] * tp;
                            }
                        }
                    }
                }
            }
        }
        let mut out = skel.chain(&dconst);
        debug_assert_eq!(out.len(), n_eq);
        if skel.tune_features {
            out.extend(dfeat);
        }
        out
    });
    Unroll { loss, grad }
}

fn new_tracker(skel: &Skeleton, dim: usize) -> FeatureTracker {
    let t = FeatureTracker::new(dim, skel.horizon, skel.feature_params());
    if skel.tune_features { t.with_tangents() } else { t }
}

/// Loss and θ-gradient of one fresh unroll of `weights.len()` steps.
pub fn skeleton_unroll_grad(skel: &Skeleton, task: &Task, weights: &[f64]) -> (f64, Option<Vec<f64>>) {
    let program = skel.instantiate().compile();
    let mut x = task.x0().to_vec();
    let mut tracker = new_tracker(skel, x.len());
    let u = unroll_segment(skel, &program, task, &mut x, &mut tracker, 0, weights, true);
    (u.loss, u.grad)
}

/// Same objective with the gradient stream fed to the features fixed to
/// `grads` (a recorded run), so that it depends on θ only through the rule
/// and the feature parameters.
pub fn frozen_skeleton_loss(skel: &Skeleton, task: &Task, grads: &[Vec<f64>], weights: &[f64]) -> f64 {
    let program = skel.instantiate().compile();
    let mut x = task.x0().to_vec();
    let mut tracker = FeatureTracker::new(x.len(), skel.horizon, skel.feature_params());
    let mut loss = 0.0;
    for (k, w) in weights.iter().enumerate() {
        loss += w * task.loss_grad(&x, k).expect("dimension").0;
        tracker.observe(&grads[k]);
        let d = program.evaluate(&tracker).expect("streams tracked");
        x.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
    }
    loss
}

/// Mean final loss over validation tasks; divergent runs count as +∞.
fn validation_loss(skel: &Skeleton, sampler: &TaskSampler, cfg: &TuneConfig) -> f64 {
    let spec = RunSpec { steps: cfg.validation_steps, horizon: skel.horizon, features: skel.feature_params(), ..Default::default() };
    let mut total = 0.0;
    for i in 0..cfg.validation_tasks {
        let task = sampler.sample(VALIDATION_TASK_OFFSET + i as u64);
        let out = run(&task, &mut skel.rule(), &spec, |_| {});
        if out.diverged {
            return f64::INFINITY;
        }
        total += out.final_loss;
    }
    total / cfg.validation_tasks.max(1) as f64
}

fn segment_losses_and_grads(skel: &Skeleton, task: &Task, cfg: &TuneConfig, it: usize) -> Vec<Unroll> {
    if cfg.method == TuneMethod::Spsa {
        return vec![spsa_estimate(skel, task, cfg, it)];
    }
    let program = skel.instantiate().compile();
    let mut x = task.x0().to_vec();
    let mut tracker = new_tracker(skel, x.len());
    let weights = vec![1.0; cfg.unroll];
    let mut out = Vec::new();
    for seg in 0..cfg.segments {
        let u = unroll_segment(skel, &program, task, &mut x, &mut tracker, seg * cfg.unroll, &weights, true);
        let bad = !u.loss.is_finite();
        out.push(u);
        if bad {
            break;
        }
    }
    out
}

/// Two-sided simultaneous-perturbation estimate over one full unroll,
/// normalized to a single segment.
fn spsa_estimate(skel: &Skeleton, task: &Task, cfg: &TuneConfig, it: usize) -> Unroll {
    let mut rng = rng_for(cfg.seed, &[0x7370_7361, it as u64]);
    let delta: Vec<f64> = skel.theta.iter().map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let steps = cfg.unroll * cfg.segments;
    let weights = vec![1.0; steps];
    let h: Vec<f64> = skel.theta.iter().map(|t| cfg.spsa_c * t.abs().max(cfg.min_scale)).collect();
    let eval = |sign: f64| {
        let theta: Vec<f64> = skel.theta.iter().zip(&delta).zip(&h).map(|((t, d), h)| t + sign * h * d).collect();
        let s = skel.with_theta(&theta);
        let p = s.instantiate().compile();
        let mut x = task.x0().to_vec();
        let mut tr = FeatureTracker::new(x.len(), s.horizon, s.feature_params());
        unroll_segment(&s, &p, task, &mut x, &mut tr, 0, &weights, false).loss / cfg.segments as f64
    };
    let (lp, lm) = (eval(1.0), eval(-1.0));
    let grad = (lp.is_finite() && lm.is_finite())
        .then(|| delta.iter().zip(&h).map(|(d, h)| (lp - lm) / (2.0 * h * d)).collect());
    Unroll { loss: 0.5 * (lp + lm), grad }
}

/// Meta-fine-tunes θ on tasks from `spec`; returns the parameters with the
/// best validation loss seen (the initial ones included).
pub fn tune(skel: &Skeleton, spec: &TaskSpec, cfg: &TuneConfig) -> Result<(Skeleton, TuneLog), TuneError> {
    if cfg.unroll == 0 || cfg.segments == 0 || !(cfg.lr > 0.0) {
        return Err(TuneError::Config("unroll, segments and lr must be positive".into()));
    }
    let mut log = TuneLog::default();
    if cfg.steps == 0 {
        return Ok((skel.clone(), log));
    }
    let sampler = TaskSampler::new(spec).map_err(|e| TuneError::Config(e.to_string()))?;
    let tune_seed = derive_seed(spec.seed, &[cfg.seed]);
    let scales: Vec<f64> = skel.theta.iter().map(|t| t.abs().max(cfg.min_scale)).collect();
    // Adam runs on θ_i / scale_i so that each step is relative to the
    // parameter's initial magnitude.
    let mut z: Vec<f64> = skel.theta.iter().zip(&scales).map(|(t, s)| t / s).collect();
    let mut adam = Adam::new(cfg.lr, z.len());
    let mut current = skel.clone();
    let mut best = skel.clone();
    let mut best_val = validation_loss(skel, &sampler, cfg);
    log.validation.push((0, best_val));
    let mut reference: Option<f64> = None;
    for it in 0..cfg.steps {
        let task = sampler.sample(META_TASK_OFFSET + derive_seed(tune_seed, &[it as u64]) % (1 << 32));
        let segs = segment_losses_and_grads(&current, &task, cfg, it);
        for u in segs {
            let loss = u.loss / cfg.unroll as f64;
            let Some(g) = u.grad.filter(|_| loss.is_finite()) else {
                log.stopped_early = Some(format!("non-finite unrolled loss at iteration {it}"));
                return Ok((best, log));
            };
            let r = *reference.get_or_insert(loss.abs().max(1.0));
            if loss.abs() > cfg.divergence_factor * r {
                log.stopped_early = Some(format!("unrolled loss {loss:.3e} diverged at iteration {it}"));
                return Ok((best, log));
            }
            let gz: Vec<f64> = g.iter().zip(&scales).map(|(g, s)| g * s / cfg.unroll as f64).collect();
            adam.step(&mut z, &gz);
            let mut theta: Vec<f64> = z.iter().zip(&scales).map(|(z, s)| z * s).collect();
            if let Some(gi) = current.gamma().map(|_| current.n_equation() - 1) {
                if theta[gi].abs() < 1e-6 {
                    theta[gi] = 1e-6f64.copysign(theta[gi]);
                }
            }
            current = current.with_theta(&theta);
            log.curve.push((it, loss));
        }
        if (it + 1) % cfg.validate_every.max(1) == 0 || it + 1 == cfg.steps {
            let v = validation_loss(&current, &sampler, cfg);
            log.validation.push((it + 1, v));
            if v < best_val {
                best_val = v;
                best = current.clone();
                log.best_iteration = it + 1;
            }
        }
    }
    Ok((best, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub task: u64,
    pub diverged: bool,
    #[serde(with = "crate::util::nan_null")]
    pub final_loss: f64,
    /// Written to CSV rather than JSON.
    #[serde(skip)]
    pub trajectory: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    /// Mean and sample std of the final loss over non-divergent runs.
    #[serde(with = "crate::util::nan_null")]
    pub mean: f64,
    #[serde(with = "crate::util::nan_null")]
    pub std: f64,
    pub n_diverged: usize,
    pub runs: Vec<EvalRun>,
}

impl EvalSummary {
    pub fn trajectories_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "step", "loss"]).expect("in-memory write");
        for r in &self.runs {
            for (s, l) in &r.trajectory {
                w.serialize((r.task, s, l)).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Runs a fresh rule from `make` on every task index and summarizes the final losses.
pub fn evaluate<F>(make: F, features: FeatureParams, spec: &TaskSpec, tasks: &[u64], run_spec: &RunSpec, workers: usize) -> EvalSummary
where
    F: Fn() -> Box<dyn UpdateRule> + Sync,
{
    let sampler = TaskSampler::new(spec).expect("validated spec");
    let rs = RunSpec { features, ..run_spec.clone() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let label = make().label();
    let runs: Vec<EvalRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&i| {
                let task = sampler.sample(i);
                let mut rule = make();
                let out = run(&task, rule.as_mut(), &rs, |_| {});
                EvalRun { task: i, diverged: out.diverged, final_loss: out.final_loss, trajectory: out.losses }
            })
            .collect()
    });
    let finals: Vec<f64> = runs.iter().filter(|r| !r.diverged).map(|r| r.final_loss).collect();
    let (mean, std) = if finals.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&finals) };
    EvalSummary { label, mean, std, n_diverged: runs.len() - finals.len(), runs }
}
