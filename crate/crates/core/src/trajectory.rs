//! Running an update rule on one task instance.

use serde::{Deserialize, Serialize};

use crate::expr::DEFAULT_HORIZON;
use crate::optimizers::{FeatureParams, FeatureTracker, UpdateRule};
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub steps: usize,
    pub horizon: usize,
    pub features: FeatureParams,
    /// A run diverges once |loss| exceeds this factor times max(|initial loss|, 1).
    pub divergence_factor: f64,
    /// Record the evaluation loss every this many steps (0: only first and last).
    pub eval_every: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            horizon: DEFAULT_HORIZON,
            features: FeatureParams::default(),
            divergence_factor: 1e6,
            eval_every: 0,
        }
    }
}

/// What an observer sees after the rule has produced its step.
pub struct StepView<'a> {
    pub step: usize,
    pub x: &'a [f64],
    pub grad: &'a [f64],
    pub loss: f64,
    pub features: &'a FeatureTracker,
    pub delta: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// (number of updates applied, evaluation loss).
    pub losses: Vec<(usize, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
    #[serde(skip)]
    pub x: Vec<f64>,
}

pub fn run<R: UpdateRule + ?Sized>(
    task: &Task,
    rule: &mut R,
    spec: &RunSpec,
    mut observe: impl FnMut(&StepView<'_>),
) -> RunOutcome {
    let dim = task.dim();
    let mut x = task.x0().to_vec();
    let mut tracker = FeatureTracker::new(dim, spec.horizon, spec.features);
    rule.reset(dim);
    let initial = task.eval_loss(&x);
    let limit = spec.divergence_factor * initial.abs().max(1.0);
    let mut losses = vec![(0, initial)];
    let mut diverged = !initial.is_finite();
    let mut done = 0;
    while done < spec.steps && !diverged {
        let (loss, grad) = task.loss_grad(&x, done).expect("x has the task dimension");
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        tracker.observe(&grad);
        let delta = rule.step(&grad, &tracker);
        observe(&StepView { step: done, x: &x, grad: &grad, loss, features: &tracker, delta: &delta });
        for (xi, d) in x.iter_mut().zip(&delta) {
            *xi += d;
        }
        done += 1;
        if x.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        let record = spec.eval_every > 0 && done % spec.eval_every == 0;
        if record || done == spec.steps {
            let l = task.eval_loss(&x);
            if !l.is_finite() || l.abs() > limit {
                diverged = true;
            }
            losses.push((done, l));
        }
    }
    let final_loss = if diverged { f64::NAN } else { losses.last().map_or(initial, |p| p.1) };
    RunOutcome { losses, initial_loss: initial, final_loss, diverged, x }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::{Classical, ClassicalConfig};
    use crate::tasks::{TaskSampler, TaskSpec};

    #[test]
    fn sgd_reduces_rastrigin_loss() {
        let t = TaskSampler::new(&TaskSpec::p1()).unwrap().sample(0);
        let mut o = Classical::new(ClassicalConfig::sgd(0.01));
        let out = run(&t, &mut o, &RunSpec { steps: 50, eval_every: 10, ..Default::default() }, |_| {});
        assert!(!out.diverged);
        assert_eq!(out.losses.len(), 6);
        assert!(out.final_loss < out.initial_loss);
    }

    #[test]
    fn huge_steps_diverge() {
        let t = TaskSampler::new(&TaskSpec::p1()).unwrap().sample(0);
        let mut o = Classical::new(ClassicalConfig::sgd(10.0));
        let out = run(&t, &mut o, &RunSpec { steps: 200, eval_every: 1, ..Default::default() }, |_| {});
        assert!(out.diverged && out.final_loss.is_nan());
    }
}
