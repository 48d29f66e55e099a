//! Update rules: classical optimizers, symbolic equations, and the shared
//! feature pipeline they read from.
//!
//! All rules return the parameter change `Δx` for the current step, so that
//! `x_{t+1} = x_t + Δx_t`.

pub mod features;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::expr::{Expression, Program};
pub use features::{FeatureParams, FeatureTracker};

/// A coordinate-wise update rule driven by a [`FeatureTracker`].
pub trait UpdateRule: Send {
    /// Clears all internal state for a problem with `dim` coordinates.
    fn reset(&mut self, dim: usize);

    /// Returns `Δx` given the current gradient. `features` has already
    /// observed `grad`.
    fn step(&mut self, grad: &[f64], features: &FeatureTracker) -> Vec<f64>;

    fn label(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    pub kind: ClassicalKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub cosine_decay: bool,
    /// Horizon of the cosine schedule.
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_t_max() -> usize {
    100
}
fn default_eps() -> f64 {
    1e-8
}

impl ClassicalConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: ClassicalKind::Sgd,
            lr,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            nesterov: false,
            cosine_decay: false,
            t_max: default_t_max(),
            epsilon: default_eps(),
        }
    }

    pub fn momentum(lr: f64, beta: f64) -> Self {
        Self { kind: ClassicalKind::Momentum, momentum: beta, ..Self::sgd(lr) }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { kind: ClassicalKind::Adam, beta1, beta2, ..Self::sgd(lr) }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon <= 0.0 {
            return Err("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// SGD, heavy-ball momentum (optionally Nesterov), and Adam.
#[derive(Debug, Clone)]
pub struct Classical {
    cfg: ClassicalConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Classical {
    pub fn new(cfg: ClassicalConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn config(&self) -> &ClassicalConfig {
        &self.cfg
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.cfg.cosine_decay {
            let frac = (t as f64 / self.cfg.t_max as f64).min(1.0);
            self.cfg.lr * 0.5 * (1.0 + (PI * frac).cos())
        } else {
            self.cfg.lr
        }
    }

    pub fn step_grad(&mut self, grad: &[f64]) -> Vec<f64> {
        if self.m.len() != grad.len() {
            self.reset(grad.len());
        }
        self.t += 1;
        let lr = self.lr_at(self.t);
        let c = &self.cfg;
        match c.kind {
            ClassicalKind::Sgd => grad.iter().map(|g| -lr * g).collect(),
            ClassicalKind::Momentum => {
                let b = c.momentum;
                grad.iter()
                    .zip(self.m.iter_mut())
                    .map(|(&g, m)| {
                        *m = b * *m + (1.0 - b) * g;
                        if c.nesterov {
                            -lr * (b * *m + (1.0 - b) * g)
                        } else {
                            -lr * *m
                        }
                    })
                    .collect()
            }
            ClassicalKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - c.beta1.powi(t);
                let c2 = 1.0 - c.beta2.powi(t);
                let mut out = Vec::with_capacity(grad.len());
                for (i, &g) in grad.iter().enumerate() {
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + c.epsilon);
                    out.push(-lr * mhat);
                }
                out
            }
        }
    }
}

impl UpdateRule for Classical {
    fn reset(&mut self, dim: usize) {
        self.m = vec![0.0; dim];
        self.v = vec![0.0; dim];
        self.t = 0;
    }

    fn step(&mut self, grad: &[f64], _features: &FeatureTracker) -> Vec<f64> {
        self.step_grad(grad)
    }

    fn label(&self) -> String {
        let c = &self.cfg;
        let mut s = match c.kind {
            ClassicalKind::Sgd => format!("sgd(lr={})", c.lr),
            ClassicalKind::Momentum if c.nesterov => format!("nesterov(lr={}, beta={})", c.lr, c.momentum),
            ClassicalKind::Momentum => format!("momentum(lr={}, beta={})", c.lr, c.momentum),
            ClassicalKind::Adam => format!("adam(lr={}, beta1={}, beta2={})", c.lr, c.beta1, c.beta2),
        };
        if c.cosine_decay {
            s.push_str("+cosine");
        }
        s
    }
}

/// A symbolic update rule evaluated column-wise over coordinates.
#[derive(Debug, Clone)]
pub struct EquationRule {
    expr: Expression,
    program: Program,
}

impl EquationRule {
    pub fn new(expr: Expression) -> Self {
        let program = expr.compile();
        Self { expr, program }
    }

    pub fn expression(&self) -> &Expression {
        &self.expr
    }
}

impl UpdateRule for EquationRule {
    fn reset(&mut self, _dim: usize) {}

    fn step(&mut self, grad: &[f64], features: &FeatureTracker) -> Vec<f64> {
        match self.program.evaluate(features) {
            Ok(out) => out,
            // A stream the tracker does not provide: no finite update exists.
            Err(_) => vec![f64::NAN; grad.len()],
        }
    }

    fn label(&self) -> String {
        self.expr.to_infix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracker() -> FeatureTracker {
        FeatureTracker::new(1, 20, FeatureParams::default())
    }

    #[test]
    fn sgd_step() {
        let mut o = Classical::new(ClassicalConfig::sgd(0.01));
        assert_eq!(o.step(&[1.0], &tracker()), vec![-0.01]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut o = Classical::new(ClassicalConfig::adam(0.1, 0.9, 0.999));
        let d = o.step_grad(&[-3.0, 0.5]);
        assert!((d[0] - 0.1).abs() < 1e-8 && (d[1] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn momentum_impulse_response() {
        let beta = 0.6;
        let mut o = Classical::new(ClassicalConfig::momentum(1.0, beta));
        let mut outs = vec![o.step_grad(&[1.0])[0]];
        for _ in 0..5 {
            outs.push(o.step_grad(&[0.0])[0]);
        }
        for (i, u) in outs.iter().enumerate() {
            let expect = -(1.0 - beta) * beta.powi(i as i32);
            assert!((u - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        let cfg = ClassicalConfig { cosine_decay: true, t_max: 10, ..ClassicalConfig::sgd(1.0) };
        let o = Classical::new(cfg);
        assert!((o.lr_at(5) - 0.5).abs() < 1e-12);
        assert!(o.lr_at(10).abs() < 1e-12);
    }

    #[test]
    fn adam_invariant_to_gradient_scale() {
        let grads = [0.3, -1.0, 2.0, 0.7, -0.1];
        let mut a = Classical::new(ClassicalConfig::adam(0.01, 0.9, 0.999));
        let mut b = Classical::new(ClassicalConfig::adam(0.01, 0.9, 0.999));
        for g in grads {
            let da = a.step_grad(&[g])[0];
            let db = b.step_grad(&[37.0 * g])[0];
            assert!((da - db).abs() < 1e-9);
        }
    }
}
