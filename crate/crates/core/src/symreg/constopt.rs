//! Constant refinement by damped Gauss–Newton (Levenberg–Marquardt).
//!
//! Each step linearizes the model in its constants using the per-record
//! Jacobian from the reverse pass and solves the damped normal equations.
//! A step is accepted only if it lowers the training MSE, so the result is
//! never worse than the input.

use nalgebra::{DMatrix, DVector};

use super::data::Split;
use crate::expr::Expression;

fn mse_of(pred: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(y) {
        if !p.is_finite() {
            return f64::INFINITY;
        }
        s += (p - t).powi(2);
    }
    s / y.len().max(1) as f64
}

/// Returns the refined expression and its training MSE.
pub fn optimize_constants(expr: &Expression, split: &Split, max_steps: usize) -> (Expression, f64) {
    let mut program = expr.compile();
    let Ok(cols) = program.bind(split.columns()) else {
        return (expr.clone(), f64::INFINITY);
    };
    let y = split.targets();
    let n = y.len();
    let run = |p: &crate::expr::Program| -> Option<Vec<f64>> {
        if cols.is_empty() {
            p.forward(split.columns()).ok().map(|f| f.into_output())
        } else {
            p.forward_slices(&cols).ok().map(|f| f.into_output())
        }
    };
    let Some(pred) = run(&program) else {
        return (expr.clone(), f64::INFINITY);
    };
    let mut best = mse_of(&pred, y);
    let k = program.constants().len();
    if k == 0 || !best.is_finite() || max_steps == 0 {
        return (expr.clone(), best);
    }
    let mut c: Vec<f64> = program.constants().to_vec();
    let mut lambda = 1e-3;
    for _ in 0..max_steps {
        let fwd = if cols.is_empty() {
            program.forward(split.columns())
        } else {
            program.forward_slices(&cols)
        };
        let Ok(fwd) = fwd else { break };
        let resid: Vec<f64> = fwd.output().iter().zip(y).map(|(p, t)| t - p).collect();
        let jac = program.backward(&fwd, &[1.0]).constant_jacobian();
        if jac.iter().flatten().any(|v| !v.is_finite()) {
            break;
        }
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut g = DVector::<f64>::zeros(k);
        for i in 0..k {
            g[i] = jac[i].iter().zip(&resid).map(|(j, r)| j * r).sum();
            for l in i..k {
                let v: f64 = jac[i].iter().zip(&jac[l]).map(|(a, b)| a * b).sum();
                a[(i, l)] = v;
                a[(l, i)] = v;
            }
        }
        if g.norm() <= 1e-14 * (n as f64) {
            break;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = a.clone();
            for i in 0..k {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
            }
            let delta = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => match damped.lu().solve(&g) {
                    Some(d) => d,
                    None => {
                        lambda *= 4.0;
                        continue;
                    }
                },
            };
            let trial: Vec<f64> = c.iter().zip(delta.iter()).map(|(c, d)| c + d).collect();
            if trial.iter().any(|v| !v.is_finite()) {
                lambda *= 4.0;
                continue;
            }
            program.set_constants(&trial).expect("same count");
            let m = run(&program).map_or(f64::INFINITY, |p| mse_of(&p, y));
            if m < best {
                let rel = (best - m) / best.max(1e-300);
                best = m;
                c = trial;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-12 {
                    accepted = false;
                }
                break;
            }
            program.set_constants(&c).expect("same count");
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    program.set_constants(&c).expect("same count");
    (expr.with_constants(&c).expect("same count"), best)
}
