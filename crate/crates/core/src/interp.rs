//! Interpretability metrics: temporal perception field (TPF) and mapping
//! complexity (MC), plus closed forms for classical optimizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{select_equation, TrajectoryDb};
use crate::expr::{Columns, Expression, VarRef};
use crate::optimizers::ClassicalKind;
use crate::symreg::ParetoFront;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("equation reads {0}, which the database does not contain")]
    MissingVariable(String),
    #[error("empty database")]
    Empty,
}

/// Weighted mean lag Σ i·|c_i| / Σ |c_i|; `None` when every weight is zero.
pub fn tpf_from_weights(c: &[f64]) -> Option<f64> {
    let total: f64 = c.iter().map(|v| v.abs()).sum();
    if total > 0.0 && total.is_finite() {
        Some(c.iter().enumerate().map(|(i, v)| i as f64 * v.abs()).sum::<f64>() / total)
    } else {
        None
    }
}

/// Mean absolute sensitivity of the equation to every lag of every stream it
/// reads, over all database records. Records where a derivative is not finite
/// are skipped for that variable.
pub fn sensitivities(expr: &Expression, db: &TrajectoryDb) -> Result<BTreeMap<String, Vec<f64>>, InterpError> {
    mean_gradients(expr, db, f64::abs)
}

/// Signed mean derivative per variable; the coefficients themselves for a
/// linear equation.
pub fn mean_coefficients(expr: &Expression, db: &TrajectoryDb) -> Result<BTreeMap<String, Vec<f64>>, InterpError> {
    mean_gradients(expr, db, |x| x)
}

fn mean_gradients(expr: &Expression, db: &TrajectoryDb, f: fn(f64) -> f64) -> Result<BTreeMap<String, Vec<f64>>, InterpError> {
    if db.records.is_empty() {
        return Err(InterpError::Empty);
    }
    let vars: Vec<VarRef> = expr.variables().into_iter().collect();
    let mut cols = Columns::new(db.records.len());
    for v in &vars {
        let col: Option<Vec<f64>> = db
            .records
            .iter()
            .map(|r| r.streams.get(&v.stream).and_then(|w| w.get(v.lag)).copied())
            .collect();
        cols.insert(v.clone(), col.ok_or_else(|| InterpError::MissingVariable(v.to_string()))?)
            .expect("row count");
    }
    let program = expr.compile();
    let fwd = program.forward(&cols).expect("columns bound above");
    let grads = program.backward(&fwd, &[1.0]).input_gradients();
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (v, g) in program.inputs().iter().zip(grads) {
        let (mut s, mut n) = (0.0, 0usize);
        for x in g.iter().filter(|x| x.is_finite()) {
            s += f(*x);
            n += 1;
        }
        let lags = out.entry(v.stream.clone()).or_insert_with(|| vec![0.0; db.meta.horizon]);
        if v.lag >= lags.len() {
            lags.resize(v.lag + 1, 0.0);
        }
        lags[v.lag] = if n > 0 { s / n as f64 } else { 0.0 };
    }
    Ok(out)
}

/// TPF per database stream; streams the equation does not read map to `None`.
pub fn tpf(expr: &Expression, db: &TrajectoryDb) -> Result<BTreeMap<String, Option<f64>>, InterpError> {
    let sens = sensitivities(expr, db)?;
    Ok(db
        .meta
        .streams
        .iter()
        .map(|s| (s.clone(), sens.get(s).and_then(|c| tpf_from_weights(c))))
        .collect())
}

/// Complexity of the equation chosen by the selection rule.
pub fn mc(front: &ParetoFront, delta: f64) -> Option<usize> {
    select_equation(front, delta).map(|(_, c)| c)
}

/// Closed-form (TPF, MC) for classical rules; Adam treats m̂ as its input.
pub fn reference_tpf_mc(kind: ClassicalKind, beta: f64) -> (f64, f64) {
    match kind {
        ClassicalKind::Momentum if beta > 0.0 && beta < 1.0 => {
            let i0 = 0.05f64.ln() / beta.ln();
            (beta / (1.0 - beta), 0.5 * i0 * i0)
        }
        _ => (0.0, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpReport {
    pub source: String,
    pub db_fingerprint: String,
    /// Equation the TPF was measured on (original units).
    pub tpf_equation: String,
    pub tpf: BTreeMap<String, Option<f64>>,
    pub mc_equation: String,
    pub mc: usize,
    pub delta_r2: f64,
}

/// TPF from the best-fitting archived equation and MC from the selection rule.
pub fn interp_report(original_front: &ParetoFront, db: &TrajectoryDb, delta: f64) -> Result<InterpReport, InterpError> {
    let best = original_front.best_r2().ok_or(InterpError::Empty)?;
    let (sel, mc) = select_equation(original_front, delta).ok_or(InterpError::Empty)?;
    Ok(InterpReport {
        source: db.meta.source.clone(),
        db_fingerprint: db.meta.fingerprint.clone(),
        tpf_equation: best.expr.to_infix(),
        tpf: tpf(&best.expr, db)?,
        mc_equation: sel.expr.to_infix(),
        mc,
        delta_r2: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{generate_db, DbConfig, Source};
    use crate::optimizers::ClassicalConfig;
    use crate::tasks::TaskSpec;

    fn db() -> TrajectoryDb {
        let cfg = DbConfig { records: 100, steps_per_task: 30, ..Default::default() };
        generate_db(&Source::Classical(ClassicalConfig::sgd(0.01)), &TaskSpec::p1(), &cfg).unwrap()
    }

    fn geometric(beta: f64, n: usize) -> String {
        (0..n).map(|i| format!("{}*g[{i}]", beta.powi(i as i32))).collect::<Vec<_>>().join("+")
    }

    #[test]
    fn sgd_equation_has_zero_tpf() {
        let e = Expression::parse("-0.01*g[0]", 20).unwrap();
        assert_eq!(tpf(&e, &db()).unwrap()["g"], Some(0.0));
    }

    #[test]
    fn geometric_weights_give_beta_ratio() {
        let e = Expression::parse(&geometric(0.6, 20), 20).unwrap();
        let t = tpf(&e, &db()).unwrap()["g"].unwrap();
        assert!((t - 1.5).abs() < 0.01, "{t}");
    }

    #[test]
    fn midpoint_of_two_lags() {
        let e = Expression::parse("g[0]+g[4]", 20).unwrap();
        assert!((tpf(&e, &db()).unwrap()["g"].unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_equations_match_direct_formula() {
        let coeffs = [0.3, -1.2, 0.0, 0.7, 2.5];
        let text: Vec<String> = coeffs.iter().enumerate().map(|(i, c)| format!("{c}*g[{i}]")).collect();
        let e = Expression::parse(&text.join("+"), 20).unwrap();
        let direct = tpf_from_weights(&coeffs).unwrap();
        assert!((tpf(&e, &db()).unwrap()["g"].unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn constant_equation_has_no_tpf() {
        let e = Expression::parse("0.5", 20).unwrap();
        assert_eq!(tpf(&e, &db()).unwrap()["g"], None);
        assert_eq!(tpf_from_weights(&[0.0, 0.0]), None);
    }

    #[test]
    fn tpf_ignores_output_rescaling() {
        let d = db();
        let a = Expression::parse("tanh(g[0]*30)+g[3]*g[1]", 20).unwrap();
        let b = Expression::parse("7*(tanh(g[0]*30)+g[3]*g[1])", 20).unwrap();
        let (ta, tb) = (tpf(&a, &d).unwrap()["g"].unwrap(), tpf(&b, &d).unwrap()["g"].unwrap());
        assert!((ta - tb).abs() < 1e-12);
    }

    #[test]
    fn missing_stream_is_an_error() {
        let e = Expression::parse("mhat[0]", 20).unwrap();
        assert!(matches!(tpf(&e, &db()), Err(InterpError::MissingVariable(_))));
    }

    #[test]
    fn reference_values() {
        assert_eq!(reference_tpf_mc(ClassicalKind::Sgd, 0.0), (0.0, 1.0));
        assert_eq!(reference_tpf_mc(ClassicalKind::Adam, 0.9), (0.0, 1.0));
        assert_eq!(reference_tpf_mc(ClassicalKind::Momentum, 0.0), (0.0, 1.0));
        let (t, m) = reference_tpf_mc(ClassicalKind::Momentum, 0.6);
        let i0 = 0.05f64.ln() / 0.6f64.ln();
        assert!((i0 - 5.8645).abs() < 1e-3);
        assert!((t - 1.5).abs() < 1e-12 && (m - 17.197).abs() < 1e-2);
    }
}
