//! Fixtures and independent reference values shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symdistill::expr::{Expression, FeatureWindow, Operator};

pub const H: usize = 20;

/// Time-decaying step size times a thresholded momentum-like sum. The sum
/// weights are not given with the published rule; 0.9^i is our choice.
pub fn decaying_step_rule() -> String {
    let sum: Vec<String> = (0..20).map(|i| format!("{}*tanh(g[{i}])", 0.9f64.powi(i))).collect();
    format!("0.013*exp(-0.835*asinh(t[0]))*(erfc(sinh(g[0])+{})-1)", sum.join("+"))
}

/// Distilled DM rule on the two-layer MLP task; sign(x) is spelled pow_s(x, 0).
pub const SIGN_SINH_RULE: &str = "-0.02*g[0]-0.01*pow_s(g[0]*g[1], 0)*sinh(sqrt_s(pow_s(asinh(g[0]), 2.2)+0.7*pow_s(asinh(g[1]), 2.3)+0.5*pow_s(asinh(g[3]), 1.7)+0.2*pow_s(asinh(g[4]), 2.1)))";

/// Reference value of a unary operator from std and statrs.
pub fn reference(op: Operator, x: f64) -> f64 {
    match op {
        Operator::Square => x.powi(2),
        Operator::SqrtS => x.signum() * x.abs().sqrt(),
        Operator::Exp => std::f64::consts::E.powf(x),
        Operator::Tanh => {
            let (a, b) = (x.exp(), (-x).exp());
            (a - b) / (a + b)
        }
        Operator::Asinh => x.signum() * (x.abs() + (x * x + 1.0).sqrt()).ln(),
        Operator::Sinh => (x.exp() - (-x).exp()) / 2.0,
        Operator::Relu => x.max(0.0),
        Operator::Erfc => statrs::function::erf::erfc(x),
        _ => unreachable!("binary"),
    }
}

/// Largest relative deviation (absolute below 1) of every unary operator from
/// its reference over a grid on [-10, 10].
pub fn unary_max_error() -> (Operator, f64) {
    let mut worst = (Operator::Square, 0.0);
    for op in Operator::ALL.into_iter().filter(|o| o.arity() == 1) {
        for i in 0..=20_000 {
            let x = -10.0 + i as f64 * 1e-3;
            let (a, b) = (op.apply_unary(x), reference(op, x));
            let err = (a - b).abs() / b.abs().max(1.0);
            if err > worst.1 {
                worst = (op, err);
            }
        }
    }
    worst
}

/// Window with every stream filled by uniform values in [-bound, bound]; `t` holds `step`.
pub fn random_window(rng: &mut ChaCha8Rng, bound: f64, step: f64) -> FeatureWindow {
    let mut w = FeatureWindow::new(H);
    for s in ["g", "mhat", "ghat", "nhat"] {
        w.set(s, (0..H).map(|_| rng.random_range(-bound..=bound)).collect());
    }
    w.set("t", (0..H).map(|i| (step - i as f64).max(0.0)).collect());
    w
}

/// Parses, evaluates on 1000 bounded random windows and round-trips both
/// serial forms. Returns a description of the first problem.
pub fn fixture_problem(text: &str) -> Option<String> {
    let e = match Expression::parse(text, H) {
        Ok(e) => e,
        Err(err) => return Some(format!("parse: {err}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..1000 {
        let w = random_window(&mut rng, 1.0, k as f64);
        match e.evaluate(&w) {
            Ok(v) if v.is_finite() => {}
            other => return Some(format!("window {k}: {other:?}")),
        }
    }
    if Expression::parse(&e.to_infix(), H).ok().as_ref() != Some(&e) {
        return Some("infix round trip".into());
    }
    if Expression::parse_sexpr(&e.to_sexpr(), H).ok().as_ref() != Some(&e) {
        return Some("s-expression round trip".into());
    }
    None
}

/// A learned-teacher pipeline small enough to run in seconds.
pub fn tiny_config() -> symdistill::workflow::RunConfig {
    let text = r#"{
        "task": {"family": "rastrigin", "dim": 4},
        "teacher": {"kind": "learned", "config": {"variant": "rp_small_extra", "hidden": 4}},
        "meta_train": {"iterations": 2, "unroll": 5, "segments": 2},
        "db": {"records": 300, "steps_per_task": 40, "max_tasks": 50},
        "sr": {"iterations": 4, "population": 24, "db_size": 300},
        "tune": {"config": {"steps": 2, "unroll": 5, "segments": 2, "validation_tasks": 2, "validation_steps": 20, "validate_every": 1}},
        "evaluate": {"tasks": 3, "run": {"steps": 20, "eval_every": 5}},
        "seeds": {"task": 1, "init": 2, "db": 3, "sr": 4, "tune": 5}
    }"#;
    symdistill::workflow::RunConfig::from_json(text).expect("tiny config")
}
