//! Symbolic distillation: regress a rule's logged outputs on its lagged
//! inputs and pick the simplest equation that fits nearly as well as the best.

pub mod db;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expression, Node};
use crate::symreg::{fit_with_observer, FrontEntry, ParetoFront, SrConfig, SrError};
pub use db::{generate_db, replay, DbConfig, DbMeta, Record, Source, TrajectoryDb};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{label} diverged on all {tasks} tasks tried")]
    AllDiverged { tasks: usize, label: String },
    #[error("database format: {0}")]
    Format(String),
    #[error(transparent)]
    Sr(#[from] SrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_DELTA_R2: f64 = 0.05;

/// Rewrites an equation fitted on scaled data into original units:
/// E(v) = out_scale · E_s(v / σ_v).
pub fn fold_scales(expr: &Expression, db: &TrajectoryDb) -> Expression {
    let inner = expr
        .map_vars(&mut |v| {
            let s = db.scale(&v.stream);
            if s == 1.0 {
                Node::Var(v.clone())
            } else {
                Node::mul(Node::constant(1.0 / s), Node::Var(v.clone()))
            }
        })
        .expect("same variables");
    let root = if db.meta.out_scale == 1.0 {
        inner.into_root()
    } else {
        Node::mul(Node::constant(db.meta.out_scale), inner.into_root())
    };
    Expression::new(root, expr.horizon()).expect("same variables").simplified()
}

/// Minimum-complexity entry whose R² is within `delta` of the best R².
pub fn select_equation(front: &ParetoFront, delta: f64) -> Option<(&crate::symreg::Individual, usize)> {
    let best = front.best_r2()?.r2;
    front.entries().find(|i| i.r2 >= best - delta).map(|i| (i, i.complexity))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub teacher: String,
    pub db_fingerprint: String,
    pub delta_r2: f64,
    /// Archive in scaled units, as searched.
    pub front: Vec<FrontEntry>,
    /// Same archive folded back into original units.
    pub front_original: Vec<FrontEntry>,
    pub selected: String,
    pub selected_sexpr: String,
    pub selected_r2: f64,
    /// Complexity of the selected entry; the mapping complexity.
    pub selected_complexity: usize,
    pub best_r2: f64,
    pub best_r2_sexpr: String,
}

impl DistillReport {
    pub fn selected_expression(&self, horizon: usize) -> Expression {
        Expression::parse_sexpr(&self.selected_sexpr, horizon).expect("stored by this crate")
    }

    pub fn front(&self, horizon: usize) -> Result<ParetoFront, crate::expr::ExprError> {
        ParetoFront::from_entries(&self.front, horizon)
    }
}

pub struct Distilled {
    /// Archive in scaled units.
    pub front: ParetoFront,
    /// Archive in original units.
    pub original: ParetoFront,
    pub report: DistillReport,
}

/// Runs symbolic regression on the database and selects an equation.
pub fn distill(db: &TrajectoryDb, cfg: &SrConfig, delta: f64) -> Result<Distilled, DistillError> {
    distill_with_observer(db, cfg, delta, |_, _| {})
}

pub fn distill_with_observer(
    db: &TrajectoryDb,
    cfg: &SrConfig,
    delta: f64,
    observe: impl FnMut(usize, &ParetoFront),
) -> Result<Distilled, DistillError> {
    let vars = db.variables(cfg.streams.as_deref(), cfg.max_lag);
    if vars.is_empty() {
        return Err(DistillError::Config("no database stream matches the regression streams".into()));
    }
    let data = if db.records.len() > cfg.db_size {
        let head = TrajectoryDb { meta: db.meta.clone(), records: db.records[..cfg.db_size.max(1)].to_vec() };
        head.sr_data(vars, cfg.val_fraction, cfg.seed)?
    } else {
        db.sr_data(vars, cfg.val_fraction, cfg.seed)?
    };
    let front = fit_with_observer(&data, cfg, observe)?;
    let original = front.map_expressions(|e| fold_scales(e, db));
    let (sel, mc) = select_equation(&front, delta).expect("fit returns a non-empty archive");
    let best = front.best_r2().expect("non-empty");
    let sel_orig = original.get(mc).expect("same complexities");
    let report = DistillReport {
        teacher: db.meta.source.clone(),
        db_fingerprint: db.meta.fingerprint.clone(),
        delta_r2: delta,
        front: front.to_entries(),
        front_original: original.to_entries(),
        selected: sel_orig.expr.to_infix(),
        selected_sexpr: sel_orig.expr.to_sexpr(),
        selected_r2: sel.r2,
        selected_complexity: mc,
        best_r2: best.r2,
        best_r2_sexpr: original.get(best.complexity).expect("same complexities").expr.to_sexpr(),
    };
    Ok(Distilled { front, original, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::ClassicalConfig;
    use crate::symreg::Individual;
    use crate::tasks::TaskSpec;

    fn ind(c: usize, r2: f64) -> Individual {
        Individual {
            expr: Expression::constant(c as f64, 20),
            complexity: c,
            train_mse: 1.0 - r2,
            mse: 1.0 - r2,
            r2,
        }
    }

    fn front(items: &[(usize, f64)]) -> ParetoFront {
        let mut f = ParetoFront::new();
        for (c, r) in items {
            f.offer(&ind(*c, *r));
        }
        f
    }

    #[test]
    fn selection_rule() {
        let f = front(&[(3, 0.99), (50, 0.995)]);
        assert_eq!(select_equation(&f, 0.05).unwrap().1, 3);
        assert_eq!(select_equation(&f, 0.0).unwrap().1, 50);
        assert_eq!(select_equation(&front(&[(7, 0.2)]), 0.05).unwrap().1, 7);
        let ties = front(&[(2, 0.5), (4, 0.9), (9, 0.9)]);
        assert_eq!(select_equation(&ties, 0.0).unwrap().1, 4);
    }

    #[test]
    fn larger_delta_never_selects_more_complex() {
        let f = front(&[(1, 0.1), (3, 0.6), (5, 0.8), (9, 0.93), (15, 0.95)]);
        let mut last = usize::MAX;
        for d in [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let c = select_equation(&f, d).unwrap().1;
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn fold_back_matches_scaled_evaluation() {
        let cfg = DbConfig { records: 200, steps_per_task: 30, ..Default::default() };
        let db = generate_db(&Source::Classical(ClassicalConfig::momentum(0.01, 0.6)), &TaskSpec::p1(), &cfg).unwrap();
        let scaled = Expression::parse("tanh(0.7*g[0])-0.3*g[2]*g[1]+exp(0.1*g[5])", 20).unwrap();
        let orig = fold_scales(&scaled, &db);
        let data = db.sr_data(db.variables(None, 20), 0.0, 0).unwrap();
        let s_pred = scaled.compile().evaluate(data.train.columns()).unwrap();
        // Raw columns are the scaled ones times σ.
        let sigma = db.scale("g");
        let mut cols = crate::expr::Columns::new(data.train.len());
        for v in &data.vars {
            let c = crate::expr::ColumnSource::column(data.train.columns(), v).unwrap();
            cols.insert(v.clone(), c.iter().map(|x| x * sigma).collect()).unwrap();
        }
        let o_pred = orig.compile().evaluate(&cols).unwrap();
        for (s, o) in s_pred.iter().zip(&o_pred) {
            let want = s * db.meta.out_scale;
            assert!((want - o).abs() <= 1e-9 * want.abs().max(1.0), "{want} vs {o}");
        }
    }
}
