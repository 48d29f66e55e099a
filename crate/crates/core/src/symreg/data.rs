use rand::seq::SliceRandom;

use crate::expr::{Columns, Expression, VarRef};
use crate::util::rng_for;

use super::SrError;

/// One side of the train/validation split, stored column-wise.
#[derive(Debug, Clone)]
pub struct Split {
    pub(crate) cols: Columns,
    pub(crate) y: Vec<f64>,
    ss_tot: f64,
}

impl Split {
    pub fn new(vars: &[VarRef], rows: &[&[f64]], y: Vec<f64>) -> Self {
        let n = y.len();
        let mut cols = Columns::new(n);
        for (j, v) in vars.iter().enumerate() {
            cols.insert(v.clone(), rows.iter().map(|r| r[j]).collect()).expect("row count");
        }
        let mean = y.iter().sum::<f64>() / n.max(1) as f64;
        let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum();
        Self { cols, y, ss_tot }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn columns(&self) -> &Columns {
        &self.cols
    }

    /// Every `stride`-th record, starting from the first.
    pub fn strided(&self, stride: usize) -> Split {
        let stride = stride.max(1);
        let vars: Vec<VarRef> = self.cols.vars().cloned().collect();
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let mut cols = Columns::new(idx.len());
        for v in &vars {
            let c = crate::expr::ColumnSource::column(&self.cols, v).expect("own column");
            cols.insert(v.clone(), idx.iter().map(|&i| c[i]).collect()).expect("row count");
        }
        let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
        let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum();
        Split { cols, y, ss_tot }
    }

    /// (mse, r²) from predictions; any non-finite prediction gives (∞, −∞).
    pub fn score_predictions(&self, pred: &[f64]) -> (f64, f64) {
        let mut ss_res = 0.0;
        for (p, y) in pred.iter().zip(&self.y) {
            if !p.is_finite() {
                return (f64::INFINITY, f64::NEG_INFINITY);
            }
            ss_res += (p - y).powi(2);
        }
        if !ss_res.is_finite() {
            return (f64::INFINITY, f64::NEG_INFINITY);
        }
        let mse = ss_res / self.y.len().max(1) as f64;
        let r2 = if self.ss_tot > 0.0 {
            1.0 - ss_res / self.ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
        (mse, r2)
    }
}

/// Evaluates `expr` on a split; missing inputs count as invalid.
pub fn score(expr: &Expression, split: &Split) -> (f64, f64) {
    match expr.compile().evaluate(&split.cols) {
        Ok(pred) => split.score_predictions(&pred),
        Err(_) => (f64::INFINITY, f64::NEG_INFINITY),
    }
}

/// A regression data set over lagged variables, split by record.
#[derive(Debug, Clone)]
pub struct SrData {
    pub vars: Vec<VarRef>,
    pub train: Split,
    pub val: Split,
}

impl SrData {
    /// `rows[i][j]` is the value of `vars[j]` in record i. The validation
    /// split takes `val_fraction` of the records, chosen by a seeded shuffle.
    pub fn new(vars: Vec<VarRef>, rows: &[Vec<f64>], y: &[f64], val_fraction: f64, seed: u64) -> Result<Self, SrError> {
        if rows.is_empty() || rows.len() != y.len() {
            return Err(SrError::EmptyData);
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng_for(seed, &[0x73706c6974]));
        let n_val = ((rows.len() as f64 * val_fraction).round() as usize).min(rows.len() - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let build = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            let r: Vec<&[f64]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
            Split::new(&vars, &r, idx.iter().map(|&i| y[i]).collect())
        };
        let train = build(train_idx);
        let val = if val_idx.is_empty() { train.clone() } else { build(val_idx) };
        Ok(Self { vars, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(y: Vec<f64>) -> Split {
        let vars = vec![VarRef::new("g", 0)];
        let rows: Vec<Vec<f64>> = y.iter().map(|v| vec![*v]).collect();
        let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        Split::new(&vars, &r, y)
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let s = split(vec![1.0, -1.0, 2.0, 0.0]);
        assert_eq!(score(&Expression::parse("g[0]", 20).unwrap(), &s), (0.0, 1.0));
        let (_, r2) = score(&Expression::parse("0.5", 20).unwrap(), &s);
        assert!(r2.abs() < 1e-15);
    }

    #[test]
    fn offset_predictor_on_unit_variance() {
        // ±1 targets: population variance exactly 1.
        let s = split(vec![1.0, -1.0, 1.0, -1.0]);
        let (mse, r2) = score(&Expression::parse("g[0]+0.3", 20).unwrap(), &s);
        assert!((mse - 0.09).abs() < 1e-12);
        assert!((r2 - (1.0 - 0.09)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_prediction_is_worst() {
        let s = split(vec![0.0, 1.0]);
        let e = Expression::parse("1/g[0]", 20).unwrap();
        assert_eq!(score(&e, &s), (f64::INFINITY, f64::NEG_INFINITY));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = SrData::new(vec![VarRef::new("g", 0)], &rows, &y, 0.2, 3).unwrap();
        let b = SrData::new(vec![VarRef::new("g", 0)], &rows, &y, 0.2, 3).unwrap();
        assert_eq!(a.val.targets(), b.val.targets());
        assert_eq!((a.train.len(), a.val.len()), (40, 10));
        assert!(a.val.targets().iter().all(|v| !a.train.targets().contains(v)));
    }
}
