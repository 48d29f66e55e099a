//! Genetic-programming symbolic regression with a best-per-complexity archive.
//!
//! Each iteration breeds one offspring per population slot (tournament
//! selection, one mutation or crossover, optional constant refinement),
//! merges parents and offspring, removes textual duplicates, and keeps the
//! fittest by penalized training error. Every scored offspring is offered to
//! the archive, which keeps the lowest validation error seen at each
//! complexity.

mod constopt;
mod data;
pub mod mutate;

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use constopt::optimize_constants;
pub use data::{score, Split, SrData};
pub use mutate::{Grammar, MutationWeights};

use crate::expr::{Expression, Node, Operator, DEFAULT_HORIZON};
use crate::util::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrError {
    #[error("the regression data set is empty")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every candidate was invalid for {0} consecutive rounds")]
    AllInvalid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstOptConfig {
    /// Chance that an offspring's constants are refined before scoring.
    pub probability: f64,
    /// Maximum damped Gauss–Newton steps per refinement.
    pub steps: usize,
    /// Refinement fits on an evenly strided subset of at most this many
    /// training records.
    pub max_rows: usize,
}

impl Default for ConstOptConfig {
    fn default() -> Self {
        Self { probability: 0.3, steps: 8, max_rows: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    pub iterations: usize,
    pub population: usize,
    /// At most this many database records (the first ones) enter the search.
    pub db_size: usize,
    /// Only lags below this value are offered as variables.
    pub max_lag: usize,
    pub max_complexity: usize,
    pub max_depth: usize,
    pub operators: Vec<Operator>,
    /// Streams offered as variables; all streams of the data when absent.
    pub streams: Option<Vec<String>>,
    pub tournament_size: usize,
    pub mutation: MutationWeights,
    pub constant_opt: ConstOptConfig,
    /// Added to training MSE per unit of complexity during selection.
    pub parsimony: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Size of the thread pool used for scoring (results do not depend on it).
    pub workers: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            population: 200,
            db_size: 5000,
            max_lag: DEFAULT_HORIZON,
            max_complexity: 200,
            max_depth: 16,
            operators: Operator::ALL.to_vec(),
            streams: None,
            tournament_size: 5,
            mutation: MutationWeights::default(),
            constant_opt: ConstOptConfig::default(),
            parsimony: 1e-4,
            val_fraction: 0.2,
            seed: 0,
            workers: 1,
        }
    }
}

impl SrConfig {
    /// Same configuration without tanh, asinh, sinh and erfc.
    pub fn without_hyperbolic(&self) -> Self {
        Self {
            operators: self.operators.iter().copied().filter(|o| !o.is_hyperbolic()).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SrError> {
        if self.population < 2 {
            return Err(SrError::Config("population must be ≥ 2".into()));
        }
        if self.iterations < 1 {
            return Err(SrError::Config("iterations must be ≥ 1".into()));
        }
        if self.tournament_size < 1 {
            return Err(SrError::Config("tournament_size must be ≥ 1".into()));
        }
        if self.max_complexity < 1 {
            return Err(SrError::Config("max_complexity must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SrError::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A scored candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub expr: Expression,
    pub complexity: usize,
    pub train_mse: f64,
    /// Validation MSE.
    pub mse: f64,
    /// Validation R².
    pub r2: f64,
}

/// Serialized archive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub complexity: usize,
    pub mse: f64,
    pub r2: f64,
    pub expr_infix: String,
    pub expr_sexpr: String,
}

impl From<&Individual> for FrontEntry {
    fn from(i: &Individual) -> Self {
        Self {
            complexity: i.complexity,
            mse: i.mse,
            r2: i.r2,
            expr_infix: i.expr.to_infix(),
            expr_sexpr: i.expr.to_sexpr(),
        }
    }
}

/// Best individual (by validation MSE) per complexity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParetoFront {
    best: BTreeMap<usize, Individual>,
}

impl ParetoFront {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps `ind` if it beats the current entry at its complexity.
    pub fn offer(&mut self, ind: &Individual) -> bool {
        if !ind.mse.is_finite() {
            return false;
        }
        match self.best.get(&ind.complexity) {
            Some(cur) if cur.mse <= ind.mse => false,
            _ => {
                self.best.insert(ind.complexity, ind.clone());
                true
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.best.is_empty()
    }

    pub fn len(&self) -> usize {
        self.best.len()
    }

    /// All entries in increasing complexity.
    pub fn entries(&self) -> impl Iterator<Item = &Individual> {
        self.best.values()
    }

    pub fn get(&self, complexity: usize) -> Option<&Individual> {
        self.best.get(&complexity)
    }

    /// Entries whose validation MSE is strictly below that of every simpler entry.
    pub fn pruned(&self) -> Vec<&Individual> {
        let mut out: Vec<&Individual> = Vec::new();
        for ind in self.best.values() {
            if out.last().is_none_or(|last| ind.mse < last.mse) {
                out.push(ind);
            }
        }
        out
    }

    pub fn best_r2(&self) -> Option<&Individual> {
        self.best
            .values()
            .fold(None, |acc: Option<&Individual>, i| match acc {
                Some(a) if a.r2 >= i.r2 => Some(a),
                _ => Some(i),
            })
    }

    pub fn to_entries(&self) -> Vec<FrontEntry> {
        self.best.values().map(FrontEntry::from).collect()
    }

    /// Rebuilds a front from serialized entries.
    pub fn from_entries(entries: &[FrontEntry], horizon: usize) -> Result<Self, crate::expr::ExprError> {
        let mut best = BTreeMap::new();
        for e in entries {
            let expr = Expression::parse_sexpr(&e.expr_sexpr, horizon)?;
            best.insert(
                e.complexity,
                Individual { complexity: e.complexity, train_mse: f64::NAN, mse: e.mse, r2: e.r2, expr },
            );
        }
        Ok(Self { best })
    }

    /// Applies `f` to every archived expression (e.g. to change units),
    /// keeping scores and complexities.
    pub fn map_expressions(&self, mut f: impl FnMut(&Expression) -> Expression) -> Self {
        Self {
            best: self
                .best
                .iter()
                .map(|(c, i)| (*c, Individual { expr: f(&i.expr), ..i.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Member {
    ind: Individual,
    key: String,
    fitness: f64,
}

struct Search<'a> {
    data: &'a SrData,
    cfg: &'a SrConfig,
    grammar: Grammar,
    refine_split: Option<Split>,
}

impl Search<'_> {
    fn score(&self, expr: Expression, refine: bool) -> Option<Member> {
        let expr = if expr.n_constants() > 0 {
            let s = expr.simplified();
            if s.complexity() <= expr.complexity() { s } else { expr }
        } else {
            expr
        };
        let complexity = expr.complexity();
        if complexity > self.cfg.max_complexity || expr.depth() > self.cfg.max_depth {
            return None;
        }
        let (expr, train_mse) = if refine && expr.n_constants() > 0 {
            match &self.refine_split {
                None => optimize_constants(&expr, &self.data.train, self.cfg.constant_opt.steps),
                Some(sub) => {
                    let before = score(&expr, &self.data.train).0;
                    let (fitted, _) = optimize_constants(&expr, sub, self.cfg.constant_opt.steps);
                    let after = score(&fitted, &self.data.train).0;
                    if after <= before || !before.is_finite() { (fitted, after) } else { (expr, before) }
                }
            }
        } else {
            let m = score(&expr, &self.data.train).0;
            (expr, m)
        };
        let (mse, r2) = if train_mse.is_finite() {
            score(&expr, &self.data.val)
        } else {
            (f64::INFINITY, f64::NEG_INFINITY)
        };
        let fitness = if train_mse.is_finite() {
            train_mse + self.cfg.parsimony * complexity as f64
        } else {
            f64::INFINITY
        };
        Some(Member {
            key: expr.to_infix(),
            ind: Individual { expr, complexity, train_mse, mse, r2 },
            fitness,
        })
    }

    fn tournament<'p>(&self, pop: &'p [Member], rng: &mut impl Rng) -> &'p Member {
        let mut best: Option<usize> = None;
        for _ in 0..self.cfg.tournament_size {
            let i = rng.random_range(0..pop.len());
            best = match best {
                Some(b) if pop[b].fitness < pop[i].fitness || (pop[b].fitness == pop[i].fitness && b < i) => Some(b),
                _ => Some(i),
            };
        }
        &pop[best.expect("tournament size ≥ 1")]
    }

    fn offspring(&self, pop: &[Member], iteration: usize, index: usize) -> Option<Member> {
        let mut rng = rng_for(self.cfg.seed, &[iteration as u64 + 1, index as u64]);
        let parent = self.tournament(pop, &mut rng);
        let donor = self.tournament(pop, &mut rng);
        let horizon = parent.ind.expr.horizon();
        let mut child: Option<Node> = None;
        for _ in 0..20 {
            let kind = self.cfg.mutation.pick(&mut rng);
            if let Some(n) = mutate::apply(kind, parent.ind.expr.root(), donor.ind.expr.root(), &self.grammar, &mut rng) {
                if n.node_count() <= self.cfg.max_complexity && n.depth() <= self.cfg.max_depth {
                    child = Some(n);
                    break;
                }
            }
        }
        let node = match child {
            Some(n) => n,
            None => mutate::perturb_constant(parent.ind.expr.root(), &mut rng)?,
        };
        let expr = Expression::new(node, horizon).ok()?;
        let refine = rng.random::<f64>() < self.cfg.constant_opt.probability;
        self.score(expr, refine)
    }

    fn initial(&self) -> Vec<Member> {
        let horizon = self.data.vars.iter().map(|v| v.lag + 1).max().unwrap_or(1).max(DEFAULT_HORIZON);
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut push = |m: Option<Member>, out: &mut Vec<Member>| {
            if let Some(m) = m {
                if seen.insert(m.key.clone()) {
                    out.push(m);
                }
            }
        };
        push(self.score(Expression::constant(0.0, horizon), false), &mut out);
        for v in &self.grammar.vars {
            if out.len() >= self.cfg.population {
                break;
            }
            let e = Expression::new(Node::mul(Node::Const(1.0), Node::Var(v.clone())), horizon).expect("lag in range");
            push(self.score(e, true), &mut out);
        }
        let mut k = 0u64;
        while out.len() < self.cfg.population && k < 50 * self.cfg.population as u64 {
            let mut rng = rng_for(self.cfg.seed, &[0, k]);
            let depth = 2 + (k % 3) as usize;
            let e = Expression::new(self.grammar.random_tree(depth, &mut rng), horizon).expect("lag in range");
            push(self.score(e, true), &mut out);
            k += 1;
        }
        out
    }
}

fn truncate(mut members: Vec<Member>, n: usize) -> Vec<Member> {
    let mut seen = HashSet::new();
    members.retain(|m| seen.insert(m.key.clone()));
    // Stable: ties keep their merge order.
    members.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
    members.truncate(n);
    members
}

/// Runs the search; `observer` sees the archive after every iteration.
pub fn fit_with_observer(
    data: &SrData,
    cfg: &SrConfig,
    mut observer: impl FnMut(usize, &ParetoFront),
) -> Result<ParetoFront, SrError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(SrError::EmptyData);
    }
    let vars: Vec<_> = data
        .vars
        .iter()
        .filter(|v| v.lag < cfg.max_lag)
        .filter(|v| cfg.streams.as_ref().is_none_or(|s| s.contains(&v.stream)))
        .cloned()
        .collect();
    let n = data.train.len();
    let max_rows = cfg.constant_opt.max_rows.max(1);
    let refine_split = (n > max_rows).then(|| data.train.strided(n.div_ceil(max_rows)));
    let search = Search { data, cfg, grammar: Grammar::new(&cfg.operators, vars), refine_split };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| SrError::Config(format!("thread pool: {e}")))?;
    {
        let mut front = ParetoFront::new();
        let mut pop = search.initial();
        for m in &pop {
            front.offer(&m.ind);
        }
        let mut invalid_rounds = 0;
        for it in 0..cfg.iterations {
            let children: Vec<Option<Member>> = pool.install(|| {
                (0..cfg.population)
                    .into_par_iter()
                    .map(|i| search.offspring(&pop, it, i))
                    .collect()
            });
            let children: Vec<Member> = children.into_iter().flatten().collect();
            if children.iter().all(|c| !c.fitness.is_finite()) {
                invalid_rounds += 1;
                if invalid_rounds >= 20 {
                    return Err(SrError::AllInvalid(invalid_rounds));
                }
            } else {
                invalid_rounds = 0;
            }
            for c in &children {
                front.offer(&c.ind);
            }
            pop.extend(children);
            pop = truncate(pop, cfg.population);
            observer(it, &front);
        }
        Ok(front)
    }
}

pub fn fit(data: &SrData, cfg: &SrConfig) -> Result<ParetoFront, SrError> {
    fit_with_observer(data, cfg, |_, _| {})
}
