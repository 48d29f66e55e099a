//! Offline trajectory databases: generation, storage and replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DistillError;
use crate::expr::{Expression, Program, VarRef, DEFAULT_HORIZON};
use crate::optimizers::features::STREAM_G;
use crate::optimizers::{Classical, ClassicalConfig, EquationRule, FeatureParams, UpdateRule};
use crate::symreg::SrData;
use crate::tasks::{TaskSampler, TaskSpec};
use crate::teacher::{TeacherModel, TeacherRule};
use crate::trajectory::{run, RunSpec, StepView};
use crate::util::rng_for;

/// Task indices used for databases start here, away from evaluation and
/// meta-training indices.
pub const DB_TASK_OFFSET: u64 = 1 << 41;

/// What produces the logged outputs.
#[derive(Debug, Clone)]
pub enum Source {
    Classical(ClassicalConfig),
    /// A fixed symbolic rule applied as the optimizer.
    Equation(Expression),
    /// Logs `expr` evaluated on the features while `driver` moves the iterate;
    /// for target maps that are not usable optimizers on their own.
    Formula { expr: Expression, driver: ClassicalConfig },
    Teacher(Arc<TeacherModel>),
}

impl Source {
    pub fn label(&self) -> String {
        match self {
            Source::Classical(c) => format!("{:?}(lr={})", c.kind, c.lr).to_lowercase(),
            Source::Equation(e) => format!("equation:{}", e.to_infix()),
            Source::Formula { expr, .. } => format!("formula:{}", expr.to_infix()),
            Source::Teacher(m) => format!("teacher:{}", m.id()),
        }
    }

    /// Streams logged when the config does not name any.
    pub fn default_streams(&self) -> Vec<String> {
        match self {
            Source::Teacher(m) => m.config().streams().iter().map(|s| s.to_string()).collect(),
            _ => vec![STREAM_G.to_string()],
        }
    }

    fn features(&self, fallback: FeatureParams) -> FeatureParams {
        match self {
            Source::Teacher(m) => m.config().features,
            _ => fallback,
        }
    }

    fn rule(&self) -> Box<dyn UpdateRule> {
        match self {
            Source::Classical(c) => Box::new(Classical::new(c.clone())),
            Source::Equation(e) => Box::new(EquationRule::new(e.clone())),
            Source::Formula { driver, .. } => Box::new(Classical::new(driver.clone())),
            Source::Teacher(m) => Box::new(TeacherRule::new(m.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbConfig {
    pub records: usize,
    pub horizon: usize,
    /// Steps run on each sampled task; the first `horizon` are burn-in.
    pub steps_per_task: usize,
    /// Coordinates sampled (with replacement) at each recorded step.
    pub coords_per_step: usize,
    pub streams: Option<Vec<String>>,
    pub features: FeatureParams,
    pub max_tasks: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self {
            records: 5000,
            horizon: DEFAULT_HORIZON,
            steps_per_task: 100,
            coords_per_step: 1,
            streams: None,
            features: FeatureParams::default(),
            max_tasks: 500,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub task: u64,
    pub t: usize,
    pub coord: usize,
    pub streams: BTreeMap<String, Vec<f64>>,
    pub out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbMeta {
    pub source: String,
    pub horizon: usize,
    pub streams: Vec<String>,
    /// Per-stream standard deviation over all records and lags.
    pub scales: BTreeMap<String, f64>,
    pub out_scale: f64,
    pub n_records: usize,
    pub tasks_used: usize,
    pub tasks_diverged: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDb {
    pub meta: DbMeta,
    pub records: Vec<Record>,
}

fn std_or_one(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        s += v;
        s2 += v * v;
    }
    if n == 0 {
        return 1.0;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 }
}

fn records_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

fn fingerprint(records: &[Record]) -> String {
    Sha256::digest(records_jsonl(records).as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

struct TaskRecords {
    records: Vec<Record>,
    diverged: bool,
}

fn task_records(source: &Source, spec: &TaskSpec, cfg: &DbConfig, streams: &[String], index: u64) -> TaskRecords {
    let sampler = TaskSampler::new(spec).expect("validated spec");
    let task = sampler.sample(index);
    let mut rule = source.rule();
    let run_spec = RunSpec {
        steps: cfg.steps_per_task,
        horizon: cfg.horizon,
        features: source.features(cfg.features),
        ..Default::default()
    };
    let mut rng = rng_for(cfg.seed, &[index]);
    let formula = match source {
        Source::Formula { expr, .. } => Some(expr.compile()),
        _ => None,
    };
    let mut records = Vec::new();
    let outcome = run(&task, rule.as_mut(), &run_spec, |v: &StepView<'_>| {
        if v.step < cfg.horizon {
            return;
        }
        let outputs = formula.as_ref().map(|p: &Program| p.evaluate(v.features).unwrap_or_else(|_| vec![f64::NAN; v.x.len()]));
        for _ in 0..cfg.coords_per_step {
            let coord = rng.random_range(0..v.x.len());
            let out = outputs.as_ref().map_or(v.delta[coord], |o| o[coord]);
            let map = streams.iter().map(|s| (s.clone(), v.features.window(s, coord))).collect();
            records.push(Record { task: index, t: v.step, coord, streams: map, out });
        }
    });
    let bad = records.iter().any(|r| !r.out.is_finite());
    TaskRecords { records, diverged: outcome.diverged || bad }
}

/// Runs `source` on fresh tasks until `cfg.records` records are collected.
pub fn generate_db(source: &Source, spec: &TaskSpec, cfg: &DbConfig) -> Result<TrajectoryDb, DistillError> {
    spec.validate().map_err(|e| DistillError::Config(e.to_string()))?;
    if cfg.records == 0 || cfg.coords_per_step == 0 || cfg.steps_per_task <= cfg.horizon {
        return Err(DistillError::Config("need records ≥ 1, coords_per_step ≥ 1 and steps_per_task > horizon".into()));
    }
    let streams = cfg.streams.clone().unwrap_or_else(|| source.default_streams());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| DistillError::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(cfg.records);
    let (mut used, mut diverged) = (0usize, 0usize);
    let mut next = 0usize;
    while records.len() < cfg.records && next < cfg.max_tasks {
        let chunk: Vec<u64> = (next..(next + cfg.workers.max(1)).min(cfg.max_tasks))
            .map(|i| DB_TASK_OFFSET + i as u64)
            .collect();
        next += chunk.len();
        let results: Vec<TaskRecords> =
            pool.install(|| chunk.par_iter().map(|&i| task_records(source, spec, cfg, &streams, i)).collect());
        for r in results {
            if records.len() >= cfg.records {
                break;
            }
            used += 1;
            if r.diverged {
                diverged += 1;
                continue;
            }
            records.extend(r.records);
        }
    }
    if records.is_empty() {
        return Err(DistillError::AllDiverged { tasks: used, label: source.label() });
    }
    records.truncate(cfg.records);
    let scales = streams
        .iter()
        .map(|s| (s.clone(), std_or_one(records.iter().flat_map(|r| r.streams[s].iter().copied()))))
        .collect();
    let out_scale = std_or_one(records.iter().map(|r| r.out));
    let fingerprint = fingerprint(&records);
    let meta = DbMeta {
        source: source.label(),
        horizon: cfg.horizon,
        streams,
        scales,
        out_scale,
        n_records: records.len(),
        tasks_used: used,
        tasks_diverged: diverged,
        fingerprint,
    };
    Ok(TrajectoryDb { meta, records })
}

/// Re-runs `source` on the record's task and returns its output at that
/// (step, coordinate).
pub fn replay(source: &Source, spec: &TaskSpec, cfg: &DbConfig, record: &Record) -> f64 {
    let task = TaskSampler::new(spec).expect("validated spec").sample(record.task);
    let mut rule = source.rule();
    let run_spec = RunSpec {
        steps: record.t + 1,
        horizon: cfg.horizon,
        features: source.features(cfg.features),
        ..Default::default()
    };
    let formula = match source {
        Source::Formula { expr, .. } => Some(expr.compile()),
        _ => None,
    };
    let mut out = f64::NAN;
    run(&task, rule.as_mut(), &run_spec, |v| {
        if v.step == record.t {
            out = match &formula {
                Some(p) => p.evaluate(v.features).map_or(f64::NAN, |o| o[record.coord]),
                None => v.delta[record.coord],
            };
        }
    });
    out
}

impl TrajectoryDb {
    pub fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// Writes the records as JSON lines to `path` and the metadata next to it.
    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        std::fs::write(path, records_jsonl(&self.records))?;
        std::fs::write(Self::meta_path(path), serde_json::to_string_pretty(&self.meta).expect("serializable"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let text = std::fs::read_to_string(path)?;
        let meta: DbMeta = serde_json::from_str(&std::fs::read_to_string(Self::meta_path(path))?)
            .map_err(|e| DistillError::Format(e.to_string()))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| DistillError::Format(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<Record>, _>>()?;
        let fp = fingerprint(&records);
        if fp != meta.fingerprint {
            return Err(DistillError::Format("fingerprint does not match the records".into()));
        }
        Ok(Self { meta, records })
    }

    pub fn scale(&self, stream: &str) -> f64 {
        self.meta.scales.get(stream).copied().unwrap_or(1.0)
    }

    /// Lagged variables available to regression, limited to `max_lag` lags.
    pub fn variables(&self, streams: Option<&[String]>, max_lag: usize) -> Vec<VarRef> {
        let lags = max_lag.min(self.meta.horizon);
        let chosen: Vec<&String> = match streams {
            Some(s) => self.meta.streams.iter().filter(|m| s.contains(m)).collect(),
            None => self.meta.streams.iter().collect(),
        };
        chosen.iter().flat_map(|s| (0..lags).map(move |l| VarRef::new(s.as_str(), l))).collect()
    }

    /// Scaled regression data: every variable divided by its stream scale and
    /// the target by the output scale.
    pub fn sr_data(&self, vars: Vec<VarRef>, val_fraction: f64, seed: u64) -> Result<SrData, DistillError> {
        let rows: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| vars.iter().map(|v| r.streams[&v.stream][v.lag] / self.scale(&v.stream)).collect())
            .collect();
        let y: Vec<f64> = self.records.iter().map(|r| r.out / self.meta.out_scale).collect();
        Ok(SrData::new(vars, &rows, &y, val_fraction, seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd_db(seed: u64) -> TrajectoryDb {
        let cfg = DbConfig { records: 300, steps_per_task: 30, seed, ..Default::default() };
        generate_db(&Source::Classical(ClassicalConfig::sgd(0.01)), &TaskSpec::p1(), &cfg).unwrap()
    }

    #[test]
    fn sgd_outputs_are_scaled_gradients() {
        let db = sgd_db(1);
        assert_eq!(db.records.len(), 300);
        for r in &db.records {
            assert!(r.t >= 20);
            assert_eq!(r.out, -0.01 * r.streams["g"][0]);
        }
    }

    #[test]
    fn fingerprint_is_reproducible() {
        assert_eq!(sgd_db(3).meta.fingerprint, sgd_db(3).meta.fingerprint);
        assert_ne!(sgd_db(3).meta.fingerprint, sgd_db(4).meta.fingerprint);
    }

    #[test]
    fn scaled_streams_have_unit_variance() {
        let db = sgd_db(2);
        let vals: Vec<f64> = db.records.iter().flat_map(|r| r.streams["g"].iter().map(|v| v / db.scale("g"))).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn variance_four_gives_scale_two() {
        assert!((std_or_one([2.0, -2.0, 2.0, -2.0].into_iter()) - 2.0).abs() < 1e-15);
        assert_eq!(std_or_one([3.0, 3.0].into_iter()), 1.0);
    }

    #[test]
    fn replay_reproduces_records() {
        let cfg = DbConfig { records: 200, steps_per_task: 30, ..Default::default() };
        let src = Source::Classical(ClassicalConfig::momentum(0.01, 0.6));
        let db = generate_db(&src, &TaskSpec::p1(), &cfg).unwrap();
        for r in db.records.iter().step_by(17) {
            assert_eq!(replay(&src, &TaskSpec::p1(), &cfg, r), r.out);
        }
    }

    #[test]
    fn save_and_load() {
        let db = sgd_db(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        db.save(&path).unwrap();
        assert_eq!(TrajectoryDb::load(&path).unwrap(), db);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"t\":", "\"t\":1", 1)).unwrap();
        assert!(matches!(TrajectoryDb::load(&path), Err(DistillError::Format(_))));
    }
}
