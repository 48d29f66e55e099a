//! Run configuration and the end-to-end workflow. Each stage reads its inputs
//! from and writes its artifacts to one output directory, so any stage can be
//! rerun or resumed from what earlier stages left there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::{distill, generate_db, DbConfig, DistillReport, Source, TrajectoryDb, DEFAULT_DELTA_R2};
use crate::expr::{Expression, DEFAULT_HORIZON};
use crate::interp::{interp_report, mean_coefficients, InterpReport};
use crate::optimizers::{Classical, ClassicalConfig, EquationRule, FeatureParams, UpdateRule};
use crate::symreg::{ParetoFront, SrConfig};
use crate::tasks::{TaskSampler, TaskSpec};
use crate::teacher::{meta_train, MetaTrainConfig, TeacherConfig, TeacherModel, TeacherRule, Variant};
use crate::trajectory::RunSpec;
use crate::tuner::{evaluate, tune, EvalSummary, Skeleton, TuneConfig};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}{}", list_paths(.artifacts))]
    Stage { stage: String, message: String, artifacts: Vec<PathBuf> },
    #[error("{0}")]
    Floor(String),
}

fn list_paths(paths: &[PathBuf]) -> String {
    if paths.is_empty() {
        String::new()
    } else {
        let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        format!(" [{}]", names.join(", "))
    }
}

impl WorkflowError {
    /// 2 for configuration errors, 3 for failed acceptance floors, 4 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkflowError::Config(_) => 2,
            WorkflowError::Floor(_) => 3,
            WorkflowError::Stage { .. } => 4,
        }
    }
}

fn stage_err(stage: Stage, e: impl std::fmt::Display, artifacts: Vec<PathBuf>) -> WorkflowError {
    WorkflowError::Stage { stage: stage.name().into(), message: e.to_string(), artifacts }
}

/// What the database is recorded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// A coordinate-wise LSTM meta-trained by the pipeline.
    Learned { config: TeacherConfig },
    /// A hand-designed optimizer; meta-training is skipped.
    Classical { optimizer: ClassicalConfig },
    /// `equation` evaluated along trajectories driven by `driver`.
    Formula { equation: String, driver: ClassicalConfig },
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec::Learned { config: TeacherConfig::new(Variant::RpSmallExtra) }
    }
}

impl TeacherSpec {
    pub fn features(&self) -> FeatureParams {
        match self {
            TeacherSpec::Learned { config } => config.features,
            _ => FeatureParams::default(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, TeacherSpec::Learned { .. })
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            TeacherSpec::Learned { config } => config.validate().map_err(|e| e.to_string()),
            TeacherSpec::Classical { optimizer } => optimizer.validate(),
            TeacherSpec::Formula { equation, driver } => {
                Expression::parse(equation, DEFAULT_HORIZON).map_err(|e| format!("formula: {e}"))?;
                driver.validate()
            }
        }
    }

    /// The database source; learned teachers come from their checkpoint.
    pub fn source(&self, model: Option<Arc<TeacherModel>>) -> Result<Source, String> {
        Ok(match self {
            TeacherSpec::Learned { .. } => Source::Teacher(model.ok_or("no trained teacher")?),
            TeacherSpec::Classical { optimizer } => Source::Classical(optimizer.clone()),
            TeacherSpec::Formula { equation, driver } => Source::Formula {
                expr: Expression::parse(equation, DEFAULT_HORIZON).map_err(|e| e.to_string())?,
                driver: driver.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    /// Allowed R² shortfall from the best entry of the front.
    pub delta_r2: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { delta_r2: DEFAULT_DELTA_R2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationChoice {
    /// The entry picked by the selection rule.
    Selected,
    /// The entry with the highest validation R².
    BestR2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    /// Transfer target; the training distribution when absent.
    pub task: Option<TaskSpec>,
    /// Front entry that becomes the skeleton.
    pub equation: EquationChoice,
    pub config: TuneConfig,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self { task: None, equation: EquationChoice::Selected, config: TuneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Held-out task indices `first_task .. first_task + tasks`.
    pub tasks: usize,
    pub first_task: u64,
    pub run: RunSpec,
    /// Fixed-lr baselines evaluated alongside.
    pub baselines: Vec<ClassicalConfig>,
    pub workers: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            tasks: 20,
            first_task: 0,
            run: RunSpec { eval_every: 1, ..RunSpec::default() },
            baselines: [0.1, 0.01, 0.001].into_iter().map(ClassicalConfig::sgd).collect(),
            workers: 1,
        }
    }
}

impl EvaluateConfig {
    pub fn task_indices(&self) -> Vec<u64> {
        (0..self.tasks as u64).map(|i| self.first_task + i).collect()
    }
}

/// Every seed of a run. The per-section seed fields must be left unset (0)
/// or agree with these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub task: u64,
    pub init: u64,
    pub db: u64,
    pub sr: u64,
    pub tune: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { task: seed, init: seed, db: seed, sr: seed, tune: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub teacher: TeacherSpec,
    pub meta_train: MetaTrainConfig,
    pub db: DbConfig,
    pub sr: SrConfig,
    pub select: SelectConfig,
    pub tune: TuneSection,
    pub evaluate: EvaluateConfig,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::p2(),
            teacher: TeacherSpec::default(),
            meta_train: MetaTrainConfig::default(),
            db: DbConfig::default(),
            sr: SrConfig::default(),
            select: SelectConfig::default(),
            tune: TuneSection::default(),
            evaluate: EvaluateConfig::default(),
            seeds: Seeds::default(),
            output_dir: None,
        }
    }
}

fn merge_seed(name: &str, section: &mut u64, seed: u64) -> Result<(), WorkflowError> {
    if *section != 0 && *section != seed {
        return Err(WorkflowError::Config(format!(
            "{name} is {section} but seeds say {seed}; set seeds only in the seeds section"
        )));
    }
    *section = seed;
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        serde_json::from_str(text).map_err(|e| WorkflowError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorkflowError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }

    /// Sets the worker count of every stage.
    pub fn with_workers(mut self, workers: usize) -> Self {
        let w = workers.max(1);
        self.meta_train.workers = w;
        self.db.workers = w;
        self.sr.workers = w;
        self.tune.config.workers = w;
        self.evaluate.workers = w;
        self
    }

    /// Task distribution used for tuning and the before/after comparison.
    pub fn tune_task(&self) -> TaskSpec {
        self.tune.task.clone().unwrap_or_else(|| self.task.clone())
    }

    /// Copies the seeds into the sections and checks the whole document.
    pub fn resolved(mut self) -> Result<Self, WorkflowError> {
        let s = self.seeds.clone();
        merge_seed("task.seed", &mut self.task.seed, s.task)?;
        if let TeacherSpec::Learned { config } = &mut self.teacher {
            merge_seed("teacher.config.init_seed", &mut config.init_seed, s.init)?;
        }
        merge_seed("db.seed", &mut self.db.seed, s.db)?;
        merge_seed("sr.seed", &mut self.sr.seed, s.sr)?;
        merge_seed("tune.config.seed", &mut self.tune.config.seed, s.tune)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: String| Err(WorkflowError::Config(m));
        for (name, t) in [("task", &self.task), ("tune.task", &self.tune_task())] {
            if let Err(e) = TaskSampler::new(t) {
                return bad(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.teacher.validate() {
            return bad(format!("teacher: {e}"));
        }
        if let Err(e) = self.meta_train.validate() {
            return bad(format!("meta_train: {e}"));
        }
        if self.db.records == 0 || self.db.coords_per_step == 0 || self.db.steps_per_task <= self.db.horizon {
            return bad("db: need records ≥ 1, coords_per_step ≥ 1 and steps_per_task > horizon".into());
        }
        if let Err(e) = self.sr.validate() {
            return bad(format!("sr: {e}"));
        }
        if !(self.select.delta_r2.is_finite() && self.select.delta_r2 >= 0.0) {
            return bad("select.delta_r2 must be a non-negative number".into());
        }
        let t = &self.tune.config;
        if t.unroll == 0 || t.segments == 0 || !(t.lr > 0.0) {
            return bad("tune.config: unroll, segments and lr must be positive".into());
        }
        if self.evaluate.tasks == 0 || self.evaluate.run.steps == 0 {
            return bad("evaluate: tasks and run.steps must be positive".into());
        }
        for b in &self.evaluate.baselines {
            if let Err(e) = b.validate() {
                return bad(format!("evaluate.baselines: {e}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    MetaTrain,
    GenDb,
    Distill,
    Metrics,
    Tune,
    Evaluate,
}

/// Artifact file names inside the output directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const TIMINGS: &str = "timings.json";
    pub const TEACHER: &str = "teacher.json";
    pub const META_LOG: &str = "meta_train.json";
    pub const META_CURVE: &str = "meta_train.csv";
    pub const DB: &str = "db.jsonl";
    pub const DB_META: &str = "db.jsonl.meta.json";
    pub const DISTILL: &str = "distill.json";
    pub const PARETO: &str = "pareto.csv";
    pub const METRICS: &str = "metrics.json";
    pub const SKELETON: &str = "skeleton.json";
    pub const TUNED: &str = "tuned.json";
    pub const TUNE_LOG: &str = "tune_log.json";
    pub const EVALUATION: &str = "evaluation.json";
    pub const TRAJECTORIES: &str = "trajectories.csv";
    pub const REPORT: &str = "report.md";
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::MetaTrain, Stage::GenDb, Stage::Distill, Stage::Metrics, Stage::Tune, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MetaTrain => "meta-train",
            Stage::GenDb => "gen-db",
            Stage::Distill => "distill",
            Stage::Metrics => "metrics",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
        }
    }

    fn outputs(self, learned: bool) -> &'static [&'static str] {
        use files::*;
        match self {
            Stage::MetaTrain if learned => &[TEACHER, META_LOG, META_CURVE],
            Stage::MetaTrain => &[],
            Stage::GenDb => &[DB, DB_META],
            Stage::Distill => &[DISTILL, PARETO],
            Stage::Metrics => &[METRICS],
            Stage::Tune => &[SKELETON, TUNED, TUNE_LOG],
            Stage::Evaluate => &[EVALUATION, TRAJECTORIES],
        }
    }

    /// Upstream artifacts this stage reads.
    fn inputs(self, learned: bool) -> Vec<&'static str> {
        use files::*;
        let teacher: &[&str] = if learned { &[TEACHER] } else { &[] };
        match self {
            Stage::MetaTrain => vec![],
            Stage::GenDb => teacher.to_vec(),
            Stage::Distill => vec![DB, DB_META],
            Stage::Metrics => vec![DB, DB_META, DISTILL],
            Stage::Tune => vec![DISTILL],
            Stage::Evaluate => [teacher, &[DISTILL, SKELETON, TUNED]].concat(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    inputs: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageRecord>,
}

/// Wall-clock record of one invocation; kept apart from the deterministic artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    /// Skipped because its artifacts were up to date.
    pub resumed: bool,
}

/// One optimizer's row in the evaluation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub role: String,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Teacher, distilled equation and baselines on held-out tasks of the
    /// training distribution.
    pub task: Vec<EvalEntry>,
    /// Skeleton before and after tuning on held-out tasks of the tuning distribution.
    pub tune_task: Vec<EvalEntry>,
}

impl Evaluation {
    pub fn get(&self, role: &str) -> Option<&EvalSummary> {
        self.task.iter().chain(&self.tune_task).find(|e| e.role == role).map(|e| &e.summary)
    }

    pub fn trajectories_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["set", "role", "task", "step", "loss"]).expect("in-memory write");
        for (set, entries) in [("task", &self.task), ("tune_task", &self.tune_task)] {
            for e in entries {
                for r in &e.summary.runs {
                    for (s, l) in &r.trajectory {
                        w.serialize((set, &e.role, r.task, s, l)).expect("in-memory write");
                    }
                }
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn pareto_csv(report: &DistillReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["complexity", "r2", "mse", "selected", "equation"]).expect("in-memory write");
    for e in &report.front_original {
        let sel = e.complexity == report.selected_complexity;
        w.serialize((e.complexity, e.r2, e.mse, sel, &e.expr_infix)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// A resolved configuration bound to an output directory.
pub struct Workflow {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Workflow {
    /// Resolves and validates `cfg`, creates `dir` and writes the resolved config there.
    pub fn new(cfg: RunConfig, dir: &Path) -> Result<Self, WorkflowError> {
        let cfg = cfg.resolved()?;
        std::fs::create_dir_all(dir).map_err(|e| WorkflowError::Config(format!("{}: {e}", dir.display())))?;
        let wf = Self { cfg, dir: dir.to_path_buf() };
        write_json(&wf.path(files::CONFIG), &wf.cfg).map_err(|e| WorkflowError::Config(e.to_string()))?;
        Ok(wf)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest(&self) -> Manifest {
        read_json(&self.path(files::MANIFEST)).unwrap_or_default()
    }

    fn file_hash(&self, name: &str) -> Option<String> {
        std::fs::read(self.path(name)).ok().map(|b| sha_hex(&b))
    }

    /// Hash of the configuration sections and upstream artifacts a stage depends on.
    fn input_hash(&self, stage: Stage) -> Result<String, WorkflowError> {
        let c = &self.cfg;
        let section = match stage {
            Stage::MetaTrain => serde_json::json!([c.task, c.teacher, c.meta_train]),
            Stage::GenDb => serde_json::json!([c.task, c.teacher, c.db]),
            Stage::Distill => serde_json::json!([c.sr, c.select]),
            Stage::Metrics => serde_json::json!([c.select]),
            Stage::Tune => serde_json::json!([c.teacher, c.tune_task(), c.tune]),
            Stage::Evaluate => serde_json::json!([c.task, c.teacher, c.tune_task(), c.evaluate]),
        };
        let mut h = format!("{}\n{section}\n", stage.name());
        let mut missing = Vec::new();
        for f in stage.inputs(c.teacher.is_learned()) {
            match self.file_hash(f) {
                Some(x) => h.push_str(&format!("{f}:{x}\n")),
                None => missing.push(self.path(f)),
            }
        }
        if !missing.is_empty() {
            return Err(stage_err(stage, "missing upstream artifacts; run the earlier stages first", missing));
        }
        Ok(sha_hex(h.as_bytes()))
    }

    fn up_to_date(&self, stage: Stage, inputs: &str) -> bool {
        let m = self.manifest();
        let Some(rec) = m.stages.get(stage.name()) else { return false };
        rec.inputs == inputs
            && stage.outputs(self.cfg.teacher.is_learned()).iter().all(|f| rec.outputs.get(*f) == self.file_hash(f).as_ref())
    }

    fn record(&self, stage: Stage, inputs: String) -> Result<(), WorkflowError> {
        let mut m = self.manifest();
        let outputs = stage
            .outputs(self.cfg.teacher.is_learned())
            .iter()
            .map(|f| (f.to_string(), self.file_hash(f).unwrap_or_default()))
            .collect();
        m.stages.insert(stage.name().into(), StageRecord { inputs, outputs });
        write_json(&self.path(files::MANIFEST), &m).map_err(|e| stage_err(stage, e, vec![self.path(files::MANIFEST)]))
    }

    /// Runs `stages` in order, skipping those whose artifacts are up to date
    /// unless `force` is set. Wall times go to `timings.json`.
    pub fn run(&self, stages: &[Stage], force: bool) -> Result<Vec<StageTiming>, WorkflowError> {
        let mut timings = Vec::new();
        for &stage in stages {
            let inputs = self.input_hash(stage)?;
            let t0 = Instant::now();
            let resumed = !force && self.up_to_date(stage, &inputs);
            if resumed {
                log::info!("{}: up to date", stage.name());
            } else {
                log::info!("{}: running", stage.name());
                self.run_stage(stage)?;
                self.record(stage, inputs)?;
            }
            timings.push(StageTiming { stage: stage.name().into(), seconds: t0.elapsed().as_secs_f64(), resumed });
        }
        let _ = write_json(&self.path(files::TIMINGS), &timings);
        Ok(timings)
    }

    pub fn pipeline(&self, force: bool) -> Result<Vec<StageTiming>, WorkflowError> {
        self.run(&Stage::ALL, force)
    }

    fn run_stage(&self, stage: Stage) -> Result<(), WorkflowError> {
        match stage {
            Stage::MetaTrain => self.stage_meta_train(),
            Stage::GenDb => self.stage_gen_db(),
            Stage::Distill => self.stage_distill(),
            Stage::Metrics => self.stage_metrics(),
            Stage::Tune => self.stage_tune(),
            Stage::Evaluate => self.stage_evaluate(),
        }
    }

    pub fn load_teacher(&self) -> Result<Option<Arc<TeacherModel>>, WorkflowError> {
        if !self.cfg.teacher.is_learned() {
            return Ok(None);
        }
        let p = self.path(files::TEACHER);
        TeacherModel::load(&p).map(|m| Some(Arc::new(m))).map_err(|e| stage_err(Stage::GenDb, e, vec![p]))
    }

    pub fn load_db(&self) -> Result<TrajectoryDb, WorkflowError> {
        let p = self.path(files::DB);
        TrajectoryDb::load(&p).map_err(|e| stage_err(Stage::Distill, e, vec![p]))
    }

    pub fn load_distill(&self) -> Result<DistillReport, WorkflowError> {
        read_json(&self.path(files::DISTILL)).map_err(|e| stage_err(Stage::Metrics, e, vec![self.path(files::DISTILL)]))
    }

    fn stage_meta_train(&self) -> Result<(), WorkflowError> {
        let TeacherSpec::Learned { config } = &self.cfg.teacher else {
            log::info!("meta-train: teacher is hand-designed, nothing to train");
            return Ok(());
        };
        let s = Stage::MetaTrain;
        let model = TeacherModel::new(config.clone()).map_err(|e| stage_err(s, e, vec![]))?;
        let (model, log) = meta_train(&model, &self.cfg.task, &self.cfg.meta_train).map_err(|e| stage_err(s, e, vec![]))?;
        let io = |e: std::io::Error| stage_err(s, e, vec![self.dir.clone()]);
        model.save(&self.path(files::TEACHER)).map_err(|e| stage_err(s, e, vec![self.path(files::TEACHER)]))?;
        write_json(&self.path(files::META_LOG), &log).map_err(io)?;
        std::fs::write(self.path(files::META_CURVE), log.to_csv()).map_err(io)?;
        Ok(())
    }

    fn stage_gen_db(&self) -> Result<(), WorkflowError> {
        let s = Stage::GenDb;
        let source = self.cfg.teacher.source(self.load_teacher()?).map_err(|e| stage_err(s, e, vec![]))?;
        let db = generate_db(&source, &self.cfg.task, &self.cfg.db).map_err(|e| stage_err(s, e, vec![]))?;
        db.save(&self.path(files::DB)).map_err(|e| stage_err(s, e, vec![self.path(files::DB)]))
    }

    fn stage_distill(&self) -> Result<(), WorkflowError> {
        let s = Stage::Distill;
        let db = self.load_db()?;
        let d = distill(&db, &self.cfg.sr, self.cfg.select.delta_r2).map_err(|e| stage_err(s, e, vec![]))?;
        let io = |e: std::io::Error| stage_err(s, e, vec![self.dir.clone()]);
        write_json(&self.path(files::DISTILL), &d.report).map_err(io)?;
        std::fs::write(self.path(files::PARETO), pareto_csv(&d.report)).map_err(io)?;
        Ok(())
    }

    fn stage_metrics(&self) -> Result<(), WorkflowError> {
        let s = Stage::Metrics;
        let db = self.load_db()?;
        let report = self.load_distill()?;
        let front = ParetoFront::from_entries(&report.front_original, db.meta.horizon).map_err(|e| stage_err(s, e, vec![]))?;
        let m = interp_report(&front, &db, self.cfg.select.delta_r2).map_err(|e| stage_err(s, e, vec![]))?;
        write_json(&self.path(files::METRICS), &m).map_err(|e| stage_err(s, e, vec![self.path(files::METRICS)]))
    }

    /// Front entry chosen for tuning, in original units.
    fn tuning_equation(&self, report: &DistillReport) -> Result<Expression, WorkflowError> {
        let sexpr = match self.cfg.tune.equation {
            EquationChoice::Selected => &report.selected_sexpr,
            EquationChoice::BestR2 => &report.best_r2_sexpr,
        };
        Expression::parse_sexpr(sexpr, self.cfg.db.horizon).map_err(|e| stage_err(Stage::Tune, e, vec![self.path(files::DISTILL)]))
    }

    fn stage_tune(&self) -> Result<(), WorkflowError> {
        let s = Stage::Tune;
        let report = self.load_distill()?;
        let skel = Skeleton::skeletonize(&self.tuning_equation(&report)?, self.cfg.teacher.features());
        let (tuned, log) = tune(&skel, &self.cfg.tune_task(), &self.cfg.tune.config).map_err(|e| stage_err(s, e, vec![]))?;
        let io = |e: std::io::Error| stage_err(s, e, vec![self.dir.clone()]);
        write_json(&self.path(files::SKELETON), &skel).map_err(io)?;
        write_json(&self.path(files::TUNED), &tuned).map_err(io)?;
        write_json(&self.path(files::TUNE_LOG), &log).map_err(io)?;
        Ok(())
    }

    fn stage_evaluate(&self) -> Result<(), WorkflowError> {
        let s = Stage::Evaluate;
        let ev = &self.cfg.evaluate;
        let tasks = ev.task_indices();
        let teacher = self.load_teacher()?;
        let report = self.load_distill()?;
        let load_skel = |name: &str| -> Result<Skeleton, WorkflowError> {
            read_json(&self.path(name)).map_err(|e| stage_err(s, e, vec![self.path(name)]))
        };
        let (before, after) = (load_skel(files::SKELETON)?, load_skel(files::TUNED)?);
        let features = self.cfg.teacher.features();
        let task = &self.cfg.task;
        let mut on_task = Vec::new();
        let teacher_summary = match (&self.cfg.teacher, teacher) {
            (TeacherSpec::Learned { .. }, Some(m)) => {
                evaluate(move || Box::new(TeacherRule::new(m.clone())) as Box<dyn UpdateRule>, features, task, &tasks, &ev.run, ev.workers)
            }
            (TeacherSpec::Classical { optimizer }, _) => {
                evaluate(|| Box::new(Classical::new(optimizer.clone())) as Box<dyn UpdateRule>, features, task, &tasks, &ev.run, ev.workers)
            }
            (TeacherSpec::Formula { equation, .. }, _) => {
                let e = Expression::parse(equation, DEFAULT_HORIZON).map_err(|e| stage_err(s, e, vec![]))?;
                evaluate(move || Box::new(EquationRule::new(e.clone())) as Box<dyn UpdateRule>, features, task, &tasks, &ev.run, ev.workers)
            }
            (TeacherSpec::Learned { .. }, None) => unreachable!("load_teacher returns the model for learned teachers"),
        };
        on_task.push(EvalEntry { role: "teacher".into(), summary: teacher_summary });
        let selected = report.selected_expression(self.cfg.db.horizon);
        on_task.push(EvalEntry {
            role: "distilled".into(),
            summary: evaluate(
                move || Box::new(EquationRule::new(selected.clone())) as Box<dyn UpdateRule>,
                features,
                task,
                &tasks,
                &ev.run,
                ev.workers,
            ),
        });
        for b in &ev.baselines {
            let summary = evaluate(|| Box::new(Classical::new(b.clone())) as Box<dyn UpdateRule>, features, task, &tasks, &ev.run, ev.workers);
            on_task.push(EvalEntry { role: format!("baseline:{}", summary.label), summary });
        }
        let tune_task = self.cfg.tune_task();
        let mut on_tune = Vec::new();
        for (role, sk) in [("before_tuning", &before), ("after_tuning", &after)] {
            let summary = evaluate(|| Box::new(sk.rule()) as Box<dyn UpdateRule>, sk.feature_params(), &tune_task, &tasks, &ev.run, ev.workers);
            on_tune.push(EvalEntry { role: role.into(), summary });
        }
        let evaluation = Evaluation { task: on_task, tune_task: on_tune };
        let io = |e: std::io::Error| stage_err(s, e, vec![self.dir.clone()]);
        write_json(&self.path(files::EVALUATION), &evaluation).map_err(io)?;
        std::fs::write(self.path(files::TRAJECTORIES), evaluation.trajectories_csv()).map_err(io)?;
        Ok(())
    }
}

/// One known optimizer regressed by the sanity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub name: String,
    pub source: TeacherSpec,
    pub r2_floor: f64,
}

/// The five known sources with their R² floors.
pub fn sanity_rows() -> Vec<SanityRow> {
    let decay: Vec<String> = (0..=10).map(|i| format!("{}*g[{i}]", 1.0 - 0.1 * i as f64)).collect();
    let row = |name: &str, source, r2_floor| SanityRow { name: name.into(), source, r2_floor };
    vec![
        row("sgd", TeacherSpec::Classical { optimizer: ClassicalConfig::sgd(0.01) }, 0.999),
        row("linear_decay", TeacherSpec::Formula { equation: decay.join("+"), driver: ClassicalConfig::sgd(0.1) }, 0.85),
        row(
            "composite",
            TeacherSpec::Formula { equation: "sq(g[0])+g[1]+2*g[2]+exp(g[4])".into(), driver: ClassicalConfig::sgd(0.1) },
            0.9,
        ),
        row("momentum", TeacherSpec::Classical { optimizer: ClassicalConfig::momentum(0.1, 0.6) }, 0.9),
        row("adam", TeacherSpec::Classical { optimizer: ClassicalConfig::adam(0.01, 0.9, 0.9) }, 0.75),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityResult {
    pub name: String,
    pub source: String,
    /// Best-fitting equation of the front.
    pub recovered: String,
    pub r2: f64,
    pub r2_floor: f64,
    pub selected: String,
    pub selected_r2: f64,
    pub mc: usize,
    pub tpf: BTreeMap<String, Option<f64>>,
    /// Mean sensitivity of the selected equation to `g[0]`.
    pub g0_coefficient: Option<f64>,
    pub wall_seconds: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub rows: Vec<SanityResult>,
    pub total_seconds: f64,
    pub pass: bool,
}

pub const SANITY_FILE: &str = "sanity.json";

/// Regresses the known optimizers in `rows` with the task, database, search
/// and selection settings of `cfg`. Row artifacts go to `dir/sanity/<name>/`.
/// A missed floor is reported in the result, not as an error.
pub fn sanity(cfg: &RunConfig, rows: &[SanityRow], dir: &Path, force: bool) -> Result<SanityReport, WorkflowError> {
    let t0 = Instant::now();
    let mut out = Vec::new();
    for row in rows {
        let rt = Instant::now();
        let row_cfg = RunConfig { teacher: row.source.clone(), ..cfg.clone() };
        let wf = Workflow::new(row_cfg, &dir.join("sanity").join(&row.name))?;
        wf.run(&[Stage::GenDb, Stage::Distill, Stage::Metrics], force)?;
        let report = wf.load_distill()?;
        let metrics: InterpReport =
            read_json(&wf.path(files::METRICS)).map_err(|e| stage_err(Stage::Metrics, e, vec![wf.path(files::METRICS)]))?;
        let db = wf.load_db()?;
        let selected = report.selected_expression(db.meta.horizon);
        let g0_coefficient = mean_coefficients(&selected, &db).ok().and_then(|s| s.get("g").and_then(|v| v.first().copied()));
        let recovered = report
            .front_original
            .iter()
            .find(|e| e.expr_sexpr == report.best_r2_sexpr)
            .map(|e| e.expr_infix.clone())
            .unwrap_or_default();
        let pass = report.best_r2 >= row.r2_floor;
        log::info!("sanity {}: R² {:.4} (floor {}) {}", row.name, report.best_r2, row.r2_floor, if pass { "ok" } else { "FAIL" });
        out.push(SanityResult {
            name: row.name.clone(),
            source: report.teacher.clone(),
            recovered,
            r2: report.best_r2,
            r2_floor: row.r2_floor,
            selected: report.selected.clone(),
            selected_r2: report.selected_r2,
            mc: metrics.mc,
            tpf: metrics.tpf,
            g0_coefficient,
            wall_seconds: rt.elapsed().as_secs_f64(),
            pass,
        });
    }
    let pass = out.iter().all(|r| r.pass);
    let report = SanityReport { rows: out, total_seconds: t0.elapsed().as_secs_f64(), pass };
    write_json(&dir.join(SANITY_FILE), &report).map_err(|e| stage_err(Stage::Metrics, e, vec![dir.join(SANITY_FILE)]))?;
    Ok(report)
}
