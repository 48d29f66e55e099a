//! Acceptance suite: one PASS/FAIL line per criterion. Runs the full-budget
//! experiments, so expect roughly an hour on one core.
//!
//! SYMDISTILL_ACCEPTANCE_STRICT=1 turns any FAIL into a non-zero exit.
//! SYMDISTILL_ACCEPTANCE_REUSE=1 keeps artifacts from a previous run; the
//! pipelines then resume and wall times are not meaningful.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use symdistill::distill::{distill_with_observer, DistillReport};
use symdistill::expr::{pow_s, Expression, Operator};
use symdistill::optimizers::{FeatureParams, FeatureTracker};
use symdistill::symreg::{Individual, ParetoFront};
use symdistill::tasks::{Task, TaskSampler, TaskSpec};
use symdistill::teacher::meta::{frozen_unroll_loss, unroll_loss_grad};
use symdistill::teacher::{TeacherConfig, TeacherModel, Variant};
use symdistill::tuner::{frozen_skeleton_loss, skeleton_unroll_grad, Skeleton};
use symdistill::workflow::{files, sanity, sanity_rows, Evaluation, RunConfig, SanityReport, TeacherSpec, TuneSection, Workflow};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn read<T: for<'de> serde::Deserialize<'de>>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let err = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        err / norm
    } else {
        f64::INFINITY
    }
}

fn tiny_task(seed: u64) -> Task {
    let mut spec = TaskSpec::p1();
    spec.dim = 2;
    TaskSampler::new(&spec.with_seed(seed)).unwrap().sample(0)
}

// Criterion 6.
fn meta_gradients() -> Outcome {
    let t0 = Instant::now();
    let w = [1.0, 0.5, 2.0];
    let mut worst: f64 = 0.0;
    for (k, variant) in [Variant::Dm, Variant::Rp, Variant::RpSmallExtra].into_iter().enumerate() {
        let mut cfg = TeacherConfig::new(variant);
        cfg.hidden = 3;
        cfg.output_scale = 0.5;
        cfg.init_seed = 10 + k as u64;
        let m = TeacherModel::new(cfg).unwrap();
        let task = tiny_task(20 + k as u64);
        let (_, g, inputs) = unroll_loss_grad(&m, &task, &w);
        let g = g.expect("finite unroll");
        let fd: Vec<f64> = (0..g.len())
            .map(|j| {
                let h = 1e-6;
                let at = |d: f64| {
                    let mut p = m.params().to_vec();
                    p[j] += d;
                    frozen_unroll_loss(&TeacherModel::from_params(m.config().clone(), p).unwrap(), &task, &inputs, &w)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&fd, &g));
    }
    let skeletons = [
        Skeleton::skeletonize(&Expression::parse("-0.05*g[0]+0.02*tanh(3*g[1])-0.01*mhat[0]", 20).unwrap(), FeatureParams::default()),
        Skeleton::skeletonize(&Expression::parse("-0.05*nhat[0]-0.03*nhat[1]+0.01*ghat[0]", 20).unwrap(), FeatureParams::default()),
        Skeleton::threshold_sum(&["mhat", "nhat"], 2, &[0.05, 0.02, 0.01, 0.03, -0.01, 0.02], 0.7, FeatureParams::default()).unwrap(),
    ];
    for (k, skel) in skeletons.iter().enumerate() {
        let task = tiny_task(30 + k as u64);
        let (_, g) = skeleton_unroll_grad(skel, &task, &w);
        let g = g.expect("finite unroll");
        // Gradient stream of the unperturbed run, held fixed for the differences.
        let program = skel.instantiate().compile();
        let mut x = task.x0().to_vec();
        let mut tr = FeatureTracker::new(x.len(), skel.horizon, skel.feature_params());
        let mut grads = Vec::new();
        for step in 0..w.len() {
            let gk = task.loss_grad(&x, step).unwrap().1;
            tr.observe(&gk);
            let d = program.evaluate(&tr).unwrap();
            x.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
            grads.push(gk);
        }
        let fd: Vec<f64> = (0..g.len())
            .map(|j| {
                let h = 1e-6 * skel.theta[j].abs().max(1e-2);
                let at = |d: f64| {
                    let mut th = skel.theta.clone();
                    th[j] += d;
                    frozen_skeleton_loss(&skel.with_theta(&th), &task, &grads, &w)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&fd, &g));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 1e-4, format!("worst relative error {worst:.2e} (tol 1e-4) over 3 teachers and 3 skeletons, d=2, T=3, {secs:.2}s"))
}

// Criterion 9.
fn operator_semantics() -> Outcome {
    let sq = Operator::SqrtS.apply_unary(-4.0);
    let pw = pow_s(-8.0, 1.0 / 3.0);
    let ef = Operator::Erfc.apply_unary(0.0);
    let (op, err) = common::unary_max_error();
    let fixtures: Vec<String> = [("decaying-step", common::decaying_step_rule()), ("sign-sinh", common::SIGN_SINH_RULE.to_string())]
        .into_iter()
        .filter_map(|(n, t)| common::fixture_problem(&t).map(|p| format!("{n}: {p}")))
        .collect();
    let pass = sq == -2.0 && (pw + 2.0).abs() < 1e-12 && ef == 1.0 && err <= 1e-6 && fixtures.is_empty();
    outcome(
        pass,
        format!(
            "sqrt_s(-4)={sq}, pow_s(-8,1/3)={pw:.15}, erfc(0)={ef}, worst unary error {err:.1e} ({op}); fixtures {}",
            if fixtures.is_empty() { "ok".into() } else { fixtures.join("; ") }
        ),
    )
}

fn json_artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != files::TIMINGS)
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

// Criterion 10.
fn determinism(root: &Path) -> Outcome {
    let dirs = [root.join("determinism_a"), root.join("determinism_b")];
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
        let cfg = common::tiny_config().with_workers(2);
        Workflow::new(cfg, d).unwrap().pipeline(true).unwrap();
    }
    let (a, b) = (json_artifacts(&dirs[0]), json_artifacts(&dirs[1]));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass = a.len() >= 10 && a.keys().eq(b.keys()) && differing.is_empty();
    outcome(pass, format!("{} JSON artifacts compared across two fresh runs (2 workers); differing: {differing:?}", a.len()))
}

// Criterion 1.
fn sanity_recovery(root: &Path) -> (Outcome, SanityReport) {
    let cfg = RunConfig::default().resolved().unwrap();
    let r = sanity(&cfg, &sanity_rows(), &root.join("sanity"), false).unwrap();
    let sgd = &r.rows[0];
    let coef = sgd.g0_coefficient.unwrap_or(f64::NAN);
    let coef_ok = (-0.01 - coef).abs() <= 1e-3;
    let time_ok = r.total_seconds <= 1800.0;
    let rows: Vec<String> = r.rows.iter().map(|x| format!("{} {:.4}/{}", x.name, x.r2, x.r2_floor)).collect();
    let detail = format!("R² {}; sgd coefficient {coef:.5}; total {:.0}s (limit 1800s)", rows.join(", "), r.total_seconds);
    (outcome(r.pass && coef_ok && time_ok, detail), r)
}

// Criterion 4.
fn tpf_correctness(s: &SanityReport) -> Outcome {
    let row = |n: &str| s.rows.iter().find(|r| r.name == n).unwrap();
    let mom = row("momentum").tpf.get("g").copied().flatten();
    let sgd = row("sgd").tpf.get("g").copied().flatten();
    let pass = mom.is_some_and(|v| (1.2..=1.8).contains(&v)) && sgd == Some(0.0);
    outcome(pass, format!("momentum(0.6) TPF {mom:?} (want [1.2, 1.8], analytic 1.5); sgd TPF {sgd:?} (want exactly 0)"))
}

// Criterion 5.
fn mc_ordering(s: &SanityReport) -> Outcome {
    let mc = |n: &str| s.rows.iter().find(|r| r.name == n).unwrap().mc;
    let (a, b, c) = (mc("sgd"), mc("momentum"), mc("adam"));
    outcome(a < b && b < c, format!("MC sgd {a} < momentum {b} < adam {c}"))
}

fn p2_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.teacher = TeacherSpec::Learned { config: TeacherConfig::new(variant) };
    cfg.meta_train.iterations = 30;
    cfg
}

fn run_pipeline(cfg: RunConfig, dir: &Path) -> Evaluation {
    let wf = Workflow::new(cfg, dir).unwrap();
    wf.pipeline(false).unwrap_or_else(|e| panic!("{}: {e}", dir.display()));
    read(&dir.join(files::EVALUATION))
}

struct Fidelity {
    r2: f64,
    teacher: f64,
    distilled: f64,
    diverged: usize,
}

impl Fidelity {
    fn ratio(&self) -> f64 {
        self.distilled / self.teacher
    }
}

fn fidelity(dir: &Path, ev: &Evaluation) -> Fidelity {
    let d: DistillReport = read(&dir.join(files::DISTILL));
    let (t, s) = (ev.get("teacher").unwrap(), ev.get("distilled").unwrap());
    Fidelity { r2: d.selected_r2, teacher: t.mean, distilled: s.mean, diverged: t.n_diverged + s.n_diverged }
}

// Criteria 2 and 3.
fn teacher_fidelity(root: &Path) -> (Outcome, Outcome, PathBuf) {
    let rp_dir = root.join("p2_rp_small_extra");
    let dm_dir = root.join("p2_dm");
    let rp = fidelity(&rp_dir, &run_pipeline(p2_config(Variant::RpSmallExtra), &rp_dir));
    let dm = fidelity(&dm_dir, &run_pipeline(p2_config(Variant::Dm), &dm_dir));
    let c2 = outcome(
        rp.r2 >= 0.85 && rp.ratio() <= 1.5 && rp.diverged == 0,
        format!(
            "selected R² {:.4} (min 0.85); distilled {:.4} vs teacher {:.4}, ratio {:.3} (max 1.5); diverged runs {}",
            rp.r2,
            rp.distilled,
            rp.teacher,
            rp.ratio(),
            rp.diverged
        ),
    );
    let c3 = outcome(
        dm.ratio() > rp.ratio() && dm.diverged + rp.diverged == 0,
        format!(
            "DM ratio {:.3} ({:.4}/{:.4}, R² {:.4}) vs RP ratio {:.3} ({:.4}/{:.4}) on 20 shared held-out tasks",
            dm.ratio(),
            dm.distilled,
            dm.teacher,
            dm.r2,
            rp.ratio(),
            rp.distilled,
            rp.teacher
        ),
    );
    (c2, c3, dm_dir)
}

fn dominated_free(front: &ParetoFront) -> bool {
    front.pruned().iter().all(|p| front.entries().all(|a| !(a.complexity < p.complexity && a.mse <= p.mse)))
        && front.pruned().windows(2).all(|w| w[0].complexity < w[1].complexity && w[0].mse > w[1].mse)
}

// Criterion 11.
fn pareto_properties(dm_dir: &Path) -> Outcome {
    let wf = Workflow::new(p2_config(Variant::Dm), dm_dir).unwrap();
    let db = wf.load_db().unwrap();
    let full: DistillReport = wf.load_distill().unwrap();
    let full_front = ParetoFront::from_entries(&full.front, db.meta.horizon).unwrap();
    let cfg = wf.config().sr.without_hyperbolic();
    let mut prev: BTreeMap<usize, f64> = BTreeMap::new();
    let mut regressions = 0usize;
    let ablated = distill_with_observer(&db, &cfg, wf.config().select.delta_r2, |_, front| {
        for (c, mse) in &prev {
            if front.get(*c).is_none_or(|i: &Individual| i.mse > *mse) {
                regressions += 1;
            }
        }
        prev = front.entries().map(|i| (i.complexity, i.mse)).collect();
    })
    .unwrap();
    let hyperbolic = ablated.front.entries().filter(|i| i.expr.operators().iter().any(|o| o.is_hyperbolic())).count();
    let gap = (full.best_r2 - ablated.report.best_r2).abs();
    let free = dominated_free(&full_front) && dominated_free(&ablated.front);
    let pass = free && regressions == 0 && hyperbolic == 0 && gap <= 0.05;
    outcome(
        pass,
        format!(
            "dominated-free {free}; per-complexity mse increases {regressions}; hyperbolic entries in ablation archive {hyperbolic}; best R² full {:.4} vs ablation {:.4} (gap {gap:.4}, max 0.05)",
            full.best_r2, ablated.report.best_r2
        ),
    )
}

// Criteria 7 and 8.
fn p1_benefit_and_tuning(root: &Path) -> (Outcome, Outcome) {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec::p1();
    cfg.meta_train.iterations = 100;
    cfg.tune = TuneSection { task: Some(TaskSpec::p3()), ..TuneSection::default() };
    let ev = run_pipeline(cfg, &root.join("p1_rp_small_extra"));
    let teacher = ev.get("teacher").unwrap();
    let baselines: Vec<_> = ev.task.iter().filter(|e| e.role.starts_with("baseline:")).collect();
    let best = baselines
        .iter()
        .filter(|e| e.summary.n_diverged == 0)
        .min_by(|a, b| a.summary.mean.total_cmp(&b.summary.mean));
    let listing: Vec<String> = baselines.iter().map(|e| format!("{} {:.4} ({} diverged)", e.summary.label, e.summary.mean, e.summary.n_diverged)).collect();
    let c7 = outcome(
        teacher.n_diverged == 0 && best.is_some_and(|b| teacher.mean < b.summary.mean) && teacher.runs.len() >= 20,
        format!("teacher {:.4} over {} P1 tasks; baselines {}", teacher.mean, teacher.runs.len(), listing.join(", ")),
    );
    let (before, after) = (ev.get("before_tuning").unwrap(), ev.get("after_tuning").unwrap());
    let c8 = outcome(
        after.mean <= before.mean && after.n_diverged <= before.n_diverged,
        format!(
            "P1-distilled skeleton on P3 tasks: before {:.4} ({} diverged), after {:.4} ({} diverged)",
            before.mean, before.n_diverged, after.mean, after.n_diverged
        ),
    );
    (c7, c8)
}

const NAMES: [&str; 11] = [
    "sanity recovery",
    "teacher-vs-distilled fidelity",
    "degradation ordering",
    "TPF correctness",
    "MC ordering",
    "meta-gradient correctness",
    "learned-optimizer benefit",
    "tuning improvement",
    "operator semantics",
    "determinism",
    "Pareto properties",
];

fn main() {
    // Keep `cargo test -- <filter>` and `--list` from triggering the full run.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if std::env::var_os("SYMDISTILL_ACCEPTANCE_REUSE").is_none() {
        let _ = std::fs::remove_dir_all(&root);
    }
    std::fs::create_dir_all(&root).unwrap();
    let t0 = Instant::now();
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let progress = |id: usize, o: &Outcome| {
        let mut e = std::io::stderr().lock();
        let _ = writeln!(e, "  [{:>5.0}s] criterion {id} done: {}", t0.elapsed().as_secs_f64(), if o.pass { "pass" } else { "fail" });
    };
    let mut record = |id: usize, o: Outcome| {
        progress(id, &o);
        results.insert(id, o);
    };
    record(9, operator_semantics());
    record(6, meta_gradients());
    record(10, determinism(&root));
    let (c1, s) = sanity_recovery(&root);
    record(1, c1);
    record(4, tpf_correctness(&s));
    record(5, mc_ordering(&s));
    let (c2, c3, dm_dir) = teacher_fidelity(&root);
    record(2, c2);
    record(3, c3);
    record(11, pareto_properties(&dm_dir));
    let (c7, c8) = p1_benefit_and_tuning(&root);
    record(7, c7);
    record(8, c8);

    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\nacceptance criteria ({:.0}s):", t0.elapsed().as_secs_f64());
    for (id, o) in &results {
        let _ = writeln!(out, "criterion {id:>2} {} {}: {}", if o.pass { "PASS" } else { "FAIL" }, NAMES[id - 1], o.detail);
    }
    let passed = results.values().filter(|o| o.pass).count();
    let _ = writeln!(out, "acceptance: {passed}/{} passed", results.len());
    let _ = out.flush();
    if passed < results.len() && std::env::var("SYMDISTILL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
