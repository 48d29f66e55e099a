mod common;

use std::path::Path;

use common::tiny_config;
use symdistill::report::{self, Section};
use symdistill::workflow::{files, RunConfig, Stage, TeacherSpec, Workflow, WorkflowError};

fn json_artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != files::TIMINGS)
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl" | "csv")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact_resumes_and_repeats_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let wf = Workflow::new(tiny_config(), a.path()).unwrap();
    let first = wf.pipeline(false).unwrap();
    assert!(first.iter().all(|t| !t.resumed));
    for f in [files::TEACHER, files::DB, files::DISTILL, files::PARETO, files::METRICS, files::TUNED, files::EVALUATION, files::TRAJECTORIES] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let again = wf.pipeline(false).unwrap();
    assert!(again.iter().all(|t| t.resumed));

    Workflow::new(tiny_config(), b.path()).unwrap().pipeline(false).unwrap();
    let (x, y) = (json_artifacts(a.path()), json_artifacts(b.path()));
    assert_eq!(x.iter().map(|f| &f.0).collect::<Vec<_>>(), y.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (p, q) in x.iter().zip(&y) {
        assert!(p.1 == q.1, "{} differs between identical runs", p.0);
    }

    let r = report::build(a.path()).unwrap();
    assert_eq!(r.sections, Section::ALL.to_vec());
    assert!(r.missing.is_empty());
    assert!(r.markdown.contains("| MC |"));
    r.write(a.path()).unwrap();
    assert!(a.path().join("report/trajectories.svg").exists());
}

#[test]
fn changed_config_reruns_downstream_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    Workflow::new(tiny_config(), dir.path()).unwrap().pipeline(false).unwrap();
    let mut cfg = tiny_config();
    cfg.evaluate.tasks = 2;
    let t = Workflow::new(cfg, dir.path()).unwrap().pipeline(false).unwrap();
    let rerun: Vec<&str> = t.iter().filter(|s| !s.resumed).map(|s| s.stage.as_str()).collect();
    assert_eq!(rerun, ["evaluate"]);
}

#[test]
fn database_only_report_has_one_section() {
    let dir = tempfile::tempdir().unwrap();
    let wf = Workflow::new(tiny_config(), dir.path()).unwrap();
    wf.run(&[Stage::MetaTrain, Stage::GenDb], false).unwrap();
    let r = report::build(dir.path()).unwrap();
    assert_eq!(r.sections, [Section::Database]);
    assert!(r.markdown.contains("## Database") && r.markdown.contains("Missing artifacts"));
    assert!(!r.markdown.contains("## Pareto front"));
}

#[test]
fn sgd_source_bypasses_the_teacher_and_recovers_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.teacher = RunConfig::from_json(r#"{"teacher": {"kind": "classical", "optimizer": {"kind": "sgd", "lr": 0.01}}}"#).unwrap().teacher;
    assert!(matches!(cfg.teacher, TeacherSpec::Classical { .. }));
    cfg.sr.iterations = 40;
    let wf = Workflow::new(cfg, dir.path()).unwrap();
    wf.run(&[Stage::MetaTrain, Stage::GenDb, Stage::Distill], false).unwrap();
    assert!(!dir.path().join(files::TEACHER).exists());
    let d = wf.load_distill().unwrap();
    assert!(d.best_r2 > 0.999, "{}", d.best_r2);
}

#[test]
fn stage_failure_names_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let wf = Workflow::new(tiny_config(), dir.path()).unwrap();
    let err = wf.run(&[Stage::Tune], false).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("tune") && err.to_string().contains(files::DISTILL), "{err}");
}

#[test]
fn conflicting_section_seed_is_a_config_error() {
    let err = RunConfig::from_json(r#"{"db": {"seed": 4}, "seeds": {"db": 5}}"#).unwrap().resolved().unwrap_err();
    assert!(matches!(err, WorkflowError::Config(_)));
}

#[test]
fn readme_config_examples_parse() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```json\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = RunConfig::from_json(block).unwrap().resolved().unwrap();
    assert_eq!(cfg.tune_task().layers, [50, 20, 20, 12]);
    for line in readme.lines().filter(|l| l.starts_with("- `{\"kind\": \"")) {
        let teacher = line.trim_start_matches("- `").trim_end_matches('`');
        RunConfig::from_json(&format!("{{\"teacher\": {teacher}}}")).unwrap().resolved().unwrap();
    }
}
