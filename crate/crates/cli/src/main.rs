use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use symdistill::report;
use symdistill::workflow::{sanity, sanity_rows, RunConfig, Stage, Workflow, WorkflowError};

/// Distill a learned optimizer into symbolic update rules.
#[derive(Parser)]
#[command(name = "symdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply to absent sections.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sets every seed of the run.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
    /// Rerun stages even when their artifacts are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Regress five known optimizers and check the R² floors.
    Sanity(Common),
    /// Meta-train the teacher.
    MetaTrain(Common),
    /// Record the trajectory database from the teacher.
    GenDb(Common),
    /// Run symbolic regression on the database.
    Distill(Common),
    /// Compute TPF and MC for the distilled front.
    Metrics(Common),
    /// Meta-fine-tune the distilled skeleton.
    Tune(Common),
    /// Evaluate teacher, distilled rule, baselines and tuned skeleton.
    Evaluate(Common),
    /// Run every stage in order, resuming from existing artifacts.
    Pipeline(Common),
    /// Render report.md and SVG figures from an output directory.
    Report {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn setup(c: &Common) -> Result<(RunConfig, PathBuf), WorkflowError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    cfg = cfg.with_workers(c.workers);
    let dir = c.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, dir))
}

fn run_stages(c: &Common, stages: &[Stage]) -> Result<(), WorkflowError> {
    let (cfg, dir) = setup(c)?;
    let wf = Workflow::new(cfg, &dir)?;
    for t in wf.run(stages, c.force)? {
        let state = if t.resumed { "up to date" } else { "done" };
        println!("{:<10} {state:<10} {:.1}s", t.stage, t.seconds);
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_sanity(c: &Common) -> Result<(), WorkflowError> {
    let (cfg, dir) = setup(c)?;
    let cfg = cfg.resolved()?;
    let r = sanity(&cfg, &sanity_rows(), &dir, c.force)?;
    println!("{:<13} {:>8} {:>7} {:>8} {:>5}  recovered", "row", "R²", "floor", "seconds", "pass");
    for row in &r.rows {
        println!(
            "{:<13} {:>8.4} {:>7} {:>8.1} {:>5}  {}",
            row.name, row.r2, row.r2_floor, row.wall_seconds, row.pass, row.recovered
        );
    }
    println!("total {:.1}s; results in {}", r.total_seconds, dir.join(symdistill::workflow::SANITY_FILE).display());
    if r.pass {
        Ok(())
    } else {
        let failed: Vec<String> = r.rows.iter().filter(|x| !x.pass).map(|x| format!("{} (R² {:.4} < {})", x.name, x.r2, x.r2_floor)).collect();
        Err(WorkflowError::Floor(format!("sanity floors missed: {}", failed.join(", "))))
    }
}

fn cmd_report(dir: &Path) -> Result<(), String> {
    let r = report::build(dir).map_err(|e| e.to_string())?;
    let p = r.write(dir).map_err(|e| e.to_string())?;
    let names: Vec<&str> = r.sections.iter().map(|s| s.title()).collect();
    println!("wrote {} ({})", p.display(), names.join(", "));
    for m in &r.missing {
        println!("missing {}", m.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SYMDISTILL_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sanity(c) => cmd_sanity(c),
        Command::MetaTrain(c) => run_stages(c, &[Stage::MetaTrain]),
        Command::GenDb(c) => run_stages(c, &[Stage::GenDb]),
        Command::Distill(c) => run_stages(c, &[Stage::Distill]),
        Command::Metrics(c) => run_stages(c, &[Stage::Metrics]),
        Command::Tune(c) => run_stages(c, &[Stage::Tune]),
        Command::Evaluate(c) => run_stages(c, &[Stage::Evaluate]),
        Command::Pipeline(c) => run_stages(c, &Stage::ALL),
        Command::Report { out } => {
            return match cmd_report(out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(4)
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
