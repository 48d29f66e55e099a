//! Markdown and SVG report rendered from the artifacts of an output directory.
//! Artifacts are only read; the report lands in `report.md` and `report/*.svg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::distill::{DbMeta, DistillReport, TrajectoryDb};
use crate::interp::InterpReport;
use crate::teacher::MetaTrainLog;
use crate::tuner::{Skeleton, TuneLog};
use crate::workflow::{files, Evaluation};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no report artifacts found; missing: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Database,
    Trajectories,
    Pareto,
    Interpretability,
    Tuning,
}

impl Section {
    pub const ALL: [Section; 5] = [Section::Database, Section::Trajectories, Section::Pareto, Section::Interpretability, Section::Tuning];

    pub fn title(self) -> &'static str {
        match self {
            Section::Database => "Database",
            Section::Trajectories => "Loss trajectories",
            Section::Pareto => "Pareto front",
            Section::Interpretability => "Interpretability",
            Section::Tuning => "Tuning",
        }
    }

    /// Artifacts without which the section is left out.
    pub fn requires(self) -> &'static [&'static str] {
        match self {
            Section::Database => &[files::DB, files::DB_META],
            Section::Trajectories => &[files::EVALUATION, files::TRAJECTORIES],
            Section::Pareto => &[files::DISTILL],
            Section::Interpretability => &[files::METRICS],
            Section::Tuning => &[files::SKELETON, files::TUNED, files::TUNE_LOG],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub sections: Vec<Section>,
    pub markdown: String,
    /// File name and contents of each figure.
    pub figures: Vec<(String, String)>,
    pub missing: Vec<PathBuf>,
}

impl Report {
    /// Writes `report.md` and the figures into `dir`; returns the markdown path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ReportError> {
        if !self.figures.is_empty() {
            std::fs::create_dir_all(dir.join("report"))?;
        }
        for (name, svg) in &self.figures {
            std::fs::write(dir.join("report").join(name), svg)?;
        }
        let p = dir.join(files::REPORT);
        std::fs::write(&p, &self.markdown)?;
        Ok(p)
    }
}

fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Artifact { path: path.into(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Artifact { path: path.into(), message: e.to_string() })
}

fn fmt(v: f64) -> String {
    if !v.is_finite() {
        "n/a".into()
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Builds the report for `dir`. Fails only when no section can be rendered
/// or a present artifact cannot be read.
pub fn build(dir: &Path) -> Result<Report, ReportError> {
    let mut present = Vec::new();
    let mut missing = Vec::new();
    for s in Section::ALL {
        let absent: Vec<PathBuf> = s.requires().iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect();
        if absent.is_empty() {
            present.push(s);
        }
        for p in absent {
            if !missing.contains(&p) {
                missing.push(p);
            }
        }
    }
    if present.is_empty() {
        return Err(ReportError::Missing(missing));
    }
    let mut md = String::from("# Distillation report\n\n");
    let mut figures = Vec::new();
    for &s in &present {
        let _ = writeln!(md, "## {}\n", s.title());
        match s {
            Section::Database => database(dir, &mut md)?,
            Section::Trajectories => trajectories(dir, &mut md, &mut figures)?,
            Section::Pareto => pareto(dir, &mut md, &mut figures)?,
            Section::Interpretability => interpretability(dir, &mut md)?,
            Section::Tuning => tuning(dir, &mut md, &mut figures)?,
        }
        md.push('\n');
    }
    if !missing.is_empty() {
        md.push_str("## Missing artifacts\n\n");
        for p in &missing {
            let _ = writeln!(md, "- `{}`", p.file_name().unwrap_or_default().to_string_lossy());
        }
    }
    Ok(Report { sections: present, markdown: md, figures, missing })
}

fn database(dir: &Path, md: &mut String) -> Result<(), ReportError> {
    let path = dir.join(files::DB);
    let db = TrajectoryDb::load(&path).map_err(|e| ReportError::Artifact { path, message: e.to_string() })?;
    let DbMeta { source, horizon, streams, scales, out_scale, n_records, tasks_used, tasks_diverged, fingerprint, .. } = &db.meta;
    let outs: Vec<f64> = db.records.iter().map(|r| r.out).collect();
    let n = outs.len().max(1) as f64;
    let mean = outs.iter().sum::<f64>() / n;
    let std = (outs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = outs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &o| (a.min(o), b.max(o)));
    let _ = writeln!(md, "| field | value |\n|---|---|");
    let _ = writeln!(md, "| source | `{source}` |");
    let _ = writeln!(md, "| records | {n_records} |");
    let _ = writeln!(md, "| tasks used / diverged | {tasks_used} / {tasks_diverged} |");
    let _ = writeln!(md, "| horizon | {horizon} |");
    let _ = writeln!(md, "| streams | {} |", streams.join(", "));
    let _ = writeln!(md, "| output mean ± std | {} ± {} |", fmt(mean), fmt(std));
    let _ = writeln!(md, "| output range | [{}, {}] |", fmt(lo), fmt(hi));
    let _ = writeln!(md, "| output scale | {} |", fmt(*out_scale));
    for (k, v) in scales {
        let _ = writeln!(md, "| scale of `{k}` | {} |", fmt(*v));
    }
    let _ = writeln!(md, "| fingerprint | `{}` |", &fingerprint[..fingerprint.len().min(16)]);
    Ok(())
}

#[derive(Deserialize)]
struct TrajRow {
    set: String,
    role: String,
    #[allow(dead_code)]
    task: u64,
    step: usize,
    loss: f64,
}

/// Per-step mean over the finite losses of each role.
fn mean_curves(rows: &[TrajRow], set: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut acc: BTreeMap<&str, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows.iter().filter(|r| r.set == set && r.loss.is_finite()) {
        if !order.contains(&r.role.as_str()) {
            order.push(r.role.as_str());
        }
        let e = acc.entry(&r.role).or_default().entry(r.step).or_default();
        e.0 += r.loss;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|role| (role.to_string(), acc[role].iter().map(|(&s, &(sum, c))| (s as f64, sum / c as f64)).collect()))
        .collect()
}

fn trajectories(dir: &Path, md: &mut String, figures: &mut Vec<(String, String)>) -> Result<(), ReportError> {
    let ev: Evaluation = load(&dir.join(files::EVALUATION))?;
    let path = dir.join(files::TRAJECTORIES);
    let bad = |e: csv::Error| ReportError::Artifact { path: path.clone(), message: e.to_string() };
    let rows: Vec<TrajRow> = csv::Reader::from_path(&path).map_err(bad)?.deserialize().collect::<Result<_, _>>().map_err(bad)?;
    let _ = writeln!(md, "Final loss over held-out tasks (diverged runs excluded from the mean).\n");
    let _ = writeln!(md, "| optimizer | mean | std | diverged |\n|---|---|---|---|");
    for e in &ev.task {
        let s = &e.summary;
        let _ = writeln!(md, "| {} | {} | {} | {}/{} |", e.role, fmt(s.mean), fmt(s.std), s.n_diverged, s.runs.len());
    }
    let curves = mean_curves(&rows, "task");
    if !curves.is_empty() {
        figures.push(("trajectories.svg".into(), line_plot("Mean loss on held-out tasks", "step", "loss", &curves)));
        let _ = writeln!(md, "\n![trajectories](report/trajectories.svg)");
    }
    let meta = dir.join(files::META_LOG);
    if meta.exists() {
        let log: MetaTrainLog = load(&meta)?;
        let pts: Vec<(f64, f64)> = log.curve.iter().enumerate().map(|(i, p)| (i as f64, p.loss)).collect();
        if !pts.is_empty() {
            figures.push(("meta_train.svg".into(), line_plot("Meta-training loss", "segment", "meta-loss", &[("teacher".into(), pts)])));
            let _ = writeln!(md, "\n![meta-training](report/meta_train.svg)");
        }
    }
    Ok(())
}

fn pareto(dir: &Path, md: &mut String, figures: &mut Vec<(String, String)>) -> Result<(), ReportError> {
    let d: DistillReport = load(&dir.join(files::DISTILL))?;
    let _ = writeln!(md, "Source `{}`; selection tolerance ΔR² = {}.\n", d.teacher, d.delta_r2);
    let _ = writeln!(md, "| complexity | R² | mse | equation |\n|---|---|---|---|");
    for e in &d.front_original {
        let mark = if e.complexity == d.selected_complexity { " **(selected)**" } else { "" };
        let _ = writeln!(md, "| {}{mark} | {} | {} | `{}` |", e.complexity, fmt(e.r2), fmt(e.mse), e.expr_infix);
    }
    let pts: Vec<(f64, f64)> = d.front_original.iter().filter(|e| e.r2.is_finite()).map(|e| (e.complexity as f64, e.r2.max(-1.0))).collect();
    if !pts.is_empty() {
        figures.push(("pareto.svg".into(), line_plot("Validation R² against complexity", "complexity", "R²", &[("front".into(), pts)])));
        let _ = writeln!(md, "\n![pareto](report/pareto.svg)");
    }
    Ok(())
}

fn interpretability(dir: &Path, md: &mut String) -> Result<(), ReportError> {
    let m: InterpReport = load(&dir.join(files::METRICS))?;
    let _ = writeln!(md, "| metric | value |\n|---|---|");
    for (stream, v) in &m.tpf {
        let v = v.map(fmt).unwrap_or_else(|| "undefined".into());
        let _ = writeln!(md, "| TPF (`{stream}`) | {v} |");
    }
    let _ = writeln!(md, "| MC | {} |", m.mc);
    let _ = writeln!(md, "\nTPF equation (best R²): `{}`\n\nMC equation (selected): `{}`", m.tpf_equation, m.mc_equation);
    let _ = writeln!(md, "\nTPF uses mean sensitivities of the best-fitting equation, which extends the linear-coefficient definition to nonlinear equations.");
    Ok(())
}

fn tuning(dir: &Path, md: &mut String, figures: &mut Vec<(String, String)>) -> Result<(), ReportError> {
    let before: Skeleton = load(&dir.join(files::SKELETON))?;
    let after: Skeleton = load(&dir.join(files::TUNED))?;
    let log: TuneLog = load(&dir.join(files::TUNE_LOG))?;
    let _ = writeln!(md, "Skeleton `{}` with {} parameters; best validation at iteration {}.", before.template, before.theta.len(), log.best_iteration);
    if let Some(why) = &log.stopped_early {
        let _ = writeln!(md, "Stopped early: {why}.");
    }
    let ev = dir.join(files::EVALUATION);
    if ev.exists() {
        let ev: Evaluation = load(&ev)?;
        let _ = writeln!(md, "\n| skeleton | mean final loss | std | diverged |\n|---|---|---|---|");
        for e in &ev.tune_task {
            let s = &e.summary;
            let _ = writeln!(md, "| {} | {} | {} | {}/{} |", e.role, fmt(s.mean), fmt(s.std), s.n_diverged, s.runs.len());
        }
    }
    let _ = writeln!(md, "\n| parameter | before | after |\n|---|---|---|");
    for (i, (a, b)) in before.theta.iter().zip(&after.theta).enumerate() {
        let _ = writeln!(md, "| θ{i} | {} | {} |", fmt(*a), fmt(*b));
    }
    let mut series = Vec::new();
    for (name, pts) in [("train", &log.curve), ("validation", &log.validation)] {
        let pts: Vec<(f64, f64)> = pts.iter().map(|&(i, l)| (i as f64, l)).collect();
        if !pts.is_empty() {
            series.push((name.to_string(), pts));
        }
    }
    if !series.is_empty() {
        figures.push(("tuning.svg".into(), line_plot("Tuning loss", "iteration", "loss", &series)));
        let _ = writeln!(md, "\n![tuning](report/tuning.svg)");
    }
    Ok(())
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal line chart. The y axis is logarithmic when every value is positive
/// and the values span more than two decades.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, l, r, t, b) = (640.0, 400.0, 70.0, 160.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let log_y = y0 > 0.0 && y1 / y0 > 100.0;
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let (ty0, ty1) = if y0.is_finite() { (ty(y0), ty(y1)) } else { (0.0, 1.0) };
    let (ty0, ty1) = if ty1 > ty0 { (ty0, ty1) } else { (ty0 - 0.5, ty0 + 0.5) };
    let (x0, x1) = if x1 > x0 { (x0, x1) } else if x0.is_finite() { (x0 - 0.5, x0 + 0.5) } else { (0.0, 1.0) };
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (ty(y) - ty0) / (ty1 - ty0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (l + w - r) / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - b, w - r, h - b);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#, h - b);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let tv = ty0 + f * (ty1 - ty0);
        let yv = if log_y { 10f64.powf(tv) } else { tv };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(xv), h - b + 16.0, fmt(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, py(yv) + 4.0, fmt(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, escape(xlabel));
    let ylab = if log_y { format!("{ylabel} (log)") } else { ylabel.to_string() };
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, h / 2.0, h / 2.0, escape(&ylab));
    for (k, (name, p)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite() && (!log_y || q.1 > 0.0))
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = t + 14.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, w - r + 10.0, w - r + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - r + 36.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_lists_every_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match build(dir.path()) {
            Err(ReportError::Missing(m)) => {
                for s in Section::ALL {
                    for f in s.requires() {
                        assert!(m.iter().any(|p| p.ends_with(f)), "{f} not listed");
                    }
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plot_is_well_formed() {
        let svg = line_plot("a<b", "x", "y", &[("s".into(), vec![(0.0, 1.0), (1.0, 1e-4), (2.0, f64::NAN)])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b") && svg.contains("(log)"));
        assert!(!svg.contains("NaN"));
    }
}
