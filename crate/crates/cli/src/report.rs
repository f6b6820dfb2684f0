//! Tables and static plots from run directories and ablation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use ua_core::data::Category;
use ua_core::probe::{mean_std, ProbeReport};
use ua_core::train::{read_metrics, MetricsLine, METRICS_FILE};
use ua_core::RunConfig;

use crate::ablate::{read_summary, SummaryRow, SUMMARY_FILE};
use crate::commands::{ProbeSummary, CONFIG_FILE, PROBE_FILE};
use crate::error::{io_error, CliError, CliResult};

pub const ENTROPY_PLOT: &str = "entropy.svg";
pub const UNITS_PLOT: &str = "units.svg";
pub const TABLES_FILE: &str = "tables.txt";

/// A labelled line for a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Probe reports grouped under one table row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub reports: Vec<ProbeReport>,
}

#[derive(Debug, Default)]
pub struct ReportInputs {
    pub entropy: Vec<Curve>,
    pub units: Vec<Curve>,
    pub rows: Vec<TableRow>,
    pub warnings: Vec<String>,
}

fn read_probe_reports(dir: &Path) -> Option<Vec<ProbeReport>> {
    let text = fs::read_to_string(dir.join(PROBE_FILE)).ok()?;
    if let Ok(summary) = serde_json::from_str::<ProbeSummary>(&text) {
        return Some(summary.runs);
    }
    serde_json::from_str::<ProbeReport>(&text).ok().map(|r| vec![r])
}

fn run_label(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match RunConfig::load(&dir.join(CONFIG_FILE)) {
        Ok(cfg) => format!(
            "{} ({}x{}) {}",
            cfg.pipeline, cfg.atlas.n_charts, cfg.atlas.chart_dim, name
        ),
        Err(_) => name,
    }
}

fn entropy_curve(label: String, metrics: &[MetricsLine]) -> Curve {
    Curve {
        label,
        points: metrics.iter().map(|m| (m.epoch as f64, m.entropy)).collect(),
    }
}

/// Mean F1 over seeds against total units, one curve per pipeline (split
/// by chart count when a pipeline was run at several).
pub fn units_curves(rows: &[SummaryRow]) -> Vec<Curve> {
    let usable: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| r.status != "failed" && r.mean_f1.is_some() && r.lr_scale == 1.0)
        .collect();
    let mut ns: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in &usable {
        let e = ns.entry(r.pipeline.as_str()).or_default();
        if !e.contains(&r.n) {
            e.push(r.n);
        }
    }
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &usable {
        let label = if ns[r.pipeline.as_str()].len() > 1 {
            format!("{} (n={})", r.pipeline, r.n)
        } else {
            r.pipeline.clone()
        };
        groups.entry(label).or_default().entry(r.n_x_d).or_default().push(r.mean_f1.unwrap_or(0.0));
    }
    groups
        .into_iter()
        .map(|(label, by_units)| Curve {
            label,
            points: by_units.into_iter().map(|(u, f)| (u as f64, mean_std(&f).0)).collect(),
        })
        .collect()
}

fn gather_ablation(dir: &Path, inputs: &mut ReportInputs) -> CliResult<()> {
    let rows = read_summary(&dir.join(SUMMARY_FILE))?;
    inputs.units.extend(units_curves(&rows));
    let mut groups: BTreeMap<(String, usize, usize, String), Vec<ProbeReport>> = BTreeMap::new();
    for r in &rows {
        let cell = dir.join(format!("{}-n{}-d{}-lr{}-seed{}", r.pipeline, r.n, r.d, r.lr_scale, r.seed));
        match read_probe_reports(&cell) {
            Some(reports) => groups
                .entry((r.pipeline.clone(), r.n, r.d, r.lr_scale.to_string()))
                .or_default()
                .extend(reports),
            None => inputs.warnings.push(format!("no probe results in {}", cell.display())),
        }
    }
    for ((pipeline, n, d, lr), reports) in groups {
        let suffix = if lr == "1" { String::new() } else { format!(" lr x{lr}") };
        inputs.rows.push(TableRow {
            label: format!("{pipeline} ({n}x{d}){suffix}"),
            reports,
        });
    }
    Ok(())
}

/// Classifies every input directory and collects what it provides.
pub fn gather(dirs: &[PathBuf]) -> CliResult<ReportInputs> {
    let mut inputs = ReportInputs::default();
    for dir in dirs {
        if dir.join(SUMMARY_FILE).exists() {
            gather_ablation(dir, &mut inputs)?;
            continue;
        }
        let metrics_path = dir.join(METRICS_FILE);
        if !metrics_path.exists() {
            inputs.warnings.push(format!("no metrics log in {}", dir.display()));
            continue;
        }
        let label = run_label(dir);
        match read_metrics(&metrics_path) {
            Ok(m) => inputs.entropy.push(entropy_curve(label.clone(), &m)),
            Err(e) => inputs.warnings.push(format!("{}: {e}", metrics_path.display())),
        }
        if let Some(reports) = read_probe_reports(dir) {
            inputs.rows.push(TableRow { label, reports });
        }
    }
    Ok(inputs)
}

fn cell(xs: &[f64]) -> String {
    if xs.is_empty() {
        return "-".into();
    }
    let (m, s) = mean_std(xs);
    format!("{m:.3} ± {s:.3}")
}

/// Rows are runs, columns are categories; entries are mean ± std over the
/// row's probe reports. `metric` picks F1 or accuracy.
pub fn render_table(rows: &[TableRow], title: &str, metric: fn(&ua_core::probe::Score) -> f64) -> String {
    let categories: Vec<Category> = {
        let mut seen: Vec<Category> = rows
            .iter()
            .flat_map(|r| r.reports.iter().flat_map(|p| p.categories.keys().copied()))
            .collect();
        seen.sort();
        seen.dedup();
        seen
    };
    let mut header = vec!["run".to_string()];
    header.extend(categories.iter().map(|c| c.to_string()));
    header.push("mean".into());
    let mut table: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line = vec![r.label.clone()];
        for c in &categories {
            let xs: Vec<f64> = r.reports.iter().filter_map(|p| p.categories.get(c)).map(metric).collect();
            line.push(cell(&xs));
        }
        let overall: Vec<f64> = r.reports.iter().map(|p| metric(&p.overall)).collect();
        line.push(cell(&overall));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|k| table.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("{title}\n");
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("plot: {e}"))
}

/// Writes a line plot of `curves` as SVG.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, curves: &[Curve]) -> CliResult<()> {
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = all
        .iter()
        .filter(|p| p.1.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(c.points.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(c.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(c.points.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Files written by [`cmd_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> CliResult<ReportOutputs> {
    if dirs.is_empty() {
        return Err(CliError::validation("report needs at least one run or ablation directory"));
    }
    let inputs = gather(dirs)?;
    if inputs.entropy.is_empty() && inputs.units.is_empty() && inputs.rows.is_empty() {
        return Err(CliError::validation(format!(
            "nothing to report: {}",
            inputs.warnings.join("; ")
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut files = Vec::new();
    if !inputs.entropy.is_empty() {
        let p = out.join(ENTROPY_PLOT);
        line_plot(&p, "Mean membership entropy", "epoch", "entropy", &inputs.entropy)?;
        files.push(p);
    }
    if !inputs.units.is_empty() {
        let p = out.join(UNITS_PLOT);
        line_plot(&p, "Probe F1 against total units", "n x d", "mean F1", &inputs.units)?;
        files.push(p);
    }
    let mut text = render_table(&inputs.rows, "Probe F1 (mean ± std over seeds)", |s| s.f1);
    text.push('\n');
    text.push_str(&render_table(&inputs.rows, "Probe accuracy (mean ± std over seeds)", |s| s.accuracy));
    if !inputs.warnings.is_empty() {
        text.push_str("\nwarnings:\n");
        for w in &inputs.warnings {
            let _ = writeln!(text, "  {w}");
        }
    }
    let p = out.join(TABLES_FILE);
    fs::write(&p, &text).map_err(|e| io_error(&p, e))?;
    files.push(p);
    Ok(ReportOutputs {
        files,
        warnings: inputs.warnings,
    })
}
