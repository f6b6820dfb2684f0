//! Ablation grids: one pretrain + probe run per grid cell and seed, run in
//! worker processes, summarized into one CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use ua_core::config::Pipeline;
use ua_core::data::split_dataset;
use ua_core::kv::{parse_list, KvReader};
use ua_core::probe::probe_encoder;
use ua_core::train::{pretrain, PretrainOptions};
use ua_core::{Error, RunConfig};

use crate::commands::{check_config, load_dataset, write_text, CONFIG_FILE, PROBE_FILE};
use crate::error::{io_error, require_exists, CliError, CliResult};

pub const STATUS_FILE: &str = "status.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 11] = [
    "pipeline",
    "n",
    "d",
    "n_x_d",
    "seed",
    "mean_F1",
    "mean_acc",
    "final_entropy",
    "status",
    "final_loss",
    "lr_scale",
];

/// Fraction of the chance-level contrastive loss at or above which a run
/// counts as collapsed.
pub const COLLAPSE_FRACTION: f64 = 0.95;

/// Axes of an ablation grid plus the shared base config.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub pipelines: Vec<Pipeline>,
    pub n_charts: Vec<usize>,
    pub total_units: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Multipliers applied to the base learning rate.
    pub lr_scales: Vec<f64>,
    pub base: RunConfig,
}

/// One run of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub pipeline: Pipeline,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub lr_scale: f64,
    pub config: RunConfig,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}-n{}-d{}-lr{}-seed{}",
            self.pipeline, self.n, self.d, self.lr_scale, self.seed
        )
    }
}

fn take_list<T: std::str::FromStr>(r: &mut KvReader, key: &str, required: bool) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    match r.take_raw(key) {
        Some((v, line)) => {
            let values: Vec<T> = parse_list(&v).map_err(|e| CliError::validation(format!("grid line {line}: {key}: {e}")))?;
            if values.is_empty() {
                return Err(CliError::validation(format!("grid line {line}: {key} is empty")));
            }
            Ok(values)
        }
        None if required => Err(CliError::validation(format!("grid file needs `{key}`"))),
        None => Ok(Vec::new()),
    }
}

impl AblationGrid {
    /// Grid file: `pipelines`, `n_charts`, `total_units` and `seeds` lists,
    /// an optional `lr_scale` list, an optional `base` config path (relative
    /// to the grid file), and any config keys, which override the base.
    pub fn parse(text: &str, dir: &Path) -> CliResult<Self> {
        let mut r = KvReader::parse(text)?;
        let pipelines: Vec<Pipeline> = take_list(&mut r, "pipelines", true)?;
        let n_charts: Vec<usize> = take_list(&mut r, "n_charts", true)?;
        let total_units: Vec<usize> = take_list(&mut r, "total_units", true)?;
        let seeds: Vec<u64> = take_list(&mut r, "seeds", true)?;
        let mut lr_scales: Vec<f64> = take_list(&mut r, "lr_scale", false)?;
        if lr_scales.is_empty() {
            lr_scales.push(1.0);
        }
        let mut base = RunConfig::default();
        if let Some((p, _)) = r.take_raw("base") {
            let path = dir.join(p);
            require_exists(&path, "base config")?;
            base = RunConfig::load(&path)?;
        }
        let overrides: String = r.remaining().map(|(k, v)| format!("{k} = {v}\n")).collect();
        base.apply_overrides(&overrides)?;
        let grid = Self {
            pipelines,
            n_charts,
            total_units,
            seeds,
            lr_scales,
            base,
        };
        let problems = grid.violations();
        if !problems.is_empty() {
            return Err(CliError::validation(format!("invalid grid: {}", problems.join("; "))));
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        require_exists(path, "grid file")?;
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for &total in &self.total_units {
            for &n in &self.n_charts {
                if n == 0 || total % n != 0 {
                    v.push(format!("total_units {total} is not divisible by n_charts {n}"));
                }
            }
        }
        if self.lr_scales.iter().any(|s| !(*s > 0.0)) {
            v.push("lr_scale values must be positive".into());
        }
        v
    }

    /// Cartesian product in grid order. Single-head pipelines ignore the
    /// chart-count axis and use `n = 1`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &pipeline in &self.pipelines {
            let ns: Vec<usize> = if pipeline.has_membership() { self.n_charts.clone() } else { vec![1] };
            for &n in &ns {
                for &total in &self.total_units {
                    for &lr_scale in &self.lr_scales {
                        for &seed in &self.seeds {
                            let mut config = self.base.clone();
                            let template = RunConfig::for_pipeline(pipeline);
                            config.pipeline = pipeline;
                            if !pipeline.has_membership() {
                                config.atlas = template.atlas.clone();
                            }
                            config.atlas.n_charts = n;
                            config.atlas.chart_dim = total / n;
                            config.seed = seed;
                            config.learning_rate = self.base.learning_rate * lr_scale;
                            cells.push(Cell {
                                pipeline,
                                n,
                                d: total / n,
                                seed,
                                lr_scale,
                                config,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Collapsed,
    Failed,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Collapsed => "collapsed",
            CellStatus::Failed => "failed",
        }
    }
}

/// Written by a finished cell; its presence marks the cell as done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub status: CellStatus,
    pub final_loss: Option<f64>,
    pub final_entropy: Option<f64>,
    pub mean_f1: Option<f64>,
    pub mean_acc: Option<f64>,
    pub message: Option<String>,
}

impl CellRecord {
    pub fn failed(message: String) -> Self {
        Self {
            status: CellStatus::Failed,
            final_loss: None,
            final_entropy: None,
            mean_f1: None,
            mean_acc: None,
            message: Some(message),
        }
    }
}

pub fn read_record(dir: &Path) -> Option<CellRecord> {
    let text = fs::read_to_string(dir.join(STATUS_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_record(dir: &Path, record: &CellRecord) -> CliResult<()> {
    write_text(&dir.join(STATUS_FILE), &serde_json::to_string_pretty(record)?)
}

/// Contrastive loss of a batch whose scores carry no information.
pub fn chance_loss(cfg: &RunConfig) -> f64 {
    let b = cfg.batch_size as f64;
    if cfg.pipeline.is_spatiotemporal() {
        2.0 * b.ln()
    } else {
        (2.0 * b - 1.0).ln()
    }
}

/// Trains and probes the cell whose config sits in `dir`. Divergence is a
/// result, not an error: it is recorded as a collapsed cell.
pub fn run_cell(dir: &Path) -> CliResult<CellRecord> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    check_config(&cfg)?;
    let data = load_dataset(&cfg)?;
    let (pre, train, test) = split_dataset(&data, cfg.split, cfg.seed)?;
    let options = PretrainOptions {
        out_dir: Some(dir.to_path_buf()),
        resume: true,
    };
    let outcome = match pretrain(&cfg, &pre, &options) {
        Ok(o) => o,
        Err(Error::NonFiniteLoss { step, batch_index, .. }) => {
            let record = CellRecord {
                status: CellStatus::Collapsed,
                final_loss: Some(f64::NAN),
                final_entropy: None,
                mean_f1: None,
                mean_acc: None,
                message: Some(format!("non-finite loss at step {step}, batch {batch_index}")),
            };
            write_record(dir, &record)?;
            return Ok(record);
        }
        Err(e) => return Err(e.into()),
    };
    let last = outcome.metrics.last();
    let contrastive = last.map(|m| m.losses.l_gl + m.losses.l_ll);
    let collapsed = contrastive.is_some_and(|c| c >= COLLAPSE_FRACTION * chance_loss(&cfg));
    let label = dir.display().to_string();
    let report = probe_encoder(&outcome.checkpoint.encoder, &train, &test, &cfg.probe, cfg.seed, &label)?;
    write_text(&dir.join(PROBE_FILE), &serde_json::to_string_pretty(&report)?)?;
    let record = CellRecord {
        status: if collapsed { CellStatus::Collapsed } else { CellStatus::Ok },
        final_loss: last.map(|m| m.losses.total),
        final_entropy: last.map(|m| m.entropy),
        mean_f1: Some(report.overall.f1),
        mean_acc: Some(report.overall.accuracy),
        message: collapsed.then(|| {
            format!(
                "contrastive loss {:.4} is at least {COLLAPSE_FRACTION} of chance ({:.4})",
                contrastive.unwrap_or(f64::NAN),
                chance_loss(&cfg)
            )
        }),
    };
    write_record(dir, &record)?;
    Ok(record)
}

pub struct AblateOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub epochs: Option<usize>,
    /// Executable that provides the hidden `run-cell` command.
    pub exe: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateOutcome {
    pub rows: Vec<(Cell, CellRecord)>,
    pub skipped: usize,
}

fn spawn_cell(exe: &Path, dir: &Path) -> CliResult<Child> {
    let log_path = dir.join("log.txt");
    let log = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let err = log.try_clone().map_err(|e| io_error(&log_path, e))?;
    Command::new(exe)
        .arg("run-cell")
        .arg(dir)
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(err))
        .spawn()
        .map_err(|e| CliError::runtime(format!("cannot start worker: {e}")))
}

/// Runs every unfinished cell with at most `workers` concurrent processes,
/// then writes the summary CSV. Cells that already have an `ok` or
/// `collapsed` record are skipped, so an interrupted grid can be resumed.
pub fn cmd_ablate(grid: &AblationGrid, opts: &AblateOptions) -> CliResult<AblateOutcome> {
    if opts.workers == 0 {
        return Err(CliError::validation("--workers must be ≥ 1"));
    }
    let mut cells = grid.cells();
    if let Some(e) = opts.epochs {
        for c in &mut cells {
            c.config.epochs = e;
        }
    }
    for c in &cells {
        check_config(&c.config).map_err(|e| CliError::validation(format!("cell {}: {}", c.dir_name(), e.message)))?;
    }
    fs::create_dir_all(&opts.out).map_err(|e| io_error(&opts.out, e))?;

    let mut pending = Vec::new();
    let mut skipped = 0;
    for c in &cells {
        let dir = opts.out.join(c.dir_name());
        if matches!(read_record(&dir), Some(r) if r.status != CellStatus::Failed) {
            skipped += 1;
            continue;
        }
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let _ = fs::remove_file(dir.join(STATUS_FILE));
        write_text(&dir.join(CONFIG_FILE), &c.config.to_text())?;
        pending.push(dir);
    }
    info!("{} cells, {} already complete, {} to run", cells.len(), skipped, pending.len());

    let mut running: Vec<(PathBuf, Child)> = Vec::new();
    let mut queue = pending.into_iter();
    loop {
        while running.len() < opts.workers {
            match queue.next() {
                Some(dir) => {
                    info!("starting {}", dir.display());
                    let child = spawn_cell(&opts.exe, &dir)?;
                    running.push((dir, child));
                }
                None => break,
            }
        }
        if running.is_empty() {
            break;
        }
        let mut still = Vec::new();
        for (dir, mut child) in running {
            match child.try_wait() {
                Ok(Some(status)) => {
                    if read_record(&dir).is_none() {
                        let msg = format!("worker exited with {status}; see {}", dir.join("log.txt").display());
                        warn!("{}: {msg}", dir.display());
                        write_record(&dir, &CellRecord::failed(msg))?;
                    }
                    info!("finished {}", dir.display());
                }
                Ok(None) => still.push((dir, child)),
                Err(e) => {
                    write_record(&dir, &CellRecord::failed(format!("lost worker: {e}")))?;
                }
            }
        }
        running = still;
        thread::sleep(Duration::from_millis(100));
    }

    let rows: Vec<(Cell, CellRecord)> = cells
        .into_iter()
        .map(|c| {
            let dir = opts.out.join(c.dir_name());
            let record = read_record(&dir).unwrap_or_else(|| CellRecord::failed("no status record".into()));
            (c, record)
        })
        .collect();
    write_summary(&opts.out.join(SUMMARY_FILE), &rows)?;
    Ok(AblateOutcome { rows, skipped })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_summary(path: &Path, rows: &[(Cell, CellRecord)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for (c, r) in rows {
        w.write_record([
            c.pipeline.to_string(),
            c.n.to_string(),
            c.d.to_string(),
            (c.n * c.d).to_string(),
            c.seed.to_string(),
            opt(r.mean_f1),
            opt(r.mean_acc),
            opt(r.final_entropy),
            r.status.as_str().to_string(),
            opt(r.final_loss),
            c.lr_scale.to_string(),
        ])?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// One parsed line of a summary CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub pipeline: String,
    pub n: usize,
    pub d: usize,
    pub n_x_d: usize,
    pub seed: u64,
    #[serde(rename = "mean_F1")]
    pub mean_f1: Option<f64>,
    pub mean_acc: Option<f64>,
    pub final_entropy: Option<f64>,
    pub status: String,
    pub final_loss: Option<f64>,
    pub lr_scale: f64,
}

pub fn read_summary(path: &Path) -> CliResult<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}
