//! `generate`, `pretrain` and `probe`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ua_core::config::DataSource;
use ua_core::data::store::{generate_to_dir, read_any, Manifest};
use ua_core::data::{split_dataset, Category, Dataset};
use ua_core::model::checkpoint::Checkpoint;
use ua_core::probe::{mean_std, probe_encoder, ProbeReport};
use ua_core::train::{pretrain, PretrainOptions, PretrainOutcome};
use ua_core::{validate_config, RunConfig};

use crate::error::{io_error, require_exists, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const PROBE_FILE: &str = "probe.json";

/// Loads `path` (or the dim_ua defaults) and applies the flag overrides,
/// which take precedence over the file.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_exists(p, "config file")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

pub fn check_config(cfg: &RunConfig) -> CliResult<()> {
    let problems = validate_config(cfg);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("invalid config: {}", problems.join("; "))))
    }
}

/// The dataset a config refers to: its `data_path` if set, otherwise the
/// synthetic world it describes.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let shape = cfg.model.input_shape();
    match (&cfg.data_path, cfg.data_source) {
        (Some(p), _) => {
            require_exists(p, "dataset")?;
            let data = read_any(p, (shape[0], shape[1], shape[2]))?;
            check_frame_shape(cfg, &data)?;
            Ok(data)
        }
        (None, DataSource::Synthetic) => Ok(cfg.world.generate()?),
        (None, DataSource::ImageFolder) => Err(CliError::validation(
            "data_source = image_folder needs data_path or --data",
        )),
    }
}

fn check_frame_shape(cfg: &RunConfig, data: &Dataset) -> CliResult<()> {
    let expected = cfg.model.input_shape();
    match data.frame_shape() {
        Some((h, w, c)) if [h, w, c] == expected => Ok(()),
        Some(found) => Err(CliError::validation(format!(
            "dataset frames are {found:?} but the model expects {expected:?}"
        ))),
        None => Err(CliError::validation("dataset has no frames")),
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    let problems = cfg.world.violations();
    if !problems.is_empty() {
        return Err(CliError::validation(format!("invalid world: {}", problems.join("; "))));
    }
    Ok(generate_to_dir(&cfg.world, out)?)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, resume: bool) -> CliResult<PretrainOutcome> {
    check_config(cfg)?;
    let data = load_dataset(cfg)?;
    let (pretrain_split, _, _) = split_dataset(&data, cfg.split, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let options = PretrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
    };
    Ok(pretrain(cfg, &pretrain_split, &options)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub f1: MeanStd,
    pub accuracy: MeanStd,
}

impl ScoreSummary {
    fn of(scores: &[ua_core::probe::Score]) -> Self {
        let f1: Vec<f64> = scores.iter().map(|s| s.f1).collect();
        let acc: Vec<f64> = scores.iter().map(|s| s.accuracy).collect();
        Self {
            f1: MeanStd::of(&f1),
            accuracy: MeanStd::of(&acc),
        }
    }
}

/// Several probe runs of one checkpoint and their mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub checkpoint: String,
    pub seeds: Vec<u64>,
    pub categories: BTreeMap<Category, ScoreSummary>,
    pub overall: ScoreSummary,
    pub runs: Vec<ProbeReport>,
}

impl ProbeSummary {
    pub fn from_runs(checkpoint: &str, runs: Vec<ProbeReport>) -> Self {
        let mut per_category: BTreeMap<Category, Vec<ua_core::probe::Score>> = BTreeMap::new();
        for r in &runs {
            for (c, s) in &r.categories {
                per_category.entry(*c).or_default().push(*s);
            }
        }
        let overall: Vec<_> = runs.iter().map(|r| r.overall).collect();
        Self {
            checkpoint: checkpoint.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            categories: per_category.iter().map(|(c, v)| (*c, ScoreSummary::of(v))).collect(),
            overall: ScoreSummary::of(&overall),
            runs,
        }
    }
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds: usize,
}

/// Probes a checkpoint on the probe-train / probe-test splits of its
/// dataset, once per probe seed.
pub fn cmd_probe(args: &ProbeArgs) -> CliResult<ProbeSummary> {
    if args.seeds == 0 {
        return Err(CliError::validation("--seeds must be ≥ 1"));
    }
    require_exists(&args.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(d) = &args.data {
        cfg.data_path = Some(d.clone());
    }
    let data = load_dataset(&cfg)?;
    check_frame_shape(&cfg, &data)?;
    let (_, train, test) = split_dataset(&data, cfg.split, cfg.seed)?;
    let base = args.seed.unwrap_or(cfg.seed);
    let label = args.checkpoint.display().to_string();
    let runs = (0..args.seeds as u64)
        .map(|k| probe_encoder(&ck.encoder, &train, &test, &cfg.probe, base + k, &label))
        .collect::<ua_core::Result<Vec<_>>>()?;
    Ok(ProbeSummary::from_runs(&label, runs))
}
