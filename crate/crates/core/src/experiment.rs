//! Desk-scale experiment recipes shared by the property suite, the CLI and
//! the acceptance tests.

use std::path::Path;

use crate::config::{Pipeline, RunConfig};
use crate::data::{split_dataset, Dataset};
use crate::error::Result;
use crate::model::AtlasEncoder;
use crate::probe::{probe_encoder, ProbeReport};
use crate::train::{pretrain, EpochMetrics, PretrainOptions};

/// Synthetic-data config for `pipeline` with `n` charts of `d` units.
/// The world and the split are seeded with `seed` as well.
pub fn desk_config(pipeline: Pipeline, n: usize, d: usize, seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::for_pipeline(pipeline);
    cfg.atlas.n_charts = n;
    cfg.atlas.chart_dim = d;
    cfg.seed = seed;
    cfg.world.seed = seed;
    cfg.epochs = epochs;
    cfg
}

/// The pretrain, probe-train and probe-test splits of the config's world.
pub fn synthetic_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let data = cfg.world.generate()?;
    split_dataset(&data, cfg.split, cfg.seed)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub report: ProbeReport,
    pub checksum: String,
}

impl RunSummary {
    pub fn final_entropy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.entropy)
    }
}

/// Pretrains on the pretrain split and probes the result.
pub fn pretrain_and_probe(cfg: &RunConfig, splits: &(Dataset, Dataset, Dataset), out_dir: Option<&Path>) -> Result<RunSummary> {
    let options = PretrainOptions {
        out_dir: out_dir.map(Path::to_path_buf),
        resume: false,
    };
    let outcome = pretrain(cfg, &splits.0, &options)?;
    let encoder = &outcome.checkpoint.encoder;
    let label = format!("{}-n{}-d{}-seed{}", cfg.pipeline, cfg.atlas.n_charts, cfg.atlas.chart_dim, cfg.seed);
    let report = probe_encoder(encoder, &splits.1, &splits.2, &cfg.probe, cfg.seed, &label)?;
    Ok(RunSummary {
        metrics: outcome.metrics,
        report,
        checksum: encoder.checksum(),
    })
}

/// Probe of a randomly initialized, untrained encoder.
pub fn random_init_probe(cfg: &RunConfig, splits: &(Dataset, Dataset, Dataset)) -> Result<ProbeReport> {
    let encoder = AtlasEncoder::new(cfg)?;
    let label = format!("random-init-n{}-d{}-seed{}", cfg.atlas.n_charts, cfg.atlas.chart_dim, cfg.seed);
    probe_encoder(&encoder, &splits.1, &splits.2, &cfg.probe, cfg.seed, &label)
}
