//! Pretraining: one optimizer step per batch for every pipeline, the epoch
//! loop with per-epoch checkpoints and a JSON-lines metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use ua_nn::{Adam, AdamConfig, ParamSet};

use crate::atlasmath::entropy;
use crate::config::{validate_model, FusionMode, Pipeline, RunConfig};
use crate::data::augment::AugmentConfig;
use crate::data::{rng_from, stack_images, Dataset, PairIndex};
use crate::error::{Error, Result};
use crate::losses::{dim_losses, loss_ua, membership_regularizer, simclr_ua_step, tau_schedule, LossBreakdown};
use crate::model::checkpoint::Checkpoint;
use crate::model::{fuse, fuse_backward, AtlasEncoder};

pub const CHECKPOINT_FILE: &str = "checkpoint.tar";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HISTOGRAM_BINS: usize = 10;

/// Per-epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Mean membership entropy over every frame seen in the epoch.
    pub entropy: f64,
    /// Counts of the largest membership probability in ten equal bins of
    /// `[0, 1]`.
    pub max_prob_histogram: [u64; HISTOGRAM_BINS],
    pub seconds: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub l_gl: f64,
    pub l_ll: f64,
    pub l_q: f64,
    pub tau: f64,
    pub total: f64,
    pub entropy: f64,
    pub seconds: f64,
}

impl From<&EpochMetrics> for MetricsLine {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            l_gl: m.losses.l_gl,
            l_ll: m.losses.l_ll,
            l_q: m.losses.l_q,
            tau: m.losses.tau,
            total: m.losses.total,
            entropy: m.entropy,
            seconds: m.seconds,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Model, optimizer and progress of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub encoder: AtlasEncoder,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Membership of every frame in the step (`2B x n`).
    pub membership: Array2<f32>,
}

fn to64<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ndarray::Array<f64, D> {
    a.mapv(f64::from)
}

fn to32<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f32, D> {
    a.mapv(|v| v as f32)
}

fn all_finite<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> bool {
    a.iter().all(|v| v.is_finite())
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            encoder: AtlasEncoder::new(config)?,
            optimizer: Adam::new(AdamConfig::with_lr(config.learning_rate as f32)),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            encoder: ck.encoder,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.epoch, self.encoder.clone(), self.optimizer.clone())
    }

    fn non_finite(&self, batch_index: usize) -> Error {
        Error::NonFiniteLoss {
            step: self.optimizer.step + 1,
            batch_index,
            dump: None,
        }
    }

    /// Global target the spatiotemporal objective contrasts against local
    /// features of the next frame.
    fn target_mode(&self) -> FusionMode {
        match self.config.pipeline {
            Pipeline::NoDilationBaseline => FusionMode::OneHot,
            _ => self.config.atlas.fusion_mode,
        }
    }

    /// One spatiotemporal step on a batch of temporally adjacent frames.
    pub fn pretrain_step(&mut self, x_t: &Array4<f32>, x_next: &Array4<f32>, tau: f64, batch_index: usize) -> Result<StepOutput> {
        let pipeline = self.config.pipeline;
        if !pipeline.is_spatiotemporal() {
            return Err(Error::Precondition(format!("pretrain_step does not apply to {pipeline}")));
        }
        if x_t.dim() != x_next.dim() {
            return Err(Error::InputShape {
                expected: x_t.shape().to_vec(),
                actual: x_next.shape().to_vec(),
            });
        }
        let b = x_t.dim().0;
        let x = concatenate(Axis(0), &[x_t.view(), x_next.view()]).expect("same shapes");
        let (out, cache) = self.encoder.forward_train(&x)?;
        let emb = out.training_embeddings();
        if !all_finite(emb) || !all_finite(&out.membership) || !all_finite(&out.local) {
            return Err(self.non_finite(batch_index));
        }
        let mode = self.target_mode();
        let emb_t = emb.slice(s![..b, .., ..]).to_owned();
        let q_t = out.membership.slice(s![..b, ..]).to_owned();
        let target = fuse(&emb_t, &q_t, mode);

        let local_t = to64(&out.local.slice(s![..b, .., .., ..]).to_owned());
        let local_next = to64(&out.local.slice(s![b.., .., .., ..]).to_owned());
        let scorers = self.encoder.scorers.as_ref().expect("spatiotemporal pipelines have scorers");
        let g = dim_losses(&to64(&target), &local_t, &local_next, &scorers.w_g64(), &scorers.w_h64())?;

        let q64 = to64(&out.membership);
        let regularizer = match pipeline {
            Pipeline::StDimBaseline => None,
            Pipeline::MmdUniformBaseline => Some(1.0),
            _ => Some(-1.0),
        };
        let (l_q, dq_t, dq_n) = match regularizer {
            Some(sign) => {
                let (v, a, c) =
                    membership_regularizer(&q64.slice(s![..b, ..]).to_owned(), &q64.slice(s![b.., ..]).to_owned(), sign)?;
                (v, Some(a), Some(c))
            }
            None => (0.0, None, None),
        };
        let losses = loss_ua(g.l_gl, g.l_ll, l_q, tau);
        if !losses.is_finite() {
            return Err(self.non_finite(batch_index));
        }

        let (d_emb_t, d_member_t) = fuse_backward(&emb_t, &q_t, mode, &to32(&g.d_target));
        let (_, n, d) = emb.dim();
        let mut d_emb = Array3::<f32>::zeros((2 * b, n, d));
        d_emb.slice_mut(s![..b, .., ..]).assign(&d_emb_t);
        let d_membership = match (dq_t, dq_n) {
            (Some(dq_t), Some(dq_n)) => {
                let mut dm = Array2::<f32>::zeros((2 * b, n));
                dm.slice_mut(s![..b, ..]).assign(&(&d_member_t + &to32(&(dq_t * tau))));
                dm.slice_mut(s![b.., ..]).assign(&to32(&(dq_n * tau)));
                Some(dm)
            }
            _ => None,
        };
        let d_local = concatenate(Axis(0), &[to32(&g.d_local_t).view(), to32(&g.d_local_next).view()]).expect("same shapes");
        if let Some(sc) = self.encoder.scorers.as_mut() {
            sc.w_g.grad += &to32(&g.d_w_g);
            sc.w_h.grad += &to32(&g.d_w_h);
        }
        self.encoder.backward(&cache, &d_emb, d_membership.as_ref(), Some(&d_local));
        self.optimizer.step(self.encoder.named_params_mut());
        Ok(StepOutput {
            losses,
            membership: out.membership,
        })
    }

    /// One augmentation-contrastive step on two views of the same images.
    pub fn simclr_step(&mut self, view1: &Array4<f32>, view2: &Array4<f32>, tau: f64, batch_index: usize) -> Result<StepOutput> {
        if view1.dim() != view2.dim() {
            return Err(Error::InputShape {
                expected: view1.shape().to_vec(),
                actual: view2.shape().to_vec(),
            });
        }
        let b = view1.dim().0;
        let x = concatenate(Axis(0), &[view1.view(), view2.view()]).expect("same shapes");
        let (out, cache) = self.encoder.forward_train(&x)?;
        let emb = out.training_embeddings();
        if !all_finite(emb) || !all_finite(&out.membership) {
            return Err(self.non_finite(batch_index));
        }
        let e64 = to64(emb);
        let q64 = to64(&out.membership);
        let (losses, g) = simclr_ua_step(
            &e64.slice(s![..b, .., ..]).to_owned(),
            &e64.slice(s![b.., .., ..]).to_owned(),
            &q64.slice(s![..b, ..]).to_owned(),
            &q64.slice(s![b.., ..]).to_owned(),
            self.config.temperature,
            tau,
        )?;
        if !losses.is_finite() {
            return Err(self.non_finite(batch_index));
        }
        let d_emb = concatenate(Axis(0), &[to32(&g.d_charts1).view(), to32(&g.d_charts2).view()]).expect("same shapes");
        let d_q = concatenate(Axis(0), &[to32(&g.d_q1).view(), to32(&g.d_q2).view()]).expect("same shapes");
        self.encoder.backward(&cache, &d_emb, Some(&d_q), None);
        self.optimizer.step(self.encoder.named_params_mut());
        Ok(StepOutput {
            losses,
            membership: out.membership,
        })
    }
}

/// Frame positions `(episode, step)` shuffled for one epoch and cut into
/// batches; the last partial batch is dropped.
pub fn frame_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<PairIndex>>> {
    use rand::seq::SliceRandom;
    let mut frames: Vec<PairIndex> = data
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.frames.len()).map(move |step| PairIndex { episode: e, step }))
        .collect();
    if batch_size == 0 || batch_size > frames.len() {
        return Err(Error::InsufficientData(format!(
            "batch size {batch_size} needs at least that many frames, have {}",
            frames.len()
        )));
    }
    frames.shuffle(&mut rng_from(seed, 0x4652_4d00 ^ epoch.rotate_left(32)));
    Ok(frames.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

fn augmented_views(data: &Dataset, batch: &[PairIndex], cfg: &AugmentConfig, seed: u64) -> (Array4<f32>, Array4<f32>) {
    let mut rng = rng_from(seed, 0x5649_4557);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for p in batch {
        let img = &data.episodes[p.episode].frames[p.step].image;
        a.push(cfg.view(img, &mut rng));
        b.push(cfg.view(img, &mut rng));
    }
    let ra: Vec<_> = a.iter().collect();
    let rb: Vec<_> = b.iter().collect();
    (stack_images(&ra), stack_images(&rb))
}

#[derive(Debug, Default)]
struct Accumulator {
    steps: usize,
    sums: [f64; 5],
    entropy_sum: f64,
    frames: usize,
    histogram: [u64; HISTOGRAM_BINS],
}

impl Accumulator {
    fn add(&mut self, out: &StepOutput) -> Result<()> {
        let l = &out.losses;
        for (s, v) in self.sums.iter_mut().zip([l.l_gl, l.l_ll, l.l_q, l.tau, l.total]) {
            *s += v;
        }
        self.steps += 1;
        for row in out.membership.rows() {
            let q: Vec<f64> = row.iter().map(|v| f64::from(*v)).collect();
            self.entropy_sum += entropy(&q)?;
            let max = q.iter().cloned().fold(0.0, f64::max);
            let bin = ((max * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            self.histogram[bin] += 1;
            self.frames += 1;
        }
        Ok(())
    }

    fn finish(&self, epoch: usize, seconds: f64) -> EpochMetrics {
        let k = self.steps.max(1) as f64;
        let [l_gl, l_ll, l_q, tau, total] = self.sums.map(|s| s / k);
        EpochMetrics {
            epoch,
            losses: LossBreakdown {
                l_gl,
                l_ll,
                l_q,
                tau,
                total,
            },
            entropy: self.entropy_sum / self.frames.max(1) as f64,
            max_prob_histogram: self.histogram,
            seconds,
        }
    }
}

/// Where a run writes its checkpoint and metrics, and whether to resume.
#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.tar` when it exists.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&serde_json::to_string(&MetricsLine::from(m))?);
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn dump_batch(dir: &Path, step: u64, batch_index: usize, batch: &[PairIndex], data: &Dataset) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: u64,
        batch_index: usize,
        episodes: Vec<usize>,
        steps: Vec<usize>,
        shape: &'a [usize],
        /// Concatenated `x_t` then `x_next` pixels, row-major.
        pixels: Vec<f32>,
    }
    let (t, n) = data.pair_tensors(batch);
    let pixels: Vec<f32> = t.iter().chain(n.iter()).copied().collect();
    let dump = Dump {
        step,
        batch_index,
        episodes: batch.iter().map(|p| data.episodes[p.episode].id).collect(),
        steps: batch.iter().map(|p| p.step).collect(),
        shape: t.shape(),
        pixels,
    };
    let path = dir.join(format!("nonfinite_step{step}_batch{batch_index}.json"));
    fs::write(&path, serde_json::to_vec(&dump)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Runs `config.epochs` epochs over `data` (the pretrain split).
pub fn pretrain(config: &RunConfig, data: &Dataset, options: &PretrainOptions) -> Result<PretrainOutcome> {
    let problems = validate_model(config);
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ck_path = options.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let metrics_path = options.out_dir.as_ref().map(|d| d.join(METRICS_FILE));

    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut state = match (&ck_path, options.resume) {
        (Some(p), true) if p.exists() => {
            let ck = Checkpoint::load_for(p, &config.atlas)?;
            if let Some(mp) = metrics_path.as_ref().filter(|p| p.exists()) {
                metrics = read_metrics(mp)?
                    .into_iter()
                    .take(ck.epoch)
                    .map(|l| EpochMetrics {
                        epoch: l.epoch,
                        losses: LossBreakdown {
                            l_gl: l.l_gl,
                            l_ll: l.l_ll,
                            l_q: l.l_q,
                            tau: l.tau,
                            total: l.total,
                        },
                        entropy: l.entropy,
                        max_prob_histogram: [0; HISTOGRAM_BINS],
                        seconds: l.seconds,
                    })
                    .collect();
            }
            info!("resuming from epoch {}", ck.epoch);
            let mut st = TrainState::from_checkpoint(ck);
            st.config = config.clone();
            st
        }
        _ => TrainState::new(config)?,
    };

    let pipeline = config.pipeline;
    if pipeline.is_spatiotemporal() {
        crate::data::pair_batches(&data.episodes, config.batch_size, config.seed, 0)?;
    } else {
        frame_batches(data, config.batch_size, config.seed, 0)?;
    }

    let schedule_span = config.epochs.saturating_sub(1).max(1);
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let tau = tau_schedule(epoch.min(schedule_span), schedule_span, config.tau_final, config.tau_linear_scaling)?;
        let batches = if pipeline.is_spatiotemporal() {
            crate::data::pair_batches(&data.episodes, config.batch_size, config.seed, epoch as u64)?
        } else {
            frame_batches(data, config.batch_size, config.seed, epoch as u64)?
        };
        let mut acc = Accumulator::default();
        for (i, batch) in batches.iter().enumerate() {
            let result = if pipeline.is_spatiotemporal() {
                let (x_t, x_next) = data.pair_tensors(batch);
                state.pretrain_step(&x_t, &x_next, tau, i)
            } else {
                let seed = config.seed ^ ((epoch as u64) << 32) ^ i as u64;
                let (v1, v2) = augmented_views(data, batch, &config.augment, seed);
                state.simclr_step(&v1, &v2, tau, i)
            };
            match result {
                Ok(out) => acc.add(&out)?,
                Err(Error::NonFiniteLoss { step, batch_index, .. }) => {
                    let dump = match &options.out_dir {
                        Some(dir) => Some(dump_batch(dir, step, batch_index, batch, data)?),
                        None => None,
                    };
                    warn!("non-finite loss at step {step}, epoch {epoch}, batch {batch_index}");
                    return Err(Error::NonFiniteLoss { step, batch_index, dump });
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
        let m = acc.finish(epoch, started.elapsed().as_secs_f64());
        info!(
            "epoch {epoch}: total {:.4} (gl {:.4}, ll {:.4}, q {:.4}, tau {:.3}) entropy {:.4} [{:.1}s]",
            m.losses.total, m.losses.l_gl, m.losses.l_ll, m.losses.l_q, m.losses.tau, m.entropy, m.seconds
        );
        metrics.push(m);
        if let (Some(ck), Some(mp)) = (&ck_path, &metrics_path) {
            state.checkpoint().save(ck)?;
            write_metrics(mp, &metrics)?;
        }
    }
    let checkpoint = state.checkpoint();
    if let (Some(ck), Some(mp)) = (&ck_path, &metrics_path) {
        if !ck.exists() {
            checkpoint.save(ck)?;
            write_metrics(mp, &metrics)?;
        }
    }
    Ok(PretrainOutcome { checkpoint, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::SyntheticWorldSpec;

    fn small_config(pipeline: Pipeline, n: usize, d: usize) -> RunConfig {
        let mut cfg = RunConfig::for_pipeline(pipeline);
        cfg.atlas.n_charts = n;
        cfg.atlas.chart_dim = d;
        cfg.model.conv_widths = vec![4, 8, 8];
        cfg.batch_size = 4;
        cfg.epochs = 1;
        cfg.world = SyntheticWorldSpec {
            episodes: 2,
            episode_length: 5,
            ..Default::default()
        };
        cfg
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut cfg = small_config(Pipeline::DimUa, 2, 4);
        cfg.epochs = 0;
        let data = cfg.world.generate().unwrap();
        let out = pretrain(&cfg, &data, &PretrainOptions::default()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint.epoch, 0);
        assert_eq!(out.checkpoint.encoder.checksum(), AtlasEncoder::new(&cfg).unwrap().checksum());
    }

    #[test]
    fn tau_zero_ignores_membership() {
        let cfg = small_config(Pipeline::DimUa, 3, 4);
        let data = cfg.world.generate().unwrap();
        let batch: Vec<PairIndex> = (0..4).map(|s| PairIndex { episode: 0, step: s }).collect();
        let (x_t, x_n) = data.pair_tensors(&batch);
        let mut a = TrainState::new(&cfg).unwrap();
        let mut b = a.clone();
        for (_, p) in b.encoder.membership.as_mut().unwrap().named_params_mut() {
            p.value.mapv_inplace(|v| v * 3.0 + 0.1);
        }
        let la = a.pretrain_step(&x_t, &x_n, 0.0, 0).unwrap().losses;
        let lb = b.pretrain_step(&x_t, &x_n, 0.0, 0).unwrap().losses;
        assert_eq!(la.total, lb.total);
    }

    #[test]
    fn metrics_and_checkpoint_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(Pipeline::MmdUniformBaseline, 2, 4);
        let data = cfg.world.generate().unwrap();
        let opts = PretrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: false,
        };
        let out = pretrain(&cfg, &data, &opts).unwrap();
        assert_eq!(out.metrics.len(), 1);
        let lines = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.len(), 1);
        let raw = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["entropy", "epoch", "l_gl", "l_ll", "l_q", "seconds", "tau", "total"]);
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.encoder.checksum(), out.checkpoint.encoder.checksum());
    }
}
