//! Annotated frames, episodes, temporally adjacent pair batching and
//! episode-level splits.

pub mod augment;
pub mod store;
pub mod world;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::text_enum;
use crate::error::{Error, Result};

text_enum!(
    /// Grouping of state variables used when averaging probe scores.
    Category {
        AgentLoc => "agent_loc",
        SmallLoc => "small_loc",
        OtherLoc => "other_loc",
        Misc => "misc",
        ScoreDisplay => "score_display",
    }
);

/// One probed state variable; values lie in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub category: Category,
    pub num_classes: usize,
}

/// Label schema shared by every frame of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSchema {
    pub variables: Vec<VariableSpec>,
}

impl LabelSchema {
    pub fn get(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Checks that `labels` has exactly the schema's variables, in range.
    pub fn check(&self, labels: &BTreeMap<String, i64>) -> Result<()> {
        if labels.len() != self.variables.len() {
            return Err(Error::Dataset(format!(
                "frame has {} labels, schema declares {}",
                labels.len(),
                self.variables.len()
            )));
        }
        for v in &self.variables {
            let value = labels
                .get(&v.name)
                .ok_or_else(|| Error::Dataset(format!("frame is missing label `{}`", v.name)))?;
            if *value < 0 || *value as usize >= v.num_classes {
                return Err(Error::Dataset(format!(
                    "label `{}` = {value} is outside 0..{}",
                    v.name, v.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// An image (`H x W x channels`, values in `[0, 1]`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame {
    pub image: Array3<f32>,
    pub labels: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub frames: Vec<AnnotatedFrame>,
}

/// Two consecutive frames of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePair {
    pub x_t: AnnotatedFrame,
    pub x_next: AnnotatedFrame,
    pub episode_id: usize,
    pub step: usize,
}

/// Location of a pair inside a [`Dataset`]: frames `step` and `step + 1` of
/// the episode at position `episode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairIndex {
    pub episode: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(schema: LabelSchema, episodes: Vec<Episode>) -> Result<Self> {
        let mut shape = None;
        for ep in &episodes {
            for f in &ep.frames {
                schema.check(&f.labels)?;
                match shape {
                    None => shape = Some(f.image.dim()),
                    Some(s) if s != f.image.dim() => {
                        return Err(Error::Dataset(format!(
                            "episode {} has frame shape {:?}, expected {:?}",
                            ep.id,
                            f.image.dim(),
                            s
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { schema, episodes })
    }

    pub fn num_frames(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    /// `(H, W, channels)` of the frames, if any.
    pub fn frame_shape(&self) -> Option<(usize, usize, usize)> {
        self.frames().next().map(|f| f.image.dim())
    }

    pub fn frames(&self) -> impl Iterator<Item = &AnnotatedFrame> {
        self.episodes.iter().flat_map(|e| e.frames.iter())
    }

    pub fn pair(&self, idx: PairIndex) -> EpisodePair {
        let ep = &self.episodes[idx.episode];
        EpisodePair {
            x_t: ep.frames[idx.step].clone(),
            x_next: ep.frames[idx.step + 1].clone(),
            episode_id: ep.id,
            step: idx.step,
        }
    }

    /// Stacks the `x_t` and `x_next` images of a batch.
    pub fn pair_tensors(&self, batch: &[PairIndex]) -> (Array4<f32>, Array4<f32>) {
        let t: Vec<&Array3<f32>> = batch
            .iter()
            .map(|p| &self.episodes[p.episode].frames[p.step].image)
            .collect();
        let n: Vec<&Array3<f32>> = batch
            .iter()
            .map(|p| &self.episodes[p.episode].frames[p.step + 1].image)
            .collect();
        (stack_images(&t), stack_images(&n))
    }

    pub fn subset(&self, episode_positions: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            episodes: episode_positions.iter().map(|&i| self.episodes[i].clone()).collect(),
        }
    }
}

/// Stacks equally shaped images into a `B x H x W x C` batch.
pub fn stack_images(images: &[&Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("images share one shape")
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_add(0x632b_e59b_d9b4_e019).rotate_left(17)
}

/// Generator for a seed and a stream label, so that independent uses of one
/// run seed do not share random draws.
pub fn rng_from(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// Every adjacent pair of `episodes` shuffled for one epoch and cut into
/// batches of `batch_size`; the last partial batch is dropped.
pub fn pair_batches(episodes: &[Episode], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<PairIndex>>> {
    if let Some(short) = episodes.iter().find(|e| e.frames.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "episode {} has {} frames; pairs need at least 2",
            short.id,
            short.frames.len()
        )));
    }
    let mut pairs: Vec<PairIndex> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.frames.len() - 1).map(move |step| PairIndex { episode: e, step }))
        .collect();
    if batch_size == 0 || batch_size > pairs.len() {
        return Err(Error::InsufficientData(format!(
            "batch size {batch_size} needs at least that many pairs, have {}",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut rng_from(seed, 0x5041_4952 ^ epoch.rotate_left(32)));
    Ok(pairs.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Episode positions assigned to the pretrain, probe-train and probe-test
/// splits. Counts for the first two are rounded; the third takes the rest.
pub fn split(num_episodes: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let a = (ratios[0] * num_episodes as f64).round() as usize;
    let b = (ratios[1] * num_episodes as f64).round() as usize;
    if a == 0 || b == 0 || a + b >= num_episodes {
        return Err(Error::InsufficientData(format!(
            "{num_episodes} episodes cannot fill three non-empty splits with ratios {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..num_episodes).collect();
    order.shuffle(&mut rng_from(seed, 0x5350_4c49));
    let mut splits = [order[..a].to_vec(), order[a..a + b].to_vec(), order[a + b..].to_vec()];
    for s in &mut splits {
        s.sort_unstable();
    }
    Ok(splits)
}

/// Convenience wrapper returning the three datasets.
pub fn split_dataset(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split(data.episodes.len(), ratios, seed)?;
    Ok((data.subset(&a), data.subset(&b), data.subset(&c)))
}
