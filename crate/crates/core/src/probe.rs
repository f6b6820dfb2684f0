//! Linear probes on frozen encoder features.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use ua_nn::activation::softmax_rows;
use ua_nn::{Adam, AdamConfig, Linear, ParamSet};

use crate::config::FusionMode;
use crate::data::{rng_from, stack_images, Category, Dataset, LabelSchema};
use crate::error::{Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::model::checkpoint::Checkpoint;
use crate::model::AtlasEncoder;

/// Probe optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 3e-3,
            batch_size: 64,
        }
    }
}

impl ProbeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs < 1 {
            v.push("epochs must be ≥ 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push("learning_rate must be a positive finite number".to_string());
        }
        if self.batch_size < 1 {
            v.push("batch_size must be ≥ 1".to_string());
        }
        v
    }

    pub fn write_kv(&self, prefix: &str, w: &mut KvWriter) {
        w.put(&format!("{prefix}.epochs"), self.epochs)
            .put(&format!("{prefix}.learning_rate"), self.learning_rate)
            .put(&format!("{prefix}.batch_size"), self.batch_size);
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader) -> Result<()> {
        r.take(&format!("{prefix}.epochs"), &mut self.epochs)?;
        r.take(&format!("{prefix}.learning_rate"), &mut self.learning_rate)?;
        r.take(&format!("{prefix}.batch_size"), &mut self.batch_size)?;
        Ok(())
    }
}

const EXTRACT_CHUNK: usize = 128;

/// One-hot fused features (`frames x d`) of every frame of `data`, in order.
pub fn extract_features(encoder: &AtlasEncoder, data: &Dataset) -> Result<Array2<f32>> {
    let frames: Vec<_> = data.frames().map(|f| &f.image).collect();
    if frames.is_empty() {
        return Err(Error::InsufficientData("no frames to extract features from".into()));
    }
    let mut out = Array2::zeros((frames.len(), encoder.chart_dim()));
    for (i, chunk) in frames.chunks(EXTRACT_CHUNK).enumerate() {
        let (batch, _) = encoder.forward(&stack_images(chunk), FusionMode::OneHot)?;
        let start = i * EXTRACT_CHUNK;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&batch.fused);
    }
    Ok(out)
}

pub fn extract_features_from_checkpoint(path: &Path, data: &Dataset) -> Result<Array2<f32>> {
    extract_features(&Checkpoint::load(path)?.encoder, data)
}

/// Labels of one variable for every frame of `data`, in order.
pub fn labels_of(data: &Dataset, variable: &str) -> Result<Vec<i64>> {
    data.frames()
        .map(|f| {
            f.labels
                .get(variable)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("frame has no label `{variable}`")))
        })
        .collect()
}

/// Per-feature standardization fitted on the probe-train features.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Array1<f32>,
    pub scale: Array1<f32>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f32>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 1e-6 { 1.0 / s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        (x - &self.mean) * &self.scale
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub standardizer: Standardizer,
    pub layer: Linear,
}

impl LinearProbe {
    pub fn logits(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.layer.apply(&self.standardizer.apply(features))?)
    }

    pub fn predict(&self, features: &Array2<f32>) -> Result<Vec<i64>> {
        let logits = self.logits(features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| crate::model::argmax(r.iter().copied()) as i64)
            .collect())
    }
}

/// Trains a linear classifier over `num_classes` classes by minibatch
/// cross-entropy descent. Fails when the labels hold a single class.
pub fn train_probe(
    features: &Array2<f32>,
    labels: &[i64],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    let n = features.nrows();
    if n != labels.len() || n == 0 {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if labels.iter().any(|&l| l < 0 || l as usize >= num_classes) {
        return Err(Error::Dataset(format!("labels must lie in 0..{num_classes}")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::InsufficientData(format!("only class {first} present")));
    }
    let standardizer = Standardizer::fit(features);
    let x = standardizer.apply(features);
    let mut layer = Linear::new(seed, "probe", x.ncols(), num_classes, true);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate as f32));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed, 0x5052_4f42);
    let batch = cfg.batch_size.min(n);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let (logits, cache) = layer.forward(&xb)?;
            let mut grad = softmax_rows(&logits);
            for (row, &i) in chunk.iter().enumerate() {
                grad[[row, labels[i] as usize]] -= 1.0;
            }
            grad /= chunk.len() as f32;
            layer.backward(&cache, &grad);
            adam.step(layer.named_params_mut());
        }
    }
    Ok(LinearProbe { standardizer, layer })
}

/// `confusion[true][pred]` counts.
pub fn confusion(truth: &[i64], pred: &[i64], num_classes: usize) -> Array2<u64> {
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&t, &p) in truth.iter().zip(pred) {
        m[[t as usize, p as usize]] += 1;
    }
    m
}

pub fn accuracy(truth: &[i64], pred: &[i64]) -> f64 {
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    hits as f64 / truth.len().max(1) as f64
}

/// F1 averaged over every class that occurs in `truth` or `pred`.
pub fn macro_f1(truth: &[i64], pred: &[i64]) -> f64 {
    let mut classes: Vec<i64> = truth.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    total / classes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub name: String,
    pub category: Category,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: String,
    pub seed: u64,
    pub variables: Vec<VariableScore>,
    /// Unweighted mean over the member variables of each category present.
    pub categories: BTreeMap<Category, Score>,
    /// Unweighted mean over the categories.
    pub overall: Score,
    pub warnings: Vec<String>,
}

impl ProbeReport {
    /// Builds category and overall means from per-variable scores.
    pub fn from_scores(checkpoint: &str, seed: u64, variables: Vec<VariableScore>, warnings: Vec<String>) -> Self {
        let mut groups: BTreeMap<Category, Vec<&VariableScore>> = BTreeMap::new();
        for v in &variables {
            groups.entry(v.category).or_default().push(v);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let categories: BTreeMap<Category, Score> = groups
            .into_iter()
            .map(|(c, vs)| {
                let acc: Vec<f64> = vs.iter().map(|v| v.accuracy).collect();
                let f1: Vec<f64> = vs.iter().map(|v| v.f1).collect();
                (
                    c,
                    Score {
                        accuracy: mean(&acc),
                        f1: mean(&f1),
                    },
                )
            })
            .collect();
        let accs: Vec<f64> = categories.values().map(|s| s.accuracy).collect();
        let f1s: Vec<f64> = categories.values().map(|s| s.f1).collect();
        Self {
            checkpoint: checkpoint.to_string(),
            seed,
            variables,
            overall: Score {
                accuracy: mean(&accs),
                f1: mean(&f1s),
            },
            categories,
            warnings,
        }
    }
}

impl PartialOrd for Category {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Category {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

fn name_salt(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Trains one probe per schema variable on `train` and scores it on `test`.
pub fn evaluate(
    schema: &LabelSchema,
    train: (&Array2<f32>, &Dataset),
    test: (&Array2<f32>, &Dataset),
    cfg: &ProbeConfig,
    seed: u64,
    checkpoint: &str,
) -> Result<ProbeReport> {
    if test.0.nrows() == 0 {
        return Err(Error::InsufficientData("probe-test split is empty".into()));
    }
    let mut scores = Vec::new();
    let mut warnings = Vec::new();
    for var in &schema.variables {
        let y_train = labels_of(train.1, &var.name)?;
        let y_test = labels_of(test.1, &var.name)?;
        let probe = match train_probe(train.0, &y_train, var.num_classes, cfg, seed ^ name_salt(&var.name)) {
            Ok(p) => p,
            Err(Error::InsufficientData(why)) => {
                let msg = format!("skipped `{}`: {why}", var.name);
                warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            Err(e) => return Err(e),
        };
        let pred = probe.predict(test.0)?;
        scores.push(VariableScore {
            name: var.name.clone(),
            category: var.category,
            accuracy: accuracy(&y_test, &pred),
            f1: macro_f1(&y_test, &pred),
        });
    }
    Ok(ProbeReport::from_scores(checkpoint, seed, scores, warnings))
}

/// Extracts features for both splits with `encoder` and evaluates.
pub fn probe_encoder(
    encoder: &AtlasEncoder,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
    checkpoint: &str,
) -> Result<ProbeReport> {
    if train.schema != test.schema {
        return Err(Error::Dataset("probe-train and probe-test schemas differ".into()));
    }
    let ftrain = extract_features(encoder, train)?;
    let ftest = extract_features(encoder, test)?;
    evaluate(&train.schema, (&ftrain, train), (&ftest, test), cfg, seed, checkpoint)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}
