//! Consolidated property harness.
//!
//! Every property is a named check that tries a number of instances and
//! reports how many failed together with the first counterexample. The quick
//! subset needs no training; the full subset adds desk-scale runs on the
//! synthetic world. Callers (the CLI) can append their own properties and run
//! them through the same harness.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use ua_nn::ParamSet;

use crate::atlasmath::{
    check_prop1, check_prop2, entropy, minkowski_sum, mmd_delta_sq, PointSet,
};
use crate::config::{validate_config, FusionMode, MappingMode, ModelShape, Pipeline, RunConfig};
use crate::data::world::{SyntheticWorldSpec, DIGITS, DIGIT_LEVEL, SPRITE_LEVELS, SPRITE_NAMES};
use crate::data::{pair_batches, rng_from, split, split_dataset, Dataset};
use crate::experiment::{desk_config, synthetic_splits};
use crate::losses::{
    dim_losses, infonce, infonce_with_grad, loss_q, loss_ua, membership_regularizer, mmd_uniform_baseline_loss,
    score_global_local, score_local_local, tau_schedule,
};
use crate::model::{fuse, AtlasEncoder};
use crate::probe::{accuracy, confusion, evaluate, extract_features, macro_f1, probe_encoder, ProbeConfig};
use crate::train::{pretrain, EpochMetrics, PretrainOptions, TrainState};

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// First failing instance, serialized.
    pub counterexample: Option<String>,
    pub seconds: f64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }
}

/// Counts instances and keeps the first counterexample.
#[derive(Debug, Default)]
pub struct Tally {
    instances: usize,
    failures: usize,
    counterexample: Option<String>,
}

impl Tally {
    pub fn check(&mut self, ok: bool, detail: impl FnOnce() -> serde_json::Value) {
        self.instances += 1;
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(detail().to_string());
            }
        }
    }

    /// Records an instance that could not be evaluated.
    pub fn error(&mut self, what: impl std::fmt::Display) {
        let msg = what.to_string();
        self.check(false, || json!({ "error": msg }));
    }

    pub fn finish(self, name: &str, started: Instant) -> PropertyResult {
        PropertyResult {
            name: name.to_string(),
            instances: self.instances,
            failures: self.failures,
            counterexample: self.counterexample,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// A named check. `training` marks the properties that only run in full mode.
pub struct Property {
    pub name: String,
    pub training: bool,
    pub check: Box<dyn Fn(&mut Tally) + Send + Sync>,
}

impl Property {
    pub fn new(name: &str, training: bool, check: impl Fn(&mut Tally) + Send + Sync + 'static) -> Self {
        Self {
            name: name.to_string(),
            training,
            check: Box::new(check),
        }
    }

    pub fn run(&self) -> PropertyResult {
        let started = Instant::now();
        let mut tally = Tally::default();
        (self.check)(&mut tally);
        tally.finish(&self.name, started)
    }
}

/// One line of the coverage checklist: a module's stated invariant and the
/// properties that exercise it.
#[derive(Debug, Clone, Copy)]
pub struct Coverage {
    pub module: &'static str,
    pub invariant: &'static str,
    pub properties: &'static [&'static str],
}

pub const COVERAGE: &[Coverage] = &[
    Coverage {
        module: "core",
        invariant: "config round-trips through the text format and validates identically",
        properties: &["config_round_trip"],
    },
    Coverage {
        module: "core",
        invariant: "LossBreakdown total recomputed from parts matches to 1e-6",
        properties: &["loss_breakdown_total"],
    },
    Coverage {
        module: "atlasmath",
        invariant: "mmd is zero iff uniform and maximal (1 - 1/n) at one-hot",
        properties: &["mmd_zero_iff_uniform"],
    },
    Coverage {
        module: "atlasmath",
        invariant: "entropy and mmd are permutation invariant",
        properties: &["permutation_invariance"],
    },
    Coverage {
        module: "atlasmath",
        invariant: "minkowski_sum is commutative and associative",
        properties: &["minkowski_algebra"],
    },
    Coverage {
        module: "atlasmath",
        invariant: "check_prop1 holds over the (n, d) grid",
        properties: &["prop1_grid"],
    },
    Coverage {
        module: "atlasmath",
        invariant: "check_prop2 holds on convex samples over the (n, d) grid",
        properties: &["prop2_grid", "prop2_counterexample_detected"],
    },
    Coverage {
        module: "model",
        invariant: "membership is a distribution for every input",
        properties: &["membership_is_distribution"],
    },
    Coverage {
        module: "model",
        invariant: "mean fusion equals the row mean of chart embeddings",
        properties: &["mean_fusion_is_row_mean"],
    },
    Coverage {
        module: "model",
        invariant: "n = 1 forward and loss pipeline equals the single-head baseline",
        properties: &["single_chart_reduction"],
    },
    Coverage {
        module: "model",
        invariant: "one-hot fusion is invariant to increasing transforms of the logits",
        properties: &["one_hot_argmax_invariance"],
    },
    Coverage {
        module: "losses",
        invariant: "analytic gradients match central differences",
        properties: &[
            "gradcheck_loss_q",
            "gradcheck_infonce",
            "gradcheck_global_local",
            "gradcheck_sign_canary",
        ],
    },
    Coverage {
        module: "losses",
        invariant: "loss_q is bounded and minimal only at one-hot inputs",
        properties: &["loss_q_bounds"],
    },
    Coverage {
        module: "losses",
        invariant: "infonce is nonnegative and ln B exactly for constant rows",
        properties: &["infonce_bounds"],
    },
    Coverage {
        module: "losses",
        invariant: "n = 1 step losses equal the single-head baseline step",
        properties: &["single_chart_reduction"],
    },
    Coverage {
        module: "losses",
        invariant: "tau schedule reaches tau_final at the last epoch",
        properties: &["tau_final_at_end", "analytic_loss_values"],
    },
    Coverage {
        module: "data",
        invariant: "a pixel decoder reproduces every stored label",
        properties: &["label_consistency"],
    },
    Coverage {
        module: "data",
        invariant: "splits are disjoint",
        properties: &["split_disjointness"],
    },
    Coverage {
        module: "data",
        invariant: "pairs are consecutive frames of one episode",
        properties: &["pair_adjacency"],
    },
    Coverage {
        module: "train",
        invariant: "identical configs give identical metrics and checksums",
        properties: &["train_determinism"],
    },
    Coverage {
        module: "train",
        invariant: "membership entropy under dim_ua is below the uniform-prior variant",
        properties: &["entropy_ordering"],
    },
    Coverage {
        module: "train",
        invariant: "L_Q moving average is non-increasing under dim_ua",
        properties: &["l_q_moving_average"],
    },
    Coverage {
        module: "probe",
        invariant: "probing never changes encoder parameters",
        properties: &["probe_preserves_encoder"],
    },
    Coverage {
        module: "probe",
        invariant: "F1 and accuracy agree with an independent confusion-matrix oracle",
        properties: &["probe_metric_oracle"],
    },
    Coverage {
        module: "probe",
        invariant: "feature extraction is invariant to positive rescaling of membership logits",
        properties: &["feature_logit_scaling"],
    },
    Coverage {
        module: "cli",
        invariant: "commands are idempotent for identical inputs and seeds",
        properties: &["cli_idempotence"],
    },
    Coverage {
        module: "cli",
        invariant: "exit codes are 0 success, 1 validation, 2 runtime",
        properties: &["cli_exit_codes"],
    },
];

/// Properties of this crate, in suite order.
pub fn registry() -> Vec<Property> {
    vec![
        Property::new("config_round_trip", false, config_round_trip),
        Property::new("loss_breakdown_total", false, loss_breakdown_total),
        Property::new("analytic_loss_values", false, analytic_loss_values),
        Property::new("mmd_zero_iff_uniform", false, mmd_zero_iff_uniform),
        Property::new("permutation_invariance", false, permutation_invariance),
        Property::new("minkowski_algebra", false, minkowski_algebra),
        Property::new("prop1_grid", false, prop1_grid),
        Property::new("prop2_grid", false, prop2_grid),
        Property::new("prop2_counterexample_detected", false, prop2_counterexample_detected),
        Property::new("membership_is_distribution", false, membership_is_distribution),
        Property::new("mean_fusion_is_row_mean", false, mean_fusion_is_row_mean),
        Property::new("one_hot_argmax_invariance", false, one_hot_argmax_invariance),
        Property::new("gradcheck_loss_q", false, |t| gradcheck_loss_q(t, false)),
        Property::new("gradcheck_infonce", false, gradcheck_infonce),
        Property::new("gradcheck_global_local", false, gradcheck_global_local),
        Property::new("gradcheck_sign_canary", false, gradcheck_sign_canary),
        Property::new("loss_q_bounds", false, loss_q_bounds),
        Property::new("infonce_bounds", false, infonce_bounds),
        Property::new("tau_final_at_end", false, tau_final_at_end),
        Property::new("single_chart_reduction", false, single_chart_reduction),
        Property::new("label_consistency", false, label_consistency),
        Property::new("split_disjointness", false, split_disjointness),
        Property::new("pair_adjacency", false, pair_adjacency),
        Property::new("train_determinism", false, train_determinism),
        Property::new("probe_preserves_encoder", false, probe_preserves_encoder),
        Property::new("probe_metric_oracle", false, probe_metric_oracle),
        Property::new("feature_logit_scaling", false, feature_logit_scaling),
        Property::new("entropy_ordering", true, entropy_ordering),
        Property::new("l_q_moving_average", true, l_q_moving_average),
        Property::new("overfit_sanity", true, overfit_sanity),
        Property::new("probe_chance_level", true, probe_chance_level),
    ]
}

/// Runs `properties`, skipping the training-dependent ones when `quick`.
pub fn run_properties(properties: &[Property], quick: bool) -> Vec<PropertyResult> {
    properties
        .iter()
        .filter(|p| !(quick && p.training))
        .map(|p| {
            let r = p.run();
            log::info!(
                "{}: {}/{} failed [{:.1}s]",
                r.name,
                r.failures,
                r.instances,
                r.seconds
            );
            r
        })
        .collect()
}

pub fn run_suite(quick: bool) -> Vec<PropertyResult> {
    run_properties(&registry(), quick)
}

/// Property names listed in [`COVERAGE`] that no property in `available`
/// provides.
pub fn uncovered(available: &[&str]) -> Vec<String> {
    let have: BTreeSet<&str> = available.iter().copied().collect();
    COVERAGE
        .iter()
        .flat_map(|c| c.properties.iter())
        .filter(|p| !have.contains(*p))
        .map(|p| p.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// helpers

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn random_tensor4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn small_shape(widths: usize) -> ModelShape {
    ModelShape {
        conv_widths: vec![widths; 3],
        ..ModelShape::default()
    }
}

fn random_images(rng: &mut ChaCha8Rng, b: usize, shape: &ModelShape) -> Array4<f32> {
    let [h, w, c] = shape.input_shape();
    Array4::from_shape_simple_fn((b, h, w, c), || rng.random::<f32>())
}

/// Central-difference check of `analytic` against `f` at `x`. Returns the
/// norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)`.
pub fn gradient_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> f64 {
    let mut probe = x.to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if norm_a + norm_n == 0.0 {
        0.0
    } else {
        diff / (norm_a + norm_n)
    }
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 100;

// ---------------------------------------------------------------------------
// core

fn config_round_trip(t: &mut Tally) {
    let mut rng = rng_from(11, 1);
    for _ in 0..200 {
        let mut cfg = RunConfig::for_pipeline(*Pipeline::ALL.choose(&mut rng).unwrap());
        cfg.atlas.n_charts = rng.random_range(0..10);
        cfg.atlas.chart_dim = rng.random_range(0..300);
        cfg.atlas.fusion_mode = *FusionMode::ALL.choose(&mut rng).unwrap();
        cfg.atlas.mapping_mode = *MappingMode::ALL.choose(&mut rng).unwrap();
        cfg.atlas.use_fc1 = rng.random_bool(0.5);
        cfg.atlas.use_fc2 = rng.random_bool(0.5);
        if rng.random_bool(0.5) {
            let a = rng.random_range(-20.0..20.0);
            let b = rng.random_range(-20.0..20.0);
            cfg.atlas.clamp_range = Some((a, b));
        }
        cfg.batch_size = rng.random_range(0..200);
        cfg.learning_rate = if rng.random_bool(0.1) { -1e-3 } else { rng.random_range(1e-6..1e-1) };
        cfg.epochs = rng.random_range(0..150);
        cfg.tau_final = rng.random_range(-0.2..1.0);
        cfg.tau_linear_scaling = rng.random_bool(0.5);
        cfg.seed = rng.random();
        cfg.world.sprites = rng.random_range(0..6);
        cfg.world.move_prob = rng.random_range(-0.5..1.5);
        let before = validate_config(&cfg);
        match RunConfig::from_text(&cfg.to_text()) {
            Ok(back) => {
                let after = validate_config(&back);
                t.check(before == after && back == cfg, || {
                    json!({ "config": cfg.to_text(), "before": before, "after": after })
                });
            }
            Err(e) => t.error(format!("{e} for\n{}", cfg.to_text())),
        }
    }
}

fn loss_breakdown_total(t: &mut Tally) {
    let mut rng = rng_from(11, 2);
    for _ in 0..1000 {
        let (gl, ll) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let q = rng.random_range(-1.0..0.0);
        let tau = rng.random_range(0.0..1.0);
        let b = loss_ua(gl, ll, q, tau);
        t.check(close(b.total, b.recomputed_total(), 1e-6), || json!({ "breakdown": b }));
    }
}

// ---------------------------------------------------------------------------
// analytic examples

fn analytic_loss_values(t: &mut Tally) {
    let exact = |t: &mut Tally, what: &str, got: crate::Result<f64>, want: f64| {
        let what = what.to_string();
        match got {
            Ok(v) => t.check(close(v, want, 1e-9), || json!({ "case": what, "got": v, "want": want })),
            Err(e) => t.error(format!("{what}: {e}")),
        }
    };
    let u2 = [0.5, 0.5];
    let u4 = [0.25; 4];
    exact(t, "mmd uniform n=2", mmd_delta_sq(&u2), 0.0);
    exact(t, "mmd one-hot n=2", mmd_delta_sq(&[1.0, 0.0]), 0.5);
    exact(t, "mmd one-hot n=4", mmd_delta_sq(&one_hot(4, 0)), 0.75);
    exact(t, "entropy uniform n=8", entropy(&[0.125; 8]), 8f64.ln());
    exact(t, "entropy one-hot", entropy(&one_hot(3, 1)), 0.0);
    exact(t, "entropy half-half", entropy(&[0.5, 0.5, 0.0, 0.0]), 2f64.ln());
    exact(t, "loss_q uniform", loss_q(&u4, &u4), 0.0);
    exact(t, "loss_q one-hot n=2", loss_q(&[1.0, 0.0], &[0.0, 1.0]), -0.5);
    exact(t, "loss_q one-hot and uniform n=4", loss_q(&one_hot(4, 0), &u4), -0.375);
    exact(t, "uniform baseline one-hot n=2", mmd_uniform_baseline_loss(&[1.0, 0.0], &[1.0, 0.0]), 0.5);
    exact(t, "uniform baseline uniform", mmd_uniform_baseline_loss(&u2, &u2), 0.0);
    exact(t, "infonce constant B=4", infonce(&Array2::from_elem((4, 4), 0.3)), 4f64.ln());
    exact(
        t,
        "infonce identity B=2",
        infonce(&Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
        (1.0 + (-1f64).exp()).ln(),
    );
    exact(t, "infonce B=1", infonce(&Array2::from_elem((1, 1), 2.5)), 0.0);
    exact(t, "loss_ua tau=0", Ok(loss_ua(1.5, 2.25, -0.5, 0.0).total), 3.75);
    exact(t, "loss_ua example", Ok(loss_ua(1.0, 2.0, -0.5, 0.1).total), 2.95);
    exact(t, "loss_ua zeros", Ok(loss_ua(0.0, 0.0, 0.0, 0.0).total), 0.0);
    exact(t, "tau start", tau_schedule(0, 100, 0.1, true), 0.0);
    exact(t, "tau midpoint", tau_schedule(50, 100, 0.1, true), 0.05);
    for epoch in [0, 7, 100] {
        exact(t, "tau constant", tau_schedule(epoch, 100, 0.02, false), 0.02);
    }
    let mut rng = rng_from(11, 3);
    for _ in 0..50 {
        let (a, b) = (random_distribution(&mut rng, 5), random_distribution(&mut rng, 5));
        let neg = loss_q(&a, &b).map(|v| -v);
        exact(t, "uniform baseline negates loss_q", mmd_uniform_baseline_loss(&a, &b), neg.unwrap_or(f64::NAN));
    }
}

// ---------------------------------------------------------------------------
// atlasmath

fn mmd_zero_iff_uniform(t: &mut Tally) {
    let mut rng = rng_from(12, 1);
    for n in 1..=8 {
        let uniform = vec![1.0 / n as f64; n];
        let v = mmd_delta_sq(&uniform).unwrap_or(f64::NAN);
        t.check(close(v, 0.0, 1e-9), || json!({ "n": n, "uniform_mmd": v }));
        for k in 0..n {
            let v = mmd_delta_sq(&one_hot(n, k)).unwrap_or(f64::NAN);
            let want = 1.0 - 1.0 / n as f64;
            t.check(close(v, want, 1e-12), || json!({ "n": n, "one_hot": k, "mmd": v }));
        }
        for _ in 0..50 {
            let q = random_distribution(&mut rng, n);
            let v = mmd_delta_sq(&q).unwrap_or(f64::NAN);
            let is_uniform = q.iter().all(|p| close(*p, 1.0 / n as f64, 1e-9));
            let ok = (v <= 1e-9) == is_uniform && v <= 1.0 - 1.0 / n as f64 + 1e-12;
            t.check(ok, || json!({ "q": q, "mmd": v }));
        }
    }
}

fn permutation_invariance(t: &mut Tally) {
    let mut rng = rng_from(12, 2);
    for _ in 0..300 {
        let n = rng.random_range(1..10);
        let mut q = random_distribution(&mut rng, n);
        if n > 1 && rng.random_bool(0.3) {
            q[0] = 0.0;
            let z: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= z);
        }
        let mut p = q.clone();
        p.shuffle(&mut rng);
        let (h1, h2) = (entropy(&q).unwrap_or(f64::NAN), entropy(&p).unwrap_or(f64::NAN));
        let (m1, m2) = (mmd_delta_sq(&q).unwrap_or(f64::NAN), mmd_delta_sq(&p).unwrap_or(f64::NAN));
        t.check(close(h1, h2, 1e-12) && close(m1, m2, 1e-12), || {
            json!({ "q": q, "permuted": p, "entropy": [h1, h2], "mmd": [m1, m2] })
        });
    }
}

fn random_set(rng: &mut ChaCha8Rng, size: usize, d: usize, integer: bool) -> PointSet {
    let points = (0..size)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if integer {
                        rng.random_range(-3..=3) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    PointSet::new(points).expect("non-empty, uniform dimension")
}

fn minkowski_algebra(t: &mut Tally) {
    let mut rng = rng_from(12, 3);
    for _ in 0..200 {
        let d = rng.random_range(1..4);
        let integer = rng.random_bool(0.5);
        let k = rng.random_range(1..6);
        let a = random_set(&mut rng, k, d, integer);
        let k = rng.random_range(1..6);
        let b = random_set(&mut rng, k, d, integer);
        let k = rng.random_range(1..6);
        let c = random_set(&mut rng, k, d, integer);
        let result = (|| -> crate::Result<(bool, bool)> {
            let comm = minkowski_sum(&a, &b)?.same_set(&minkowski_sum(&b, &a)?);
            let left = minkowski_sum(&minkowski_sum(&a, &b)?, &c)?;
            let right = minkowski_sum(&a, &minkowski_sum(&b, &c)?)?;
            Ok((comm, left.same_set(&right)))
        })();
        match result {
            Ok((comm, assoc)) => t.check(comm && assoc, || {
                json!({ "a": a.points(), "b": b.points(), "c": c.points(), "commutative": comm, "associative": assoc })
            }),
            Err(e) => t.error(e),
        }
    }
}

/// Points per intersection image and per chart for `n` charts. The sums are
/// exponential in `n`, so larger atlases use smaller samples.
pub fn prop_sample_sizes(n: usize) -> (usize, usize) {
    match n {
        1 | 2 => (32, 40),
        3 | 4 => (5, 7),
        _ => (2, 3),
    }
}

/// A finite sample of the convex hull of a few random vertices: the
/// vertices themselves plus random convex combinations.
fn convex_sample(rng: &mut ChaCha8Rng, size: usize, d: usize) -> Vec<Vec<f64>> {
    let vertices = (d + 1).min(size);
    let corners: Vec<Vec<f64>> = (0..vertices)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut points = corners.clone();
    while points.len() < size {
        let w = random_distribution(rng, vertices);
        points.push((0..d).map(|k| corners.iter().zip(&w).map(|(c, w)| c[k] * w).sum()).collect());
    }
    points
}

/// Intersection images and charts with `images[i] ⊆ charts[i]`.
fn proposition_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, convex: bool) -> (Vec<PointSet>, Vec<PointSet>) {
    let (k_img, k_chart) = prop_sample_sizes(n);
    let mut images = Vec::with_capacity(n);
    let mut charts = Vec::with_capacity(n);
    for _ in 0..n {
        let img: Vec<Vec<f64>> = if convex {
            convex_sample(rng, k_img, d)
        } else {
            (0..k_img).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let mut chart = img.clone();
        while chart.len() < k_chart {
            chart.push((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
        }
        chart.shuffle(rng);
        images.push(PointSet::new(img).expect("non-empty"));
        charts.push(PointSet::new(chart).expect("non-empty"));
    }
    (images, charts)
}

pub const PROP_INSTANCES: usize = 100;
pub const PROP_CHARTS: [usize; 4] = [1, 2, 4, 8];
pub const PROP_DIMS: [usize; 3] = [1, 2, 3];

fn prop1_grid(t: &mut Tally) {
    for n in PROP_CHARTS {
        for d in PROP_DIMS {
            let mut rng = rng_from(13, (n * 10 + d) as u64);
            for _ in 0..PROP_INSTANCES {
                let (images, charts) = proposition_instance(&mut rng, n, d, false);
                match check_prop1(&images, &charts) {
                    Ok(ok) => t.check(ok, || json!({ "n": n, "d": d, "images": images.iter().map(|s| s.points().to_vec()).collect::<Vec<_>>() })),
                    Err(e) => t.error(format!("n={n} d={d}: {e}")),
                }
            }
        }
    }
}

fn prop2_grid(t: &mut Tally) {
    for n in PROP_CHARTS {
        for d in PROP_DIMS {
            let mut rng = rng_from(14, (n * 10 + d) as u64);
            for _ in 0..PROP_INSTANCES {
                let (images, charts) = proposition_instance(&mut rng, n, d, true);
                match check_prop2(&images, &charts) {
                    Ok(ok) => t.check(ok, || json!({ "n": n, "d": d, "images": images.iter().map(|s| s.points().to_vec()).collect::<Vec<_>>() })),
                    Err(e) => t.error(format!("n={n} d={d}: {e}")),
                }
            }
        }
    }
}

/// The disjoint-translate construction must make the containment fail.
/// Passing means every constructed case was caught.
fn prop2_counterexample_detected(t: &mut Tally) {
    let mut rng = rng_from(14, 99);
    for n in [2usize, 3, 4] {
        for d in PROP_DIMS {
            for _ in 0..10 {
                let (images, _) = proposition_instance(&mut rng, n, d, true);
                let shift = 100.0;
                let charts: Vec<PointSet> = images
                    .iter()
                    .map(|s| {
                        PointSet::new(s.points().iter().map(|p| p.iter().map(|v| v + shift).collect()).collect())
                            .expect("non-empty")
                    })
                    .collect();
                match check_prop2(&images, &charts) {
                    Ok(contained) => t.check(!contained, || json!({ "n": n, "d": d, "note": "disjoint charts reported as containing the sum" })),
                    Err(e) => t.error(e),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// model

fn membership_is_distribution(t: &mut Tally) {
    let shape = small_shape(4);
    let mut rng = rng_from(15, 1);
    for n in [1usize, 2, 4, 8] {
        let atlas = crate::AtlasConfig {
            n_charts: n,
            chart_dim: 3,
            ..Default::default()
        };
        for (k, scale) in [1.0f32, 50.0].into_iter().enumerate() {
            let mut enc = match AtlasEncoder::build(&atlas, &shape, true, false, 100 + k as u64) {
                Ok(e) => e,
                Err(e) => return t.error(e),
            };
            if let Some(m) = enc.membership.as_mut() {
                m.weight.value *= scale;
            }
            let x = random_images(&mut rng, 16, &shape);
            match enc.forward(&x, FusionMode::MembershipWeighted) {
                Ok((batch, _)) => {
                    for row in batch.membership.rows() {
                        let sum: f32 = row.sum();
                        let ok = (sum - 1.0).abs() <= 1e-6 && row.iter().all(|v| *v >= 0.0);
                        t.check(ok, || json!({ "n": n, "scale": scale, "membership": row.to_vec() }));
                    }
                }
                Err(e) => t.error(e),
            }
        }
    }
}

fn mean_fusion_is_row_mean(t: &mut Tally) {
    let shape = small_shape(4);
    let mut rng = rng_from(15, 2);
    for n in [1usize, 2, 4, 8] {
        let atlas = crate::AtlasConfig {
            n_charts: n,
            chart_dim: 5,
            mapping_mode: if n % 4 == 0 { MappingMode::Linear } else { MappingMode::Identity },
            ..Default::default()
        };
        let enc = match AtlasEncoder::build(&atlas, &shape, true, false, 7) {
            Ok(e) => e,
            Err(e) => return t.error(e),
        };
        let x = random_images(&mut rng, 8, &shape);
        match enc.forward(&x, FusionMode::Mean) {
            Ok((batch, _)) => {
                let mean = batch.chart_embeddings.mean_axis(Axis(1)).expect("n ≥ 1");
                for (b, (f, m)) in batch.fused.rows().into_iter().zip(mean.rows()).enumerate() {
                    let ok = f.iter().zip(m.iter()).all(|(a, c)| (a - c).abs() <= 1e-6);
                    t.check(ok, || json!({ "n": n, "item": b, "fused": f.to_vec(), "mean": m.to_vec() }));
                }
            }
            Err(e) => t.error(e),
        }
    }
}

fn one_hot_argmax_invariance(t: &mut Tally) {
    let mut rng = rng_from(15, 3);
    let transforms: [(&str, fn(f64) -> f64); 4] = [
        ("affine", |v| 3.0 * v + 1.0),
        ("cube", |v| v * v * v),
        ("shrink", |v| 0.25 * v),
        ("tanh", |v| 5.0 * v.tanh()),
    ];
    for _ in 0..100 {
        let (b, n, d) = (4, rng.random_range(1..9), 3);
        let charts = Array3::from_shape_simple_fn((b, n, d), || rng.random_range(-1.0f32..1.0));
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let to_q = |f: &dyn Fn(f64) -> f64| {
            let rows: Vec<f32> = logits
                .iter()
                .flat_map(|l| softmax(&l.iter().map(|v| f(*v)).collect::<Vec<_>>()))
                .map(|v| v as f32)
                .collect();
            Array2::from_shape_vec((b, n), rows).expect("b*n")
        };
        let base = fuse(&charts, &to_q(&|v| v), FusionMode::OneHot);
        for (name, f) in transforms {
            let other = fuse(&charts, &to_q(&f), FusionMode::OneHot);
            t.check(base == other, || json!({ "transform": name, "logits": logits }));
        }
    }
}

// ---------------------------------------------------------------------------
// losses

fn rows_of(x: &[f64], b: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_vec((b, n), x.to_vec()).expect("b*n values")
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let q = softmax(&row.to_vec());
        row.assign(&Array1::from(q));
    }
    out
}

/// `dL/dlogits` from `dL/dq` through a row softmax.
fn softmax_backward(q: &Array2<f64>, dq: &Array2<f64>) -> Array2<f64> {
    let dot = (q * dq).sum_axis(Axis(1)).insert_axis(Axis(1));
    q * &(dq - &dot)
}

/// L_Q through softmax memberships on random `4 x 4` logits. With `mutated`
/// the analytic gradient is taken with the wrong sign, which must be caught.
pub fn gradcheck_loss_q(t: &mut Tally, mutated: bool) {
    let (b, n) = (4, 4);
    let mut rng = rng_from(16, 1);
    for _ in 0..GRAD_INSTANCES {
        let x: Vec<f64> = (0..2 * b * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let split_q = |x: &[f64]| {
            (
                softmax_rows(&rows_of(&x[..b * n], b, n)),
                softmax_rows(&rows_of(&x[b * n..], b, n)),
            )
        };
        let f = |x: &[f64]| {
            let (qt, qn) = split_q(x);
            membership_regularizer(&qt, &qn, -1.0).map(|r| r.0).unwrap_or(f64::NAN)
        };
        let (qt, qn) = split_q(&x);
        let sign = if mutated { 1.0 } else { -1.0 };
        let (_, dqt, dqn) = match membership_regularizer(&qt, &qn, sign) {
            Ok(r) => r,
            Err(e) => return t.error(e),
        };
        let analytic: Vec<f64> = softmax_backward(&qt, &dqt)
            .iter()
            .chain(softmax_backward(&qn, &dqn).iter())
            .copied()
            .collect();
        let err = gradient_error(&f, &x, &analytic, GRAD_EPS);
        t.check(err < GRAD_TOL, || json!({ "logits": x, "relative_error": err }));
    }
}

fn gradcheck_infonce(t: &mut Tally) {
    let b = 4;
    let mut rng = rng_from(16, 2);
    for _ in 0..GRAD_INSTANCES {
        let logits = random_matrix(&mut rng, (b, b), 3.0);
        let (_, grad) = match infonce_with_grad(&logits) {
            Ok(r) => r,
            Err(e) => return t.error(e),
        };
        let f = |x: &[f64]| infonce(&rows_of(x, b, b)).unwrap_or(f64::NAN);
        let x: Vec<f64> = logits.iter().copied().collect();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let err = gradient_error(&f, &x, &analytic, GRAD_EPS);
        t.check(err < GRAD_TOL, || json!({ "logits": x, "relative_error": err }));
    }
}

/// Global-local plus local-local objective rebuilt from the per-location
/// score functions, as an oracle for [`dim_losses`].
fn dim_objective_from_scores(
    target: &Array2<f64>,
    local_t: &Array4<f64>,
    local_next: &Array4<f64>,
    w_g: &Array2<f64>,
    w_h: &Array2<f64>,
) -> f64 {
    let (b, m, n, _) = local_t.dim();
    let mut gl = vec![Array2::<f64>::zeros((b, b)); m * n];
    let mut ll = vec![Array2::<f64>::zeros((b, b)); m * n];
    for i in 0..b {
        for j in 0..b {
            let next_j = local_next.slice(s![j, .., .., ..]).to_owned();
            let sg = score_global_local(target.row(i), &next_j, w_g).expect("shapes");
            let sl = score_local_local(&local_t.slice(s![i, .., .., ..]).to_owned(), &next_j, w_h).expect("shapes");
            for (k, (g, l)) in sg.iter().zip(sl.iter()).enumerate() {
                gl[k][[i, j]] = *g;
                ll[k][[i, j]] = *l;
            }
        }
    }
    let total: f64 = gl.iter().chain(&ll).map(|s| infonce(s).expect("square")).sum();
    total / (m * n) as f64
}

fn gradcheck_global_local(t: &mut Tally) {
    let (b, m, n, c, d) = (4, 2, 2, 4, 4);
    let mut rng = rng_from(16, 3);
    for _ in 0..GRAD_INSTANCES {
        let target = random_matrix(&mut rng, (b, d), 1.0);
        let local_t = random_tensor4(&mut rng, (b, m, n, c), 1.0);
        let local_next = random_tensor4(&mut rng, (b, m, n, c), 1.0);
        let w_g = random_matrix(&mut rng, (d, c), 1.0);
        let w_h = random_matrix(&mut rng, (c, c), 1.0);
        let g = match dim_losses(&target, &local_t, &local_next, &w_g, &w_h) {
            Ok(g) => g,
            Err(e) => return t.error(e),
        };
        let sizes = [b * d, b * m * n * c, b * m * n * c, d * c, c * c];
        let unpack = |x: &[f64]| {
            let mut at = 0;
            let mut take = |k: usize| {
                let part = x[at..at + k].to_vec();
                at += k;
                part
            };
            (
                Array2::from_shape_vec((b, d), take(sizes[0])).unwrap(),
                Array4::from_shape_vec((b, m, n, c), take(sizes[1])).unwrap(),
                Array4::from_shape_vec((b, m, n, c), take(sizes[2])).unwrap(),
                Array2::from_shape_vec((d, c), take(sizes[3])).unwrap(),
                Array2::from_shape_vec((c, c), take(sizes[4])).unwrap(),
            )
        };
        let f = |x: &[f64]| {
            let (tg, lt, ln, wg, wh) = unpack(x);
            dim_objective_from_scores(&tg, &lt, &ln, &wg, &wh)
        };
        let x: Vec<f64> = target
            .iter()
            .chain(local_t.iter())
            .chain(local_next.iter())
            .chain(w_g.iter())
            .chain(w_h.iter())
            .copied()
            .collect();
        let analytic: Vec<f64> = g
            .d_target
            .iter()
            .chain(g.d_local_t.iter())
            .chain(g.d_local_next.iter())
            .chain(g.d_w_g.iter())
            .chain(g.d_w_h.iter())
            .copied()
            .collect();
        let value = f(&x);
        let err = gradient_error(&f, &x, &analytic, GRAD_EPS);
        let value_ok = close(value, g.l_gl + g.l_ll, 1e-9);
        t.check(err < GRAD_TOL && value_ok, || {
            json!({ "relative_error": err, "oracle_value": value, "value": g.l_gl + g.l_ll })
        });
    }
}

/// Passes when a sign-flipped L_Q gradient is rejected with a counterexample.
fn gradcheck_sign_canary(t: &mut Tally) {
    let mut mutated = Tally::default();
    gradcheck_loss_q(&mut mutated, true);
    let caught = mutated.failures == mutated.instances && mutated.counterexample.is_some();
    t.check(caught, || {
        json!({ "mutated_failures": mutated.failures, "mutated_instances": mutated.instances })
    });
}

fn loss_q_bounds(t: &mut Tally) {
    let mut rng = rng_from(16, 4);
    for n in 1..=8usize {
        let lower = -(1.0 - 1.0 / n as f64);
        for _ in 0..100 {
            let a = random_distribution(&mut rng, n);
            let b = random_distribution(&mut rng, n);
            let v = loss_q(&a, &b).unwrap_or(f64::NAN);
            let hits_min = close(v, lower, 1e-12);
            let both_one_hot = [&a, &b].iter().all(|q| q.iter().any(|p| close(*p, 1.0, 1e-12)));
            t.check(v >= lower - 1e-12 && v <= 1e-12 && (hits_min == both_one_hot || n == 1), || {
                json!({ "q_t": a, "q_next": b, "loss_q": v })
            });
        }
        for (i, j) in [(0, 0), (0, n - 1)] {
            let v = loss_q(&one_hot(n, i), &one_hot(n, j)).unwrap_or(f64::NAN);
            t.check(close(v, lower, 1e-12), || json!({ "n": n, "one_hot": [i, j], "loss_q": v }));
        }
        if n > 1 {
            let v = loss_q(&one_hot(n, 0), &random_distribution(&mut rng, n)).unwrap_or(f64::NAN);
            t.check(v > lower + 1e-9, || json!({ "n": n, "loss_q": v, "note": "minimum without both one-hot" }));
        }
    }
}

fn infonce_bounds(t: &mut Tally) {
    let mut rng = rng_from(16, 5);
    for _ in 0..300 {
        let b = rng.random_range(1..9);
        let logits = random_matrix(&mut rng, (b, b), 5.0);
        let v = infonce(&logits).unwrap_or(f64::NAN);
        t.check(v >= 0.0, || json!({ "logits": logits.iter().copied().collect::<Vec<_>>(), "infonce": v }));

        let mut constant = logits.clone();
        for (i, mut row) in constant.rows_mut().into_iter().enumerate() {
            row.fill(logits[[i, 0]]);
        }
        let v = infonce(&constant).unwrap_or(f64::NAN);
        t.check(close(v, (b as f64).ln(), 1e-9), || json!({ "b": b, "constant_rows": v }));

        if b > 1 {
            let mut varied = constant.clone();
            varied[[0, 1]] += 0.5;
            let v = infonce(&varied).unwrap_or(f64::NAN);
            t.check(!close(v, (b as f64).ln(), 1e-9), || json!({ "b": b, "non_constant_row": v }));
        }
    }
}

fn tau_final_at_end(t: &mut Tally) {
    let mut rng = rng_from(16, 6);
    for _ in 0..200 {
        let total = rng.random_range(1..500);
        let tau = rng.random_range(0.0..2.0);
        for linear in [false, true] {
            let v = tau_schedule(total, total, tau, linear).unwrap_or(f64::NAN);
            t.check(v == tau, || json!({ "total": total, "tau_final": tau, "linear": linear, "got": v }));
        }
    }
}

/// Steps compared by [`single_chart_reduction`].
pub const REDUCTION_STEPS: usize = 20;

/// An `n = 1` dim_ua run and the single-head baseline trained side by side
/// on the same batches; per-step losses and shared parameters must agree.
fn single_chart_reduction(t: &mut Tally) {
    let make = |pipeline| {
        let mut cfg = desk_config(pipeline, 1, 64, 5, 1);
        cfg.world.episodes = 12;
        cfg.world.episode_length = 30;
        cfg.split = [0.5, 0.25, 0.25];
        cfg
    };
    let ua_cfg = make(Pipeline::DimUa);
    let st_cfg = make(Pipeline::StDimBaseline);
    let data = match synthetic_splits(&ua_cfg) {
        Ok(s) => s.0,
        Err(e) => return t.error(e),
    };
    let (mut ua, mut st) = match (TrainState::new(&ua_cfg), TrainState::new(&st_cfg)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return t.error(e),
    };
    let mut step = 0;
    'epochs: for epoch in 0.. {
        let batches = match pair_batches(&data.episodes, ua_cfg.batch_size, ua_cfg.seed, epoch) {
            Ok(b) => b,
            Err(e) => return t.error(e),
        };
        for batch in batches {
            let (x_t, x_next) = data.pair_tensors(&batch);
            let (a, b) = match (
                ua.pretrain_step(&x_t, &x_next, ua_cfg.tau_final, step),
                st.pretrain_step(&x_t, &x_next, st_cfg.tau_final, step),
            ) {
                (Ok(a), Ok(b)) => (a.losses, b.losses),
                (Err(e), _) | (_, Err(e)) => return t.error(e),
            };
            let ok = close(a.l_gl, b.l_gl, 1e-5) && close(a.l_ll, b.l_ll, 1e-5) && close(a.total, b.total, 1e-5);
            t.check(ok, || json!({ "step": step, "dim_ua": a, "st_dim_baseline": b }));
            step += 1;
            if step == REDUCTION_STEPS {
                break 'epochs;
            }
        }
    }
    let shared: BTreeMap<String, Array2<f32>> = st
        .encoder
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect();
    let mut worst = 0.0f32;
    for (name, p) in ua.encoder.named_params() {
        if let Some(v) = shared.get(&name) {
            worst = worst.max((&p.value - v).iter().fold(0.0f32, |m, d| m.max(d.abs())));
        }
    }
    t.check(worst <= 1e-5, || json!({ "max_parameter_difference": worst }));
}

// ---------------------------------------------------------------------------
// data

/// Reads sprite cells and the score digit back from rendered pixels. It
/// knows only the layout conventions (band on top, one intensity per sprite,
/// glyph table), not the generator's state.
pub fn decode_frame(spec: &SyntheticWorldSpec, image: &Array3<f32>) -> BTreeMap<String, i64> {
    let levels = image.mapv(|v| (v * 255.0).round() as i64);
    let (h, w, _) = levels.dim();
    let mut out = BTreeMap::new();
    for (i, name) in SPRITE_NAMES.iter().enumerate().take(spec.sprites) {
        let mut cells = BTreeSet::new();
        for r in spec.band_height..h {
            for c in 0..w {
                if levels[[r, c, 0]] == SPRITE_LEVELS[i] as i64 {
                    cells.insert(((c / spec.cell_size) as i64, ((r - spec.band_height) / spec.cell_size) as i64));
                }
            }
        }
        let (x, y) = if cells.len() == 1 { *cells.iter().next().unwrap() } else { (-1, -1) };
        out.insert(format!("{name}_x"), x);
        out.insert(format!("{name}_y"), y);
    }
    let top = (spec.band_height - 5) / 2;
    let lit: Vec<u8> = (0..15)
        .map(|k| u8::from(levels[[top + k / 3, 1 + k % 3, 0]] == DIGIT_LEVEL as i64))
        .collect();
    let digit = DIGITS.iter().position(|g| g[..] == lit[..]).map_or(-1, |d| d as i64);
    out.insert("score".into(), digit);
    out
}

fn world_variants(rng: &mut ChaCha8Rng) -> Vec<SyntheticWorldSpec> {
    let mut specs = vec![SyntheticWorldSpec::default()];
    for _ in 0..6 {
        let cell = *[4usize, 8, 12].choose(rng).unwrap();
        specs.push(SyntheticWorldSpec {
            grid_width: rng.random_range(2..12),
            grid_height: rng.random_range(2..10),
            cell_size: cell,
            band_height: rng.random_range(7..12),
            sprites: rng.random_range(1..5),
            max_step: rng.random_range(0..3),
            move_prob: rng.random_range(0.0..1.0),
            noise: rng.random_range(0..90),
            episode_length: 25,
            episodes: 3,
            seed: rng.random(),
        });
    }
    specs
        .into_iter()
        .filter(|s| s.violations().is_empty())
        .collect()
}

fn label_consistency(t: &mut Tally) {
    let mut rng = rng_from(17, 1);
    for spec in world_variants(&mut rng) {
        for e in 0..spec.episodes {
            let episode = match spec.generate_episode(e) {
                Ok(ep) => ep,
                Err(err) => return t.error(err),
            };
            for (step, frame) in episode.frames.iter().enumerate() {
                let decoded = decode_frame(&spec, &frame.image);
                t.check(decoded == frame.labels, || {
                    json!({ "world": spec.to_text(), "episode": e, "step": step, "stored": frame.labels, "decoded": decoded })
                });
            }
        }
    }
}

fn split_disjointness(t: &mut Tally) {
    let mut rng = rng_from(17, 2);
    for _ in 0..200 {
        let n = rng.random_range(3..300);
        let a = rng.random_range(0.1..0.8);
        let b = rng.random_range(0.05..(0.95 - a));
        let ratios = [a, b, 1.0 - a - b];
        match split(n, ratios, rng.random()) {
            Ok(parts) => {
                let mut seen = BTreeSet::new();
                let disjoint = parts.iter().flatten().all(|i| seen.insert(*i));
                let covers = seen.len() == n && seen.iter().all(|i| *i < n);
                t.check(disjoint && covers, || json!({ "episodes": n, "ratios": ratios, "splits": parts }));
            }
            Err(crate::Error::InsufficientData(_)) => {}
            Err(e) => t.error(e),
        }
    }
    let mut spec = SyntheticWorldSpec {
        episodes: 20,
        episode_length: 5,
        ..Default::default()
    };
    spec.seed = 3;
    match spec.generate().and_then(|d| split_dataset(&d, [0.5, 0.3, 0.2], 4)) {
        Ok((p, tr, te)) => {
            let ids = |d: &Dataset| d.episodes.iter().map(|e| e.id).collect::<BTreeSet<_>>();
            let (a, b, c) = (ids(&p), ids(&tr), ids(&te));
            let ok = a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c) && a.len() + b.len() + c.len() == 20;
            t.check(ok, || json!({ "pretrain": a, "probe_train": b, "probe_test": c }));
        }
        Err(e) => t.error(e),
    }
}

fn pair_adjacency(t: &mut Tally) {
    let spec = SyntheticWorldSpec {
        episodes: 8,
        episode_length: 30,
        seed: 21,
        ..Default::default()
    };
    let data = match spec.generate() {
        Ok(d) => d,
        Err(e) => return t.error(e),
    };
    for epoch in 0..3 {
        let batches = match pair_batches(&data.episodes, 16, 9, epoch) {
            Ok(b) => b,
            Err(e) => return t.error(e),
        };
        for idx in batches.into_iter().flatten() {
            let ep = &data.episodes[idx.episode];
            let pair = data.pair(idx);
            let before = decode_frame(&spec, &pair.x_t.image);
            let after = decode_frame(&spec, &pair.x_next.image);
            let reach = spec.max_step as i64;
            let moves_ok = SPRITE_NAMES.iter().take(spec.sprites).all(|name| {
                ["x", "y"].iter().all(|axis| {
                    let k = format!("{name}_{axis}");
                    (after[&k] - before[&k]).abs() <= reach
                })
            });
            let ds = (after["score"] - before["score"]).rem_euclid(10);
            let ok = pair.episode_id == ep.id
                && idx.step + 1 < ep.frames.len()
                && pair.x_t == ep.frames[pair.step]
                && pair.x_next == ep.frames[pair.step + 1]
                && moves_ok
                && ds <= 1;
            t.check(ok, || json!({ "episode": ep.id, "step": idx.step, "before": before, "after": after }));
        }
    }
}

// ---------------------------------------------------------------------------
// train and probe

fn tiny_config(pipeline: Pipeline, seed: u64) -> RunConfig {
    let mut cfg = desk_config(pipeline, 2, 8, seed, 2);
    cfg.model.conv_widths = vec![4, 8, 8];
    cfg.batch_size = 16;
    cfg.world.episodes = 10;
    cfg.world.episode_length = 20;
    cfg.split = [0.5, 0.3, 0.2];
    cfg.probe.epochs = 5;
    cfg
}

fn train_determinism(t: &mut Tally) {
    for pipeline in [Pipeline::DimUa, Pipeline::MmdUniformBaseline] {
        let cfg = tiny_config(pipeline, 4);
        let data = match synthetic_splits(&cfg) {
            Ok(s) => s.0,
            Err(e) => return t.error(e),
        };
        let run = || pretrain(&cfg, &data, &PretrainOptions::default());
        match (run(), run()) {
            (Ok(a), Ok(b)) => {
                let strip = |m: &EpochMetrics| EpochMetrics { seconds: 0.0, ..m.clone() };
                let same_first = strip(&a.metrics[0]) == strip(&b.metrics[0]);
                let (ca, cb) = (a.checkpoint.encoder.checksum(), b.checkpoint.encoder.checksum());
                t.check(same_first && ca == cb, || {
                    json!({ "pipeline": pipeline.as_str(), "first": [a.metrics[0], b.metrics[0]], "checksums": [ca, cb] })
                });
            }
            (Err(e), _) | (_, Err(e)) => t.error(e),
        }
    }
}

fn probe_preserves_encoder(t: &mut Tally) {
    for pipeline in [Pipeline::DimUa, Pipeline::StDimBaseline] {
        let cfg = tiny_config(pipeline, 6);
        let (splits, enc) = match (synthetic_splits(&cfg), AtlasEncoder::new(&cfg)) {
            (Ok(s), Ok(e)) => (s, e),
            (Err(e), _) | (_, Err(e)) => return t.error(e),
        };
        let before = enc.checksum();
        if let Err(e) = probe_encoder(&enc, &splits.1, &splits.2, &cfg.probe, 0, "tiny") {
            return t.error(e);
        }
        let after = enc.checksum();
        t.check(before == after, || json!({ "pipeline": pipeline.as_str(), "before": before, "after": after }));
    }
}

/// Per-class counts computed from scratch.
fn oracle_scores(truth: &[i64], pred: &[i64]) -> (f64, f64) {
    let mut tp: BTreeMap<i64, f64> = BTreeMap::new();
    let mut fp: BTreeMap<i64, f64> = BTreeMap::new();
    let mut fneg: BTreeMap<i64, f64> = BTreeMap::new();
    let mut correct = 0.0;
    for (&y, &p) in truth.iter().zip(pred) {
        tp.entry(y).or_default();
        tp.entry(p).or_default();
        if y == p {
            *tp.get_mut(&y).unwrap() += 1.0;
            correct += 1.0;
        } else {
            *fp.entry(p).or_default() += 1.0;
            *fneg.entry(y).or_default() += 1.0;
        }
    }
    let f1s: Vec<f64> = tp
        .iter()
        .map(|(k, &t)| {
            let denom = 2.0 * t + fp.get(k).copied().unwrap_or(0.0) + fneg.get(k).copied().unwrap_or(0.0);
            if denom == 0.0 {
                0.0
            } else {
                2.0 * t / denom
            }
        })
        .collect();
    (correct / truth.len() as f64, f1s.iter().sum::<f64>() / f1s.len() as f64)
}

fn probe_metric_oracle(t: &mut Tally) {
    let mut rng = rng_from(18, 1);
    for _ in 0..300 {
        let k = rng.random_range(1..8);
        let len = rng.random_range(1..60);
        let truth: Vec<i64> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<i64> = truth
            .iter()
            .map(|&y| if rng.random_bool(0.5) { y } else { rng.random_range(0..k) })
            .collect();
        let (acc, f1) = oracle_scores(&truth, &pred);
        let cm = confusion(&truth, &pred, k as usize);
        let trace: u64 = (0..k as usize).map(|i| cm[[i, i]]).sum();
        let cm_acc = trace as f64 / cm.sum() as f64;
        let (a, f) = (accuracy(&truth, &pred), macro_f1(&truth, &pred));
        let ok = close(a, acc, 1e-12) && close(f, f1, 1e-12) && close(cm_acc, a, 1e-12) && (0.0..=1.0).contains(&f);
        t.check(ok, || json!({ "truth": truth, "pred": pred, "accuracy": [a, acc], "f1": [f, f1] }));
    }
}

fn feature_logit_scaling(t: &mut Tally) {
    let cfg = tiny_config(Pipeline::DimUa, 8);
    let mut cfg = cfg;
    cfg.atlas.n_charts = 4;
    let (splits, enc) = match (synthetic_splits(&cfg), AtlasEncoder::new(&cfg)) {
        (Ok(s), Ok(e)) => (s, e),
        (Err(e), _) | (_, Err(e)) => return t.error(e),
    };
    // Spread the logits so that several charts win on different frames.
    let mut base = enc.clone();
    if let Some(m) = base.membership.as_mut() {
        m.weight.value *= 20.0;
    }
    let reference = match extract_features(&base, &splits.1) {
        Ok(f) => f,
        Err(e) => return t.error(e),
    };
    for c in [0.01f32, 0.5, 3.0, 40.0] {
        let mut scaled = base.clone();
        if let Some(m) = scaled.membership.as_mut() {
            m.weight.value *= c;
            if let Some(b) = m.bias.as_mut() {
                b.value *= c;
            }
        }
        match extract_features(&scaled, &splits.1) {
            Ok(f) => t.check(f == reference, || json!({ "scale": c })),
            Err(e) => t.error(e),
        }
    }
}

// ---------------------------------------------------------------------------
// training-dependent

/// Epochs of the desk-scale runs used by the full suite.
pub const DESK_EPOCHS: usize = 30;

struct DeskRuns {
    dim_ua: Vec<EpochMetrics>,
    uniform: Vec<EpochMetrics>,
}

fn desk_runs() -> &'static std::result::Result<DeskRuns, String> {
    static RUNS: OnceLock<std::result::Result<DeskRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = |pipeline| -> crate::Result<Vec<EpochMetrics>> {
            let cfg = desk_config(pipeline, 4, 64, 0, DESK_EPOCHS);
            let splits = synthetic_splits(&cfg)?;
            Ok(pretrain(&cfg, &splits.0, &PretrainOptions::default())?.metrics)
        };
        Ok(DeskRuns {
            dim_ua: run(Pipeline::DimUa).map_err(|e| e.to_string())?,
            uniform: run(Pipeline::MmdUniformBaseline).map_err(|e| e.to_string())?,
        })
    })
}

fn entropy_ordering(t: &mut Tally) {
    match desk_runs() {
        Ok(r) => {
            let a = r.dim_ua.last().map_or(f64::NAN, |m| m.entropy);
            let b = r.uniform.last().map_or(f64::NAN, |m| m.entropy);
            t.check(a < b, || json!({ "dim_ua": a, "mmd_uniform_baseline": b }));
        }
        Err(e) => t.error(e),
    }
}

/// Window of the L_Q moving average.
pub const L_Q_WINDOW: usize = 5;

fn l_q_moving_average(t: &mut Tally) {
    match desk_runs() {
        Ok(r) => {
            let l_q: Vec<f64> = r.dim_ua.iter().map(|m| m.losses.l_q).collect();
            let avg: Vec<f64> = l_q
                .windows(L_Q_WINDOW)
                .map(|w| w.iter().sum::<f64>() / L_Q_WINDOW as f64)
                .collect();
            for (k, w) in avg.windows(2).enumerate() {
                t.check(w[1] <= w[0] + 1e-3, || json!({ "window": k, "averages": [w[0], w[1]], "l_q": l_q }));
            }
        }
        Err(e) => t.error(e),
    }
}

/// Repeated steps on one batch must drive the contrastive losses down.
fn overfit_sanity(t: &mut Tally) {
    let mut cfg = desk_config(Pipeline::DimUa, 4, 64, 1, 1);
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 32;
    let data = match synthetic_splits(&cfg) {
        Ok(s) => s.0,
        Err(e) => return t.error(e),
    };
    let batch = match pair_batches(&data.episodes, cfg.batch_size, cfg.seed, 0) {
        Ok(b) => b[0].clone(),
        Err(e) => return t.error(e),
    };
    let (x_t, x_next) = data.pair_tensors(&batch);
    let mut state = match TrainState::new(&cfg) {
        Ok(s) => s,
        Err(e) => return t.error(e),
    };
    let mut history = Vec::new();
    for i in 0..60 {
        match state.pretrain_step(&x_t, &x_next, cfg.tau_final, i) {
            Ok(out) => history.push(out.losses.l_gl + out.losses.l_ll),
            Err(e) => return t.error(e),
        }
    }
    let (first, last) = (history[0], *history.last().unwrap());
    t.check(last < 0.5 * first, || json!({ "contrastive_loss": history }));
}

/// A probe trained on features that carry no information about the labels
/// must not beat the majority class by more than a small margin.
fn probe_chance_level(t: &mut Tally) {
    let cfg = desk_config(Pipeline::DimUa, 4, 64, 2, 1);
    let splits = match synthetic_splits(&cfg) {
        Ok(s) => s,
        Err(e) => return t.error(e),
    };
    let mut rng = rng_from(19, 1);
    let mut noise = |rows: usize| Array2::from_shape_simple_fn((rows, 64), || rng.random_range(-1.0f32..1.0));
    let ftr = noise(splits.1.num_frames());
    let fte = noise(splits.2.num_frames());
    let report = match evaluate(
        &splits.1.schema,
        (&ftr, &splits.1),
        (&fte, &splits.2),
        &ProbeConfig::default(),
        0,
        "noise",
    ) {
        Ok(r) => r,
        Err(e) => return t.error(e),
    };
    for v in &report.variables {
        let labels = crate::probe::labels_of(&splits.2, &v.name).unwrap_or_default();
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for y in &labels {
            *counts.entry(*y).or_default() += 1;
        }
        let majority = counts.values().max().copied().unwrap_or(0) as f64 / labels.len().max(1) as f64;
        t.check(v.accuracy <= majority + 0.1, || {
            json!({ "variable": v.name, "accuracy": v.accuracy, "majority": majority })
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_names_exist_outside_cli() {
        let names: Vec<String> = registry().into_iter().map(|p| p.name).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let missing: Vec<String> = uncovered(&refs).into_iter().filter(|n| !n.starts_with("cli_")).collect();
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn every_property_is_on_the_checklist() {
        let listed: BTreeSet<&str> = COVERAGE.iter().flat_map(|c| c.properties.iter().copied()).collect();
        let extra = ["analytic_loss_values", "overfit_sanity", "probe_chance_level"];
        for p in registry() {
            assert!(listed.contains(p.name.as_str()) || extra.contains(&p.name.as_str()), "{}", p.name);
        }
    }

    #[test]
    fn gradient_error_of_exact_gradient_is_small() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        assert!(gradient_error(&f, &[1.0, 2.0], &[2.0, 3.0], GRAD_EPS) < 1e-9);
        assert!(gradient_error(&f, &[1.0, 2.0], &[-2.0, 3.0], GRAD_EPS) > 0.1);
    }
}
