//! Randomized invariants of the math, loss and data layers, each checked
//! against a direct re-derivation.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use ua_core::atlasmath::{entropy, minkowski_sum, mmd_delta_sq, PointSet};
use ua_core::config::FusionMode;
use ua_core::data::split;
use ua_core::losses::{infonce, loss_q, loss_ua, membership_regularizer, mmd_uniform_baseline_loss, tau_schedule};
use ua_core::model::fuse;
use ua_core::RunConfig;

fn distribution(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..=max_n).prop_filter_map("zero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
    })
}

fn pair_of_distributions() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| {
        let one = prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect::<Vec<f64>>()
        });
        (one.clone(), one)
    })
}

fn sq_distance_to_uniform(q: &[f64]) -> f64 {
    let u = 1.0 / q.len() as f64;
    q.iter().map(|v| (v - u) * (v - u)).sum()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mmd_is_squared_distance_to_uniform(q in distribution(8)) {
        let n = q.len() as f64;
        let v = mmd_delta_sq(&q).unwrap();
        prop_assert!((v - sq_distance_to_uniform(&q)).abs() < 1e-12);
        prop_assert!(v >= 0.0 && v <= 1.0 - 1.0 / n + 1e-12);
    }

    #[test]
    fn entropy_is_bounded_and_order_free(q in distribution(8), rot in 0usize..8) {
        let h = entropy(&q).unwrap();
        prop_assert!(h >= -1e-12 && h <= (q.len() as f64).ln() + 1e-12);
        let mut r = q.clone();
        r.rotate_left(rot % q.len());
        prop_assert!((entropy(&r).unwrap() - h).abs() < 1e-12);
        prop_assert!((mmd_delta_sq(&r).unwrap() - mmd_delta_sq(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_q_is_negated_half_mmd_sum((qt, qn) in pair_of_distributions()) {
        let n = qt.len() as f64;
        let expected = -0.5 * (sq_distance_to_uniform(&qt) + sq_distance_to_uniform(&qn));
        let v = loss_q(&qt, &qn).unwrap();
        prop_assert!((v - expected).abs() < 1e-12);
        prop_assert!(v <= 0.0 && v >= -(1.0 - 1.0 / n) - 1e-12);
        prop_assert!((mmd_uniform_baseline_loss(&qt, &qn).unwrap() + v).abs() < 1e-12);
    }

    #[test]
    fn batched_regularizer_is_the_mean_of_pairs(rows in prop::collection::vec(pair_of_distributions(), 1..6)) {
        let n = rows.iter().map(|(a, _)| a.len()).min().unwrap();
        let rows: Vec<_> = rows.into_iter().filter(|(a, _)| a.len() == n).collect();
        let b = rows.len();
        let qt = Array2::from_shape_fn((b, n), |(i, j)| rows[i].0[j]);
        let qn = Array2::from_shape_fn((b, n), |(i, j)| rows[i].1[j]);
        let (v, _, _) = membership_regularizer(&qt, &qn, -1.0).unwrap();
        let mean = rows.iter().map(|(a, c)| loss_q(a, c).unwrap()).sum::<f64>() / b as f64;
        prop_assert!((v - mean).abs() < 1e-12);
    }

    #[test]
    fn infonce_is_mean_cross_entropy_of_the_diagonal(b in 1usize..7, seed in any::<u64>()) {
        let mut state = seed;
        let logits = Array2::from_shape_fn((b, b), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0
        });
        let expected = (0..b)
            .map(|i| log_sum_exp(logits.row(i).as_slice().unwrap()) - logits[[i, i]])
            .sum::<f64>() / b as f64;
        let v = infonce(&logits).unwrap();
        prop_assert!((v - expected).abs() < 1e-9);
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn loss_ua_total_is_the_weighted_sum(gl in -10.0f64..10.0, ll in -10.0f64..10.0, q in -1.0f64..0.0, tau in 0.0f64..1.0) {
        let b = loss_ua(gl, ll, q, tau);
        prop_assert!((b.total - (gl + ll + tau * q)).abs() < 1e-12);
        prop_assert!((b.total - b.recomputed_total()).abs() < 1e-12);
    }

    #[test]
    fn linear_tau_interpolates(total in 1usize..200, frac in 0.0f64..=1.0, tau_final in 0.0f64..1.0) {
        let epoch = ((total as f64) * frac).floor() as usize;
        let v = tau_schedule(epoch, total, tau_final, true).unwrap();
        prop_assert!((v - tau_final * epoch as f64 / total as f64).abs() < 1e-12);
        prop_assert!((tau_schedule(epoch, total, tau_final, false).unwrap() - tau_final).abs() < 1e-15);
    }

    #[test]
    fn minkowski_sum_commutes_and_has_all_pairwise_sums(
        a in prop::collection::vec(prop::collection::vec(-5i32..5, 2), 1..6),
        b in prop::collection::vec(prop::collection::vec(-5i32..5, 2), 1..6),
    ) {
        let to_set = |v: &Vec<Vec<i32>>| PointSet::new(v.iter().map(|p| p.iter().map(|x| *x as f64).collect()).collect()).unwrap();
        let (sa, sb) = (to_set(&a), to_set(&b));
        let ab = minkowski_sum(&sa, &sb).unwrap();
        prop_assert!(ab.same_set(&minkowski_sum(&sb, &sa).unwrap()));
        for p in &a {
            for q in &b {
                prop_assert!(ab.contains(&[(p[0] + q[0]) as f64, (p[1] + q[1]) as f64]));
            }
        }
        let mut distinct: Vec<(i32, i32)> = a.iter().flat_map(|p| b.iter().map(move |q| (p[0] + q[0], p[1] + q[1]))).collect();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(ab.len(), distinct.len());
    }

    #[test]
    fn fusion_modes_match_their_definitions(n in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as f32 / 1000.0
        };
        let charts = Array3::from_shape_fn((2, n, d), |_| next() * 4.0 - 2.0);
        let mut q = Array2::from_shape_fn((2, n), |_| next() + 0.01);
        for mut row in q.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let mean = fuse(&charts, &q, FusionMode::Mean);
        let one_hot = fuse(&charts, &q, FusionMode::OneHot);
        let weighted = fuse(&charts, &q, FusionMode::MembershipWeighted);
        for b in 0..2 {
            let best = (0..n).fold(0, |k, i| if q[[b, i]] > q[[b, k]] { i } else { k });
            for j in 0..d {
                let m: f32 = (0..n).map(|i| charts[[b, i, j]]).sum::<f32>() / n as f32;
                let w: f32 = (0..n).map(|i| q[[b, i]] * charts[[b, i, j]]).sum();
                prop_assert!((mean[[b, j]] - m).abs() < 1e-5);
                prop_assert!((weighted[[b, j]] - w).abs() < 1e-5);
                prop_assert_eq!(one_hot[[b, j]], charts[[b, best, j]]);
            }
        }
    }

    #[test]
    fn split_partitions_episodes(episodes in 1usize..200, seed in any::<u64>()) {
        let parts = match split(episodes, [0.64, 0.28, 0.08], seed) {
            Ok(p) => p,
            Err(e) => {
                // the smallest split holds 8%, so tiny inputs may leave it empty
                prop_assert!(episodes < 13 && e.is_validation(), "{episodes} episodes: {e}");
                return Ok(());
            }
        };
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..episodes).collect::<Vec<_>>());
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        prop_assert_eq!(split(episodes, [0.64, 0.28, 0.08], seed).unwrap(), parts);
    }

    #[test]
    fn config_text_round_trips(n in 1usize..9, d in 1usize..512, batch in 2usize..128, lr in 1e-6f64..1e-1, tau in 0.0f64..1.0, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.atlas.n_charts = n;
        cfg.atlas.chart_dim = d;
        cfg.batch_size = batch;
        cfg.learning_rate = lr;
        cfg.tau_final = tau;
        cfg.seed = seed;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(ua_core::validate_config(&back), ua_core::validate_config(&cfg));
    }
}
