//! Closed-form kernels on membership distributions, and finite-set checks of
//! the chart-containment results that justify mean-of-heads targets.
//!
//! Sets are finite samples of real vectors. Membership is decided with a
//! Euclidean tolerance of [`SET_TOLERANCE`] since the same sum computed in a
//! different order rarely agrees bit for bit.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SET_TOLERANCE: f64 = 1e-9;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Hash cell edge; must exceed `SET_TOLERANCE`.
const CELL: f64 = 1e-6;

pub fn check_distribution(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::InvalidDistribution("empty probability vector".into()));
    }
    if let Some(bad) = q.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is not a non-negative finite number")));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

/// Squared δ-kernel MMD between `q` and the uniform distribution:
/// `Σ (q_i - 1/n)²`, in `[0, 1 - 1/n]`.
pub fn mmd_delta_sq(q: &[f64]) -> Result<f64> {
    check_distribution(q)?;
    let u = 1.0 / q.len() as f64;
    Ok(q.iter().map(|v| (v - u) * (v - u)).sum())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(q: &[f64]) -> Result<f64> {
    check_distribution(q)?;
    Ok(q.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Precondition("point set must be non-empty".into()))?;
        let dim = first.len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.points.iter().any(|q| within_tolerance(p, q))
    }

    /// Containment of every point of `self` in `other`.
    pub fn is_subset_of(&self, other: &PointSet) -> bool {
        let index = PointIndex::new(other);
        self.points.iter().all(|p| index.contains(p))
    }

    /// Set equality up to tolerance.
    pub fn same_set(&self, other: &PointSet) -> bool {
        self.is_subset_of(other) && other.is_subset_of(self)
    }
}

fn within_tolerance(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() <= SET_TOLERANCE
}

/// Spatial hash over a point set for tolerant membership queries.
struct PointIndex<'a> {
    cells: HashMap<Vec<i64>, Vec<&'a [f64]>>,
}

impl<'a> PointIndex<'a> {
    fn new(set: &'a PointSet) -> Self {
        let mut cells: HashMap<Vec<i64>, Vec<&'a [f64]>> = HashMap::new();
        for p in &set.points {
            cells.entry(cell_of(p)).or_default().push(p);
        }
        Self { cells }
    }

    fn contains(&self, p: &[f64]) -> bool {
        let base = cell_of(p);
        let mut offset = vec![-1i64; base.len()];
        loop {
            let key: Vec<i64> = base.iter().zip(&offset).map(|(b, o)| b + o).collect();
            if let Some(bucket) = self.cells.get(&key) {
                if bucket.iter().any(|q| within_tolerance(p, q)) {
                    return true;
                }
            }
            // odometer over {-1, 0, 1}^dim
            let mut i = 0;
            loop {
                if i == offset.len() {
                    return false;
                }
                offset[i] += 1;
                if offset[i] <= 1 {
                    break;
                }
                offset[i] = -1;
                i += 1;
            }
        }
    }
}

fn cell_of(p: &[f64]) -> Vec<i64> {
    p.iter().map(|v| (v / CELL).floor() as i64).collect()
}

fn dedup(points: Vec<Vec<f64>>, dim: usize) -> PointSet {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    'outer: for p in points {
        let base = cell_of(&p);
        for idx in neighbours(&base).filter_map(|k| cells.get(&k)).flatten() {
            if within_tolerance(&p, &kept[*idx]) {
                continue 'outer;
            }
        }
        cells.entry(base).or_default().push(kept.len());
        kept.push(p);
    }
    PointSet { dim, points: kept }
}

fn neighbours(base: &[i64]) -> impl Iterator<Item = Vec<i64>> + '_ {
    let n = 3usize.pow(base.len() as u32);
    (0..n).map(move |mut code| {
        base.iter()
            .map(|b| {
                let o = (code % 3) as i64 - 1;
                code /= 3;
                b + o
            })
            .collect()
    })
}

/// `{p + q | p ∈ a, q ∈ b}`, duplicates within tolerance merged.
pub fn minkowski_sum(a: &PointSet, b: &PointSet) -> Result<PointSet> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            actual: b.dim,
        });
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for p in &a.points {
        for q in &b.points {
            out.push(p.iter().zip(q).map(|(x, y)| x + y).collect());
        }
    }
    Ok(dedup(out, a.dim))
}

/// Minkowski sum of a non-empty list of sets, left to right.
pub fn minkowski_sum_all(sets: &[PointSet]) -> Result<PointSet> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| Error::Precondition("need at least one set".into()))?;
    rest.iter().try_fold(first.clone(), |acc, s| minkowski_sum(&acc, s))
}

/// `{λ p | p ∈ a}`.
pub fn scale_set(a: &PointSet, lambda: f64) -> PointSet {
    let points = a
        .points
        .iter()
        .map(|p| p.iter().map(|v| lambda * v).collect())
        .collect();
    dedup(points, a.dim)
}

fn check_pairing(intersection_images: &[PointSet], charts: &[PointSet]) -> Result<usize> {
    if intersection_images.is_empty() {
        return Err(Error::Precondition("need at least one chart".into()));
    }
    if intersection_images.len() != charts.len() {
        return Err(Error::Precondition(format!(
            "{} intersection images for {} charts",
            intersection_images.len(),
            charts.len()
        )));
    }
    let dim = charts[0].dim;
    for s in intersection_images.iter().chain(charts) {
        if s.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim,
            });
        }
    }
    Ok(dim)
}

/// The sum of the chart images of the common intersection is contained in
/// the sum of the chart codomains.
///
/// Fails with a precondition error if some `intersection_images[i]` is not
/// a subset of `charts[i]`.
pub fn check_prop1(intersection_images: &[PointSet], charts: &[PointSet]) -> Result<bool> {
    check_pairing(intersection_images, charts)?;
    for (i, (img, chart)) in intersection_images.iter().zip(charts).enumerate() {
        if !img.is_subset_of(chart) {
            return Err(Error::Precondition(format!(
                "intersection image {i} is not contained in chart {i}"
            )));
        }
    }
    let lhs = minkowski_sum_all(intersection_images)?;
    let rhs = minkowski_sum_all(charts)?;
    Ok(lhs.is_subset_of(&rhs))
}

/// `Σ (1/n)·I_i ⊆ (1/n)·Σ V_i`.
///
/// Unlike [`check_prop1`] this reports a violated containment as `false`
/// instead of rejecting it, so that counterexamples can be observed.
pub fn check_prop2(intersection_images: &[PointSet], charts: &[PointSet]) -> Result<bool> {
    check_pairing(intersection_images, charts)?;
    let inv = 1.0 / charts.len() as f64;
    let scaled: Vec<PointSet> = intersection_images.iter().map(|s| scale_set(s, inv)).collect();
    let lhs = minkowski_sum_all(&scaled)?;
    let rhs = scale_set(&minkowski_sum_all(charts)?, inv);
    Ok(lhs.is_subset_of(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set(points: &[&[f64]]) -> PointSet {
        PointSet::new(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn mmd_examples() {
        assert_abs_diff_eq!(mmd_delta_sq(&[0.5, 0.5]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mmd_delta_sq(&[1.0, 0.0]).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mmd_delta_sq(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75, epsilon = 1e-12);
        assert!(matches!(mmd_delta_sq(&[0.7, 0.7]), Err(Error::InvalidDistribution(_))));
        assert!(mmd_delta_sq(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(entropy(&[0.125; 8]).unwrap(), 8f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(entropy(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn minkowski_examples() {
        let s = minkowski_sum(&set(&[&[0.0, 0.0], &[1.0, 0.0]]), &set(&[&[0.0, 1.0]])).unwrap();
        assert!(s.same_set(&set(&[&[0.0, 1.0], &[1.0, 1.0]])));
        let v = set(&[&[3.5, -2.0]]);
        assert!(minkowski_sum(&v, &set(&[&[0.0, 0.0]])).unwrap().same_set(&v));
        let s = minkowski_sum(&set(&[&[1.0]]), &set(&[&[2.0], &[3.0]])).unwrap();
        assert!(s.same_set(&set(&[&[3.0], &[4.0]])));
        assert!(minkowski_sum(&set(&[&[1.0]]), &set(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn minkowski_merges_duplicates() {
        let s = minkowski_sum(&set(&[&[0.0], &[1.0]]), &set(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn scale_examples() {
        let a = set(&[&[2.0, 4.0], &[-1.0, 0.5]]);
        assert!(scale_set(&a, 1.0).same_set(&a));
        let z = scale_set(&a, 0.0);
        assert_eq!(z.len(), 1);
        assert!(z.contains(&[0.0, 0.0]));
        assert!(scale_set(&set(&[&[2.0, 4.0]]), 0.5).same_set(&set(&[&[1.0, 2.0]])));
    }

    #[test]
    fn prop1_equality_case_and_precondition() {
        let charts = vec![set(&[&[0.0], &[1.0]]), set(&[&[2.0], &[5.0]])];
        assert!(check_prop1(&charts, &charts).unwrap());
        let bad = vec![set(&[&[9.0]]), set(&[&[2.0]])];
        assert!(matches!(check_prop1(&bad, &charts), Err(Error::Precondition(_))));
    }

    #[test]
    fn prop2_single_chart_and_disjoint_counterexample() {
        let chart = vec![set(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]])];
        let img = vec![set(&[&[0.0, 0.0], &[1.0, 0.0]])];
        assert!(check_prop2(&img, &chart).unwrap());

        let imgs = vec![set(&[&[0.0, 0.0], &[1.0, 1.0]]), set(&[&[0.0, 0.0]])];
        let translated = vec![set(&[&[10.0, 10.0], &[11.0, 11.0]]), set(&[&[10.0, 10.0]])];
        assert!(!check_prop2(&imgs, &translated).unwrap());
    }
}
