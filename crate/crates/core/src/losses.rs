//! Training objectives: bilinear scores, InfoNCE, the anti-uniform membership
//! regularizer, their weighted sum, the regularizer weight schedule, and the
//! NT-Xent loss used by the augmentation-contrastive pipeline.
//!
//! Everything here works in double precision. Batched variants return the
//! loss together with its gradients so the training loop can back-propagate
//! without an autodiff engine.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use ua_nn::init::uniform;
use ua_nn::param::join;
use ua_nn::{Param, ParamSet};

use crate::atlasmath::{check_distribution, mmd_delta_sq};
use crate::error::{Error, Result};

/// Scalar values of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gl: f64,
    pub l_ll: f64,
    pub l_q: f64,
    pub tau: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recomputed_total(&self) -> f64 {
        self.l_gl + self.l_ll + self.tau * self.l_q
    }

    pub fn is_finite(&self) -> bool {
        [self.l_gl, self.l_ll, self.l_q, self.tau, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `total = l_gl + l_ll + tau * l_q`.
pub fn loss_ua(l_gl: f64, l_ll: f64, l_q: f64, tau: f64) -> LossBreakdown {
    LossBreakdown {
        l_gl,
        l_ll,
        l_q,
        tau,
        total: l_gl + l_ll + tau * l_q,
    }
}

/// Regularizer weight for an epoch. With `linear` the weight ramps from zero
/// at epoch 0 to `tau_final` at `total_epochs`.
pub fn tau_schedule(epoch: usize, total_epochs: usize, tau_final: f64, linear: bool) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Precondition("total_epochs must be ≥ 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Precondition(format!(
            "epoch {epoch} is outside 0..={total_epochs}"
        )));
    }
    if !linear {
        return Ok(tau_final);
    }
    if epoch == total_epochs {
        return Ok(tau_final);
    }
    Ok(tau_final * epoch as f64 / total_epochs as f64)
}

/// `-1/2 (mmd(q_t) + mmd(q_next))`; pushes memberships away from uniform.
pub fn loss_q(q_t: &[f64], q_next: &[f64]) -> Result<f64> {
    if q_t.len() != q_next.len() {
        return Err(Error::DimensionMismatch {
            expected: q_t.len(),
            actual: q_next.len(),
        });
    }
    Ok(-0.5 * (mmd_delta_sq(q_t)? + mmd_delta_sq(q_next)?))
}

/// `+1/2 (mmd(q_t) + mmd(q_next))`; pulls memberships toward uniform.
pub fn mmd_uniform_baseline_loss(q_t: &[f64], q_next: &[f64]) -> Result<f64> {
    Ok(-loss_q(q_t, q_next)?)
}

/// Batched regularizer with gradients: averages the per-pair value over the
/// batch. `sign = -1` gives [`loss_q`], `sign = +1` the uniform-prior variant.
pub fn membership_regularizer(
    q_t: &Array2<f64>,
    q_next: &Array2<f64>,
    sign: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if q_t.dim() != q_next.dim() {
        return Err(Error::DimensionMismatch {
            expected: q_t.len(),
            actual: q_next.len(),
        });
    }
    let (b, n) = q_t.dim();
    if b == 0 {
        return Err(Error::Precondition("empty membership batch".into()));
    }
    for q in q_t.rows().into_iter().chain(q_next.rows()) {
        check_distribution(q.as_slice().unwrap_or(&q.to_vec()))?;
    }
    let uniform = 1.0 / n as f64;
    let dev_t = q_t.mapv(|v| v - uniform);
    let dev_n = q_next.mapv(|v| v - uniform);
    let value = sign * 0.5 * (dev_t.mapv(|v| v * v).sum() + dev_n.mapv(|v| v * v).sum()) / b as f64;
    let scale = sign / b as f64;
    Ok((value, dev_t * scale, dev_n * scale))
}

/// Trainable bilinear forms used only during pretraining.
#[derive(Debug, Clone)]
pub struct BilinearScorers {
    /// `d x C`
    pub w_g: Param,
    /// `C x C`
    pub w_h: Param,
}

impl BilinearScorers {
    pub fn new(seed: u64, chart_dim: usize, channels: usize) -> Self {
        let w_g = uniform(seed, "scorer.w_g", chart_dim, channels, 1.0 / (chart_dim as f32).sqrt());
        let w_h = uniform(seed, "scorer.w_h", channels, channels, 1.0 / (channels as f32).sqrt());
        Self {
            w_g: Param::new(w_g),
            w_h: Param::new(w_h),
        }
    }

    pub fn w_g64(&self) -> Array2<f64> {
        self.w_g.value.mapv(f64::from)
    }

    pub fn w_h64(&self) -> Array2<f64> {
        self.w_h.value.mapv(f64::from)
    }
}

impl ParamSet for BilinearScorers {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w_g"), &self.w_g));
        out.push((join(prefix, "w_h"), &self.w_h));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "w_g"), &mut self.w_g));
        out.push((join(prefix, "w_h"), &mut self.w_h));
    }
}

/// Per-location `fused_tᵀ W_g f_{m,n}(x_next)` for one anchor, `M x N`.
pub fn score_global_local(
    fused_t: ArrayView1<f64>,
    local_next: &Array3<f64>,
    w_g: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (m, n, c) = local_next.dim();
    if w_g.dim() != (fused_t.len(), c) {
        return Err(Error::DimensionMismatch {
            expected: fused_t.len() * c,
            actual: w_g.len(),
        });
    }
    let a = fused_t.dot(w_g);
    let flat = local_next.view().into_shape_with_order((m * n, c)).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(flat.dot(&a).into_shape_with_order((m, n)).expect("m*n scores"))
}

/// Per-location `f_{m,n}(x_t)ᵀ W_h f_{m,n}(x_next)`, `M x N`.
pub fn score_local_local(local_t: &Array3<f64>, local_next: &Array3<f64>, w_h: &Array2<f64>) -> Result<Array2<f64>> {
    if local_t.dim() != local_next.dim() {
        return Err(Error::InputShape {
            expected: local_t.shape().to_vec(),
            actual: local_next.shape().to_vec(),
        });
    }
    let (m, n, c) = local_t.dim();
    if w_h.dim() != (c, c) {
        return Err(Error::DimensionMismatch {
            expected: c * c,
            actual: w_h.len(),
        });
    }
    Ok(Array2::from_shape_fn((m, n), |(i, j)| {
        local_t.slice(s![i, j, ..]).dot(w_h).dot(&local_next.slice(s![i, j, ..]))
    }))
}

fn check_square(logits: &ArrayView2<f64>) -> Result<usize> {
    let (r, c) = logits.dim();
    if r != c {
        return Err(Error::DimensionMismatch { expected: r, actual: c });
    }
    if r == 0 {
        return Err(Error::Precondition("empty score matrix".into()));
    }
    Ok(r)
}

fn row_softmax(row: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = row.mapv(|v| (v - max).exp());
    let z = e.sum();
    (e / z, max + z.ln())
}

/// Mean over rows of `-log softmax(row)[diag]`.
pub fn infonce(logits: &Array2<f64>) -> Result<f64> {
    Ok(infonce_with_grad(logits)?.0)
}

/// InfoNCE value and its gradient `(softmax - I) / B`.
pub fn infonce_with_grad(logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let b = check_square(&logits.view())?;
    let mut grad = Array2::zeros((b, b));
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let (p, lse) = row_softmax(row);
        total += lse - row[i];
        let mut g = grad.row_mut(i);
        g.assign(&p);
        g[i] -= 1.0;
    }
    grad /= b as f64;
    Ok((total / b as f64, grad))
}

/// Spatiotemporal objective values and gradients for one batch.
#[derive(Debug, Clone)]
pub struct DimLossGrads {
    pub l_gl: f64,
    pub l_ll: f64,
    /// `B x d`
    pub d_target: Array2<f64>,
    /// `B x M x N x C`
    pub d_local_t: Array4<f64>,
    pub d_local_next: Array4<f64>,
    pub d_w_g: Array2<f64>,
    pub d_w_h: Array2<f64>,
}

/// Global-local and local-local InfoNCE summed over locations and averaged by
/// the map size, with in-batch negatives.
pub fn dim_losses(
    target: &Array2<f64>,
    local_t: &Array4<f64>,
    local_next: &Array4<f64>,
    w_g: &Array2<f64>,
    w_h: &Array2<f64>,
) -> Result<DimLossGrads> {
    if local_t.dim() != local_next.dim() {
        return Err(Error::InputShape {
            expected: local_t.shape().to_vec(),
            actual: local_next.shape().to_vec(),
        });
    }
    let (b, m, n, c) = local_t.dim();
    let d = target.ncols();
    if target.nrows() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: target.nrows(),
        });
    }
    if w_g.dim() != (d, c) || w_h.dim() != (c, c) {
        return Err(Error::DimensionMismatch {
            expected: d * c + c * c,
            actual: w_g.len() + w_h.len(),
        });
    }
    let locations = (m * n) as f64;
    let anchors = target.dot(w_g);
    let mut d_anchors = Array2::<f64>::zeros((b, c));
    let mut d_local_t = Array4::<f64>::zeros((b, m, n, c));
    let mut d_local_next = Array4::<f64>::zeros((b, m, n, c));
    let mut d_w_h = Array2::<f64>::zeros((c, c));
    let (mut l_gl, mut l_ll) = (0.0, 0.0);
    for i in 0..m {
        for j in 0..n {
            let f_t = local_t.slice(s![.., i, j, ..]);
            let f_next = local_next.slice(s![.., i, j, ..]);

            let (lg, mut dg) = infonce_with_grad(&anchors.dot(&f_next.t()))?;
            dg /= locations;
            l_gl += lg;
            d_anchors += &dg.dot(&f_next);
            let mut dn = d_local_next.slice_mut(s![.., i, j, ..]);
            dn += &dg.t().dot(&anchors);

            let g = f_t.dot(w_h);
            let (ll, mut dl) = infonce_with_grad(&g.dot(&f_next.t()))?;
            dl /= locations;
            l_ll += ll;
            let d_g = dl.dot(&f_next);
            dn += &dl.t().dot(&g);
            d_local_t.slice_mut(s![.., i, j, ..]).assign(&d_g.dot(&w_h.t()));
            d_w_h += &f_t.t().dot(&d_g);
        }
    }
    Ok(DimLossGrads {
        l_gl: l_gl / locations,
        l_ll: l_ll / locations,
        d_target: d_anchors.dot(&w_g.t()),
        d_local_t,
        d_local_next,
        d_w_g: target.t().dot(&d_anchors),
        d_w_h,
    })
}

/// Normalized-temperature cross-entropy over two views (`B x d` each, not
/// yet normalized). Returns the loss and the gradients for both inputs.
pub fn nt_xent(v1: &Array2<f64>, v2: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if v1.dim() != v2.dim() {
        return Err(Error::DimensionMismatch {
            expected: v1.nrows(),
            actual: v2.nrows(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Precondition("temperature must be > 0".into()));
    }
    let b = v1.nrows();
    if b == 0 {
        return Err(Error::Precondition("empty view batch".into()));
    }
    let v = ndarray::concatenate(Axis(0), &[v1.view(), v2.view()]).expect("same widths");
    let norms: Array1<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let u = &v / &norms.view().insert_axis(Axis(1));
    let sim = u.dot(&u.t()) / temperature;
    let two_b = 2 * b;
    let mut d_sim = Array2::<f64>::zeros((two_b, two_b));
    let mut total = 0.0;
    for k in 0..two_b {
        let pos = (k + b) % two_b;
        let max = (0..two_b).filter(|&j| j != k).map(|j| sim[[k, j]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..two_b).filter(|&j| j != k).map(|j| (sim[[k, j]] - max).exp()).sum();
        total += max + z.ln() - sim[[k, pos]];
        for j in (0..two_b).filter(|&j| j != k) {
            d_sim[[k, j]] = (sim[[k, j]] - max).exp() / z;
        }
        d_sim[[k, pos]] -= 1.0;
    }
    d_sim /= two_b as f64;
    let d_u = (&d_sim + &d_sim.t()).dot(&u) / temperature;
    let mut d_v = Array2::<f64>::zeros((two_b, v.ncols()));
    for k in 0..two_b {
        let uk = u.row(k);
        let du = d_u.row(k);
        let proj = uk.dot(&du);
        d_v.row_mut(k).assign(&((&du - &(&uk * proj)) / norms[k]));
    }
    let d1 = d_v.slice(s![..b, ..]).to_owned();
    let d2 = d_v.slice(s![b.., ..]).to_owned();
    Ok((total / two_b as f64, d1, d2))
}

/// Gradients of the augmentation-contrastive objective.
#[derive(Debug, Clone)]
pub struct SimclrGrads {
    /// `B x n x d` per view.
    pub d_charts1: Array3<f64>,
    pub d_charts2: Array3<f64>,
    /// `B x n` per view.
    pub d_q1: Array2<f64>,
    pub d_q2: Array2<f64>,
}

/// NT-Xent over the mean-of-heads embeddings of both views plus `tau` times
/// the membership regularizer on both views' memberships.
pub fn simclr_ua_step(
    charts1: &Array3<f64>,
    charts2: &Array3<f64>,
    q1: &Array2<f64>,
    q2: &Array2<f64>,
    temperature: f64,
    tau: f64,
) -> Result<(LossBreakdown, SimclrGrads)> {
    if charts1.dim() != charts2.dim() {
        return Err(Error::DimensionMismatch {
            expected: charts1.dim().0,
            actual: charts2.dim().0,
        });
    }
    let (b, n, d) = charts1.dim();
    let mean1 = charts1.mean_axis(Axis(1)).expect("n ≥ 1");
    let mean2 = charts2.mean_axis(Axis(1)).expect("n ≥ 1");
    let (l_con, dm1, dm2) = nt_xent(&mean1, &mean2, temperature)?;
    let (l_q, dq1, dq2) = membership_regularizer(q1, q2, -1.0)?;
    let spread = |dm: &Array2<f64>| {
        let mut out = Array3::zeros((b, n, d));
        for i in 0..n {
            out.slice_mut(s![.., i, ..]).assign(&(dm / n as f64));
        }
        out
    };
    Ok((
        loss_ua(l_con, 0.0, l_q, tau),
        SimclrGrads {
            d_charts1: spread(&dm1),
            d_charts2: spread(&dm2),
            d_q1: dq1 * tau,
            d_q2: dq2 * tau,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_q_examples() {
        assert_abs_diff_eq!(loss_q(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_q(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -0.5, epsilon = 1e-12);
        let u = [0.25; 4];
        assert_abs_diff_eq!(loss_q(&[1.0, 0.0, 0.0, 0.0], &u).unwrap(), -0.375, epsilon = 1e-12);
        assert_abs_diff_eq!(mmd_uniform_baseline_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.5, epsilon = 1e-12);
        assert!(loss_q(&[0.7, 0.7], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_ua_and_schedule() {
        let l = loss_ua(1.0, 2.0, -0.5, 0.1);
        assert_abs_diff_eq!(l.total, 2.95, epsilon = 1e-12);
        assert_eq!(loss_ua(0.3, 0.4, -0.2, 0.0).total, 0.7);
        assert_eq!(loss_ua(0.0, 0.0, 0.0, 0.0).total, 0.0);
        assert_eq!(tau_schedule(0, 100, 0.1, true).unwrap(), 0.0);
        assert_abs_diff_eq!(tau_schedule(50, 100, 0.1, true).unwrap(), 0.05, epsilon = 1e-12);
        assert_eq!(tau_schedule(100, 100, 0.1, true).unwrap(), 0.1);
        assert_eq!(tau_schedule(37, 100, 0.02, false).unwrap(), 0.02);
        assert!(tau_schedule(101, 100, 0.1, true).is_err());
        assert!(tau_schedule(0, 0, 0.1, true).is_err());
    }

    #[test]
    fn infonce_examples() {
        assert_abs_diff_eq!(infonce(&Array2::from_elem((4, 4), 0.3)).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let l = infonce(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(l, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_eq!(infonce(&array![[5.0]]).unwrap(), 0.0);
        assert!(infonce(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn score_examples() {
        let mut local = Array3::zeros((2, 2, 3));
        local[[1, 0, 0]] = 1.0;
        let e1 = array![1.0, 0.0, 0.0];
        let s = score_global_local(e1.view(), &local, &Array2::eye(3)).unwrap();
        assert_eq!(s[[1, 0]], 1.0);
        assert_eq!(s.sum(), 1.0);
        let zero = score_global_local(Array1::zeros(3).view(), &local, &Array2::eye(3)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let ones = Array3::from_shape_fn((2, 2, 2), |(_, _, k)| if k == 0 { 1.0 } else { 0.0 });
        let h = score_local_local(&ones, &ones, &Array2::eye(2)).unwrap();
        assert!(h.iter().all(|v| *v == 1.0));
        let other = Array3::from_shape_fn((2, 2, 2), |(_, _, k)| if k == 1 { 1.0 } else { 0.0 });
        assert!(score_local_local(&ones, &other, &Array2::eye(2)).unwrap().iter().all(|v| *v == 0.0));
        assert!(score_local_local(&ones, &Array3::zeros((1, 2, 2)), &Array2::eye(2)).is_err());
    }

    #[test]
    fn nt_xent_equal_embeddings() {
        let v = Array2::from_elem((3, 4), 1.0);
        let (l, _, _) = nt_xent(&v, &v, 0.5).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
    }

    fn fd_check(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>, grad: &Array2<f64>) {
        let eps = 1e-5;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(err < 1e-4, "at {idx:?}: fd {fd} analytic {}", grad[idx]);
        }
    }

    #[test]
    fn nt_xent_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v1 = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let v2 = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let (_, g1, g2) = nt_xent(&v1, &v2, 0.5).unwrap();
        fd_check(&|x| nt_xent(x, &v2, 0.5).unwrap().0, &v1, &g1);
        fd_check(&|x| nt_xent(&v1, x, 0.5).unwrap().0, &v2, &g2);
    }

    #[test]
    fn dim_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
        let target = r((3, 2));
        let w_g = r((2, 3));
        let w_h = r((3, 3));
        let lt = Array4::from_shape_vec((3, 2, 1, 3), r((3, 6)).into_raw_vec_and_offset().0).unwrap();
        let ln = Array4::from_shape_vec((3, 2, 1, 3), r((3, 6)).into_raw_vec_and_offset().0).unwrap();
        let g = dim_losses(&target, &lt, &ln, &w_g, &w_h).unwrap();
        let total = |t: &Array2<f64>, lt: &Array4<f64>, ln: &Array4<f64>, wg: &Array2<f64>, wh: &Array2<f64>| {
            let o = dim_losses(t, lt, ln, wg, wh).unwrap();
            o.l_gl + o.l_ll
        };
        fd_check(&|x| total(x, &lt, &ln, &w_g, &w_h), &target, &g.d_target);
        fd_check(&|x| total(&target, &lt, &ln, x, &w_h), &w_g, &g.d_w_g);
        fd_check(&|x| total(&target, &lt, &ln, &w_g, x), &w_h, &g.d_w_h);
        let flat = |a: &Array4<f64>| a.clone().into_shape_with_order((3, 6)).unwrap();
        let unflat = |a: &Array2<f64>| a.clone().into_shape_with_order((3, 2, 1, 3)).unwrap();
        fd_check(&|x| total(&target, &unflat(x), &ln, &w_g, &w_h), &flat(&lt), &flat(&g.d_local_t));
        fd_check(&|x| total(&target, &lt, &unflat(x), &w_g, &w_h), &flat(&ln), &flat(&g.d_local_next));
    }

    #[test]
    fn regularizer_matches_scalar_form() {
        let qt = array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let qn = array![[0.3, 0.3, 0.4], [1.0, 0.0, 0.0]];
        let (v, _, _) = membership_regularizer(&qt, &qn, -1.0).unwrap();
        let per: f64 = (0..2)
            .map(|i| loss_q(qt.row(i).as_slice().unwrap(), qn.row(i).as_slice().unwrap()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(v, per, epsilon = 1e-12);
        let (p, _, _) = membership_regularizer(&qt, &qn, 1.0).unwrap();
        assert_abs_diff_eq!(p, -per, epsilon = 1e-12);
    }
}
