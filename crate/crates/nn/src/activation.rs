use ndarray::{Array, Array2, Axis, Dimension, Zip};

pub fn relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_inplace<D: Dimension>(x: &mut Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a rectifier given its *output*.
pub fn relu_backward<D: Dimension>(y: &Array<f32, D>, dy: &Array<f32, D>) -> Array<f32, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|g, &out| {
        if out <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Back-propagates `dp` through `p = softmax(l)` row-wise.
pub fn softmax_rows_backward(p: &Array2<f32>, dp: &Array2<f32>) -> Array2<f32> {
    let mut dl = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dr) in dl.axis_iter_mut(Axis(0)).zip(p.rows()).zip(dp.rows()) {
        let inner: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pi), &di) in out.iter_mut().zip(pr.iter()).zip(dr.iter()) {
            *o = pi * (di - inner);
        }
    }
    dl
}
