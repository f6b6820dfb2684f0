use ndarray::{Array2, Array4, Axis};

/// Mean over the spatial axes of a channels-last map: `B x H x W x C -> B x C`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        let (_, h, w, _) = x.dim();
        x.sum_axis(Axis(1)).sum_axis(Axis(1)) / (h * w) as f32
    }

    pub fn backward(&self, dim: (usize, usize, usize, usize), dy: &Array2<f32>) -> Array4<f32> {
        let (b, h, w, c) = dim;
        let scale = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((b, h, w, c), |(bi, _, _, ci)| dy[[bi, ci]] * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_spatially() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, i, j, c)| (i * 2 + j) as f32 + c as f32 * 10.0);
        let y = GlobalAvgPool.forward(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 11.5);
        let dx = GlobalAvgPool.backward(x.dim(), &Array2::ones((1, 2)));
        assert!(dx.iter().all(|&v| v == 0.25));
    }
}
