use ndarray::Array4;

use crate::activation::{relu, relu_backward};
use crate::conv::{Conv2d, Conv2dCache};
use crate::param::{join, Param, ParamSet};
use crate::Result;

/// Basic residual block: `relu(conv3x3(relu(conv3x3(x))) + shortcut(x))`.
///
/// The shortcut is the identity when shapes agree and a strided 1x1
/// convolution otherwise.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    c1: Conv2dCache,
    h1: Array4<f32>,
    c2: Conv2dCache,
    sc: Option<Conv2dCache>,
    out: Array4<f32>,
}

impl ResBlock {
    pub fn new(seed: u64, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(seed, &join(name, "conv1"), in_ch, out_ch, 3, stride, 1)?;
        let conv2 = Conv2d::new(seed, &join(name, "conv2"), out_ch, out_ch, 3, 1, 1)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(seed, &join(name, "shortcut"), in_ch, out_ch, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.conv1.output_hw(h, w)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Result<(Array4<f32>, ResBlockCache)> {
        let (a1, c1) = self.conv1.forward(x)?;
        let h1 = relu(&a1);
        let (a2, c2) = self.conv2.forward(&h1)?;
        let (skip, sc) = match &self.shortcut {
            Some(conv) => {
                let (s, cache) = conv.forward(x)?;
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(a2 + skip));
        Ok((
            out.clone(),
            ResBlockCache {
                c1,
                h1,
                c2,
                sc,
                out,
            },
        ))
    }

    pub fn apply(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let h1 = relu(&self.conv1.apply(x)?);
        let a2 = self.conv2.apply(&h1)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.apply(x)?,
            None => x.clone(),
        };
        Ok(relu(&(a2 + skip)))
    }

    pub fn backward(&mut self, cache: &ResBlockCache, dy: &Array4<f32>, need_input_grad: bool) -> Option<Array4<f32>> {
        let dpre = relu_backward(&cache.out, dy);
        let dh1 = self
            .conv2
            .backward(&cache.c2, &dpre, true)
            .expect("input grad requested");
        let da1 = relu_backward(&cache.h1, &dh1);
        let dx_main = self.conv1.backward(&cache.c1, &da1, need_input_grad);
        let dx_skip = match (&mut self.shortcut, &cache.sc) {
            (Some(conv), Some(sc)) => conv.backward(sc, &dpre, need_input_grad),
            _ => need_input_grad.then(|| dpre.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        }
    }
}

impl ParamSet for ResBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.params(&join(prefix, "conv1"), out);
        self.conv2.params(&join(prefix, "conv2"), out);
        if let Some(s) = &self.shortcut {
            s.params(&join(prefix, "shortcut"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.params_mut(&join(prefix, "conv1"), out);
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(&join(prefix, "shortcut"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsampling_block_shapes_and_gradient() {
        let mut block = ResBlock::new(2, "b", 3, 4, 2).unwrap();
        let x = Array4::from_shape_fn((2, 8, 8, 3), |(a, b, c, d)| ((a + b * 3 + c * 5 + d) % 7) as f32 / 7.0);
        let (y, cache) = block.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 4, 4, 4));
        assert_eq!(block.apply(&x).unwrap(), y);
        let dx = block.backward(&cache, &Array4::ones(y.dim()), true).unwrap();
        assert_eq!(dx.dim(), x.dim());
        let gsum: f32 = block.named_params().iter().map(|(_, p)| p.grad.iter().map(|g| g.abs()).sum::<f32>()).sum();
        assert!(gsum > 0.0);
    }
}
