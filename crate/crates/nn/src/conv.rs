use ndarray::{Array2, Array4, Axis};

use crate::init;
use crate::param::{join, Param, ParamSet};
use crate::{NnError, Result};

/// 2-D convolution over channels-last feature maps, computed as im2col + GEMM.
///
/// The weight matrix is `(kh * kw * c_in) x c_out`, rows ordered
/// `(kernel_row, kernel_col, in_channel)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Array2<f32>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        seed: u64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(NnError::Config(format!(
                "conv {name}: channels, kernel and stride must be positive"
            )));
        }
        let fan_in = kernel * kernel * in_channels;
        let weight = init::he_uniform(seed, &join(name, "weight"), fan_in, out_channels, fan_in);
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::zeros(1, out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Spatial output size for an `h x w` input, or `None` if the kernel
    /// does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(usize, usize)> {
        let (_, h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(NnError::Shape {
                layer: "conv2d",
                expected: format!("[*, *, *, {}]", self.in_channels),
                actual: format!("{:?}", x.shape()),
            });
        }
        self.output_hw(h, w).ok_or_else(|| NnError::Shape {
            layer: "conv2d",
            expected: format!("spatial size >= {}", self.kernel),
            actual: format!("{:?}", x.shape()),
        })
    }

    pub fn forward(&self, x: &Array4<f32>) -> Result<(Array4<f32>, Conv2dCache)> {
        let (oh, ow) = self.check_input(x)?;
        let cols = self.im2col(x, oh, ow);
        let out = self.gemm(&cols, x.dim().0, oh, ow);
        Ok((
            out,
            Conv2dCache {
                cols,
                input_dim: x.dim(),
            },
        ))
    }

    pub fn apply(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (oh, ow) = self.check_input(x)?;
        let cols = self.im2col(x, oh, ow);
        Ok(self.gemm(&cols, x.dim().0, oh, ow))
    }

    fn gemm(&self, cols: &Array2<f32>, b: usize, oh: usize, ow: usize) -> Array4<f32> {
        let mut y = cols.dot(&self.weight.value);
        y += &self.bias.value.row(0);
        y.into_shape_with_order((b, oh, ow, self.out_channels))
            .expect("conv output is contiguous")
    }

    /// Accumulates parameter gradients. The input gradient is only computed
    /// when `need_input_grad` is set (the first layer never needs it).
    pub fn backward(
        &mut self,
        cache: &Conv2dCache,
        dy: &Array4<f32>,
        need_input_grad: bool,
    ) -> Option<Array4<f32>> {
        let (b, oh, ow, o) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * oh * ow, o))
            .expect("contiguous");
        self.weight.grad += &cache.cols.t().dot(&dy2);
        self.bias.grad += &dy2.sum_axis(Axis(0)).insert_axis(Axis(0));
        if !need_input_grad {
            return None;
        }
        let dcols = dy2.dot(&self.weight.value.t());
        Some(self.col2im(&dcols, cache.input_dim, oh, ow))
    }

    fn im2col(&self, x: &Array4<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let x = x.as_standard_layout();
        let (b, h, w, c) = x.dim();
        let k = self.kernel;
        let kcols = k * k * c;
        let mut cols = Array2::<f32>::zeros((b * oh * ow, kcols));
        let src = x.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        let pad = self.padding as isize;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * kcols;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let d = row + (ky * k + kx) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        dcols: &Array2<f32>,
        (b, h, w, c): (usize, usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Array4<f32> {
        let k = self.kernel;
        let kcols = k * k * c;
        let mut dx = Array4::<f32>::zeros((b, h, w, c));
        let dst = dx.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("gemm output is standard layout");
        let pad = self.padding as isize;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * kcols;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let s = row + (ky * k + kx) * c;
                            for (o, i) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *o += *i;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl ParamSet for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
