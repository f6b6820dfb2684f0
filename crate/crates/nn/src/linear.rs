use ndarray::{Array2, Axis};

use crate::init;
use crate::param::{join, Param, ParamSet};
use crate::{NnError, Result};

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    /// Output layer initialization (`1/sqrt(fan_in)` uniform, zero bias).
    pub fn new(seed: u64, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = init::fan_in_uniform(seed, &join(name, "weight"), input, output, input);
        Self {
            weight: Param::new(weight),
            bias: bias.then(|| Param::zeros(1, output)),
        }
    }

    pub fn from_weight(weight: Array2<f32>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Result<(Array2<f32>, LinearCache)> {
        let y = self.apply(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    /// Forward without caching; used for frozen inference.
    pub fn apply(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.in_dim() {
            return Err(NnError::Shape {
                layer: "linear",
                expected: format!("[*, {}]", self.in_dim()),
                actual: format!("{:?}", x.shape()),
            });
        }
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value.row(0);
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f32>) -> Array2<f32> {
        self.weight.grad += &cache.input.t().dot(dy);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.value.t())
    }
}

impl ParamSet for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_backward_shapes() {
        let mut l = Linear::new(1, "l", 3, 2, true);
        l.bias.as_mut().unwrap().value = array![[0.5, -0.5]];
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let (y, cache) = l.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 2));
        assert!((y[[0, 0]] - (l.weight.value[[0, 0]] + 0.5)).abs() < 1e-7);
        let dx = l.backward(&cache, &Array2::ones((2, 2)));
        assert_eq!(dx.dim(), (2, 3));
        assert_eq!(l.bias.as_ref().unwrap().grad, array![[2.0, 2.0]]);
    }

    #[test]
    fn rejects_wrong_width() {
        let l = Linear::new(1, "l", 3, 2, false);
        assert!(l.apply(&Array2::zeros((1, 4))).is_err());
    }
}
