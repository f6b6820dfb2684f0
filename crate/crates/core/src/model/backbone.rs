use ndarray::{Array2, Array4};
use ua_nn::activation::{relu, relu_backward};
use ua_nn::param::join;
use ua_nn::{Conv2d, Conv2dCache, GlobalAvgPool, Param, ParamSet, ResBlock, ResBlockCache};

use crate::config::{BackboneKind, ModelShape};
use crate::error::{Error, Result};

/// (kernel, stride) of the three spatiotemporal-encoder stages.
const ST_DIM_STAGES: [(usize, usize); 3] = [(8, 4), (4, 2), (3, 1)];

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// `(M, N, C)` of the local feature map for a model shape, or `None` when
/// the input is too small for the backbone.
pub fn local_map_shape(shape: &ModelShape) -> Option<(usize, usize, usize)> {
    let (mut h, mut w) = (shape.image_height, shape.image_width);
    match shape.backbone {
        BackboneKind::StDim => {
            if shape.conv_widths.len() != ST_DIM_STAGES.len() {
                return None;
            }
            for &(k, s) in &ST_DIM_STAGES {
                h = conv_out(h, k, s, 0)?;
                w = conv_out(w, k, s, 0)?;
            }
        }
        BackboneKind::ResNetSmall => {
            for _ in 1..shape.conv_widths.len() {
                h = conv_out(h, 3, 2, 1)?;
                w = conv_out(w, 3, 2, 1)?;
            }
        }
    }
    let c = *shape.conv_widths.last()?;
    (h >= 1 && w >= 1).then_some((h, w, c))
}

/// Width of the flat feature vector `z` that feeds the heads.
pub fn feature_dim(shape: &ModelShape) -> Option<usize> {
    let (m, n, c) = local_map_shape(shape)?;
    Some(match shape.backbone {
        BackboneKind::StDim => m * n * c,
        BackboneKind::ResNetSmall => c,
    })
}

/// Convolutional feature extractor producing the local feature map (output
/// of the last convolutional stage) and the flat vector `z`.
#[derive(Debug, Clone)]
pub enum Backbone {
    /// Three strided conv + rectifier stages; `z` is the flattened last map.
    StDim { convs: Vec<Conv2d> },
    /// A 3x3 stem followed by basic residual blocks; `z` is the spatial mean
    /// of the last map.
    ResNetSmall { stem: Conv2d, blocks: Vec<ResBlock> },
}

#[derive(Debug)]
pub enum BackboneCache {
    StDim {
        convs: Vec<Conv2dCache>,
        acts: Vec<Array4<f32>>,
    },
    ResNetSmall {
        stem: Conv2dCache,
        stem_act: Array4<f32>,
        blocks: Vec<ResBlockCache>,
        local_dim: (usize, usize, usize, usize),
    },
}

impl Backbone {
    pub fn new(seed: u64, shape: &ModelShape) -> Result<Self> {
        let prefix = "backbone";
        match shape.backbone {
            BackboneKind::StDim => {
                let mut convs = Vec::new();
                let mut in_ch = shape.image_channels;
                for (i, (&(k, s), &w)) in ST_DIM_STAGES.iter().zip(&shape.conv_widths).enumerate() {
                    convs.push(Conv2d::new(seed, &join(prefix, &format!("conv{}", i + 1)), in_ch, w, k, s, 0)?);
                    in_ch = w;
                }
                Ok(Backbone::StDim { convs })
            }
            BackboneKind::ResNetSmall => {
                let first = *shape
                    .conv_widths
                    .first()
                    .ok_or_else(|| Error::InvalidConfig(vec!["conv_widths must not be empty".into()]))?;
                let stem = Conv2d::new(seed, &join(prefix, "stem"), shape.image_channels, first, 3, 1, 1)?;
                let mut blocks = Vec::new();
                let mut in_ch = first;
                for (i, &w) in shape.conv_widths.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    blocks.push(ResBlock::new(seed, &join(prefix, &format!("block{}", i + 1)), in_ch, w, stride)?);
                    in_ch = w;
                }
                Ok(Backbone::ResNetSmall { stem, blocks })
            }
        }
    }

    fn split_z(&self, local: &Array4<f32>) -> Array2<f32> {
        let (b, m, n, c) = local.dim();
        match self {
            Backbone::StDim { .. } => local
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((b, m * n * c))
                .expect("contiguous"),
            Backbone::ResNetSmall { .. } => GlobalAvgPool.forward(local),
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Result<(Array4<f32>, Array2<f32>, BackboneCache)> {
        match self {
            Backbone::StDim { convs } => {
                let mut caches = Vec::with_capacity(convs.len());
                let mut acts = Vec::with_capacity(convs.len());
                let mut h = x.clone();
                for conv in convs {
                    let (a, cache) = conv.forward(&h)?;
                    h = relu(&a);
                    caches.push(cache);
                    acts.push(h.clone());
                }
                let z = self.split_z(&h);
                Ok((h, z, BackboneCache::StDim { convs: caches, acts }))
            }
            Backbone::ResNetSmall { stem, blocks } => {
                let (a, stem_cache) = stem.forward(x)?;
                let stem_act = relu(&a);
                let mut h = stem_act.clone();
                let mut caches = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let (out, cache) = block.forward(&h)?;
                    caches.push(cache);
                    h = out;
                }
                let z = self.split_z(&h);
                let local_dim = h.dim();
                Ok((
                    h,
                    z,
                    BackboneCache::ResNetSmall {
                        stem: stem_cache,
                        stem_act,
                        blocks: caches,
                        local_dim,
                    },
                ))
            }
        }
    }

    pub fn apply(&self, x: &Array4<f32>) -> Result<(Array4<f32>, Array2<f32>)> {
        let local = match self {
            Backbone::StDim { convs } => {
                let mut h = x.clone();
                for conv in convs {
                    h = relu(&conv.apply(&h)?);
                }
                h
            }
            Backbone::ResNetSmall { stem, blocks } => {
                let mut h = relu(&stem.apply(x)?);
                for block in blocks {
                    h = block.apply(&h)?;
                }
                h
            }
        };
        let z = self.split_z(&local);
        Ok((local, z))
    }

    /// Back-propagates gradients arriving at the local map and at `z`.
    pub fn backward(&mut self, cache: &BackboneCache, d_local: Option<&Array4<f32>>, d_z: &Array2<f32>) {
        match (self, cache) {
            (Backbone::StDim { convs }, BackboneCache::StDim { convs: caches, acts }) => {
                let last = acts.last().expect("at least one stage");
                let mut d = d_z
                    .clone()
                    .into_shape_with_order(last.dim())
                    .expect("z is the flattened local map");
                if let Some(dl) = d_local {
                    d += dl;
                }
                for i in (0..convs.len()).rev() {
                    let da = relu_backward(&acts[i], &d);
                    match convs[i].backward(&caches[i], &da, i > 0) {
                        Some(dx) => d = dx,
                        None => break,
                    }
                }
            }
            (
                Backbone::ResNetSmall { stem, blocks },
                BackboneCache::ResNetSmall {
                    stem: stem_cache,
                    stem_act,
                    blocks: caches,
                    local_dim,
                },
            ) => {
                let mut d = GlobalAvgPool.backward(*local_dim, d_z);
                if let Some(dl) = d_local {
                    d += dl;
                }
                for i in (0..blocks.len()).rev() {
                    d = blocks[i]
                        .backward(&caches[i], &d, true)
                        .expect("input grad requested");
                }
                let da = relu_backward(stem_act, &d);
                stem.backward(stem_cache, &da, false);
            }
            _ => unreachable!("cache built by a different backbone"),
        }
    }
}

impl ParamSet for Backbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Backbone::StDim { convs } => {
                for (i, c) in convs.iter().enumerate() {
                    c.params(&join(prefix, &format!("conv{}", i + 1)), out);
                }
            }
            Backbone::ResNetSmall { stem, blocks } => {
                stem.params(&join(prefix, "stem"), out);
                for (i, b) in blocks.iter().enumerate() {
                    b.params(&join(prefix, &format!("block{}", i + 1)), out);
                }
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Backbone::StDim { convs } => {
                for (i, c) in convs.iter_mut().enumerate() {
                    c.params_mut(&join(prefix, &format!("conv{}", i + 1)), out);
                }
            }
            Backbone::ResNetSmall { stem, blocks } => {
                stem.params_mut(&join(prefix, "stem"), out);
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.params_mut(&join(prefix, &format!("block{}", i + 1)), out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_gives_4x4x128() {
        let shape = ModelShape::default();
        assert_eq!(local_map_shape(&shape), Some((4, 4, 128)));
        assert_eq!(feature_dim(&shape), Some(2048));
    }

    #[test]
    fn resnet_small_on_32x32() {
        let shape = ModelShape {
            backbone: BackboneKind::ResNetSmall,
            conv_widths: vec![8, 16],
            image_height: 32,
            image_width: 32,
            image_channels: 3,
        };
        assert_eq!(local_map_shape(&shape), Some((16, 16, 16)));
        let mut bb = Backbone::new(0, &shape).unwrap();
        let x = Array4::from_elem((2, 32, 32, 3), 0.5f32);
        let (local, z, cache) = bb.forward(&x).unwrap();
        assert_eq!(local.dim(), (2, 16, 16, 16));
        assert_eq!(z.dim(), (2, 16));
        bb.backward(&cache, None, &Array2::ones((2, 16)));
        assert!(bb.named_params().iter().any(|(_, p)| p.grad.iter().any(|g| *g != 0.0)));
    }

    #[test]
    fn too_small_input_has_no_map() {
        let shape = ModelShape {
            image_height: 12,
            image_width: 12,
            ..ModelShape::default()
        };
        assert_eq!(local_map_shape(&shape), None);
    }
}
