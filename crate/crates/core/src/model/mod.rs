//! The atlas encoder: a convolutional backbone, `n` chart heads, a
//! membership head, and the fusion modes that turn chart embeddings into one
//! output vector.

mod backbone;
pub mod checkpoint;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use ua_nn::activation::{softmax_rows, softmax_rows_backward};
use ua_nn::param::join;
use ua_nn::{Linear, LinearCache, Param, ParamSet};

pub use backbone::{feature_dim, local_map_shape, Backbone, BackboneCache};

use crate::config::{AtlasConfig, FusionMode, MappingMode, ModelShape, Pipeline, RunConfig};
use crate::error::{Error, Result};
use crate::losses::BilinearScorers;

/// One input's view of the atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasOutput {
    /// `n x d`, row `i` is chart `i`'s embedding.
    pub chart_embeddings: Array2<f32>,
    /// Length `n`, on the simplex.
    pub membership: Array1<f32>,
    /// Length `d`.
    pub fused: Array1<f32>,
}

/// Batched [`AtlasOutput`]: `B x n x d`, `B x n`, `B x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasBatch {
    pub chart_embeddings: Array3<f32>,
    pub membership: Array2<f32>,
    pub fused: Array2<f32>,
}

impl AtlasBatch {
    pub fn len(&self) -> usize {
        self.fused.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, i: usize) -> AtlasOutput {
        AtlasOutput {
            chart_embeddings: self.chart_embeddings.index_axis(Axis(0), i).to_owned(),
            membership: self.membership.row(i).to_owned(),
            fused: self.fused.row(i).to_owned(),
        }
    }
}

/// Spatial feature grid `M x N x C` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    pub grid: Array3<f32>,
}

impl LocalFeatureMap {
    pub fn new(grid: Array3<f32>) -> Result<Self> {
        let (m, n, c) = grid.dim();
        if m == 0 || n == 0 || c == 0 {
            return Err(Error::Precondition(format!("local feature map must be non-empty, got {m}x{n}x{c}")));
        }
        Ok(Self { grid })
    }

    pub fn from_batch(batch: &Array4<f32>) -> Vec<LocalFeatureMap> {
        batch
            .axis_iter(Axis(0))
            .map(|g| LocalFeatureMap { grid: g.to_owned() })
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f32>) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Combines `B x n x d` chart embeddings into `B x d`.
pub fn fuse(charts: &Array3<f32>, membership: &Array2<f32>, mode: FusionMode) -> Array2<f32> {
    let (b, n, d) = charts.dim();
    match mode {
        FusionMode::Mean => charts.sum_axis(Axis(1)) * (1.0 / n as f32),
        FusionMode::MembershipWeighted => {
            let mut out = Array2::zeros((b, d));
            for bi in 0..b {
                for i in 0..n {
                    out.row_mut(bi)
                        .scaled_add(membership[[bi, i]], &charts.slice(s![bi, i, ..]));
                }
            }
            out
        }
        FusionMode::OneHot => {
            let mut out = Array2::zeros((b, d));
            for bi in 0..b {
                let j = argmax(membership.row(bi).iter().copied());
                out.row_mut(bi).assign(&charts.slice(s![bi, j, ..]));
            }
            out
        }
    }
}

/// Gradients of [`fuse`] with respect to the chart embeddings and the
/// membership probabilities. The one-hot selection passes no gradient to the
/// membership.
pub fn fuse_backward(
    charts: &Array3<f32>,
    membership: &Array2<f32>,
    mode: FusionMode,
    d_fused: &Array2<f32>,
) -> (Array3<f32>, Array2<f32>) {
    let (b, n, d) = charts.dim();
    let mut d_charts = Array3::zeros((b, n, d));
    let mut d_member = Array2::zeros((b, n));
    for bi in 0..b {
        let g = d_fused.row(bi);
        match mode {
            FusionMode::Mean => {
                let scale = 1.0 / n as f32;
                for i in 0..n {
                    d_charts.slice_mut(s![bi, i, ..]).assign(&(&g * scale));
                }
            }
            FusionMode::MembershipWeighted => {
                for i in 0..n {
                    d_charts.slice_mut(s![bi, i, ..]).assign(&(&g * membership[[bi, i]]));
                    d_member[[bi, i]] = charts.slice(s![bi, i, ..]).dot(&g);
                }
            }
            FusionMode::OneHot => {
                let j = argmax(membership.row(bi).iter().copied());
                d_charts.slice_mut(s![bi, j, ..]).assign(&g);
            }
        }
    }
    (d_charts, d_member)
}

/// Everything the training objectives consume from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `B x M x N x C`
    pub local: Array4<f32>,
    /// `B x n x d` chart embeddings (after mapping and clamping).
    pub charts: Array3<f32>,
    /// `B x n x d` after the FC2 projection, when enabled.
    pub projected: Option<Array3<f32>>,
    /// `B x n` membership probabilities.
    pub membership: Array2<f32>,
}

impl EncoderOutput {
    /// Embeddings the training objectives see: projected if FC2 is enabled.
    pub fn training_embeddings(&self) -> &Array3<f32> {
        self.projected.as_ref().unwrap_or(&self.charts)
    }
}

#[derive(Debug)]
pub struct EncoderCache {
    backbone: BackboneCache,
    fc1: Option<LinearCache>,
    heads: LinearCache,
    mapping: Vec<LinearCache>,
    pre_clamp: Option<Array3<f32>>,
    fc2: Option<LinearCache>,
    membership: Option<(LinearCache, Array2<f32>)>,
}

/// The full encoder with its pretraining-only bilinear scorers.
#[derive(Debug, Clone)]
pub struct AtlasEncoder {
    pub atlas: AtlasConfig,
    pub shape: ModelShape,
    pub backbone: Backbone,
    pub fc1: Option<Linear>,
    /// All chart heads as one `z -> n*d` map; columns `i*d..(i+1)*d` are chart `i`.
    pub heads: Linear,
    /// Per-chart `d -> d` maps when `mapping_mode = linear`.
    pub mapping: Vec<Linear>,
    pub fc2: Option<Linear>,
    /// Absent for the single-head baseline.
    pub membership: Option<Linear>,
    /// Present for the spatiotemporal objectives.
    pub scorers: Option<BilinearScorers>,
}

impl AtlasEncoder {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::build(
            &cfg.atlas,
            &cfg.model,
            cfg.pipeline.has_membership(),
            cfg.pipeline.is_spatiotemporal(),
            cfg.seed,
        )
    }

    pub fn build(
        atlas: &AtlasConfig,
        shape: &ModelShape,
        with_membership: bool,
        with_scorers: bool,
        seed: u64,
    ) -> Result<Self> {
        let (_, _, channels) = local_map_shape(shape).ok_or_else(|| {
            Error::InvalidConfig(vec![format!(
                "image size {}x{} is too small for the {} backbone",
                shape.image_height, shape.image_width, shape.backbone
            )])
        })?;
        let z_dim = feature_dim(shape).expect("local map exists");
        let backbone = Backbone::new(seed, shape)?;
        let n = atlas.n_charts;
        let d = atlas.chart_dim;
        let fc1 = atlas.use_fc1.then(|| Linear::new(seed, "fc1", z_dim, atlas.fc1_dim, true));
        let head_in = if atlas.use_fc1 { atlas.fc1_dim } else { z_dim };
        let heads = Linear::new(seed, "heads", head_in, n * d, true);
        let mapping = match atlas.mapping_mode {
            MappingMode::Identity => Vec::new(),
            MappingMode::Linear => (0..n)
                .map(|i| Linear::new(seed, &format!("mapping.{i}"), d, d, true))
                .collect(),
        };
        let fc2 = atlas.use_fc2.then(|| Linear::new(seed, "fc2", d, d, true));
        let membership = with_membership.then(|| Linear::new(seed, "membership", z_dim, n, true));
        let scorers = with_scorers.then(|| BilinearScorers::new(seed, d, channels));
        Ok(Self {
            atlas: atlas.clone(),
            shape: shape.clone(),
            backbone,
            fc1,
            heads,
            mapping,
            fc2,
            membership,
            scorers,
        })
    }

    pub fn n_charts(&self) -> usize {
        self.atlas.n_charts
    }

    pub fn chart_dim(&self) -> usize {
        self.atlas.chart_dim
    }

    pub fn local_shape(&self) -> (usize, usize, usize) {
        local_map_shape(&self.shape).expect("validated at construction")
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, h, w, c) = x.dim();
        let expected = self.shape.input_shape();
        if [h, w, c] != expected {
            return Err(Error::InputShape {
                expected: expected.to_vec(),
                actual: vec![h, w, c],
            });
        }
        Ok(())
    }

    fn clamp_bounds(&self) -> Option<(f32, f32)> {
        self.atlas.clamp_range.map(|(lo, hi)| (lo as f32, hi as f32))
    }

    fn charts_from_head_output(&self, h: Array2<f32>, b: usize) -> Array3<f32> {
        h.into_shape_with_order((b, self.atlas.n_charts, self.atlas.chart_dim))
            .expect("heads output is n*d wide")
    }

    fn membership_probs(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        match &self.membership {
            Some(head) => Ok(softmax_rows(&head.apply(z)?)),
            None => Ok(Array2::from_elem((z.nrows(), self.atlas.n_charts), 1.0 / self.atlas.n_charts as f32)),
        }
    }

    /// Frozen inference: atlas output under `mode` and the local feature maps.
    pub fn forward(&self, x: &Array4<f32>, mode: FusionMode) -> Result<(AtlasBatch, Array4<f32>)> {
        self.check_input(x)?;
        let b = x.dim().0;
        let (local, z) = self.backbone.apply(x)?;
        let zf = match &self.fc1 {
            Some(fc1) => fc1.apply(&z)?,
            None => z.clone(),
        };
        let mut charts = self.charts_from_head_output(self.heads.apply(&zf)?, b);
        for (i, map) in self.mapping.iter().enumerate() {
            let mapped = map.apply(&charts.slice(s![.., i, ..]).to_owned())?;
            charts.slice_mut(s![.., i, ..]).assign(&mapped);
        }
        if let Some(range) = self.clamp_bounds() {
            charts.mapv_inplace(|v| clamp_value(v, range));
        }
        let membership = self.membership_probs(&z)?;
        let fused = fuse(&charts, &membership, mode);
        Ok((
            AtlasBatch {
                chart_embeddings: charts,
                membership,
                fused,
            },
            local,
        ))
    }

    /// The local feature maps alone.
    pub fn local_features(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        Ok(self.backbone.apply(x)?.0)
    }

    /// Training forward pass; keeps what [`AtlasEncoder::backward`] needs.
    pub fn forward_train(&self, x: &Array4<f32>) -> Result<(EncoderOutput, EncoderCache)> {
        self.check_input(x)?;
        let b = x.dim().0;
        let (local, z, bb_cache) = self.backbone.forward(x)?;
        let (zf, fc1_cache) = match &self.fc1 {
            Some(fc1) => {
                let (y, c) = fc1.forward(&z)?;
                (y, Some(c))
            }
            None => (z.clone(), None),
        };
        let (h, heads_cache) = self.heads.forward(&zf)?;
        let mut charts = self.charts_from_head_output(h, b);
        let mut mapping_caches = Vec::with_capacity(self.mapping.len());
        for (i, map) in self.mapping.iter().enumerate() {
            let (mapped, cache) = map.forward(&charts.slice(s![.., i, ..]).to_owned())?;
            charts.slice_mut(s![.., i, ..]).assign(&mapped);
            mapping_caches.push(cache);
        }
        let pre_clamp = match self.clamp_bounds() {
            Some(range) => {
                let pre = charts.clone();
                charts.mapv_inplace(|v| clamp_value(v, range));
                Some(pre)
            }
            None => None,
        };
        let (projected, fc2_cache) = match &self.fc2 {
            Some(fc2) => {
                let (n, d) = (self.atlas.n_charts, self.atlas.chart_dim);
                let flat = charts.clone().into_shape_with_order((b * n, d)).expect("contiguous");
                let (p, c) = fc2.forward(&flat)?;
                (Some(p.into_shape_with_order((b, n, d)).expect("contiguous")), Some(c))
            }
            None => (None, None),
        };
        let (membership, membership_cache) = match &self.membership {
            Some(head) => {
                let (logits, c) = head.forward(&z)?;
                let p = softmax_rows(&logits);
                (p.clone(), Some((c, p)))
            }
            None => (self.membership_probs(&z)?, None),
        };
        Ok((
            EncoderOutput {
                local,
                charts,
                projected,
                membership,
            },
            EncoderCache {
                backbone: bb_cache,
                fc1: fc1_cache,
                heads: heads_cache,
                mapping: mapping_caches,
                pre_clamp,
                fc2: fc2_cache,
                membership: membership_cache,
            },
        ))
    }

    /// Accumulates parameter gradients given gradients at the training
    /// embeddings (`B x n x d`), the membership probabilities (`B x n`) and
    /// the local maps.
    pub fn backward(
        &mut self,
        cache: &EncoderCache,
        d_embeddings: &Array3<f32>,
        d_membership: Option<&Array2<f32>>,
        d_local: Option<&Array4<f32>>,
    ) {
        let (b, n, d) = d_embeddings.dim();
        let mut d_charts = match (&mut self.fc2, &cache.fc2) {
            (Some(fc2), Some(c)) => {
                let flat = d_embeddings.clone().into_shape_with_order((b * n, d)).expect("contiguous");
                fc2.backward(c, &flat).into_shape_with_order((b, n, d)).expect("contiguous")
            }
            _ => d_embeddings.clone(),
        };
        if let (Some(pre), Some((lo, hi))) = (&cache.pre_clamp, self.clamp_bounds()) {
            ndarray::Zip::from(&mut d_charts).and(pre).for_each(|g, &v| {
                if v < lo || v > hi {
                    *g = 0.0;
                }
            });
        }
        for (i, (map, c)) in self.mapping.iter_mut().zip(&cache.mapping).enumerate() {
            let g = map.backward(c, &d_charts.slice(s![.., i, ..]).to_owned());
            d_charts.slice_mut(s![.., i, ..]).assign(&g);
        }
        let d_h = d_charts.into_shape_with_order((b, n * d)).expect("contiguous");
        let d_zf = self.heads.backward(&cache.heads, &d_h);
        let mut d_z = match (&mut self.fc1, &cache.fc1) {
            (Some(fc1), Some(c)) => fc1.backward(c, &d_zf),
            _ => d_zf,
        };
        if let (Some(head), Some((c, p)), Some(dp)) = (&mut self.membership, &cache.membership, d_membership) {
            let d_logits = softmax_rows_backward(p, dp);
            d_z += &head.backward(c, &d_logits);
        }
        self.backbone.backward(&cache.backbone, d_local, &d_z);
    }

    /// SHA-256 over all parameter values in name order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in self.named_params() {
            h.update(name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn clamp_value(v: f32, (lo, hi): (f32, f32)) -> f32 {
    v.max(lo).min(hi)
}

/// Componentwise `min(max(v, lo), hi)`.
pub fn clamp_embedding(v: &[f64], range: (f64, f64)) -> Vec<f64> {
    v.iter().map(|x| x.max(range.0).min(range.1)).collect()
}

impl ParamSet for AtlasEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        if let Some(l) = &self.fc1 {
            l.params(&join(prefix, "fc1"), out);
        }
        self.heads.params(&join(prefix, "heads"), out);
        for (i, m) in self.mapping.iter().enumerate() {
            m.params(&join(prefix, &format!("mapping.{i}")), out);
        }
        if let Some(l) = &self.fc2 {
            l.params(&join(prefix, "fc2"), out);
        }
        if let Some(l) = &self.membership {
            l.params(&join(prefix, "membership"), out);
        }
        if let Some(s) = &self.scorers {
            s.params(&join(prefix, "scorer"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        if let Some(l) = &mut self.fc1 {
            l.params_mut(&join(prefix, "fc1"), out);
        }
        self.heads.params_mut(&join(prefix, "heads"), out);
        for (i, m) in self.mapping.iter_mut().enumerate() {
            m.params_mut(&join(prefix, &format!("mapping.{i}")), out);
        }
        if let Some(l) = &mut self.fc2 {
            l.params_mut(&join(prefix, "fc2"), out);
        }
        if let Some(l) = &mut self.membership {
            l.params_mut(&join(prefix, "membership"), out);
        }
        if let Some(s) = &mut self.scorers {
            s.params_mut(&join(prefix, "scorer"), out);
        }
    }
}

/// Whether a pipeline's model carries a membership head.
pub fn pipeline_has_membership(p: Pipeline) -> bool {
    p.has_membership()
}
