//! Run configuration, its on-disk text form, and validation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::world::SyntheticWorldSpec;
use crate::error::{Error, Result};
use crate::kv::{KvReader, KvWriter};
use crate::probe::ProbeConfig;

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

pub(crate) use text_enum;

text_enum!(
    /// How chart embeddings are combined into one vector.
    FusionMode {
        MembershipWeighted => "membership_weighted",
        Mean => "mean",
        OneHot => "one_hot",
    }
);

text_enum!(
    /// Map applied to each chart head output before fusion.
    MappingMode {
        Identity => "identity",
        Linear => "linear",
    }
);

text_enum!(DataSource {
    Synthetic => "synthetic",
    ImageFolder => "image_folder",
});

text_enum!(Pipeline {
    DimUa => "dim_ua",
    SimclrUa => "simclr_ua",
    StDimBaseline => "st_dim_baseline",
    MmdUniformBaseline => "mmd_uniform_baseline",
    NoDilationBaseline => "no_dilation_baseline",
});

text_enum!(BackboneKind {
    StDim => "st_dim",
    ResNetSmall => "resnet_small",
});

impl Pipeline {
    /// Whether the pipeline has a membership head at all.
    pub fn has_membership(&self) -> bool {
        !matches!(self, Pipeline::StDimBaseline)
    }

    pub fn is_spatiotemporal(&self) -> bool {
        !matches!(self, Pipeline::SimclrUa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasConfig {
    pub n_charts: usize,
    pub chart_dim: usize,
    /// Fusion used for the training target.
    pub fusion_mode: FusionMode,
    pub mapping_mode: MappingMode,
    pub clamp_range: Option<(f64, f64)>,
    pub use_fc1: bool,
    pub use_fc2: bool,
    /// Output width of the shared FC1 layer when enabled.
    pub fc1_dim: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            n_charts: 4,
            chart_dim: 64,
            fusion_mode: FusionMode::Mean,
            mapping_mode: MappingMode::Identity,
            clamp_range: None,
            use_fc1: false,
            use_fc2: false,
            fc1_dim: 256,
        }
    }
}

impl AtlasConfig {
    pub fn total_units(&self) -> usize {
        self.n_charts * self.chart_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub backbone: BackboneKind,
    /// Channel widths of the backbone's convolutional stages.
    pub conv_widths: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::StDim,
            conv_widths: vec![32, 64, 128],
            image_height: 64,
            image_width: 64,
            image_channels: 1,
        }
    }
}

impl ModelShape {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.image_channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub atlas: AtlasConfig,
    pub model: ModelShape,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau_final: f64,
    pub tau_linear_scaling: bool,
    /// NT-Xent temperature for the augmentation-contrastive pipeline.
    pub temperature: f64,
    pub seed: u64,
    pub data_source: DataSource,
    pub data_path: Option<PathBuf>,
    /// Pretrain / probe-train / probe-test proportions, split by episode.
    pub split: [f64; 3],
    pub world: SyntheticWorldSpec,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::DimUa,
            atlas: AtlasConfig::default(),
            model: ModelShape::default(),
            batch_size: 64,
            learning_rate: 3e-4,
            epochs: 100,
            tau_final: 0.1,
            tau_linear_scaling: false,
            temperature: 0.5,
            seed: 0,
            data_source: DataSource::Synthetic,
            data_path: None,
            split: [0.64, 0.28, 0.08],
            world: SyntheticWorldSpec::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for a pipeline, including its head wiring.
    pub fn for_pipeline(pipeline: Pipeline) -> Self {
        let mut cfg = RunConfig {
            pipeline,
            ..RunConfig::default()
        };
        match pipeline {
            Pipeline::SimclrUa => {
                cfg.atlas.clamp_range = Some((-10.0, 10.0));
                cfg.atlas.use_fc2 = true;
                cfg.model.backbone = BackboneKind::ResNetSmall;
                cfg.model.conv_widths = vec![32, 64, 128];
                cfg.model.image_height = 32;
                cfg.model.image_width = 32;
                cfg.model.image_channels = 3;
                cfg.data_source = DataSource::ImageFolder;
            }
            Pipeline::StDimBaseline => {
                cfg.atlas.n_charts = 1;
                cfg.atlas.chart_dim = 256;
            }
            _ => {}
        }
        cfg
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("unbalanced-atlas run configuration");
        w.put("pipeline", self.pipeline)
            .put("n_charts", self.atlas.n_charts)
            .put("chart_dim", self.atlas.chart_dim)
            .put("fusion_mode", self.atlas.fusion_mode)
            .put("mapping_mode", self.atlas.mapping_mode);
        match self.atlas.clamp_range {
            Some((lo, hi)) => w.put("clamp_range", format!("{lo}, {hi}")),
            None => w.put("clamp_range", "none"),
        };
        w.put("use_fc1", self.atlas.use_fc1)
            .put("use_fc2", self.atlas.use_fc2)
            .put("fc1_dim", self.atlas.fc1_dim)
            .put("backbone", self.model.backbone)
            .put_list("conv_widths", &self.model.conv_widths)
            .put("image_height", self.model.image_height)
            .put("image_width", self.model.image_width)
            .put("image_channels", self.model.image_channels)
            .put("batch_size", self.batch_size)
            .put("learning_rate", self.learning_rate)
            .put("epochs", self.epochs)
            .put("tau_final", self.tau_final)
            .put("tau_linear_scaling", self.tau_linear_scaling)
            .put("temperature", self.temperature)
            .put("seed", self.seed)
            .put("data_source", self.data_source);
        if let Some(p) = &self.data_path {
            w.put("data_path", p.display());
        }
        w.put_list("split", &self.split);
        self.world.write_kv("world", &mut w);
        self.augment.write_kv("augment", &mut w);
        self.probe.write_kv("probe", &mut w);
        w.finish()
    }

    /// Parses a config file. Absent keys keep the pipeline's defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut pipeline = Pipeline::DimUa;
        r.take("pipeline", &mut pipeline)?;
        let mut cfg = RunConfig::for_pipeline(pipeline);
        cfg.read_fields(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides on top of this config.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        let mut r = KvReader::parse(text)?;
        r.take("pipeline", &mut self.pipeline)?;
        self.read_fields(&mut r)?;
        r.finish()
    }

    fn read_fields(&mut self, r: &mut KvReader) -> Result<()> {
        let a = &mut self.atlas;
        r.take("n_charts", &mut a.n_charts)?;
        r.take("chart_dim", &mut a.chart_dim)?;
        r.take("fusion_mode", &mut a.fusion_mode)?;
        r.take("mapping_mode", &mut a.mapping_mode)?;
        if let Some((v, line)) = r.take_raw("clamp_range") {
            a.clamp_range = parse_clamp(&v).map_err(|message| Error::ConfigParse { line, message })?;
        }
        r.take("use_fc1", &mut a.use_fc1)?;
        r.take("use_fc2", &mut a.use_fc2)?;
        r.take("fc1_dim", &mut a.fc1_dim)?;
        let m = &mut self.model;
        r.take("backbone", &mut m.backbone)?;
        r.take_list("conv_widths", &mut m.conv_widths)?;
        r.take("image_height", &mut m.image_height)?;
        r.take("image_width", &mut m.image_width)?;
        r.take("image_channels", &mut m.image_channels)?;
        r.take("batch_size", &mut self.batch_size)?;
        r.take("learning_rate", &mut self.learning_rate)?;
        r.take("epochs", &mut self.epochs)?;
        r.take("tau_final", &mut self.tau_final)?;
        r.take("tau_linear_scaling", &mut self.tau_linear_scaling)?;
        r.take("temperature", &mut self.temperature)?;
        r.take("seed", &mut self.seed)?;
        r.take("data_source", &mut self.data_source)?;
        if let Some((v, _)) = r.take_raw("data_path") {
            self.data_path = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        if let Some((v, line)) = r.take_raw("split") {
            let parts: Vec<f64> = crate::kv::parse_list(&v).map_err(|message| Error::ConfigParse { line, message })?;
            self.split = parts.try_into().map_err(|_| Error::ConfigParse {
                line,
                message: "split: expected three ratios".into(),
            })?;
        }
        self.world.read_kv("world", r)?;
        self.augment.read_kv("augment", r)?;
        self.probe.read_kv("probe", r)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_clamp(v: &str) -> std::result::Result<Option<(f64, f64)>, String> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(None);
    }
    let parts: Vec<f64> = crate::kv::parse_list(v)?;
    match parts.as_slice() {
        [lo, hi] => Ok(Some((*lo, *hi))),
        _ => Err(format!("clamp_range: expected `lo, hi` or `none`, got `{v}`")),
    }
}

/// Checks of the model and optimizer fields; everything except the epoch
/// count. Pretraining requires these to be clean.
pub fn validate_model(cfg: &RunConfig) -> Vec<String> {
    let mut v = Vec::new();
    let a = &cfg.atlas;
    if a.n_charts < 1 {
        v.push("n_charts must be ≥ 1".to_string());
    }
    if a.chart_dim < 1 {
        v.push("chart_dim must be ≥ 1".to_string());
    }
    if let Some((lo, hi)) = a.clamp_range {
        if !(lo < hi) {
            v.push("clamp_range.lo < clamp_range.hi".to_string());
        }
    }
    if a.use_fc1 && a.fc1_dim < 1 {
        v.push("fc1_dim must be ≥ 1 when use_fc1 is set".to_string());
    }
    if cfg.pipeline == Pipeline::StDimBaseline && a.n_charts != 1 {
        v.push("n_charts must be 1 for st_dim_baseline".to_string());
    }
    if cfg.batch_size < 1 {
        v.push("batch_size must be ≥ 1".to_string());
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        v.push("learning_rate must be a positive finite number".to_string());
    }
    if !(cfg.tau_final >= 0.0 && cfg.tau_final.is_finite()) {
        v.push("tau_final must be ≥ 0".to_string());
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        v.push("temperature must be > 0".to_string());
    }
    let m = &cfg.model;
    if m.image_height < 1 || m.image_width < 1 || m.image_channels < 1 {
        v.push("image_height, image_width and image_channels must be ≥ 1".to_string());
    }
    match m.backbone {
        BackboneKind::StDim if m.conv_widths.len() != 3 => {
            v.push("conv_widths must list exactly 3 widths for the st_dim backbone".to_string())
        }
        BackboneKind::ResNetSmall if m.conv_widths.is_empty() => {
            v.push("conv_widths must not be empty".to_string())
        }
        _ => {}
    }
    if m.conv_widths.contains(&0) {
        v.push("conv_widths entries must be ≥ 1".to_string());
    }
    if v.is_empty() && crate::model::local_map_shape(m).is_none() {
        v.push(format!(
            "image size {}x{} is too small for the {} backbone",
            m.image_height, m.image_width, m.backbone
        ));
    }
    if cfg.split.iter().any(|r| !(*r > 0.0)) || (cfg.split.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        v.push("split ratios must be positive and sum to 1".to_string());
    }
    if cfg.data_source == DataSource::Synthetic {
        for problem in cfg.world.violations() {
            v.push(format!("world.{problem}"));
        }
        let (h, w) = cfg.world.image_hw();
        if (h, w, 1) != (m.image_height, m.image_width, m.image_channels) {
            v.push(format!(
                "image_height/image_width/image_channels must match the synthetic world ({h}x{w}x1)"
            ));
        }
    }
    if cfg.pipeline == Pipeline::SimclrUa && cfg.batch_size < 2 {
        v.push("batch_size must be ≥ 2 for simclr_ua".to_string());
    }
    v.extend(cfg.probe.violations().into_iter().map(|p| format!("probe.{p}")));
    v
}

/// Every violated invariant, each naming the offending field. Empty means
/// the config is valid.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut v = validate_model(cfg);
    if cfg.epochs < 1 {
        v.push("epochs must be ≥ 1".to_string());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table4_defaults_validate() {
        let mut cfg = RunConfig::default();
        cfg.atlas.chart_dim = 4096;
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.learning_rate, 3e-4);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.tau_final, 0.1);
        assert_eq!(validate_config(&cfg), Vec::<String>::new());
    }

    #[test]
    fn zero_charts_is_reported() {
        let mut cfg = RunConfig::default();
        cfg.atlas.n_charts = 0;
        assert_eq!(validate_config(&cfg), vec!["n_charts must be ≥ 1".to_string()]);
    }

    #[test]
    fn inverted_clamp_is_reported() {
        let mut cfg = RunConfig::default();
        cfg.atlas.clamp_range = Some((10.0, -10.0));
        assert_eq!(validate_config(&cfg), vec!["clamp_range.lo < clamp_range.hi".to_string()]);
    }

    #[test]
    fn pipeline_defaults_are_valid() {
        for &p in Pipeline::ALL {
            let cfg = RunConfig::for_pipeline(p);
            let v = validate_config(&cfg);
            assert!(v.is_empty(), "{p}: {v:?}");
        }
    }

    #[test]
    fn parse_errors_name_the_key() {
        let err = RunConfig::from_text("n_charts = many").unwrap_err().to_string();
        assert!(err.contains("n_charts"), "{err}");
        let err = RunConfig::from_text("bogus = 1").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn pipeline_line_selects_baseline() {
        let cfg = RunConfig::from_text("pipeline = st_dim_baseline\n").unwrap();
        assert_eq!(cfg.pipeline, Pipeline::StDimBaseline);
        assert_eq!(cfg.atlas.n_charts, 1);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            0usize..6,
            0usize..300,
            prop::option::of((-20.0f64..20.0, -20.0f64..20.0)),
            prop::sample::select(Pipeline::ALL.to_vec()),
            prop::sample::select(FusionMode::ALL.to_vec()),
            any::<bool>(),
            1e-6f64..1.0,
            0usize..5,
            -1.0f64..1.0,
            any::<u64>(),
        )
            .prop_map(|(n, d, clamp, pipeline, fusion, fc2, lr, epochs, tau, seed)| {
                let mut cfg = RunConfig::for_pipeline(pipeline);
                cfg.atlas.n_charts = n;
                cfg.atlas.chart_dim = d;
                cfg.atlas.clamp_range = clamp;
                cfg.atlas.fusion_mode = fusion;
                cfg.atlas.use_fc2 = fc2;
                cfg.learning_rate = lr;
                cfg.epochs = epochs;
                cfg.tau_final = tau;
                cfg.seed = seed;
                cfg
            })
    }

    proptest! {
        #[test]
        fn text_round_trip_preserves_validation(cfg in arb_config()) {
            let text = cfg.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(validate_config(&back), validate_config(&cfg));
        }
    }
}
