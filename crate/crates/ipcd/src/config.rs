//! TOML run configuration with one flat section per subcommand.
//!
//! Every key has a default, so an empty document is a valid configuration.
//! `section.key=value` overrides are applied to the parsed document before
//! it is typed, with `value` read as a TOML value (bare words fall back to
//! strings).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ipcd_core::baselines::RetinexConfig;
use ipcd_core::eval::{IcpParams, RecallThresholds, DEFAULT_PAIR_DELTA};
use ipcd_core::model::{Architecture, InferConfig, LossConfig, TrainConfig, TrainMode, Variant};
use ipcd_core::projection::{HemisphereGrid, DEFAULT_ANGLE_STEP, DEFAULT_IMAGE_SIZE, DEFAULT_POINT_SIZE};
use ipcd_core::scene::{default_palette, SceneSpec, TimeOfDay};
use ipcd_core::autodiff::AdamConfig;

use crate::error::{IpcdError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gen: GenSection,
    pub pld: PldSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub retinex: RetinexSection,
    pub eval: EvalSection,
    pub register: RegisterSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub seed: u64,
    pub assets: usize,
    /// Trailing assets held out for testing.
    pub test_assets: usize,
    pub points: usize,
    pub times: Vec<String>,
    pub buildings_min: usize,
    pub buildings_max: usize,
    pub footprint_min: f64,
    pub footprint_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub ground_extent: f64,
    pub min_gap: f64,
    pub gable_probability: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            seed: 0,
            assets: 16,
            test_assets: 4,
            points: 20_000,
            times: TimeOfDay::ALL.iter().map(|t| t.as_str().to_string()).collect(),
            buildings_min: s.building_count.0,
            buildings_max: s.building_count.1,
            footprint_min: s.footprint.0,
            footprint_max: s.footprint.1,
            height_min: s.height.0,
            height_max: s.height.1,
            ground_extent: s.ground_extent,
            min_gap: s.min_gap,
            gable_probability: s.gable_probability,
        }
    }
}

impl GenSection {
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            building_count: (self.buildings_min, self.buildings_max),
            footprint: (self.footprint_min, self.footprint_max),
            height: (self.height_min, self.height_max),
            ground_extent: self.ground_extent,
            min_gap: self.min_gap,
            gable_probability: self.gable_probability,
            palette: default_palette(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.assets == 0 || self.points == 0 || self.times.is_empty() {
            return Err(IpcdError::Config("gen.assets, gen.points and gen.times must be non-empty".into()));
        }
        if self.test_assets > self.assets {
            return Err(IpcdError::Config(format!("gen.test_assets = {} exceeds gen.assets = {}", self.test_assets, self.assets)));
        }
        for t in &self.times {
            TimeOfDay::parse(t).map_err(|e| IpcdError::Config(e.to_string()))?;
        }
        self.scene_spec(0).validate().map_err(|e| IpcdError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldSection {
    pub image_size: usize,
    pub point_size: f64,
    pub angle_step: f64,
}

impl Default for PldSection {
    fn default() -> Self {
        Self { image_size: DEFAULT_IMAGE_SIZE, point_size: DEFAULT_POINT_SIZE, angle_step: DEFAULT_ANGLE_STEP }
    }
}

impl PldSection {
    pub fn grid(&self) -> Result<HemisphereGrid> {
        HemisphereGrid::with_step(self.angle_step).map_err(|e| IpcdError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    /// `full` or `base`; picks the architecture and training mode defaults.
    pub variant: String,
    pub use_pld: Option<bool>,
    pub use_hfr: Option<bool>,
    pub shared_encoder: Option<bool>,
    /// `simultaneous` or `step-by-step`; empty follows the variant.
    pub mode: String,
    pub iterations: usize,
    pub points: usize,
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            variant: "full".into(),
            use_pld: None,
            use_hfr: None,
            shared_encoder: None,
            mode: String::new(),
            iterations: t.iterations,
            points: t.points,
            k: t.k,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            lambda: t.loss.lambda,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg_err = |e: ipcd_core::Error| IpcdError::Config(e.to_string());
        let variant = Variant::parse(&self.variant).map_err(cfg_err)?;
        let base = variant.architecture();
        let arch = Architecture {
            use_pld: self.use_pld.unwrap_or(base.use_pld),
            use_hfr: self.use_hfr.unwrap_or(base.use_hfr),
            shared_encoder: self.shared_encoder.unwrap_or(base.shared_encoder),
        };
        let mode = if self.mode.is_empty() { variant.default_mode() } else { TrainMode::parse(&self.mode).map_err(cfg_err)? };
        let cfg = TrainConfig {
            iterations: self.iterations,
            points: self.points,
            k: self.k,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            seed: self.seed,
            arch,
            mode,
            loss: LossConfig { lambda: self.lambda, ..LossConfig::default() },
        };
        cfg.validate().map_err(cfg_err)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub k: usize,
    pub chunk_points: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        let c = InferConfig::default();
        Self { k: c.k, chunk_points: c.chunk_points }
    }
}

impl InferSection {
    pub fn to_infer_config(&self) -> InferConfig {
        InferConfig { k: self.k, chunk_points: self.chunk_points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetinexSection {
    pub k: usize,
    pub tau: f64,
    pub mu: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RetinexSection {
    fn default() -> Self {
        let c = RetinexConfig::default();
        Self { k: c.k, tau: c.tau, mu: c.mu, tolerance: c.tolerance, max_iterations: c.max_iterations }
    }
}

impl RetinexSection {
    pub fn to_retinex_config(&self) -> RetinexConfig {
        RetinexConfig { k: self.k, tau: self.tau, mu: self.mu, tolerance: self.tolerance, max_iterations: self.max_iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Ratio threshold δ of the pair classifier.
    pub pair_delta: f64,
    /// Synthetic annotations drawn per class and asset.
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { pair_delta: DEFAULT_PAIR_DELTA, pairs_per_class: 300, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterSection {
    pub seed: u64,
    pub overlaps: Vec<f64>,
    /// `source-target` time labels, e.g. `morning-noon`.
    pub time_pairs: Vec<String>,
    pub max_iterations: usize,
    pub color_weight: f64,
    pub normal_k: usize,
    pub rotation_threshold: f64,
    pub translation_threshold: f64,
}

impl Default for RegisterSection {
    fn default() -> Self {
        let icp = IcpParams::default();
        let th = RecallThresholds::default();
        Self {
            seed: 0,
            overlaps: vec![0.9, 0.7, 0.5],
            time_pairs: vec!["morning-noon".into(), "noon-evening".into(), "morning-evening".into()],
            max_iterations: icp.max_iterations,
            color_weight: icp.color_weight,
            normal_k: icp.normal_k,
            rotation_threshold: th.rotation_deg,
            translation_threshold: th.translation,
        }
    }
}

impl RegisterSection {
    pub fn icp_params(&self) -> IcpParams {
        IcpParams {
            max_iterations: self.max_iterations,
            color_weight: self.color_weight,
            normal_k: self.normal_k,
            ..IcpParams::default()
        }
    }

    pub fn thresholds(&self) -> RecallThresholds {
        RecallThresholds { rotation_deg: self.rotation_threshold, translation: self.translation_threshold }
    }

    pub fn parsed_time_pairs(&self) -> Result<Vec<(String, String)>> {
        self.time_pairs
            .iter()
            .map(|p| {
                let (a, b) = p
                    .split_once('-')
                    .ok_or_else(|| IpcdError::Config(format!("register.time_pairs entry `{p}` is not `source-target`")))?;
                for t in [a, b] {
                    TimeOfDay::parse(t).map_err(|e| IpcdError::Config(e.to_string()))?;
                }
                Ok((a.to_string(), b.to_string()))
            })
            .collect()
    }
}

/// Parses an override value as TOML, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `section.key=value` override to a raw document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) =
        spec.split_once('=').ok_or_else(|| IpcdError::Config(format!("override `{spec}` is not `section.key=value`")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| IpcdError::Config(format!("override key `{key}` is not `section.key`")))?;
    let table = doc
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| IpcdError::Config(format!("`{section}` is not a section")))?;
    table.insert(field.to_string(), parse_value(value.trim()));
    Ok(())
}

impl Config {
    /// Parses a document and applies overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| IpcdError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| IpcdError::Config(e.to_string()))?;
        cfg.gen.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, else starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| IpcdError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
