//! Dataset-level operations shared by the command line and the tests.

use std::collections::BTreeMap;

use ipcd_core::baselines::{baseline_a, baseline_s, retinex_points, RetinexConfig};
use ipcd_core::cloud::normalize_cloud;
use ipcd_core::eval::{
    make_registration_cases, metrics, pair_f1, register_case, registration_recall, synthetic_annotations, IcpParams, MetricReport,
    MetricRow, RecallThresholds, RegistrationAsset,
};
use ipcd_core::math::Rigid;
use ipcd_core::model::{infer, train_with, InferConfig, ModelParams, Prediction, TrainConfig, TrainOutput, TrainSample};
use ipcd_core::{Rgb, Vec3};

use crate::config::{EvalSection, RegisterSection};
use crate::dataset::Sample;
use crate::error::{IpcdError, Result};
use crate::formats::RegistrationRow;

/// A decomposition method under evaluation.
#[derive(Debug, Clone)]
pub enum Method {
    GroundTruth,
    BaselineA,
    BaselineS,
    Retinex(RetinexConfig),
    Model { params: ModelParams, infer: InferConfig },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::GroundTruth => "ground-truth".into(),
            Method::BaselineA => "baseline-a".into(),
            Method::BaselineS => "baseline-s".into(),
            Method::Retinex(_) => "retinex".into(),
            Method::Model { params, .. } => {
                let a = params.architecture();
                format!("model(pld={},hfr={},shared={})", a.use_pld, a.use_hfr, a.shared_encoder)
            }
        }
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let t = &sample.triplet;
        Ok(match self {
            Method::GroundTruth => Prediction { albedo: t.albedo.clone(), shade: t.shade.clone(), pre_albedo: None, pre_shade: None },
            Method::BaselineA => baseline_a(&t.cloud),
            Method::BaselineS => baseline_s(&t.cloud),
            Method::Retinex(cfg) => retinex_points(&t.cloud, cfg)?.0,
            Method::Model { params, infer: cfg } => infer(&t.cloud, sample.pld.as_ref(), params, cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// One row per `asset/time`.
    pub report: MetricReport,
    /// Mean pair f1 over samples, on synthetic annotations from the true albedo.
    pub pair_f1: f64,
}

pub fn sample_label(s: &Sample) -> String {
    format!("{}/{}", s.asset, s.time)
}

pub fn evaluate(samples: &[Sample], method: &Method, cfg: &EvalSection) -> Result<EvalOutcome> {
    evaluate_predictions(samples, |s| method.predict(s), cfg)
}

/// Scores predictions from `predict` against each sample's ground truth.
pub fn evaluate_predictions<F>(samples: &[Sample], mut predict: F, cfg: &EvalSection) -> Result<EvalOutcome>
where
    F: FnMut(&Sample) -> Result<Prediction>,
{
    if samples.is_empty() {
        return Err(IpcdError::Usage("nothing to evaluate: the split is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut f1 = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let p = predict(s)?;
        let t = &s.triplet;
        rows.push(MetricRow { asset: sample_label(s), albedo: metrics(&p.albedo, &t.albedo)?, shade: metrics(&p.shade, &t.shade)? });
        let pairs = synthetic_annotations(&t.albedo, cfg.pairs_per_class, cfg.pair_delta, cfg.seed.wrapping_add(k as u64))?;
        f1 += pair_f1(&p.albedo, &pairs, cfg.pair_delta)?;
    }
    Ok(EvalOutcome { report: MetricReport::from_rows(rows)?, pair_f1: f1 / samples.len() as f64 })
}

pub fn train_samples(samples: &[Sample], cfg: &TrainConfig, on_step: impl FnMut(usize, &ipcd_core::model::LossBreakdown)) -> Result<TrainOutput> {
    let set: Vec<TrainSample> = samples.iter().map(|s| TrainSample { triplet: s.triplet.clone(), pld: s.pld.clone() }).collect();
    Ok(train_with(&set, cfg, on_step)?)
}

/// Samples of one asset keyed by time.
fn group_by_asset(samples: &[Sample]) -> BTreeMap<&str, BTreeMap<&str, &Sample>> {
    let mut out: BTreeMap<&str, BTreeMap<&str, &Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.asset.as_str()).or_default().insert(s.time.as_str(), s);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOutcome {
    pub rows: Vec<RegistrationRow>,
    pub recall: f64,
    pub warnings: Vec<String>,
}

fn transform_text(t: &Rigid) -> String {
    let m = &t.rotation.0;
    let v = [t.translation.x, t.translation.y, t.translation.z];
    (0..3).flat_map(|r| [m[r][0], m[r][1], m[r][2], v[r]]).map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Builds the registration cases of `samples` and registers each with the
/// colors returned by `colors`. Positions are normalized per asset, so
/// thresholds are in normalized units.
pub fn register<F>(samples: &[Sample], label: &str, mut colors: F, cfg: &RegisterSection) -> Result<RegistrationOutcome>
where
    F: FnMut(&Sample) -> Result<Vec<Rgb>>,
{
    let groups = group_by_asset(samples);
    let mut assets = Vec::new();
    let mut color_table: BTreeMap<(String, String), Vec<Rgb>> = BTreeMap::new();
    let mut positions: BTreeMap<String, Vec<Vec3>> = BTreeMap::new();
    for (asset, times) in &groups {
        let first = times.values().next().expect("group is non-empty");
        let (norm, _) = normalize_cloud(&first.triplet.cloud);
        for (time, s) in times {
            if s.triplet.cloud.positions() != first.triplet.cloud.positions() {
                return Err(IpcdError::Usage(format!("{asset}: times do not share point positions; cannot build registration cases")));
            }
            color_table.insert((asset.to_string(), time.to_string()), colors(s)?);
        }
        positions.insert(asset.to_string(), norm.positions().to_vec());
        assets.push(RegistrationAsset { name: asset.to_string(), positions: norm.positions().to_vec() });
    }
    let pairs = cfg.parsed_time_pairs()?;
    let (cases, mut warnings) = make_registration_cases(&assets, &pairs, &cfg.overlaps, cfg.seed);
    let params: IcpParams = cfg.icp_params();
    let th: RecallThresholds = cfg.thresholds();
    let mut rows = Vec::with_capacity(cases.len());
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let lookup = |t: &str| {
            color_table
                .get(&(case.asset.clone(), t.to_string()))
                .ok_or_else(|| IpcdError::Usage(format!("{}: time `{t}` is not in the dataset", case.asset)))
        };
        let (src, tgt) = (lookup(&case.source_time)?, lookup(&case.target_time)?);
        let result = register_case(case, &positions[&case.asset], src, tgt, &params)?;
        let transform = result.map(|r| r.transform);
        let (rot, trans) = transform.map_or((f64::INFINITY, f64::INFINITY), |t| t.error_to(&case.ground_truth));
        if result.is_none() {
            warnings.push(format!("{} {}→{} overlap {}: registration diverged", case.asset, case.source_time, case.target_time, case.overlap));
        }
        rows.push(RegistrationRow {
            colors: label.into(),
            asset: case.asset.clone(),
            source_time: case.source_time.clone(),
            target_time: case.target_time.clone(),
            overlap: case.overlap,
            source_points: case.source_indices.len(),
            target_points: case.target_indices.len(),
            success: rot <= th.rotation_deg && trans <= th.translation,
            rotation_error_deg: rot,
            translation_error: trans,
            iterations: result.map_or(0, |r| r.iterations),
            residual: result.map_or(f64::NAN, |r| r.residual),
            transform: transform.map(|t| transform_text(&t)).unwrap_or_default(),
        });
        results.push(transform);
    }
    let recall = registration_recall(&cases, &results, &th)?;
    Ok(RegistrationOutcome { rows, recall, warnings })
}
