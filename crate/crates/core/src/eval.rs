//! Evaluation: error metrics, relative-reflectance pair f1 and registration
//! with colored ICP.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::math::{cos, log10, luma, rad, sin, solve_dense, sqrt, symmetric_eigen3, Mat3, Rgb, Rigid, Vec3};

/// PSNR reported when the MSE is below [`PSNR_EPS`].
pub const PSNR_CAP: f64 = 99.0;
pub const PSNR_EPS: f64 = 1e-10;

/// Error of one component against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
}

/// `10·log₁₀(1/MSE)`, capped.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_EPS {
        PSNR_CAP
    } else {
        (10.0 * log10(1.0 / mse)).min(PSNR_CAP)
    }
}

/// MSE and MAE over all `N·3` entries, PSNR with peak 1.
pub fn metrics(pred: &[Rgb], truth: &[Rgb]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("metrics", format!("{} predicted rows vs {} truth rows", pred.len(), truth.len())));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for c in 0..3 {
            let d = p[c] - t[c];
            se += d * d;
            ae += d.abs();
        }
    }
    let n = (pred.len() * 3) as f64;
    let mse = se / n;
    Ok(Metrics { mse, mae: ae / n, psnr: psnr_from_mse(mse) })
}

/// Metrics of one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub asset: String,
    pub albedo: Metrics,
    pub shade: Metrics,
}

/// Per-asset rows and their aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Mean of every per-asset value, PSNR included.
    pub mean_albedo: Metrics,
    pub mean_shade: Metrics,
    /// `10·log₁₀(1/mean MSE)`, the pooled alternative to the mean PSNR.
    pub pooled_psnr_albedo: f64,
    pub pooled_psnr_shade: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("a metric report needs at least one asset".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricRow) -> Metrics| Metrics {
            mse: rows.iter().map(|r| f(r).mse).sum::<f64>() / n,
            mae: rows.iter().map(|r| f(r).mae).sum::<f64>() / n,
            psnr: rows.iter().map(|r| f(r).psnr).sum::<f64>() / n,
        };
        let mean_albedo = mean(&|r| r.albedo);
        let mean_shade = mean(&|r| r.shade);
        Ok(Self {
            pooled_psnr_albedo: psnr_from_mse(mean_albedo.mse),
            pooled_psnr_shade: psnr_from_mse(mean_shade.mse),
            rows,
            mean_albedo,
            mean_shade,
        })
    }
}

/// Relative reflectance of point `i` against point `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Darker,
    Lighter,
    Equal,
}

impl PairLabel {
    pub const ALL: [PairLabel; 3] = [PairLabel::Darker, PairLabel::Lighter, PairLabel::Equal];

    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Darker => "darker",
            PairLabel::Lighter => "lighter",
            PairLabel::Equal => "equal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "darker" => Ok(PairLabel::Darker),
            "lighter" => Ok(PairLabel::Lighter),
            "equal" => Ok(PairLabel::Equal),
            other => Err(Error::Config(format!("unknown pair label {other:?}; expected darker, lighter or equal"))),
        }
    }

    fn index(self) -> usize {
        match self {
            PairLabel::Darker => 0,
            PairLabel::Lighter => 1,
            PairLabel::Equal => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAnnotation {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
}

pub const DEFAULT_PAIR_DELTA: f64 = 1.1;
/// Floor applied to luma before forming ratios.
pub const PAIR_LUMA_FLOOR: f64 = 1e-4;

/// Label from the luma ratio `ρ = luma(a)/luma(b)`: below `1/δ` darker, above
/// `δ` lighter, otherwise equal.
pub fn classify_pair(a: Rgb, b: Rgb, delta: f64) -> PairLabel {
    let rho = luma(a).max(PAIR_LUMA_FLOOR) / luma(b).max(PAIR_LUMA_FLOOR);
    if rho < 1.0 / delta {
        PairLabel::Darker
    } else if rho > delta {
        PairLabel::Lighter
    } else {
        PairLabel::Equal
    }
}

fn validate_annotations(n: usize, annotations: &[PairAnnotation]) -> Result<()> {
    for (k, a) in annotations.iter().enumerate() {
        if a.i == a.j || a.i >= n || a.j >= n {
            return Err(Error::Config(format!("annotation {k}: invalid pair ({}, {}) for {n} points", a.i, a.j)));
        }
    }
    Ok(())
}

/// Macro-averaged f1 of the labels predicted from `albedo` against the
/// annotations. Classes absent from both labels and predictions are skipped.
pub fn pair_f1(albedo: &[Rgb], annotations: &[PairAnnotation], delta: f64) -> Result<f64> {
    validate_annotations(albedo.len(), annotations)?;
    if !(delta >= 1.0) {
        return Err(Error::Config(format!("pair ratio threshold must be ≥ 1, got {delta}")));
    }
    let mut tp = [0usize; 3];
    let mut fp = [0usize; 3];
    let mut fneg = [0usize; 3];
    for a in annotations {
        let pred = classify_pair(albedo[a.i], albedo[a.j], delta).index();
        let truth = a.label.index();
        if pred == truth {
            tp[pred] += 1;
        } else {
            fp[pred] += 1;
            fneg[truth] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..3 {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        classes += 1;
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64;
    }
    Ok(if classes == 0 { 0.0 } else { sum / classes as f64 })
}

/// Draws random point pairs and labels them from ground-truth albedo, keeping
/// at most `per_class` pairs of each label.
pub fn synthetic_annotations(albedo: &[Rgb], per_class: usize, delta: f64, seed: u64) -> Result<Vec<PairAnnotation>> {
    let n = albedo.len();
    if n < 2 {
        return Err(Error::Config("pair annotations need at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 3];
    let mut out = Vec::with_capacity(3 * per_class);
    let budget = 200 * per_class.max(1) * 3;
    for _ in 0..budget {
        if counts.iter().all(|&c| c >= per_class) {
            break;
        }
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j {
            continue;
        }
        let label = classify_pair(albedo[i], albedo[j], delta);
        if counts[label.index()] < per_class {
            counts[label.index()] += 1;
            out.push(PairAnnotation { i, j, label });
        }
    }
    Ok(out)
}

/// Unit normals from a PCA plane fit over each point and its `k` nearest
/// neighbors, oriented toward `+z`; horizontal normals point away from the origin.
pub fn estimate_normals(positions: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    let n = positions.len();
    if n < 3 {
        return Err(Error::Config("normal estimation needs at least 3 points".into()));
    }
    let k = k.min(n - 1).max(2);
    let tree = KdTree::new(positions);
    let mut out = Vec::with_capacity(n);
    for &p in positions {
        let nb = tree.nearest_k(p, k + 1, None);
        let mean = nb.iter().fold(Vec3::ZERO, |a, &(j, _)| a + positions[j]) / nb.len() as f64;
        let mut cov = [[0.0; 3]; 3];
        for &(j, _) in &nb {
            let d = positions[j] - mean;
            let d = [d.x, d.y, d.z];
            for r in 0..3 {
                for c in 0..3 {
                    cov[r][c] += d[r] * d[c];
                }
            }
        }
        let (_, vecs) = symmetric_eigen3(cov);
        let mut nrm = vecs[0].normalized();
        if nrm.z < 0.0 || (nrm.z == 0.0 && nrm.dot(p) < 0.0) {
            nrm = -nrm;
        }
        out.push(nrm);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Correspondences farther apart than this are dropped.
    pub max_correspondence_distance: f64,
    /// Weight `w` of the photometric term; the geometric term gets `1 − w`.
    pub color_weight: f64,
    /// Neighbors for target normals and luma gradients.
    pub normal_k: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iterations: 30, max_correspondence_distance: 0.1, color_weight: 0.3, normal_k: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub transform: Rigid,
    pub iterations: usize,
    /// Mean weighted squared residual at the returned transform.
    pub residual: f64,
    pub correspondences: usize,
    /// Stopped because the update norm fell below `1e−8`.
    pub converged: bool,
    /// Stopped because the residual did not decrease for 5 iterations.
    pub stalled: bool,
}

pub const ICP_MIN_CORRESPONDENCES: usize = 10;
const ICP_UPDATE_TOL: f64 = 1e-8;
const ICP_STALL_ITERATIONS: usize = 5;

/// Target cloud with its normals and tangent-plane luma gradients.
#[derive(Debug, Clone)]
pub struct IcpTarget<'a> {
    positions: &'a [Vec3],
    luma: Vec<f64>,
    normals: Vec<Vec3>,
    gradients: Vec<Vec3>,
    tree: KdTree<'a>,
}

impl<'a> IcpTarget<'a> {
    pub fn new(target: &'a PointCloud, k: usize) -> Result<Self> {
        let positions = target.positions();
        let normals = estimate_normals(positions, k)?;
        let luma: Vec<f64> = target.colors().iter().map(|&c| luma(c)).collect();
        let tree = KdTree::new(positions);
        let k = k.min(positions.len() - 1).max(2);
        let mut gradients = Vec::with_capacity(positions.len());
        for (i, &q) in positions.iter().enumerate() {
            let n = normals[i];
            // Least squares for d with dᵀ(p′ − q) ≈ C(p) − C(q) over projected
            // neighbors p′, plus a stiff row forcing dᵀn = 0.
            let mut a = [0.0; 9];
            let mut b = [0.0; 3];
            for (j, _) in tree.nearest_k(q, k, Some(i)) {
                let d = positions[j] - q;
                let v = d - n * n.dot(d);
                let v = [v.x, v.y, v.z];
                let r = luma[j] - luma[i];
                for x in 0..3 {
                    for y in 0..3 {
                        a[x * 3 + y] += v[x] * v[y];
                    }
                    b[x] += v[x] * r;
                }
            }
            let scale = (a[0] + a[4] + a[8]).max(1e-12);
            let nn = [n.x, n.y, n.z];
            for x in 0..3 {
                for y in 0..3 {
                    a[x * 3 + y] += scale * nn[x] * nn[y];
                }
                a[x * 4] += 1e-12 * scale;
            }
            let g = if solve_dense(&mut a, &mut b, 3).is_some() { Vec3::new(b[0], b[1], b[2]) } else { Vec3::ZERO };
            gradients.push(g);
        }
        Ok(Self { positions, luma, normals, gradients, tree })
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }
}

/// Accumulated Gauss-Newton system at one pose.
struct Linearization {
    h: [f64; 36],
    g: [f64; 6],
    cost: f64,
    count: usize,
}

fn linearize(source: &[Vec3], source_luma: &[f64], target: &IcpTarget<'_>, pose: &Rigid, params: &IcpParams) -> Linearization {
    let mut lin = Linearization { h: [0.0; 36], g: [0.0; 6], cost: 0.0, count: 0 };
    let w_c = params.color_weight;
    let w_g = 1.0 - w_c;
    let r2 = params.max_correspondence_distance * params.max_correspondence_distance;
    let add = |j: [f64; 6], r: f64, w: f64, lin: &mut Linearization| {
        for a in 0..6 {
            lin.g[a] += w * j[a] * r;
            for b in 0..6 {
                lin.h[a * 6 + b] += w * j[a] * j[b];
            }
        }
        lin.cost += w * r * r;
    };
    for (p, &cs) in source.iter().zip(source_luma) {
        let x = pose.apply(*p);
        let Some((qi, d2)) = target.tree.nearest(x) else { continue };
        if d2 > r2 {
            continue;
        }
        let q = target.positions[qi];
        let n = target.normals[qi];
        let diff = x - q;
        if w_g > 0.0 {
            let c = x.cross(n);
            add([c.x, c.y, c.z, n.x, n.y, n.z], diff.dot(n), w_g, &mut lin);
        }
        if w_c > 0.0 {
            let d = target.gradients[qi];
            let c = x.cross(d);
            let r = target.luma[qi] + d.dot(diff) - cs;
            add([c.x, c.y, c.z, d.x, d.y, d.z], r, w_c, &mut lin);
        }
        lin.count += 1;
    }
    lin
}

/// Colored ICP of `source` onto `target` starting from `init`. Each step
/// minimizes `Σ (1−w)·((x − q)·n)² + w·(C_t(q) + dᵀ(x − q) − C_s)²` over
/// nearest-neighbor pairs `(x, q)` within the correspondence radius, where
/// `d` is the target luma gradient in the tangent plane at `q`.
pub fn colored_icp(source: &PointCloud, target: &PointCloud, init: &Rigid, params: &IcpParams) -> Result<IcpResult> {
    let prepared = IcpTarget::new(target, params.normal_k)?;
    colored_icp_prepared(source, &prepared, init, params)
}

/// [`colored_icp`] against a target whose normals and gradients are built.
pub fn colored_icp_prepared(source: &PointCloud, target: &IcpTarget<'_>, init: &Rigid, params: &IcpParams) -> Result<IcpResult> {
    if !(0.0..=1.0).contains(&params.color_weight) || !(params.max_correspondence_distance > 0.0) {
        return Err(Error::Config("ICP needs color weight in [0, 1] and a positive correspondence radius".into()));
    }
    let src = source.positions();
    let src_luma: Vec<f64> = source.colors().iter().map(|&c| luma(c)).collect();
    let mut pose = *init;
    let mut best: Option<(f64, Rigid, usize)> = None;
    let mut no_improvement = 0;
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        let lin = linearize(src, &src_luma, target, &pose, params);
        if lin.count < ICP_MIN_CORRESPONDENCES {
            return Err(Error::Divergence(format!(
                "only {} correspondences within {} after {iterations} iterations",
                lin.count, params.max_correspondence_distance
            )));
        }
        let cost = lin.cost / lin.count as f64;
        match best {
            Some((c, _, _)) if cost >= c => {
                no_improvement += 1;
                if no_improvement >= ICP_STALL_ITERATIONS {
                    stalled = true;
                    break;
                }
            }
            _ => {
                no_improvement = 0;
                best = Some((cost, pose, lin.count));
            }
        }
        let mut h = lin.h;
        let damping = 1e-12 * (0..6).map(|i| h[i * 7]).fold(0.0, f64::max).max(1e-300);
        for i in 0..6 {
            h[i * 7] += damping;
        }
        let mut step = lin.g.map(|v| -v);
        if solve_dense(&mut h, &mut step, 6).is_none() {
            return Err(Error::Numerical("ICP normal equations are singular".into()));
        }
        iterations += 1;
        let omega = Vec3::new(step[0], step[1], step[2]);
        let t = Vec3::new(step[3], step[4], step[5]);
        let delta = Rigid::new(Mat3::from_axis_angle(omega), t);
        pose = delta.compose(&pose);
        if sqrt(step.iter().map(|v| v * v).sum()) < ICP_UPDATE_TOL {
            converged = true;
            break;
        }
    }
    if converged || !stalled {
        // Score the final pose so the returned transform is never worse than
        // the best one seen.
        let lin = linearize(src, &src_luma, target, &pose, params);
        if lin.count >= ICP_MIN_CORRESPONDENCES {
            let cost = lin.cost / lin.count as f64;
            if best.is_none_or(|(c, _, _)| cost <= c) {
                best = Some((cost, pose, lin.count));
            }
        }
    }
    let (residual, transform, correspondences) = best.expect("at least one linearization succeeded");
    Ok(IcpResult { transform, iterations, residual, correspondences, converged, stalled })
}

/// Coarse-to-fine colored ICP: one run per radius, each seeded by the last.
pub fn colored_icp_multiscale(
    source: &PointCloud,
    target: &PointCloud,
    init: &Rigid,
    params: &IcpParams,
    radii: &[f64],
) -> Result<IcpResult> {
    let prepared = IcpTarget::new(target, params.normal_k)?;
    let mut pose = *init;
    let mut last = None;
    for &r in radii {
        let p = IcpParams { max_correspondence_distance: r, ..*params };
        let res = colored_icp_prepared(source, &prepared, &pose, &p)?;
        pose = res.transform;
        last = Some(res);
    }
    last.ok_or_else(|| Error::Config("multiscale ICP needs at least one radius".into()))
}

/// Recall thresholds: rotation in degrees, translation in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallThresholds {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl Default for RecallThresholds {
    fn default() -> Self {
        Self { rotation_deg: 5.0, translation: 0.05 }
    }
}

/// Fraction of cases whose estimate lies within both thresholds of the
/// ground truth. `None` marks a failed registration.
pub fn registration_recall(cases: &[RegistrationCase], results: &[Option<Rigid>], th: &RecallThresholds) -> Result<f64> {
    if cases.len() != results.len() {
        return Err(Error::shape("registration_recall", format!("{} cases vs {} results", cases.len(), results.len())));
    }
    if cases.is_empty() {
        return Ok(0.0);
    }
    let hits = cases
        .iter()
        .zip(results)
        .filter(|(c, r)| {
            r.is_some_and(|t| {
                let (rot, trans) = t.error_to(&c.ground_truth);
                rot <= th.rotation_deg && trans <= th.translation
            })
        })
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Positions of one asset in a shared frame; every time of day of the asset
/// uses these points in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationAsset {
    pub name: String,
    pub positions: Vec<Vec3>,
}

/// A source/target crop pair of one asset under two suns. The source is
/// moved by `perturbation`; `ground_truth` maps it back onto the target.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationCase {
    pub asset: String,
    pub source_time: String,
    pub target_time: String,
    pub overlap: f64,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub perturbation: Rigid,
    pub ground_truth: Rigid,
}

pub const MAX_PERTURBATION_DEG: f64 = 15.0;
pub const MAX_PERTURBATION_TRANSLATION: f64 = 0.2;
const MIN_CASE_POINTS: usize = 100;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let a: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let r = sqrt(1.0 - z * z);
    Vec3::new(r * cos(a), r * sin(a), z)
}

/// Crops every asset into source/target pairs per time pair and overlap.
///
/// The asset's points are split at random into two disjoint pools, standing in
/// for two scans. Along a random horizontal direction the source keeps the
/// pool points ranked in the first `(1+o)/2` and the target those in the last
/// `(1+o)/2`, so the shared strip is a fraction `o` of the covered surface.
/// Cases with an infeasible overlap or fewer than 100 points per side are
/// skipped and described in the returned warnings.
pub fn make_registration_cases(
    assets: &[RegistrationAsset],
    time_pairs: &[(String, String)],
    overlaps: &[f64],
    seed: u64,
) -> (Vec<RegistrationCase>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    for asset in assets {
        let n = asset.positions.len();
        for (st, tt) in time_pairs {
            for &o in overlaps {
                let pool: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                let angle: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
                let axis = random_unit(&mut rng);
                let degrees: f64 = rng.gen_range(0.0..=MAX_PERTURBATION_DEG);
                let offset = random_unit(&mut rng) * rng.gen_range(0.0..=MAX_PERTURBATION_TRANSLATION);
                if !(o > 0.0 && o <= 1.0) {
                    warnings.push(format!("{}: overlap {o} is outside (0, 1]; skipped", asset.name));
                    continue;
                }
                let u = Vec3::new(cos(angle), sin(angle), 0.0);
                let mut rank: Vec<usize> = (0..n).collect();
                rank.sort_by(|&a, &b| asset.positions[a].dot(u).total_cmp(&asset.positions[b].dot(u)).then(a.cmp(&b)));
                let keep = (1.0 + o) / 2.0;
                let src_end = crate::math::round(keep * n as f64) as usize;
                let tgt_start = n - src_end;
                let source_indices: Vec<usize> = rank[..src_end].iter().copied().filter(|&i| pool[i]).collect();
                let target_indices: Vec<usize> = rank[tgt_start..].iter().copied().filter(|&i| !pool[i]).collect();
                if source_indices.len() < MIN_CASE_POINTS || target_indices.len() < MIN_CASE_POINTS {
                    warnings.push(format!(
                        "{} {st}/{tt} overlap {o}: {} source / {} target points is too few; skipped",
                        asset.name,
                        source_indices.len(),
                        target_indices.len()
                    ));
                    continue;
                }
                let perturbation = Rigid::new(Mat3::from_axis_angle(axis * rad(degrees)), offset);
                cases.push(RegistrationCase {
                    asset: asset.name.clone(),
                    source_time: st.clone(),
                    target_time: tt.clone(),
                    overlap: o,
                    source_indices,
                    target_indices,
                    ground_truth: perturbation.inverse(),
                    perturbation,
                });
            }
        }
    }
    (cases, warnings)
}

impl RegistrationCase {
    /// Perturbed source cloud and target cloud, colored by the given
    /// per-point colors of the source and target times.
    pub fn clouds(&self, positions: &[Vec3], source_colors: &[Rgb], target_colors: &[Rgb]) -> Result<(PointCloud, PointCloud)> {
        let src = PointCloud::new(
            self.source_indices.iter().map(|&i| self.perturbation.apply(positions[i])).collect(),
            self.source_indices.iter().map(|&i| source_colors[i]).collect(),
        )?;
        let tgt = PointCloud::new(
            self.target_indices.iter().map(|&i| positions[i]).collect(),
            self.target_indices.iter().map(|&i| target_colors[i]).collect(),
        )?;
        Ok((src, tgt))
    }
}

/// Default coarse-to-fine radii for registration cases.
pub const REGISTRATION_RADII: [f64; 3] = [0.3, 0.12, 0.05];

/// Registers one case from the identity; a diverged run yields `None`.
pub fn register_case(
    case: &RegistrationCase,
    positions: &[Vec3],
    source_colors: &[Rgb],
    target_colors: &[Rgb],
    params: &IcpParams,
) -> Result<Option<IcpResult>> {
    let (src, tgt) = case.clouds(positions, source_colors, target_colors)?;
    match colored_icp_multiscale(&src, &tgt, &Rigid::IDENTITY, params, &REGISTRATION_RADII) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Divergence(_)) | Err(Error::Numerical(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Measured overlap of a case: source points with a target point within
/// `radius` (perturbation undone), over the size of the union of both crops
/// counting those shared points once.
pub fn measured_overlap(case: &RegistrationCase, positions: &[Vec3], radius: f64) -> f64 {
    let tgt: Vec<Vec3> = case.target_indices.iter().map(|&i| positions[i]).collect();
    let tree = KdTree::new(&tgt);
    let shared = case
        .source_indices
        .iter()
        .filter(|&&i| tree.nearest(positions[i]).is_some_and(|(_, d2)| d2 <= radius * radius))
        .count();
    let union = case.source_indices.len() + case.target_indices.len() - shared;
    shared as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn metric_closed_forms() {
        let t = vec![[0.0; 3]; 10];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.mse, m.mae, m.psnr), (0.0, 0.0, PSNR_CAP));
        let p = vec![[0.1; 3]; 10];
        let m = metrics(&p, &t).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-15);
        assert!((m.mae - 0.1).abs() < 1e-15);
        assert!((m.psnr - 20.0).abs() < 1e-12);
        assert!(metrics(&p[..3], &t).is_err());
    }

    #[test]
    fn report_rows_satisfy_psnr_identity() {
        let rows = vec![
            MetricRow { asset: "a".into(), albedo: metrics(&[[0.1; 3]], &[[0.0; 3]]).unwrap(), shade: metrics(&[[0.3; 3]], &[[0.0; 3]]).unwrap() },
            MetricRow { asset: "b".into(), albedo: metrics(&[[0.2; 3]], &[[0.0; 3]]).unwrap(), shade: metrics(&[[0.0; 3]], &[[0.0; 3]]).unwrap() },
        ];
        let r = MetricReport::from_rows(rows).unwrap();
        for row in &r.rows {
            assert!((row.albedo.psnr - psnr_from_mse(row.albedo.mse)).abs() < 1e-12);
        }
        assert!((r.mean_albedo.mse - 0.025).abs() < 1e-15);
        assert!((r.mean_albedo.psnr - (20.0 + 10.0 * log10(25.0)) / 2.0).abs() < 1e-9);
        assert!(r.pooled_psnr_albedo < r.mean_albedo.psnr);
    }

    #[test]
    fn pair_classification() {
        let a = [0.5; 3];
        assert_eq!(classify_pair([0.525; 3], a, 1.1), PairLabel::Equal);
        assert_eq!(classify_pair([0.6; 3], a, 1.1), PairLabel::Lighter);
        assert_eq!(classify_pair([0.4; 3], a, 1.1), PairLabel::Darker);
        assert_eq!(classify_pair([0.0; 3], [0.0; 3], 1.1), PairLabel::Equal);
    }

    #[test]
    fn f1_perfect_and_invalid() {
        let albedo: Vec<Rgb> = (0..50).map(|i| [i as f64 / 50.0; 3]).collect();
        let ann = synthetic_annotations(&albedo, 20, 1.1, 1).unwrap();
        assert_eq!(pair_f1(&albedo, &ann, 1.1).unwrap(), 1.0);
        let bad = [PairAnnotation { i: 3, j: 3, label: PairLabel::Equal }];
        assert!(pair_f1(&albedo, &bad, 1.1).is_err());
    }

    #[test]
    fn shuffled_labels_give_a_third() {
        let albedo: Vec<Rgb> = (0..400).map(|i| [0.05 + 0.9 * i as f64 / 400.0; 3]).collect();
        let mut ann = synthetic_annotations(&albedo, 300, 1.1, 2).unwrap();
        assert_eq!(ann.len(), 900);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut labels: Vec<PairLabel> = ann.iter().map(|a| a.label).collect();
        for i in (1..labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        for (a, l) in ann.iter_mut().zip(labels) {
            a.label = l;
        }
        let f1 = pair_f1(&albedo, &ann, 1.1).unwrap();
        // Each class's hits are hypergeometric with mean 100 and sd ≈ 11.5;
        // 4 sd on f1 is about 0.05.
        assert!((f1 - 1.0 / 3.0).abs() < 0.05, "{f1}");
    }

    fn plane_cloud(pattern: bool) -> PointCloud {
        let mut pos = Vec::new();
        let mut col = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                let (x, y) = (-0.6 + 0.02 * i as f64, -0.6 + 0.02 * j as f64);
                pos.push(Vec3::new(x, y, 0.0));
                let v = if pattern { 0.5 + 0.3 * sin(x * 9.0) * cos(y * 7.0) } else { 0.5 };
                col.push([v; 3]);
            }
        }
        PointCloud::new(pos, col).unwrap()
    }

    #[test]
    fn icp_fixed_point() {
        let c = plane_cloud(true);
        let r = colored_icp(&c, &c, &Rigid::IDENTITY, &IcpParams::default()).unwrap();
        let (rot, tr) = r.transform.error_to(&Rigid::IDENTITY);
        assert!(rot < 1e-6 && tr < 1e-9, "{rot} {tr}");
    }

    #[test]
    fn color_term_resolves_in_plane_shift() {
        let target = plane_cloud(true);
        let shift = Vec3::new(0.03, -0.02, 0.0);
        let source = PointCloud::new(target.positions().iter().map(|&p| p + shift).collect(), target.colors().to_vec()).unwrap();
        let truth = Rigid::new(Mat3::IDENTITY, -shift);
        let geo = IcpParams { color_weight: 0.0, max_correspondence_distance: 0.2, max_iterations: 50, ..IcpParams::default() };
        let col = IcpParams { color_weight: 0.3, ..geo };
        let rg = colored_icp(&source, &target, &Rigid::IDENTITY, &geo).unwrap();
        let rc = colored_icp(&source, &target, &Rigid::IDENTITY, &col).unwrap();
        let (_, eg) = rg.transform.error_to(&truth);
        let (_, ec) = rc.transform.error_to(&truth);
        assert!(eg > 1e-2, "geometry-only error {eg}");
        assert!(ec < 1e-2, "colored error {ec}");
    }

    #[test]
    fn too_few_correspondences_diverge() {
        let c = plane_cloud(false);
        let far = PointCloud::new(c.positions().iter().map(|&p| p + Vec3::new(0.0, 0.0, 5.0)).collect(), c.colors().to_vec()).unwrap();
        assert!(matches!(colored_icp(&far, &c, &Rigid::IDENTITY, &IcpParams::default()), Err(Error::Divergence(_))));
    }

    #[test]
    fn recall_counting() {
        let case = |gt: Rigid| RegistrationCase {
            asset: "a".into(),
            source_time: "morning".into(),
            target_time: "noon".into(),
            overlap: 1.0,
            source_indices: vec![],
            target_indices: vec![],
            perturbation: gt.inverse(),
            ground_truth: gt,
        };
        let cases = vec![case(Rigid::IDENTITY), case(Rigid::IDENTITY)];
        let th = RecallThresholds::default();
        assert_eq!(registration_recall(&cases, &[Some(Rigid::IDENTITY); 2], &th).unwrap(), 1.0);
        let off = Rigid::new(Mat3::IDENTITY, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(registration_recall(&cases, &[Some(off), None], &th).unwrap(), 0.0);
        assert_eq!(registration_recall(&cases, &[Some(Rigid::IDENTITY), Some(off)], &th).unwrap(), 0.5);
    }

    #[test]
    fn cases_are_deterministic_and_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let positions: Vec<Vec3> = (0..4000).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0)).collect();
        let assets = vec![RegistrationAsset { name: "a".into(), positions: positions.clone() }];
        let pairs = vec![("morning".into(), "noon".into())];
        let (c1, w1) = make_registration_cases(&assets, &pairs, &[1.0, 0.5, 1.5], 4);
        let (c2, _) = make_registration_cases(&assets, &pairs, &[1.0, 0.5, 1.5], 4);
        assert_eq!(c1, c2);
        assert_eq!(c1.len(), 2);
        assert_eq!(w1.len(), 1);
        // Full overlap: both sides span the whole asset.
        assert!(c1[0].source_indices.len() + c1[0].target_indices.len() == 4000);
        for c in &c1 {
            let (rot, tr) = c.perturbation.error_to(&Rigid::IDENTITY);
            assert!(rot <= MAX_PERTURBATION_DEG + 1e-9 && tr <= MAX_PERTURBATION_TRANSLATION + 1e-12);
            let (r2, t2) = c.perturbation.compose(&c.ground_truth).error_to(&Rigid::IDENTITY);
            assert!(r2 < 1e-6 && t2 < 1e-12);
        }
    }
}
