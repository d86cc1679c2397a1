//! Rule-based decompositions: the two identity baselines and a Retinex on
//! the k-NN graph of the cloud.
//!
//! The Retinex works on a scalar log-shade `s`. Every graph edge is classified
//! by the angle between the chromaticities of its endpoints: below `τ` it is a
//! shade edge, where `s` should follow the log-intensity difference; above `τ`
//! it is an albedo edge, where `s` should stay smooth. The least-squares
//! problem
//!
//! ```text
//! Σ_shade (sᵢ − sⱼ − (ℓᵢ − ℓⱼ))² + Σ_albedo (sᵢ − sⱼ)² + μ (mean(s) − anchor)²
//! ```
//!
//! fixes `s` only up to a constant per connected component of the graph. The
//! Laplacian part is solved by preconditioned conjugate gradients and each
//! component is then shifted so that its mean equals the anchor, which is the
//! exact minimizer for a connected graph and the natural per-component gauge
//! otherwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::knn_indices;
use crate::math::{acos, exp, ln, luma, sqrt, Rgb};
use crate::model::Prediction;

/// `Â = I`, `Ŝ = 1`.
pub fn baseline_a(cloud: &PointCloud) -> Prediction {
    Prediction {
        albedo: cloud.colors().to_vec(),
        shade: vec![[1.0; 3]; cloud.len()],
        pre_albedo: None,
        pre_shade: None,
    }
}

/// `Â = 1`, `Ŝ = I`.
pub fn baseline_s(cloud: &PointCloud) -> Prediction {
    Prediction {
        albedo: vec![[1.0; 3]; cloud.len()],
        shade: cloud.colors().to_vec(),
        pre_albedo: None,
        pre_shade: None,
    }
}

/// Floor applied to colors before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetinexConfig {
    /// Neighbors per point in the graph.
    pub k: usize,
    /// Chromaticity angle (radians) above which an edge is an albedo edge.
    pub tau: f64,
    /// Weight of the gauge term.
    pub mu: f64,
    /// Relative residual at which conjugate gradients stop.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RetinexConfig {
    fn default() -> Self {
        Self { k: 12, tau: 0.1, mu: 1e-3, tolerance: 1e-12, max_iterations: 20_000 }
    }
}

/// One undirected graph edge. `target` is the desired `sᵢ − sⱼ`: the
/// log-intensity difference for shade edges and 0 for albedo edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetinexEdge {
    pub i: usize,
    pub j: usize,
    pub target: f64,
    pub albedo_edge: bool,
}

/// The least-squares problem before solving.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinexSystem {
    pub n: usize,
    pub edges: Vec<RetinexEdge>,
    /// Per-point log intensity `ℓ`: mean of the per-channel logs.
    pub log_intensity: Vec<f64>,
    /// `log` of the 95th-percentile luma.
    pub anchor: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetinexReport {
    pub iterations: usize,
    /// Final `‖b − L·s‖ / ‖b‖` of the Laplacian system (0 when `b = 0`).
    pub relative_residual: f64,
    pub components: usize,
    pub albedo_edges: usize,
    pub shade_edges: usize,
}

fn chromaticity(c: Rgb) -> [f64; 3] {
    let c = [c[0].max(LOG_FLOOR), c[1].max(LOG_FLOOR), c[2].max(LOG_FLOOR)];
    let n = sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Angle between the chromaticity directions of two colors.
pub fn chromaticity_angle(a: Rgb, b: Rgb) -> f64 {
    let (x, y) = (chromaticity(a), chromaticity(b));
    acos((x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).clamp(-1.0, 1.0))
}

fn log_intensity(c: Rgb) -> f64 {
    (ln(c[0].max(LOG_FLOOR)) + ln(c[1].max(LOG_FLOOR)) + ln(c[2].max(LOG_FLOOR))) / 3.0
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = crate::math::round(q * (values.len() - 1) as f64) as usize;
    values[idx.min(values.len() - 1)]
}

/// Builds the graph and classifies its edges. Each unordered neighbor pair
/// appears once, with `i < j`.
pub fn build_retinex_system(cloud: &PointCloud, cfg: &RetinexConfig) -> Result<RetinexSystem> {
    let n = cloud.len();
    if cfg.k == 0 || n <= cfg.k {
        return Err(Error::Config(format!("Retinex needs 0 < k < N, got k = {} with N = {n}", cfg.k)));
    }
    if !(cfg.tau >= 0.0 && cfg.mu > 0.0) {
        return Err(Error::Config("Retinex needs tau ≥ 0 and mu > 0".into()));
    }
    let knn = knn_indices(cloud.positions(), cfg.k)?;
    let colors = cloud.colors();
    let log_intensity: Vec<f64> = colors.iter().map(|&c| log_intensity(c)).collect();
    let mut pairs: Vec<(usize, usize)> = knn
        .chunks_exact(cfg.k)
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let edges = pairs
        .into_iter()
        .map(|(i, j)| {
            let albedo_edge = chromaticity_angle(colors[i], colors[j]) > cfg.tau;
            let target = if albedo_edge { 0.0 } else { log_intensity[i] - log_intensity[j] };
            RetinexEdge { i, j, target, albedo_edge }
        })
        .collect();
    let mut lumas: Vec<f64> = colors.iter().map(|&c| luma(c).max(LOG_FLOOR)).collect();
    let anchor = ln(percentile(&mut lumas, 0.95));
    Ok(RetinexSystem { n, edges, log_intensity, anchor, mu: cfg.mu })
}

impl RetinexSystem {
    /// `L·x` for the unweighted graph Laplacian.
    fn laplacian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for e in &self.edges {
            let d = x[e.i] - x[e.j];
            out[e.i] += d;
            out[e.j] -= d;
        }
    }

    fn rhs(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n];
        for e in &self.edges {
            b[e.i] += e.target;
            b[e.j] -= e.target;
        }
        b
    }

    fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.i] += 1.0;
            d[e.j] += 1.0;
        }
        d
    }

    /// Connected component label of every point.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut label = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut out = vec![0; self.n];
        for i in 0..self.n {
            let r = find(&mut parent, i);
            if label[r] == usize::MAX {
                label[r] = count;
                count += 1;
            }
            out[i] = label[r];
        }
        (out, count)
    }

    /// Value of the full objective at `s`.
    pub fn objective(&self, s: &[f64]) -> f64 {
        let fit: f64 = self.edges.iter().map(|e| { let d = s[e.i] - s[e.j] - e.target; d * d }).sum();
        let mean = s.iter().sum::<f64>() / self.n as f64;
        fit + self.mu * (mean - self.anchor) * (mean - self.anchor)
    }

    /// Log-shade minimizing the objective, with every component's mean set to
    /// the anchor.
    pub fn solve(&self, cfg: &RetinexConfig) -> Result<(Vec<f64>, RetinexReport)> {
        let n = self.n;
        let b = self.rhs();
        let bnorm = sqrt(b.iter().map(|v| v * v).sum());
        let diag: Vec<f64> = self.degrees().into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let mut s = vec![0.0; n];
        let mut iterations = 0;
        let mut rel = 0.0;
        if bnorm > 0.0 {
            let mut r = b.clone();
            let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a * d).collect();
            let mut p = z.clone();
            let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let mut ap = vec![0.0; n];
            rel = 1.0;
            while rel > cfg.tolerance {
                if iterations >= cfg.max_iterations {
                    return Err(Error::Numerical(format!(
                        "Retinex conjugate gradients stalled at relative residual {rel:.3e} after {iterations} iterations"
                    )));
                }
                self.laplacian(&p, &mut ap);
                let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
                if !(pap > 0.0) {
                    return Err(Error::Numerical(format!(
                        "Retinex system is singular along the search direction (pᵀLp = {pap:.3e}, residual {rel:.3e})"
                    )));
                }
                let alpha = rz / pap;
                for i in 0..n {
                    s[i] += alpha * p[i];
                    r[i] -= alpha * ap[i];
                }
                rel = sqrt(r.iter().map(|v| v * v).sum()) / bnorm;
                for i in 0..n {
                    z[i] = r[i] * diag[i];
                }
                let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
                let beta = rz_new / rz;
                rz = rz_new;
                for i in 0..n {
                    p[i] = z[i] + beta * p[i];
                }
                iterations += 1;
            }
        }
        let (label, components) = self.components();
        let mut sums = vec![0.0; components];
        let mut counts = vec![0usize; components];
        for i in 0..n {
            sums[label[i]] += s[i];
            counts[label[i]] += 1;
        }
        for i in 0..n {
            s[i] += self.anchor - sums[label[i]] / counts[label[i]] as f64;
        }
        let albedo_edges = self.edges.iter().filter(|e| e.albedo_edge).count();
        let report = RetinexReport {
            iterations,
            relative_residual: rel,
            components,
            albedo_edges,
            shade_edges: self.edges.len() - albedo_edges,
        };
        Ok((s, report))
    }
}

/// Graph Retinex: `Ŝ = exp(s)` clamped to `(0, 1]` (gray), `Â = I ⊘ Ŝ`
/// clamped to `[0, 1]`.
pub fn retinex_points(cloud: &PointCloud, cfg: &RetinexConfig) -> Result<(Prediction, RetinexReport)> {
    let system = build_retinex_system(cloud, cfg)?;
    let (s, report) = system.solve(cfg)?;
    let mut albedo = Vec::with_capacity(cloud.len());
    let mut shade = Vec::with_capacity(cloud.len());
    for (c, &si) in cloud.colors().iter().zip(&s) {
        let sh = exp(si).clamp(f64::MIN_POSITIVE, 1.0);
        shade.push([sh; 3]);
        albedo.push([(c[0] / sh).clamp(0.0, 1.0), (c[1] / sh).clamp(0.0, 1.0), (c[2] / sh).clamp(0.0, 1.0)]);
    }
    Ok((Prediction { albedo, shade, pre_albedo: None, pre_shade: None }, report))
}
