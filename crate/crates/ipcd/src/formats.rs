//! Text and image formats: parameter files, PLD maps, annotations, reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ipcd_core::autodiff::Tensor;
use ipcd_core::eval::{MetricReport, PairAnnotation, PairLabel};
use ipcd_core::math::luma;
use ipcd_core::model::{Architecture, LossBreakdown, ModelParams};
use ipcd_core::projection::{HemisphereGrid, PldMap};

use crate::error::{IpcdError, Result};

pub const PARAMS_MAGIC: &str = "ipcd-params";
pub const PARAMS_VERSION: u32 = 1;

/// Parameter file: a version tag, the architecture flags, a shape manifest
/// and one line of values per section. Values use the shortest decimal form
/// that reads back to the same `f64`.
pub fn encode_params(params: &ModelParams) -> String {
    let arch = params.architecture();
    let mut out = format!(
        "{PARAMS_MAGIC} {PARAMS_VERSION}\narchitecture use_pld={} use_hfr={} shared_encoder={}\nsections {}\n",
        arch.use_pld,
        arch.use_hfr,
        arch.shared_encoder,
        params.names().len()
    );
    for (name, t) in params.sections() {
        let [r, c] = t.shape();
        out.push_str(&format!("{name} {r} {c}\n"));
    }
    for (name, t) in params.sections() {
        out.push_str(name);
        for v in t.data() {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn decode_params(text: &str, path: &Path) -> Result<ModelParams> {
    let bad = |m: String| IpcdError::format(path, m);
    let mut lines = text.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("file ends before the {what}")));
    let magic: Vec<&str> = next("version tag")?.split_whitespace().collect();
    match magic.as_slice() {
        [m, v] if *m == PARAMS_MAGIC => {
            if v.parse::<u32>().ok() != Some(PARAMS_VERSION) {
                return Err(bad(format!("unsupported parameter format version {v}; this build reads {PARAMS_VERSION}")));
            }
        }
        _ => return Err(bad(format!("not a parameter file (expected `{PARAMS_MAGIC} {PARAMS_VERSION}`)"))),
    }
    let arch_line = next("architecture line")?;
    let mut arch = Architecture::FULL;
    let mut seen = 0;
    for word in arch_line.split_whitespace().skip(1) {
        let (k, v) = word.split_once('=').ok_or_else(|| bad(format!("bad architecture entry `{word}`")))?;
        let v: bool = v.parse().map_err(|_| bad(format!("bad architecture flag `{word}`")))?;
        match k {
            "use_pld" => arch.use_pld = v,
            "use_hfr" => arch.use_hfr = v,
            "shared_encoder" => arch.shared_encoder = v,
            _ => return Err(bad(format!("unknown architecture flag `{k}`"))),
        }
        seen += 1;
    }
    if !arch_line.starts_with("architecture ") || seen != 3 {
        return Err(bad("malformed architecture line".into()));
    }
    let count: usize = next("section count")?
        .strip_prefix("sections ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("malformed section count".into()))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next("shape manifest")?;
        let w: Vec<&str> = line.split_whitespace().collect();
        let [name, r, c] = w.as_slice() else { return Err(bad(format!("bad manifest line `{line}`"))) };
        let r: usize = r.parse().map_err(|_| bad(format!("bad manifest line `{line}`")))?;
        let c: usize = c.parse().map_err(|_| bad(format!("bad manifest line `{line}`")))?;
        manifest.push((name.to_string(), r, c));
    }
    let mut sections = Vec::with_capacity(count);
    for (name, r, c) in manifest {
        let line = next(&format!("values of `{name}`"))?;
        let mut words = line.split_whitespace();
        if words.next() != Some(name.as_str()) {
            return Err(bad(format!("expected the values of `{name}`")));
        }
        let data = words.map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(format!("`{name}`: {e}")))?;
        let t = Tensor::new(r, c, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        if !t.is_finite() {
            return Err(bad(format!("`{name}` holds non-finite values")));
        }
        sections.push((name, t));
    }
    ModelParams::from_sections(arch, sections).map_err(|e| bad(e.to_string()))
}

pub fn write_params(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| IpcdError::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IpcdError::io(path, e))?;
    decode_params(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PldRow {
    theta: f64,
    phi: f64,
    r: f64,
    g: f64,
    b: f64,
    coverage: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> IpcdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IpcdError::io(path, io),
        other => IpcdError::format(path, format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| IpcdError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// One row per direction: `theta,phi,r,g,b,coverage`, θ-major.
pub fn write_pld_csv(path: impl AsRef<Path>, map: &PldMap) -> Result<()> {
    let grid = &map.grid;
    let rows = grid.thetas.iter().enumerate().flat_map(|(ti, &theta)| {
        grid.phis.iter().enumerate().map(move |(pi, &phi)| {
            let i = map.index(ti, pi);
            let [r, g, b] = map.values[i];
            PldRow { theta, phi, r, g, b, coverage: map.coverage[i] }
        })
    });
    write_rows(path.as_ref(), rows)
}

pub fn read_pld_csv(path: impl AsRef<Path>) -> Result<PldMap> {
    let path = path.as_ref();
    let rows: Vec<PldRow> = read_rows(path)?;
    let mut thetas: Vec<f64> = Vec::new();
    let mut phis: Vec<f64> = Vec::new();
    for r in &rows {
        if !thetas.contains(&r.theta) {
            thetas.push(r.theta);
        }
        if !phis.contains(&r.phi) {
            phis.push(r.phi);
        }
    }
    if rows.len() != thetas.len() * phis.len() {
        return Err(IpcdError::format(path, format!("{} rows do not form a {}×{} grid", rows.len(), thetas.len(), phis.len())));
    }
    let grid = HemisphereGrid::new(thetas.clone(), phis.clone()).map_err(|e| IpcdError::format(path, e.to_string()))?;
    for (k, r) in rows.iter().enumerate() {
        if r.theta != thetas[k / phis.len()] || r.phi != phis[k % phis.len()] {
            return Err(IpcdError::format(path, format!("row {} is out of θ-major order", k + 1)));
        }
    }
    let values = rows.iter().map(|r| [r.r, r.g, r.b]).collect();
    let coverage = rows.iter().map(|r| r.coverage).collect();
    PldMap::new(grid, values, coverage).map_err(|e| IpcdError::format(path, e.to_string()))
}

/// Grayscale luma heatmap, θ down the rows and φ across, each cell drawn as
/// a `cell`×`cell` block.
pub fn write_pld_png(path: impl AsRef<Path>, map: &PldMap, cell: u32) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = (map.grid.thetas.len() as u32, map.grid.phis.len() as u32);
    let img = image::GrayImage::from_fn(cols * cell, rows * cell, |x, y| {
        let v = luma(map.value((y / cell) as usize, (x / cell) as usize));
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => IpcdError::io(path, io),
        other => IpcdError::format(path, other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRow {
    i: usize,
    j: usize,
    label: String,
}

pub fn write_annotations(path: impl AsRef<Path>, pairs: &[PairAnnotation]) -> Result<()> {
    write_rows(path.as_ref(), pairs.iter().map(|p| AnnotationRow { i: p.i, j: p.j, label: p.label.as_str().into() }))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<PairAnnotation>> {
    let path = path.as_ref();
    read_rows::<AnnotationRow>(path)?
        .into_iter()
        .map(|r| {
            let label = PairLabel::parse(&r.label).map_err(|e| IpcdError::format(path, e.to_string()))?;
            Ok(PairAnnotation { i: r.i, j: r.j, label })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCsvRow {
    pub method: String,
    pub asset: String,
    pub albedo_mse: f64,
    pub albedo_mae: f64,
    pub albedo_psnr: f64,
    pub shade_mse: f64,
    pub shade_mae: f64,
    pub shade_psnr: f64,
}

/// Per-asset rows followed by a `mean` row per method.
pub fn metric_rows(method: &str, report: &MetricReport) -> Vec<MetricCsvRow> {
    let row = |asset: &str, a: &ipcd_core::eval::Metrics, s: &ipcd_core::eval::Metrics| MetricCsvRow {
        method: method.into(),
        asset: asset.into(),
        albedo_mse: a.mse,
        albedo_mae: a.mae,
        albedo_psnr: a.psnr,
        shade_mse: s.mse,
        shade_mae: s.mae,
        shade_psnr: s.psnr,
    };
    let mut out: Vec<MetricCsvRow> = report.rows.iter().map(|r| row(&r.asset, &r.albedo, &r.shade)).collect();
    out.push(row("mean", &report.mean_albedo, &report.mean_shade));
    out
}

pub fn write_metric_csv(path: impl AsRef<Path>, rows: &[MetricCsvRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_metric_csv(path: impl AsRef<Path>) -> Result<Vec<MetricCsvRow>> {
    read_rows(path.as_ref())
}

/// Console table of the mean rows, MSE and MAE in units of 10⁻².
pub fn metric_table(reports: &[(String, MetricReport)]) -> String {
    let mut s = format!(
        "{:<24} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n",
        "method", "A MSE e-2", "A MAE e-2", "A PSNR", "S MSE e-2", "S MAE e-2", "S PSNR"
    );
    for (name, r) in reports {
        let (a, sh) = (&r.mean_albedo, &r.mean_shade);
        s.push_str(&format!(
            "{:<24} {:>10.3} {:>10.3} {:>8.2} {:>10.3} {:>10.3} {:>8.2}\n",
            name,
            a.mse * 100.0,
            a.mae * 100.0,
            a.psnr,
            sh.mse * 100.0,
            sh.mae * 100.0,
            sh.psnr
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LossRow {
    iteration: usize,
    total: f64,
    albedo: f64,
    shade: f64,
    physical: f64,
    pre_albedo: f64,
    pre_shade: f64,
    pre_physical: f64,
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossBreakdown]) -> Result<()> {
    write_rows(
        path.as_ref(),
        history.iter().enumerate().map(|(iteration, l)| LossRow {
            iteration,
            total: l.total,
            albedo: l.albedo,
            shade: l.shade,
            physical: l.physical,
            pre_albedo: l.pre_albedo,
            pre_shade: l.pre_shade,
            pre_physical: l.pre_physical,
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRow {
    pub colors: String,
    pub asset: String,
    pub source_time: String,
    pub target_time: String,
    pub overlap: f64,
    pub source_points: usize,
    pub target_points: usize,
    pub success: bool,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Row-major 3×4 `[R | t]`, space separated; empty when ICP diverged.
    pub transform: String,
}

pub fn write_registration_csv(path: impl AsRef<Path>, rows: &[RegistrationRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_registration_csv(path: impl AsRef<Path>) -> Result<Vec<RegistrationRow>> {
    read_rows(path.as_ref())
}
