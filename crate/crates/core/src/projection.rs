//! Orthographic point splatting and the projection-based luminance
//! distribution (PLD).
//!
//! A normalized cloud is rotated by `R(θ, φ) = R_x(θ)·R_z(φ)` and viewed by a
//! fixed orthographic camera on `+z` looking down `−z`. In world coordinates
//! that camera sits in direction `(sinθ·sinφ, sinθ·cosφ, cosθ)`, so `θ` is the
//! angle from the zenith and `φ` the compass azimuth used by
//! [`crate::scene::SunConfig`]. The PLD value of a view is the mean color
//! over the pixels the splats cover.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::math::{ceil, cos, floor, luma, rad, sin, Mat3, Rgb, Vec3};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_POINT_SIZE: f64 = 0.02;
pub const DEFAULT_ANGLE_STEP: f64 = 10.0;

/// View directions over the upper hemisphere.
#[derive(Debug, Clone, PartialEq)]
pub struct HemisphereGrid {
    /// Zenith angles θ in degrees, strictly increasing.
    pub thetas: Vec<f64>,
    /// Azimuths φ in degrees, strictly increasing within `[0, 360)`.
    pub phis: Vec<f64>,
}

impl Default for HemisphereGrid {
    fn default() -> Self {
        Self::with_step(DEFAULT_ANGLE_STEP).expect("default step is valid")
    }
}

impl HemisphereGrid {
    /// `θ ∈ {0, s, 2s, …} < 90` and `φ ∈ {0, s, …} < 360`.
    pub fn with_step(step_deg: f64) -> Result<Self> {
        if !(step_deg > 0.0 && step_deg <= 90.0) {
            return Err(Error::Config(format!("angle step must be in (0, 90], got {step_deg}")));
        }
        let count = |limit: f64| ceil(limit / step_deg - 1e-9) as usize;
        let thetas = (0..count(90.0)).map(|i| i as f64 * step_deg).collect();
        let phis = (0..count(360.0)).map(|i| i as f64 * step_deg).collect();
        Ok(Self { thetas, phis })
    }

    pub fn new(thetas: Vec<f64>, phis: Vec<f64>) -> Result<Self> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if thetas.is_empty() || phis.is_empty() {
            return Err(Error::Config("hemisphere grid needs at least one θ and one φ".into()));
        }
        if !increasing(&thetas) || !increasing(&phis) {
            return Err(Error::Config("grid angles must be strictly increasing".into()));
        }
        if thetas[0] < 0.0 || *thetas.last().unwrap() > 90.0 {
            return Err(Error::Config("θ must lie in [0, 90]".into()));
        }
        if phis[0] < 0.0 || *phis.last().unwrap() >= 360.0 {
            return Err(Error::Config("φ must lie in [0, 360)".into()));
        }
        Ok(Self { thetas, phis })
    }

    /// Number of view directions K.
    pub fn len(&self) -> usize {
        self.thetas.len() * self.phis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World-space unit direction of the camera for cell `(ti, pi)`.
    pub fn view_direction(&self, ti: usize, pi: usize) -> Vec3 {
        let (t, p) = (rad(self.thetas[ti]), rad(self.phis[pi]));
        Vec3::new(sin(t) * sin(p), sin(t) * cos(p), cos(t))
    }

    /// Index of the θ row closest to `theta_deg`.
    pub fn nearest_theta(&self, theta_deg: f64) -> usize {
        (0..self.thetas.len())
            .min_by(|&a, &b| (self.thetas[a] - theta_deg).abs().total_cmp(&(self.thetas[b] - theta_deg).abs()))
            .unwrap_or(0)
    }

    /// Solid angle of the θ band around row `ti`, split evenly over the φ cells.
    /// Band edges sit halfway between neighboring rows, clipped to `[0°, 90°]`.
    pub fn cell_solid_angle(&self, ti: usize) -> f64 {
        let t = &self.thetas;
        let (lo, hi) = if t.len() == 1 {
            (0.0, 90.0)
        } else {
            let lo = if ti == 0 { t[0] - 0.5 * (t[1] - t[0]) } else { 0.5 * (t[ti - 1] + t[ti]) };
            let last = t.len() - 1;
            let hi = if ti == last { t[last] + 0.5 * (t[last] - t[last - 1]) } else { 0.5 * (t[ti] + t[ti + 1]) };
            (lo.max(0.0), hi.min(90.0))
        };
        2.0 * core::f64::consts::PI * (cos(rad(lo)) - cos(rad(hi))) / self.phis.len() as f64
    }
}

/// `R(θ, φ) = R_x(θ)·R_z(φ)` with angles in degrees.
pub fn rotation_for(theta_deg: f64, phi_deg: f64) -> Mat3 {
    Mat3::rot_x(rad(theta_deg)).mul(&Mat3::rot_z(rad(phi_deg)))
}

/// Rendered view. `depth` holds `−z` of the winning point (smaller is closer to
/// the camera); uncovered pixels are black with depth `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatImage {
    pub size: usize,
    pub pixels: Vec<Rgb>,
    pub depth: Vec<f64>,
    pub covered: Vec<bool>,
}

impl SplatImage {
    fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![[0.0; 3]; size * size],
            depth: vec![f64::INFINITY; size * size],
            covered: vec![false; size * size],
        }
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    /// NDC coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center_ndc(&self, col: usize, row: usize) -> (f64, f64) {
        let s = self.size as f64;
        ((col as f64 + 0.5) / s * 2.0 - 1.0, 1.0 - (row as f64 + 0.5) / s * 2.0)
    }
}

/// Splats every point as a disc of NDC radius `point_size` after rotating by
/// `rotation`. NDC `[−1, 1]²` maps onto the `image_size²` pixel grid, `+y` up.
/// A disc covers the pixels whose centers it contains plus always the pixel
/// holding its center, so no point vanishes at low resolution. Per pixel the
/// point nearest the camera (largest rotated `z`) wins; exact depth ties go to
/// the lexicographically smaller color so the image is order independent.
pub fn render_ortho(cloud: &PointCloud, rotation: &Mat3, image_size: usize, point_size: f64) -> Result<SplatImage> {
    if image_size < 8 {
        return Err(Error::Config(format!("image_size must be at least 8, got {image_size}")));
    }
    if !(point_size > 0.0) {
        return Err(Error::Config(format!("point size must be positive, got {point_size}")));
    }
    let mut img = SplatImage::blank(image_size);
    let s = image_size as f64;
    let half = s * 0.5;
    let r_px = point_size * half;
    let r2 = r_px * r_px;
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        let q = rotation.mul_vec(*p);
        let depth = -q.z;
        // Continuous pixel coordinates of the splat center.
        let u = (q.x + 1.0) * half;
        let v = (1.0 - q.y) * half;
        let c0 = floor(u - r_px).max(0.0) as i64;
        let c1 = (floor(u + r_px) as i64).min(image_size as i64 - 1);
        let r0 = floor(v - r_px).max(0.0) as i64;
        let r1 = (floor(v + r_px) as i64).min(image_size as i64 - 1);
        let own = (floor(u) as i64, floor(v) as i64);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dx = col as f64 + 0.5 - u;
                let dy = row as f64 + 0.5 - v;
                if dx * dx + dy * dy > r2 && (col, row) != own {
                    continue;
                }
                let idx = row as usize * image_size + col as usize;
                let cur = img.depth[idx];
                if depth < cur || (depth == cur && lex_less(c, &img.pixels[idx])) {
                    img.depth[idx] = depth;
                    img.pixels[idx] = *c;
                    img.covered[idx] = true;
                }
            }
        }
    }
    Ok(img)
}

fn lex_less(a: &Rgb, b: &Rgb) -> bool {
    a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

/// Mean color over covered pixels and the covered fraction of the image.
/// An empty view yields `((0,0,0), 0)`.
pub fn pld_value(img: &SplatImage) -> (Rgb, f64) {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (px, &cov) in img.pixels.iter().zip(&img.covered) {
        if cov {
            for ch in 0..3 {
                sum[ch] += px[ch];
            }
            count += 1;
        }
    }
    if count == 0 {
        return ([0.0; 3], 0.0);
    }
    let n = count as f64;
    ([sum[0] / n, sum[1] / n, sum[2] / n], n / img.pixels.len() as f64)
}

/// Per-direction mean color and coverage, indexed `[θ row][φ column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldMap {
    pub grid: HemisphereGrid,
    /// Row-major `|θ|×|φ|` mean colors.
    pub values: Vec<Rgb>,
    /// Row-major `|θ|×|φ|` covered fractions.
    pub coverage: Vec<f64>,
}

impl PldMap {
    pub fn new(grid: HemisphereGrid, values: Vec<Rgb>, coverage: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        if values.len() != k || coverage.len() != k {
            return Err(Error::shape(
                "PldMap::new",
                format!("grid has {k} cells, got {} values and {} coverage", values.len(), coverage.len()),
            ));
        }
        Ok(Self { grid, values, coverage })
    }

    #[inline]
    pub fn index(&self, ti: usize, pi: usize) -> usize {
        ti * self.grid.phis.len() + pi
    }

    pub fn value(&self, ti: usize, pi: usize) -> Rgb {
        self.values[self.index(ti, pi)]
    }

    /// Copy with the φ axis cyclically shifted by `shift` cells.
    pub fn rotate_phi(&self, shift: usize) -> Self {
        let np = self.grid.phis.len();
        let mut out = self.clone();
        for ti in 0..self.grid.thetas.len() {
            for pi in 0..np {
                let src = self.index(ti, pi);
                let dst = self.index(ti, (pi + shift) % np);
                out.values[dst] = self.values[src];
                out.coverage[dst] = self.coverage[src];
            }
        }
        out
    }
}

/// Renders one view per grid direction and records its [`pld_value`].
pub fn compute_pld(cloud: &PointCloud, grid: &HemisphereGrid, image_size: usize, point_size: f64) -> Result<PldMap> {
    let mut values = Vec::with_capacity(grid.len());
    let mut coverage = Vec::with_capacity(grid.len());
    for &theta in &grid.thetas {
        for &phi in &grid.phis {
            let (v, c) = render_view(cloud, theta, phi, image_size, point_size)?;
            values.push(v);
            coverage.push(c);
        }
    }
    PldMap::new(grid.clone(), values, coverage)
}

/// PLD value of the single view `(θ, φ)`.
pub fn render_view(cloud: &PointCloud, theta: f64, phi: f64, image_size: usize, point_size: f64) -> Result<(Rgb, f64)> {
    let img = render_ortho(cloud, &rotation_for(theta, phi), image_size, point_size)?;
    Ok(pld_value(&img))
}

/// Rec.709 luma of every cell, row-major like the map.
pub fn pld_luma(map: &PldMap) -> Vec<f64> {
    map.values.iter().map(|&c| luma(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize_cloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[([f64; 3], Rgb)]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vec3::from_array(p.0)).collect(), points.iter().map(|p| p.1).collect())
            .unwrap()
    }

    #[test]
    fn default_grid_has_324_views() {
        let g = HemisphereGrid::default();
        assert_eq!(g.thetas.len(), 9);
        assert_eq!(g.phis.len(), 36);
        assert_eq!(g.len(), 324);
        assert_eq!(*g.thetas.last().unwrap(), 80.0);
        assert_eq!(*g.phis.last().unwrap(), 350.0);
        let fine = HemisphereGrid::with_step(2.5).unwrap();
        assert_eq!(fine.thetas.len(), 36);
        assert_eq!(fine.phis.len(), 144);
        let total: f64 = (0..g.thetas.len()).map(|t| g.cell_solid_angle(t) * 36.0).sum();
        assert!(total > 0.0 && total <= 2.0 * core::f64::consts::PI + 1e-12);
    }

    #[test]
    fn rotation_conventions() {
        assert!(rotation_for(0.0, 0.0).max_abs_diff(&Mat3::IDENTITY) < 1e-15);
        let q = rotation_for(0.0, 90.0).mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert!((q - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        // The grid's view direction maps onto the camera axis.
        let g = HemisphereGrid::default();
        for (ti, pi) in [(3, 7), (8, 30), (0, 0)] {
            let d = g.view_direction(ti, pi);
            let r = rotation_for(g.thetas[ti], g.phis[pi]);
            assert!((r.mul_vec(d) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = rotation_for(rng.gen_range(-180.0..180.0), rng.gen_range(-360.0..360.0));
            assert!(r.transpose().mul(&r).max_abs_diff(&Mat3::IDENTITY) < 1e-12);
            assert!((r.det() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_disc_at_center() {
        let c = cloud(&[([0.0; 3], [1.0, 0.5, 0.25])]);
        let img = render_ortho(&c, &Mat3::IDENTITY, 200, 0.05).unwrap();
        // Radius 0.05 NDC = 5 px at 200 px.
        let n = img.covered_count();
        let area = core::f64::consts::PI * 25.0;
        assert!((n as f64 - area).abs() < 12.0, "covered {n}");
        let center = 100 * 200 + 100;
        assert!(img.covered[center]);
        assert_eq!(img.depth[center], 0.0);
        assert_eq!(img.pixels[center], [1.0, 0.5, 0.25]);
        for (i, &cov) in img.covered.iter().enumerate() {
            let (x, y) = img.pixel_center_ndc(i % 200, i / 200);
            if cov {
                assert!(x * x + y * y <= 0.05 * 0.05 + 1e-12);
            } else {
                assert_eq!(img.depth[i], f64::INFINITY);
                assert_eq!(img.pixels[i], [0.0; 3]);
            }
        }
    }

    #[test]
    fn z_buffer_keeps_point_nearest_camera() {
        let red = ([0.0, 0.0, 0.5], [1.0, 0.0, 0.0]);
        let blue = ([0.0, 0.0, -0.5], [0.0, 0.0, 1.0]);
        for pts in [[red, blue], [blue, red]] {
            let img = render_ortho(&cloud(&pts), &Mat3::IDENTITY, 64, 0.02).unwrap();
            let center = 32 * 64 + 32;
            assert_eq!(img.pixels[center], [1.0, 0.0, 0.0]);
            assert_eq!(img.depth[center], -0.5);
        }
    }

    #[test]
    fn tiny_splat_still_covers_its_pixel() {
        let c = cloud(&[([0.013, -0.021, 0.0], [1.0; 3])]);
        let img = render_ortho(&c, &Mat3::IDENTITY, 8, 1e-6).unwrap();
        assert_eq!(img.covered_count(), 1);
    }

    #[test]
    fn image_size_too_small() {
        let c = cloud(&[([0.0; 3], [1.0; 3])]);
        assert!(matches!(render_ortho(&c, &Mat3::IDENTITY, 7, 0.02), Err(Error::Config(_))));
    }

    #[test]
    fn coverage_stays_inside_unit_disc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<([f64; 3], Rgb)> =
            (0..3000).map(|_| ([rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)], [0.5; 3])).collect();
        let (c, _) = normalize_cloud(&cloud(&pts));
        let size = 64;
        let eps = 0.02;
        for (t, p) in [(0.0, 0.0), (40.0, 100.0), (80.0, 270.0)] {
            let img = render_ortho(&c, &rotation_for(t, p), size, eps).unwrap();
            let px = 2.0 / size as f64;
            for (i, &cov) in img.covered.iter().enumerate() {
                if cov {
                    let (x, y) = img.pixel_center_ndc(i % size, i / size);
                    assert!(libm::sqrt(x * x + y * y) <= 1.0 + eps + px);
                }
            }
        }
    }

    #[test]
    fn pld_value_cases() {
        let mut img = SplatImage::blank(8);
        assert_eq!(pld_value(&img), ([0.0; 3], 0.0));
        for i in 0..64 {
            img.covered[i] = true;
            img.pixels[i] = if i % 2 == 0 { [0.2; 3] } else { [0.8; 3] };
        }
        let (m, c) = pld_value(&img);
        assert!(m.iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert_eq!(c, 1.0);
        let mut half = SplatImage::blank(8);
        for i in 0..10 {
            half.covered[i] = true;
            half.pixels[i] = [0.5; 3];
        }
        assert_eq!(pld_value(&half), ([0.5; 3], 10.0 / 64.0));
    }

    #[test]
    fn luma_weights() {
        let g = HemisphereGrid::new(vec![0.0], vec![0.0, 90.0, 180.0]).unwrap();
        let map = PldMap::new(g, vec![[1.0; 3], [1.0, 0.0, 0.0], [0.5, 0.6, 0.7]], vec![1.0; 3]).unwrap();
        let l = pld_luma(&map);
        assert!((l[0] - 1.0).abs() < 1e-15);
        assert_eq!(l[1], 0.2126);
        assert!(luma([0.5, 0.7, 0.7]) > l[2]);
    }

    #[test]
    fn pld_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<([f64; 3], Rgb)> = (0..2000)
            .map(|_| {
                let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2)];
                (p, [rng.gen(), rng.gen(), rng.gen()])
            })
            .collect();
        let (c, _) = normalize_cloud(&cloud(&pts));
        let mut rev: Vec<usize> = (0..2000).collect();
        rev.reverse();
        let shuffled = c.select(&rev).unwrap();
        let g = HemisphereGrid::with_step(30.0).unwrap();
        let a = compute_pld(&c, &g, 64, 0.02).unwrap();
        let b = compute_pld(&shuffled, &g, 64, 0.02).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            for ch in 0..3 {
                assert!((x[ch] - y[ch]).abs() <= 1e-12);
            }
        }
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn rotate_phi_shifts_columns() {
        let g = HemisphereGrid::new(vec![0.0, 45.0], vec![0.0, 120.0, 240.0]).unwrap();
        let vals: Vec<Rgb> = (0..6).map(|i| [i as f64; 3]).collect();
        let m = PldMap::new(g, vals, vec![1.0; 6]).unwrap();
        let r = m.rotate_phi(1);
        assert_eq!(r.value(0, 1), m.value(0, 0));
        assert_eq!(r.value(1, 0), m.value(1, 2));
    }
}
