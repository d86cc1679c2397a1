//! Point cloud data model and normalization.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{clamp01, Rgb, Vec3};
use crate::scene::SunConfig;

/// Positions and colors of `N ≥ 1` points. Colors are clamped to `[0, 1]` on
/// construction; positions must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Vec<Rgb>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, mut colors: Vec<Rgb>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if positions.len() != colors.len() {
            return Err(Error::InvalidCloud(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidCloud(format!("position {i} is not finite")));
        }
        for c in colors.iter_mut() {
            for v in c.iter_mut() {
                // NaN maps to 0 so the invariant holds for any input.
                *v = if v.is_nan() { 0.0 } else { clamp01(*v) };
            }
        }
        Ok(Self { positions, colors })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    #[inline]
    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    /// Same positions, new colors.
    pub fn with_colors(&self, colors: Vec<Rgb>) -> Result<Self> {
        Self::new(self.positions.clone(), colors)
    }

    /// Points at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let colors = indices.iter().map(|&i| self.colors[i]).collect();
        Self::new(positions, colors)
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.positions.iter().fold(Vec3::ZERO, |acc, &p| acc + p);
        sum / self.len() as f64
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<Rgb>) {
        (self.positions, self.colors)
    }
}

/// `p ↦ (p − center)·scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub const IDENTITY: Self = Self { center: Vec3::ZERO, scale: 1.0 };

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    #[inline]
    pub fn invert(&self, q: Vec3) -> Vec3 {
        q / self.scale + self.center
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point sits
/// at radius 1. A cloud whose points all coincide keeps scale 1.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, NormalizationTransform) {
    let center = cloud.centroid();
    let radius = cloud.positions.iter().map(|&p| (p - center).norm()).fold(0.0, f64::max);
    let scale = if radius > 1e-300 { 1.0 / radius } else { 1.0 };
    let transform = NormalizationTransform { center, scale };
    let positions = cloud.positions.iter().map(|&p| transform.apply(p)).collect();
    (PointCloud { positions, colors: cloud.colors.clone() }, transform)
}

/// Ground-truth `(I, A, S)` for one scene under one sun. All arrays share
/// the point order of `cloud`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicTriplet {
    pub cloud: PointCloud,
    pub albedo: Vec<Rgb>,
    pub shade: Vec<Rgb>,
    pub sun: SunConfig,
}

impl IntrinsicTriplet {
    pub fn new(cloud: PointCloud, albedo: Vec<Rgb>, shade: Vec<Rgb>, sun: SunConfig) -> Result<Self> {
        let n = cloud.len();
        if albedo.len() != n || shade.len() != n {
            return Err(Error::InvalidCloud(format!(
                "triplet arrays disagree: cloud {n}, albedo {}, shade {}",
                albedo.len(),
                shade.len()
            )));
        }
        Ok(Self { cloud, albedo, shade, sun })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Largest per-channel `|I − A⊙S|` over all points.
    pub fn max_physical_residual(&self) -> f64 {
        self.cloud
            .colors()
            .iter()
            .zip(&self.albedo)
            .zip(&self.shade)
            .flat_map(|((i, a), s)| (0..3).map(move |c| (i[c] - a[c] * s[c]).abs()))
            .fold(0.0, f64::max)
    }

    /// Copy with positions mapped through `t`.
    pub fn normalized_with(&self, t: &NormalizationTransform) -> Self {
        let positions = self.cloud.positions().iter().map(|&p| t.apply(p)).collect();
        Self {
            cloud: PointCloud { positions, colors: self.cloud.colors.clone() },
            albedo: self.albedo.clone(),
            shade: self.shade.clone(),
            sun: self.sun.clone(),
        }
    }

    /// Subset of points, in index order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.cloud.select(indices)?,
            indices.iter().map(|&i| self.albedo[i]).collect(),
            indices.iter().map(|&i| self.shade[i]).collect(),
            self.sun.clone(),
        )
    }
}
