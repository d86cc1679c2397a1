//! Relighting and albedo editing on top of a decomposition.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{rgb_clamp01, rgb_mul, Rgb, Vec3};

/// `I′ = Â ⊙ S_new`, clamped to `[0, 1]`.
pub fn relight(albedo: &[Rgb], shade: &[Rgb]) -> Result<Vec<Rgb>> {
    if albedo.len() != shade.len() {
        return Err(Error::shape("relight", format!("{} albedo rows vs {} shade rows", albedo.len(), shade.len())));
    }
    Ok(albedo.iter().zip(shade).map(|(&a, &s)| rgb_clamp01(rgb_mul(a, s))).collect())
}

/// Points to edit.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Points inside the closed axis-aligned box.
    Box { min: Vec3, max: Vec3 },
    Indices(Vec<usize>),
}

impl Selection {
    /// Sorted, deduplicated indices of the selected points.
    pub fn resolve(&self, positions: &[Vec3]) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = match self {
            Selection::Box { min, max } => positions
                .iter()
                .enumerate()
                .filter(|(_, p)| (0..3).all(|a| p.axis(a) >= min.axis(a) && p.axis(a) <= max.axis(a)))
                .map(|(i, _)| i)
                .collect(),
            Selection::Indices(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= positions.len()) {
                    return Err(Error::Config(format!("selected index {bad} is out of range for {} points", positions.len())));
                }
                idx.clone()
            }
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("selection is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Edit {
    /// Replace the albedo.
    Set(Rgb),
    /// Rotate the hue by this many degrees, keeping saturation and value.
    HueShift(f64),
}

/// Edits the albedo of the selected points; all other rows are returned
/// unchanged bit for bit.
pub fn edit_texture(albedo: &[Rgb], positions: &[Vec3], selection: &Selection, edit: Edit) -> Result<Vec<Rgb>> {
    if albedo.len() != positions.len() {
        return Err(Error::shape("edit_texture", format!("{} albedo rows vs {} positions", albedo.len(), positions.len())));
    }
    let selected = selection.resolve(positions)?;
    let mut out = albedo.to_vec();
    for i in selected {
        out[i] = match edit {
            Edit::Set(c) => rgb_clamp01(c),
            Edit::HueShift(deg) => hue_shift(albedo[i], deg),
        };
    }
    Ok(out)
}

fn wrap_degrees(h: f64) -> f64 {
    let r = h % 360.0;
    if r < 0.0 {
        r + 360.0
    } else {
        r
    }
}

/// RGB → HSV with hue in degrees `[0, 360)`.
pub fn rgb_to_hsv(c: Rgb) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / d)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [wrap_degrees(h), s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> Rgb {
    let [h, s, v] = hsv;
    let h = wrap_degrees(h) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    rgb_clamp01([r + m, g + m, b + m])
}

pub fn hue_shift(c: Rgb, degrees: f64) -> Rgb {
    let [h, s, v] = rgb_to_hsv(c);
    hsv_to_rgb([h + degrees, s, v])
}
