//! Procedural outdoor scenes and ground-truth triplet generation.
//!
//! A scene is a ground plane with a few axis-aligned box buildings, some with
//! gabled roofs. Every surface (ground, one building's walls, its roof) gets a
//! single albedo drawn from a palette. Lighting is one directional sun plus a
//! constant ambient term; cast shadows come from BVH-accelerated shadow rays.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{IntrinsicTriplet, PointCloud};
use crate::error::{Error, Result};
use crate::math::{cos, deg, rad, rgb_clamp01, rgb_mul, sin, sqrt, Rgb, Vec3};

/// Offset applied to shadow-ray origins along the ray.
pub const SHADOW_BIAS: f64 = 1e-4;

const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeOfDay {
    Morning,
    Noon,
    Evening,
}

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 3] = [TimeOfDay::Morning, TimeOfDay::Noon, TimeOfDay::Evening];

    pub fn as_str(self) -> &'static str {
        match self {
            TimeOfDay::Morning => "morning",
            TimeOfDay::Noon => "noon",
            TimeOfDay::Evening => "evening",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "morning" => Ok(TimeOfDay::Morning),
            "noon" => Ok(TimeOfDay::Noon),
            "evening" => Ok(TimeOfDay::Evening),
            other => Err(Error::Config(format!(
                "unknown time of day '{other}'; valid labels are morning, noon, evening"
            ))),
        }
    }
}

/// Directional sun light. `direction` points from the sun toward the scene,
/// so its vertical (z) component is negative for a sun above the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SunConfig {
    pub direction: Vec3,
    pub color: Rgb,
    pub ambient: Rgb,
    pub label: String,
}

pub const DEFAULT_AMBIENT: Rgb = [0.25, 0.27, 0.32];

impl SunConfig {
    /// Sun at `elevation_deg` above the horizon and compass `azimuth_deg`
    /// (0° = +y, 90° = +x).
    pub fn from_angles(elevation_deg: f64, azimuth_deg: f64, color: Rgb, ambient: Rgb, label: &str) -> Result<Self> {
        if !(elevation_deg > 0.0 && elevation_deg <= 90.0) {
            return Err(Error::Config(format!("sun elevation must be in (0, 90] degrees, got {elevation_deg}")));
        }
        let (e, a) = (rad(elevation_deg), rad(azimuth_deg));
        let toward = Vec3::new(cos(e) * sin(a), cos(e) * cos(a), sin(e));
        Ok(Self { direction: -toward, color, ambient, label: label.to_string() })
    }

    /// Unit vector from the scene toward the sun.
    pub fn toward_sun(&self) -> Vec3 {
        -self.direction
    }

    pub fn elevation_deg(&self) -> f64 {
        deg(libm::asin((-self.direction.z).clamp(-1.0, 1.0)))
    }

    /// Compass azimuth in `[0, 360)`.
    pub fn azimuth_deg(&self) -> f64 {
        let t = self.toward_sun();
        let a = deg(libm::atan2(t.x, t.y));
        if a < 0.0 {
            a + 360.0
        } else {
            a
        }
    }
}

/// Preset suns: morning (15°, 90°), noon (60°, 180°), evening (12°, 270°).
pub fn sun_from_time(label: &str) -> Result<SunConfig> {
    sun_preset(TimeOfDay::parse(label)?)
}

pub fn sun_preset(time: TimeOfDay) -> Result<SunConfig> {
    let (elevation, azimuth, color) = match time {
        TimeOfDay::Morning => (15.0, 90.0, [1.00, 0.85, 0.65]),
        TimeOfDay::Noon => (60.0, 180.0, [1.0, 1.0, 1.0]),
        TimeOfDay::Evening => (12.0, 270.0, [1.00, 0.75, 0.55]),
    };
    SunConfig::from_angles(elevation, azimuth, color, DEFAULT_AMBIENT, time.as_str())
}

/// Parameters for procedural scene construction. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub building_count: (usize, usize),
    /// Side length range of building footprints, meters.
    pub footprint: (f64, f64),
    /// Wall height range, meters.
    pub height: (f64, f64),
    /// Side length of the square ground plane, meters.
    pub ground_extent: f64,
    /// Minimum clearance between footprints, meters.
    pub min_gap: f64,
    pub gable_probability: f64,
    pub palette: Vec<Rgb>,
}

pub fn default_palette() -> Vec<Rgb> {
    vec![
        [0.80, 0.78, 0.72],
        [0.66, 0.36, 0.28],
        [0.45, 0.50, 0.56],
        [0.86, 0.80, 0.62],
        [0.52, 0.58, 0.42],
        [0.38, 0.36, 0.35],
        [0.72, 0.72, 0.78],
        [0.60, 0.44, 0.30],
    ]
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            building_count: (1, 4),
            footprint: (4.0, 12.0),
            height: (4.0, 15.0),
            ground_extent: 40.0,
            min_gap: 1.0,
            gable_probability: 0.3,
            palette: default_palette(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.building_count.0 > self.building_count.1 {
            return bad("building_count range is empty");
        }
        if !(self.footprint.0 > 0.0 && self.footprint.0 <= self.footprint.1) {
            return bad("footprint range must be positive and non-empty");
        }
        if !(self.height.0 > 0.0 && self.height.0 <= self.height.1) {
            return bad("height range must be positive and non-empty");
        }
        if !(self.ground_extent > 0.0) || !self.ground_extent.is_finite() {
            return bad("ground_extent must be positive");
        }
        if !(self.min_gap >= 0.0) {
            return bad("min_gap must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gable_probability) {
            return bad("gable_probability must lie in [0, 1]");
        }
        if self.palette.is_empty() {
            return bad("palette is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Ground,
    Wall,
    Roof,
}

/// Axis-aligned building footprint `[min.x, max.x] × [min.y, max.y]` and wall height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub min: (f64, f64),
    pub max: (f64, f64),
    pub height: f64,
    pub gabled: bool,
}

impl Building {
    pub fn overlaps(&self, other: &Building, gap: f64) -> bool {
        self.min.0 < other.max.0 + gap
            && other.min.0 < self.max.0 + gap
            && self.min.1 < other.max.1 + gap
            && other.min.1 < self.max.1 + gap
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x > self.min.0 && x < self.max.0 && y > self.min.1 && y < self.max.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    fn grow(&mut self, p: Vec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.min(o.min), max: self.max.max(o.max) }
    }

    /// Slab test against a ray with precomputed reciprocal direction.
    #[inline]
    fn hit(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let lo = (self.min[a] - origin[a]) * inv_dir[a];
            let hi = (self.max[a] - origin[a]) * inv_dir[a];
            // NaN arises for a zero direction component on a slab boundary; treat as inside.
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, count: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

/// Bounding-volume hierarchy over scene triangles.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    /// Triangle indices, grouped by leaf.
    order: Vec<usize>,
}

const BVH_LEAF: usize = 4;

impl Bvh {
    fn build(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Bvh {
        let bounds: Vec<Aabb> = triangles
            .iter()
            .map(|t| {
                let mut b = Aabb::EMPTY;
                for &v in t {
                    b.grow(vertices[v as usize]);
                }
                b
            })
            .collect();
        let centroids: Vec<Vec3> = bounds.iter().map(|b| (b.min + b.max) * 0.5).collect();
        let mut bvh = Bvh { nodes: Vec::new(), order: (0..triangles.len()).collect() };
        if !triangles.is_empty() {
            bvh.build_node(&bounds, &centroids, 0, triangles.len());
        }
        bvh
    }

    fn build_node(&mut self, bounds: &[Aabb], centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut b = Aabb::EMPTY;
        let mut cb = Aabb::EMPTY;
        for &t in &self.order[start..end] {
            b = b.union(&bounds[t]);
            cb.grow(centroids[t]);
        }
        let id = self.nodes.len();
        if end - start <= BVH_LEAF {
            self.nodes.push(BvhNode::Leaf { bounds: b, start, count: end - start });
            return id;
        }
        let ext = cb.max - cb.min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &c| {
            centroids[a][axis].total_cmp(&centroids[c][axis]).then(a.cmp(&c))
        });
        self.nodes.push(BvhNode::Leaf { bounds: b, start: 0, count: 0 });
        let left = self.build_node(bounds, centroids, start, mid);
        let right = self.build_node(bounds, centroids, mid, end);
        self.nodes[id] = BvhNode::Inner { bounds: b, left, right };
        id
    }

    /// Number of triangles referenced by the leaves.
    pub fn triangle_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                BvhNode::Leaf { count, .. } => *count,
                BvhNode::Inner { .. } => 0,
            })
            .sum()
    }
}

/// Möller–Trumbore ray/triangle test; returns the hit distance.
#[inline]
fn intersect_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > 1e-9).then_some(t)
}

/// Triangle mesh of a generated scene with per-face albedo.
#[derive(Debug, Clone)]
pub struct TriMeshScene {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub face_albedo: Vec<Rgb>,
    pub face_normals: Vec<Vec3>,
    pub face_kind: Vec<SurfaceKind>,
    pub buildings: Vec<Building>,
    pub ground_extent: f64,
    bvh: Bvh,
}

impl TriMeshScene {
    fn from_parts(mesh: MeshBuilder, buildings: Vec<Building>, ground_extent: f64) -> Self {
        let bvh = Bvh::build(&mesh.vertices, &mesh.triangles);
        Self {
            vertices: mesh.vertices,
            triangles: mesh.triangles,
            face_albedo: mesh.albedo,
            face_normals: mesh.normals,
            face_kind: mesh.kind,
            buildings,
            ground_extent,
            bvh,
        }
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    /// Total area of the faces of one surface kind.
    pub fn area_of(&self, kind: SurfaceKind) -> f64 {
        (0..self.triangles.len()).filter(|&t| self.face_kind[t] == kind).map(|t| self.triangle_area(t)).sum()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// True iff the ray from `origin` (nudged by [`SHADOW_BIAS`]) toward the sun
    /// hits any triangle.
    pub fn raycast_occluded(&self, origin: Vec3, toward_sun: Vec3) -> bool {
        if self.bvh.nodes.is_empty() {
            return false;
        }
        let o = origin + toward_sun * SHADOW_BIAS;
        let inv = Vec3::new(1.0 / toward_sun.x, 1.0 / toward_sun.y, 1.0 / toward_sun.z);
        let mut stack: Vec<usize> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(id) = stack.pop() {
            match &self.bvh.nodes[id] {
                BvhNode::Leaf { bounds, start, count } => {
                    if !bounds.hit(o, inv, f64::INFINITY) {
                        continue;
                    }
                    for &t in &self.bvh.order[*start..*start + *count] {
                        let [a, b, c] = self.triangle(t);
                        if intersect_triangle(o, toward_sun, a, b, c).is_some() {
                            return true;
                        }
                    }
                }
                BvhNode::Inner { bounds, left, right } => {
                    if bounds.hit(o, inv, f64::INFINITY) {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
            }
        }
        false
    }
}

/// Lambertian shade with ambient: `clamp(ambient + v·max(0, n·l)·sun_color)`,
/// `v = 0` when the shadow ray is blocked.
pub fn shade_at(scene: &TriMeshScene, point: Vec3, normal: Vec3, sun: &SunConfig) -> Rgb {
    let l = sun.toward_sun();
    let ndotl = normal.dot(l).max(0.0);
    let direct = if ndotl > 0.0 && !scene.raycast_occluded(point, l) { ndotl } else { 0.0 };
    rgb_clamp01([
        sun.ambient[0] + direct * sun.color[0],
        sun.ambient[1] + direct * sun.color[1],
        sun.ambient[2] + direct * sun.color[2],
    ])
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    albedo: Vec<Rgb>,
    normals: Vec<Vec3>,
    kind: Vec<SurfaceKind>,
}

impl MeshBuilder {
    /// Adds a triangle wound so its geometric normal agrees with `outward`.
    fn tri(&mut self, a: Vec3, b: Vec3, c: Vec3, outward: Vec3, albedo: Rgb, kind: SurfaceKind) {
        let n = (b - a).cross(c - a);
        let (b, c) = if n.dot(outward) < 0.0 { (c, b) } else { (b, c) };
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&[a, b, c]);
        self.triangles.push([base, base + 1, base + 2]);
        self.albedo.push(albedo);
        self.normals.push(outward.normalized());
        self.kind.push(kind);
    }

    fn quad(&mut self, a: Vec3, b: Vec3, c: Vec3, d: Vec3, outward: Vec3, albedo: Rgb, kind: SurfaceKind) {
        self.tri(a, b, c, outward, albedo, kind);
        self.tri(a, c, d, outward, albedo, kind);
    }
}

fn add_ground(mesh: &mut MeshBuilder, extent: f64, buildings: &[Building], albedo: Rgb) {
    let h = extent * 0.5;
    let mut xs = vec![-h, h];
    let mut ys = vec![-h, h];
    for b in buildings {
        xs.extend_from_slice(&[b.min.0, b.max.0]);
        ys.extend_from_slice(&[b.min.1, b.max.1]);
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let up = Vec3::new(0.0, 0.0, 1.0);
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (cx, cy) = ((xw[0] + xw[1]) * 0.5, (yw[0] + yw[1]) * 0.5);
            if buildings.iter().any(|b| b.contains_xy(cx, cy)) {
                continue;
            }
            mesh.quad(
                Vec3::new(xw[0], yw[0], 0.0),
                Vec3::new(xw[1], yw[0], 0.0),
                Vec3::new(xw[1], yw[1], 0.0),
                Vec3::new(xw[0], yw[1], 0.0),
                up,
                albedo,
                SurfaceKind::Ground,
            );
        }
    }
}

fn add_building(mesh: &mut MeshBuilder, b: &Building, wall: Rgb, roof: Rgb) {
    let (x0, y0) = b.min;
    let (x1, y1) = b.max;
    let h = b.height;
    let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let wk = SurfaceKind::Wall;
    mesh.quad(p(x0, y0, 0.0), p(x1, y0, 0.0), p(x1, y0, h), p(x0, y0, h), Vec3::new(0.0, -1.0, 0.0), wall, wk);
    mesh.quad(p(x1, y0, 0.0), p(x1, y1, 0.0), p(x1, y1, h), p(x1, y0, h), Vec3::new(1.0, 0.0, 0.0), wall, wk);
    mesh.quad(p(x1, y1, 0.0), p(x0, y1, 0.0), p(x0, y1, h), p(x1, y1, h), Vec3::new(0.0, 1.0, 0.0), wall, wk);
    mesh.quad(p(x0, y1, 0.0), p(x0, y0, 0.0), p(x0, y0, h), p(x0, y1, h), Vec3::new(-1.0, 0.0, 0.0), wall, wk);
    if !b.gabled {
        mesh.quad(p(x0, y0, h), p(x1, y0, h), p(x1, y1, h), p(x0, y1, h), Vec3::new(0.0, 0.0, 1.0), roof, SurfaceKind::Roof);
        return;
    }
    // Ridge runs along the longer side at rise 0.3 × the shorter side.
    let (w, d) = (x1 - x0, y1 - y0);
    let rise = 0.3 * w.min(d);
    let top = h + rise;
    if w >= d {
        let ym = (y0 + y1) * 0.5;
        let south = (Vec3::new(0.0, -rise, d * 0.5)).normalized();
        let north = (Vec3::new(0.0, rise, d * 0.5)).normalized();
        mesh.quad(p(x0, y0, h), p(x1, y0, h), p(x1, ym, top), p(x0, ym, top), south, roof, SurfaceKind::Roof);
        mesh.quad(p(x0, y1, h), p(x1, y1, h), p(x1, ym, top), p(x0, ym, top), north, roof, SurfaceKind::Roof);
        mesh.tri(p(x0, y0, h), p(x0, y1, h), p(x0, ym, top), Vec3::new(-1.0, 0.0, 0.0), wall, wk);
        mesh.tri(p(x1, y0, h), p(x1, y1, h), p(x1, ym, top), Vec3::new(1.0, 0.0, 0.0), wall, wk);
    } else {
        let xm = (x0 + x1) * 0.5;
        let west = (Vec3::new(-rise, 0.0, w * 0.5)).normalized();
        let east = (Vec3::new(rise, 0.0, w * 0.5)).normalized();
        mesh.quad(p(x0, y0, h), p(x0, y1, h), p(xm, y1, top), p(xm, y0, top), west, roof, SurfaceKind::Roof);
        mesh.quad(p(x1, y0, h), p(x1, y1, h), p(xm, y1, top), p(xm, y0, top), east, roof, SurfaceKind::Roof);
        mesh.tri(p(x0, y0, h), p(x1, y0, h), p(xm, y0, top), Vec3::new(0.0, -1.0, 0.0), wall, wk);
        mesh.tri(p(x0, y1, h), p(x1, y1, h), p(xm, y1, top), Vec3::new(0.0, 1.0, 0.0), wall, wk);
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Builds a ground plane plus non-overlapping box buildings. Deterministic in
/// `spec.seed`.
pub fn build_scene(spec: &SceneSpec) -> Result<TriMeshScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(spec.building_count.0..=spec.building_count.1);
    let half = spec.ground_extent * 0.5;
    let mut buildings: Vec<Building> = Vec::with_capacity(count);
    for index in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = uniform(&mut rng, spec.footprint);
            let d = uniform(&mut rng, spec.footprint);
            let height = uniform(&mut rng, spec.height);
            let gabled = rng.gen_bool(spec.gable_probability);
            let (mx, my) = (half - w * 0.5 - spec.min_gap, half - d * 0.5 - spec.min_gap);
            if mx <= 0.0 || my <= 0.0 {
                continue;
            }
            let cx = rng.gen_range(-mx..mx);
            let cy = rng.gen_range(-my..my);
            let cand = Building {
                min: (cx - w * 0.5, cy - d * 0.5),
                max: (cx + w * 0.5, cy + d * 0.5),
                height,
                gabled,
            };
            if buildings.iter().all(|b| !b.overlaps(&cand, spec.min_gap)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => buildings.push(b),
            None => return Err(Error::Placement { index, attempts: PLACEMENT_ATTEMPTS }),
        }
    }

    let palette = &spec.palette;
    let pick = |rng: &mut ChaCha8Rng| palette[rng.gen_range(0..palette.len())];
    let mut mesh = MeshBuilder::default();
    let ground = pick(&mut rng);
    add_ground(&mut mesh, spec.ground_extent, &buildings, ground);
    for b in &buildings {
        let wall = pick(&mut rng);
        let roof = pick(&mut rng);
        add_building(&mut mesh, b, wall, roof);
    }
    Ok(TriMeshScene::from_parts(mesh, buildings, spec.ground_extent))
}

/// A point drawn on the scene surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub face: usize,
}

/// Area-weighted uniform samples on the scene surface, deterministic in `seed`.
pub fn sample_surface(scene: &TriMeshScene, n_points: usize, seed: u64) -> Vec<SurfaceSample> {
    let mut cdf = Vec::with_capacity(scene.triangles.len());
    let mut acc = 0.0;
    for t in 0..scene.triangles.len() {
        acc += scene.triangle_area(t);
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_points)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = scene.triangle(face);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = sqrt(r1);
            let position = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            SurfaceSample { position, face }
        })
        .collect()
}

/// Samples `n_points` on the surface and lights them: `A` is the face albedo,
/// `S` the shade from [`shade_at`], `I = A ⊙ S`. Point positions depend only
/// on `(scene, n_points, seed)`, so triplets of one scene under different
/// suns share their points.
pub fn sample_triplet(scene: &TriMeshScene, sun: &SunConfig, n_points: usize, seed: u64) -> Result<IntrinsicTriplet> {
    if n_points == 0 {
        return Err(Error::Config("n_points must be at least 1".to_string()));
    }
    let samples = sample_surface(scene, n_points, seed);
    let mut positions = Vec::with_capacity(n_points);
    let mut albedo = Vec::with_capacity(n_points);
    let mut shade = Vec::with_capacity(n_points);
    let mut colors = Vec::with_capacity(n_points);
    for s in &samples {
        let a = scene.face_albedo[s.face];
        let sh = shade_at(scene, s.position, scene.face_normals[s.face], sun);
        positions.push(s.position);
        albedo.push(a);
        shade.push(sh);
        colors.push(rgb_mul(a, sh));
    }
    IntrinsicTriplet::new(PointCloud::new(positions, colors)?, albedo, shade, sun.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_box_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            building_count: (1, 1),
            gable_probability: 0.0,
            ..SceneSpec::default()
        }
    }

    /// Independent all-triangle oracle: plane intersection then an
    /// edge-function inside test.
    fn brute_occluded(scene: &TriMeshScene, origin: Vec3, dir: Vec3) -> bool {
        let o = origin + dir * SHADOW_BIAS;
        (0..scene.triangles.len()).any(|t| {
            let [a, b, c] = scene.triangle(t);
            let n = (b - a).cross(c - a);
            let denom = n.dot(dir);
            if denom.abs() < 1e-14 {
                return false;
            }
            let tt = n.dot(a - o) / denom;
            if tt <= 1e-9 {
                return false;
            }
            let p = o + dir * tt;
            let e0 = (b - a).cross(p - a).dot(n);
            let e1 = (c - b).cross(p - b).dot(n);
            let e2 = (a - c).cross(p - c).dot(n);
            e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
        })
    }

    #[test]
    fn zero_buildings_is_ground_quad() {
        let spec = SceneSpec { building_count: (0, 0), ..SceneSpec::default() };
        let scene = build_scene(&spec).unwrap();
        assert_eq!(scene.triangles.len(), 2);
        assert!((scene.total_area() - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
        let a = build_scene(&spec).unwrap();
        let b = build_scene(&spec).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.face_albedo, b.face_albedo);
    }

    #[test]
    fn three_buildings_disjoint_footprints() {
        for seed in 0..20 {
            let spec = SceneSpec { seed, building_count: (3, 3), ..SceneSpec::default() };
            let scene = build_scene(&spec).unwrap();
            assert_eq!(scene.buildings.len(), 3);
            for i in 0..3 {
                for j in i + 1..3 {
                    let (a, b) = (scene.buildings[i], scene.buildings[j]);
                    let disjoint = a.max.0 <= b.min.0 || b.max.0 <= a.min.0 || a.max.1 <= b.min.1 || b.max.1 <= a.min.1;
                    assert!(disjoint, "seed {seed}: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = SceneSpec {
            building_count: (30, 30),
            footprint: (12.0, 12.0),
            ..SceneSpec::default()
        };
        assert!(matches!(build_scene(&spec), Err(Error::Placement { .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SceneSpec::default();
        s.palette.clear();
        assert!(build_scene(&s).is_err());
        let s = SceneSpec { height: (5.0, 1.0), ..SceneSpec::default() };
        assert!(build_scene(&s).is_err());
    }

    #[test]
    fn mesh_invariants_hold() {
        for seed in 0..10 {
            let spec = SceneSpec { seed, gable_probability: 0.5, ..SceneSpec::default() };
            let scene = build_scene(&spec).unwrap();
            assert_eq!(scene.bvh().triangle_count(), scene.triangles.len());
            for t in 0..scene.triangles.len() {
                assert!(scene.triangle_area(t) > 1e-12);
                let n = scene.face_normals[t];
                assert!((n.norm() - 1.0).abs() < 1e-6);
                let [a, b, c] = scene.triangle(t);
                let g = (b - a).cross(c - a).normalized();
                assert!((g - n).norm() < 1e-9, "winding disagrees with normal on face {t}");
            }
        }
    }

    #[test]
    fn presets() {
        let noon = sun_from_time("noon").unwrap();
        assert!((noon.elevation_deg() - 60.0).abs() < 1e-9);
        assert_eq!(noon.color, [1.0, 1.0, 1.0]);
        let m = sun_from_time("morning").unwrap();
        let e = sun_from_time("evening").unwrap();
        assert!(((e.azimuth_deg() - m.azimuth_deg()) - 180.0).abs() < 1e-9);
        for t in TimeOfDay::ALL {
            let s = sun_preset(t).unwrap();
            assert!(s.direction.z < 0.0);
            assert!((s.direction.norm() - 1.0).abs() < 1e-12);
            assert_eq!(s.ambient, DEFAULT_AMBIENT);
        }
        let err = sun_from_time("dusk").unwrap_err();
        assert!(alloc::format!("{err}").contains("morning, noon, evening"));
    }

    #[test]
    fn open_ground_unoccluded() {
        let scene = build_scene(&SceneSpec { building_count: (0, 0), ..SceneSpec::default() }).unwrap();
        assert!(!scene.raycast_occluded(Vec3::new(1.0, 2.0, 0.0), Vec3::new(0.0, 0.0, 1.0)));
    }

    #[test]
    fn north_of_box_with_low_southern_sun_is_shadowed() {
        let scene = build_scene(&one_box_spec(5)).unwrap();
        let b = scene.buildings[0];
        let x = (b.min.0 + b.max.0) * 0.5;
        let p = Vec3::new(x, b.max.1 + 0.5, 0.0);
        let sun = SunConfig::from_angles(10.0, 180.0, [1.0; 3], DEFAULT_AMBIENT, "low").unwrap();
        assert!(scene.raycast_occluded(p, sun.toward_sun()));
        assert!(brute_occluded(&scene, p, sun.toward_sun()));
        // Roof-top origin with any upward sun sees the sky.
        let roof = Vec3::new(x, (b.min.1 + b.max.1) * 0.5, b.height);
        for az in [0.0, 77.0, 180.0, 300.0] {
            let s = SunConfig::from_angles(20.0, az, [1.0; 3], DEFAULT_AMBIENT, "x").unwrap();
            assert!(!scene.raycast_occluded(roof, s.toward_sun()));
            assert!(!brute_occluded(&scene, roof, s.toward_sun()));
        }
    }

    #[test]
    fn bvh_agrees_with_brute_force_on_random_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rays = 0;
        let mut hits = 0;
        for seed in 0..5 {
            let spec = SceneSpec { seed, building_count: (2, 4), gable_probability: 0.5, ..SceneSpec::default() };
            let scene = build_scene(&spec).unwrap();
            let samples = sample_surface(&scene, 2000, seed + 100);
            for s in samples {
                let e: f64 = rng.gen_range(1.0..89.0);
                let a: f64 = rng.gen_range(0.0..360.0);
                let (e, a) = (rad(e), rad(a));
                let dir = Vec3::new(cos(e) * sin(a), cos(e) * cos(a), sin(e));
                let fast = scene.raycast_occluded(s.position, dir);
                let slow = brute_occluded(&scene, s.position, dir);
                assert_eq!(fast, slow, "ray from {:?} toward {:?}", s.position, dir);
                rays += 1;
                hits += fast as usize;
            }
        }
        assert!(rays >= 10_000);
        assert!(hits > 100 && hits < rays - 100);
    }

    #[test]
    fn shade_cases() {
        let scene = build_scene(&SceneSpec { building_count: (0, 0), ..SceneSpec::default() }).unwrap();
        let overhead = SunConfig {
            direction: Vec3::new(0.0, 0.0, -1.0),
            color: [1.0; 3],
            ambient: [0.2; 3],
            label: "overhead".into(),
        };
        let up = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(shade_at(&scene, Vec3::ZERO, up, &overhead), [1.0, 1.0, 1.0]);
        let side = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(shade_at(&scene, Vec3::ZERO, side, &overhead), [0.2, 0.2, 0.2]);
        // Occluded: point under a box roof.
        let boxed = build_scene(&one_box_spec(1)).unwrap();
        let b = boxed.buildings[0];
        let under = Vec3::new((b.min.0 + b.max.0) * 0.5, (b.min.1 + b.max.1) * 0.5, 0.5 * b.height);
        assert_eq!(shade_at(&boxed, under, up, &overhead), [0.2, 0.2, 0.2]);
    }

    #[test]
    fn triplets_satisfy_physical_identity() {
        let scene = build_scene(&SceneSpec { seed: 3, ..SceneSpec::default() }).unwrap();
        for t in TimeOfDay::ALL {
            let tri = sample_triplet(&scene, &sun_preset(t).unwrap(), 5000, 11).unwrap();
            assert!(tri.max_physical_residual() <= 1e-6);
        }
        let one = sample_triplet(&scene, &sun_preset(TimeOfDay::Noon).unwrap(), 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(sample_triplet(&scene, &sun_preset(TimeOfDay::Noon).unwrap(), 0, 0).is_err());
    }

    #[test]
    fn triplets_deterministic_and_share_points_across_suns() {
        let scene = build_scene(&SceneSpec { seed: 8, ..SceneSpec::default() }).unwrap();
        let noon = sun_preset(TimeOfDay::Noon).unwrap();
        let a = sample_triplet(&scene, &noon, 3000, 5).unwrap();
        let b = sample_triplet(&scene, &noon, 3000, 5).unwrap();
        assert_eq!(a, b);
        let m = sample_triplet(&scene, &sun_preset(TimeOfDay::Morning).unwrap(), 3000, 5).unwrap();
        assert_eq!(a.cloud.positions(), m.cloud.positions());
        assert_eq!(a.albedo, m.albedo);
    }

    #[test]
    fn ground_fraction_within_binomial_bound() {
        let scene = build_scene(&SceneSpec { seed: 4, building_count: (3, 3), ..SceneSpec::default() }).unwrap();
        let ground_area: f64 = scene.ground_extent * scene.ground_extent
            - scene.buildings.iter().map(|b| (b.max.0 - b.min.0) * (b.max.1 - b.min.1)).sum::<f64>();
        let p = ground_area / scene.total_area();
        let n = 20_000usize;
        let samples = sample_surface(&scene, n, 1);
        let k = samples.iter().filter(|s| scene.face_kind[s.face] == SurfaceKind::Ground).count();
        let sigma = sqrt(n as f64 * p * (1.0 - p));
        assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sigma, "k={k} expected {}", n as f64 * p);
        assert!((scene.area_of(SurfaceKind::Ground) - ground_area).abs() < 1e-9);
    }

    #[test]
    fn noon_box_shadow_rectangle() {
        let scene = build_scene(&one_box_spec(2)).unwrap();
        let b = scene.buildings[0];
        let noon = sun_preset(TimeOfDay::Noon).unwrap();
        // Sun due south: the flat-roofed box shadows [x0,x1] × [y1, y1 + h/tan(e)].
        let reach = b.height / libm::tan(rad(60.0));
        let tri = sample_triplet(&scene, &noon, 40_000, 9).unwrap();
        let spacing = sqrt(scene.total_area() / 40_000.0);
        let mut inside = 0;
        let mut outside = 0;
        for (i, p) in tri.cloud.positions().iter().enumerate() {
            if p.z.abs() > 1e-9 {
                continue;
            }
            let s = tri.shade[i];
            let margin_in = p.x > b.min.0 + spacing && p.x < b.max.0 - spacing && p.y > b.max.1 + spacing && p.y < b.max.1 + reach - spacing;
            let margin_out = p.x < b.min.0 - spacing || p.x > b.max.0 + spacing || p.y < b.max.1 - spacing || p.y > b.max.1 + reach + spacing;
            if margin_in {
                assert_eq!(s, noon.ambient);
                inside += 1;
            } else if margin_out && !b.contains_xy(p.x, p.y) {
                assert!(s.iter().zip(noon.ambient).all(|(a, b)| *a > b));
                outside += 1;
            }
        }
        assert!(inside > 50 && outside > 1000);
    }
}
