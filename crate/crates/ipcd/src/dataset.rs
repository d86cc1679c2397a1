//! On-disk dataset of generated triplets.
//!
//! ```text
//! <root>/split.toml                  asset lists, times, generation seed
//! <root>/<asset>/<time>/input.ply    observed colors I
//! <root>/<asset>/<time>/albedo.ply   ground-truth A as colors
//! <root>/<asset>/<time>/shade.ply    ground-truth S as colors
//! <root>/<asset>/<time>/meta.toml    sun and seeds
//! <root>/<asset>/<time>/pld.csv      PLD of the normalized input
//! ```
//!
//! All times of one asset share their point positions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ipcd_core::cloud::normalize_cloud;
use ipcd_core::projection::{compute_pld, PldMap};
use ipcd_core::scene::{build_scene, sample_triplet, sun_from_time, SunConfig};
use ipcd_core::{IntrinsicTriplet, PointCloud, Vec3};

use crate::config::{GenSection, PldSection};
use crate::error::{IpcdError, Result};
use crate::formats::{read_pld_csv, write_pld_csv};
use crate::ply::{read_ply, save_ply, ColorStorage, Encoding, WriteOptions};

pub const SPLIT_FILE: &str = "split.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub points: usize,
    pub times: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(IpcdError::Usage(format!("unknown split `{other}`; expected train, test or all"))),
        }
    }
}

impl DatasetIndex {
    pub fn assets(&self, split: Split) -> Vec<String> {
        match split {
            Split::Train => self.train.clone(),
            Split::Test => self.test.clone(),
            Split::All => self.train.iter().chain(&self.test).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SunMeta {
    label: String,
    direction: [f64; 3],
    color: [f64; 3],
    ambient: [f64; 3],
    elevation_deg: f64,
    azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    asset: String,
    time: String,
    scene_seed: u64,
    sample_seed: u64,
    points: usize,
    sun: SunMeta,
}

/// One generated `(asset, time)` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub asset: String,
    pub time: String,
    pub triplet: IntrinsicTriplet,
    pub pld: Option<PldMap>,
}

pub fn asset_name(index: usize) -> String {
    format!("asset_{index:02}")
}

/// SplitMix64 finalizer, used to derive independent per-asset seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `(scene seed, sampling seed)` of an asset, kept below 2⁶³ so they fit a
/// TOML integer.
pub fn asset_seeds(gen_seed: u64, asset: usize) -> (u64, u64) {
    let base = mix(gen_seed ^ mix(asset as u64));
    (base >> 1, mix(base) >> 1)
}

/// Generates every time of one asset in memory.
pub fn generate_asset(gen: &GenSection, asset: usize) -> Result<Vec<(String, IntrinsicTriplet)>> {
    let (scene_seed, sample_seed) = asset_seeds(gen.seed, asset);
    let scene = build_scene(&gen.scene_spec(scene_seed))?;
    gen.times
        .iter()
        .map(|t| {
            let sun = sun_from_time(t).map_err(|e| IpcdError::Config(e.to_string()))?;
            Ok((t.clone(), sample_triplet(&scene, &sun, gen.points, sample_seed)?))
        })
        .collect()
}

/// PLD of the normalized cloud under the configured grid and renderer.
pub fn pld_for(cloud: &PointCloud, pld: &PldSection) -> Result<PldMap> {
    let (norm, _) = normalize_cloud(cloud);
    Ok(compute_pld(&norm, &pld.grid()?, pld.image_size, pld.point_size)?)
}

fn sample_dir(root: &Path, asset: &str, time: &str) -> PathBuf {
    root.join(asset).join(time)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| IpcdError::io(path, e))
}

fn float_ply() -> WriteOptions {
    WriteOptions { encoding: Encoding::BinaryLe, colors: ColorStorage::Float }
}

/// Writes one triplet, its metadata and PLD into `dir`.
pub fn write_sample(dir: &Path, asset: &str, time: &str, triplet: &IntrinsicTriplet, pld: &PldMap, seeds: (u64, u64)) -> Result<()> {
    create_dir(dir)?;
    let c = &triplet.cloud;
    save_ply(c, dir.join("input.ply"), float_ply(), &[])?;
    save_ply(&c.with_colors(triplet.albedo.clone())?, dir.join("albedo.ply"), float_ply(), &[])?;
    save_ply(&c.with_colors(triplet.shade.clone())?, dir.join("shade.ply"), float_ply(), &[])?;
    let sun = &triplet.sun;
    let d = sun.direction;
    let meta = Meta {
        asset: asset.into(),
        time: time.into(),
        scene_seed: seeds.0,
        sample_seed: seeds.1,
        points: c.len(),
        sun: SunMeta {
            label: sun.label.clone(),
            direction: [d.x, d.y, d.z],
            color: sun.color,
            ambient: sun.ambient,
            elevation_deg: sun.elevation_deg(),
            azimuth_deg: sun.azimuth_deg(),
        },
    };
    let path = dir.join("meta.toml");
    fs::write(&path, toml::to_string(&meta).expect("metadata serializes")).map_err(|e| IpcdError::io(&path, e))?;
    write_pld_csv(dir.join("pld.csv"), pld)
}

/// Generates the whole dataset under `root`. `progress` receives one line
/// per finished asset.
pub fn generate(root: &Path, gen: &GenSection, pld: &PldSection, progress: &mut dyn FnMut(&str)) -> Result<DatasetIndex> {
    gen.validate()?;
    create_dir(root)?;
    let names: Vec<String> = (0..gen.assets).map(asset_name).collect();
    for (a, name) in names.iter().enumerate() {
        let seeds = asset_seeds(gen.seed, a);
        for (time, triplet) in generate_asset(gen, a)? {
            let map = pld_for(&triplet.cloud, pld)?;
            write_sample(&sample_dir(root, name, &time), name, &time, &triplet, &map, seeds)?;
        }
        progress(&format!("{name}: {} times × {} points", gen.times.len(), gen.points));
    }
    let split = gen.assets - gen.test_assets;
    let index = DatasetIndex {
        seed: gen.seed,
        points: gen.points,
        times: gen.times.clone(),
        train: names[..split].to_vec(),
        test: names[split..].to_vec(),
    };
    let path = root.join(SPLIT_FILE);
    fs::write(&path, toml::to_string(&index).expect("index serializes")).map_err(|e| IpcdError::io(&path, e))?;
    Ok(index)
}

pub fn open_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join(SPLIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IpcdError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| IpcdError::format(&path, e.to_string()))
}

fn check_same_points(path: &Path, a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a != b {
        return Err(IpcdError::format(path, "positions differ from input.ply".to_string()));
    }
    Ok(())
}

pub fn load_sample(root: &Path, asset: &str, time: &str, with_pld: bool) -> Result<Sample> {
    let dir = sample_dir(root, asset, time);
    let input = read_ply(dir.join("input.ply"))?.cloud;
    let albedo = read_ply(dir.join("albedo.ply"))?.cloud;
    let shade = read_ply(dir.join("shade.ply"))?.cloud;
    check_same_points(&dir.join("albedo.ply"), input.positions(), albedo.positions())?;
    check_same_points(&dir.join("shade.ply"), input.positions(), shade.positions())?;
    let meta_path = dir.join("meta.toml");
    let text = fs::read_to_string(&meta_path).map_err(|e| IpcdError::io(&meta_path, e))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| IpcdError::format(&meta_path, e.to_string()))?;
    let [x, y, z] = meta.sun.direction;
    let sun = SunConfig { direction: Vec3::new(x, y, z), color: meta.sun.color, ambient: meta.sun.ambient, label: meta.sun.label };
    let triplet = IntrinsicTriplet::new(input, albedo.colors().to_vec(), shade.colors().to_vec(), sun)?;
    let pld = if with_pld { Some(read_pld_csv(dir.join("pld.csv"))?) } else { None };
    Ok(Sample { asset: asset.into(), time: time.into(), triplet, pld })
}

/// Every `(asset, time)` of the split, asset-major.
pub fn load_split(root: &Path, split: Split, with_pld: bool) -> Result<Vec<Sample>> {
    let index = open_index(root)?;
    let mut out = Vec::new();
    for asset in index.assets(split) {
        for time in &index.times {
            out.push(load_sample(root, &asset, time, with_pld)?);
        }
    }
    Ok(out)
}
