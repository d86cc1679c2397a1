//! PLY reader and writer for colored point clouds.
//!
//! Reads ASCII and binary little-endian files with any element layout; only
//! the `vertex` element is kept. Colors may be integer (scaled by the type
//! maximum) or floating point in `[0, 1]`. Extra per-point RGB channels are
//! stored as float property triples `<name>_r`, `<name>_g`, `<name>_b`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ipcd_core::{PointCloud, Rgb, Vec3};

use crate::error::{IpcdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLe,
}

/// Storage type of the `red`, `green`, `blue` properties on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorStorage {
    Uchar,
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub encoding: Encoding,
    pub colors: ColorStorage,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self { encoding: Encoding::BinaryLe, colors: ColorStorage::Float }
    }
}

/// A loaded vertex element: the cloud plus any extra RGB channels by name.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub extras: BTreeMap<String, Vec<Rgb>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    /// Divisor that maps the type's range onto `[0, 1]` for colors.
    fn color_scale(self) -> f64 {
        match self {
            Self::U8 => 255.0,
            Self::U16 => 65535.0,
            Self::I8 => 127.0,
            Self::I16 => 32767.0,
            Self::I32 => 2147483647.0,
            Self::U32 => 4294967295.0,
            Self::F32 | Self::F64 => 1.0,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |m: String| IpcdError::format(path, m);
    let mut offset = 0;
    let mut next_line = || -> Option<String> {
        if offset >= bytes.len() {
            return None;
        }
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| offset + p);
        let line = String::from_utf8_lossy(&bytes[offset..end]).trim_end_matches('\r').to_string();
        offset = (end + 1).min(bytes.len());
        Some(line)
    };
    if next_line().as_deref().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file (missing `ply` magic)".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next_line().ok_or_else(|| bad("header has no `end_header`".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLe,
                    other => return Err(bad(format!("unsupported PLY encoding `{other}`"))),
                });
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| bad(format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before any element".into()))?;
                let count = Scalar::parse(count).ok_or_else(|| bad(format!("unknown type `{count}`")))?;
                let item = Scalar::parse(item).ok_or_else(|| bad(format!("unknown type `{item}`")))?;
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before any element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type `{ty}`")))?;
                el.properties.push(Property::Scalar { name: name.to_string(), ty });
            }
            ["end_header"] => break,
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| bad("header has no `format` line".into()))?;
    Ok(Header { encoding, elements, body_offset: offset })
}

/// Reads the vertex element into row-major values, one row per vertex and
/// one column per scalar property (list properties are skipped).
fn read_vertices(bytes: &[u8], header: &Header, path: &Path) -> Result<(Vec<(String, Scalar)>, Vec<f64>, usize)> {
    let bad = |m: String| IpcdError::format(path, m);
    let mut columns = Vec::new();
    let mut values = Vec::new();
    let mut vertex_count = None;
    let body = &bytes[header.body_offset..];
    match header.encoding {
        Encoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("ASCII body is not valid UTF-8".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for el in &header.elements {
                let is_vertex = el.name == "vertex" && vertex_count.is_none();
                if is_vertex {
                    columns = scalar_columns(el);
                    values.reserve(el.count * columns.len());
                    vertex_count = Some(el.count);
                }
                for row in 0..el.count {
                    let line = lines.next().ok_or_else(|| bad(format!("element `{}` ends after {row} of {} rows", el.name, el.count)))?;
                    if !is_vertex {
                        continue;
                    }
                    let mut tokens = line.split_whitespace();
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { name, ty } => {
                                let tok = tokens.next().ok_or_else(|| bad(format!("vertex {row} is missing `{name}`")))?;
                                let v = if *ty == Scalar::F32 { tok.parse::<f32>().map(f64::from) } else { tok.parse::<f64>() };
                                values.push(v.map_err(|_| bad(format!("vertex {row}: bad value `{tok}` for `{name}`")))?);
                            }
                            Property::List { .. } => {
                                let n: usize = tokens
                                    .next()
                                    .and_then(|t| t.parse().ok())
                                    .ok_or_else(|| bad(format!("vertex {row}: bad list length")))?;
                                for _ in 0..n {
                                    tokens.next();
                                }
                            }
                        }
                    }
                }
            }
        }
        Encoding::BinaryLe => {
            let mut pos = 0usize;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = body.get(*pos..*pos + n).ok_or_else(|| bad("binary body ends early".into()))?;
                *pos += n;
                Ok(s)
            };
            for el in &header.elements {
                let is_vertex = el.name == "vertex" && vertex_count.is_none();
                if is_vertex {
                    columns = scalar_columns(el);
                    values.reserve(el.count * columns.len());
                    vertex_count = Some(el.count);
                }
                for _ in 0..el.count {
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { ty, .. } => {
                                let v = ty.read_le(take(&mut pos, ty.size())?);
                                if is_vertex {
                                    values.push(v);
                                }
                            }
                            Property::List { count, item } => {
                                let n = count.read_le(take(&mut pos, count.size())?);
                                if !(n >= 0.0) {
                                    return Err(bad(format!("negative list length in element `{}`", el.name)));
                                }
                                take(&mut pos, n as usize * item.size())?;
                            }
                        }
                    }
                }
            }
        }
    }
    let n = vertex_count.ok_or_else(|| bad("file has no `vertex` element".into()))?;
    Ok((columns, values, n))
}

fn scalar_columns(el: &Element) -> Vec<(String, Scalar)> {
    el.properties
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, ty } => Some((name.clone(), *ty)),
            Property::List { .. } => None,
        })
        .collect()
}

/// Parses an in-memory PLY file; `path` only labels errors.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PlyData> {
    let header = parse_header(bytes, path)?;
    let (columns, values, n) = read_vertices(bytes, &header, path)?;
    let find = |name: &str| -> Result<(usize, Scalar)> {
        columns
            .iter()
            .position(|(c, _)| c == name)
            .map(|i| (i, columns[i].1))
            .ok_or_else(|| IpcdError::format(path, format!("vertex element has no `{name}` property")))
    };
    let (ix, iy, iz) = (find("x")?.0, find("y")?.0, find("z")?.0);
    let (ir, tr) = find("red")?;
    let (ig, tg) = find("green")?;
    let (ib, tb) = find("blue")?;
    if n == 0 {
        return Err(ipcd_core::Error::EmptyCloud.into());
    }
    let w = columns.len();
    let row = |i: usize| &values[i * w..(i + 1) * w];
    let positions = (0..n).map(|i| Vec3::new(row(i)[ix], row(i)[iy], row(i)[iz])).collect();
    let colors =
        (0..n).map(|i| [row(i)[ir] / tr.color_scale(), row(i)[ig] / tg.color_scale(), row(i)[ib] / tb.color_scale()]).collect();
    let cloud = PointCloud::new(positions, colors).map_err(|e| IpcdError::format(path, e.to_string()))?;

    let mut extras = BTreeMap::new();
    for (name, _) in &columns {
        let Some(base) = name.strip_suffix("_r") else { continue };
        let (Ok((cr, _)), Ok((cg, _)), Ok((cb, _))) = (find(name), find(&format!("{base}_g")), find(&format!("{base}_b"))) else {
            continue;
        };
        extras.insert(base.to_string(), (0..n).map(|i| [row(i)[cr], row(i)[cg], row(i)[cb]]).collect());
    }
    Ok(PlyData { cloud, extras })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IpcdError::io(path, e))?;
    parse_ply(&bytes, path)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    Ok(read_ply(path)?.cloud)
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes `cloud` plus extra channels to PLY bytes.
pub fn encode_ply(cloud: &PointCloud, options: WriteOptions, extras: &[(&str, &[Rgb])]) -> std::result::Result<Vec<u8>, String> {
    let n = cloud.len();
    for (name, data) in extras {
        if data.len() != n {
            return Err(format!("extra channel `{name}` has {} rows for {n} points", data.len()));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(format!("invalid extra channel name `{name}`"));
        }
    }
    let mut out = Vec::new();
    let format = match options.encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLe => "binary_little_endian",
    };
    let color_ty = match options.colors {
        ColorStorage::Uchar => "uchar",
        ColorStorage::Float => "float",
    };
    let mut header = format!("ply\nformat {format} 1.0\ncomment written by ipcd\nelement vertex {n}\n");
    for axis in ["x", "y", "z"] {
        header.push_str(&format!("property float {axis}\n"));
    }
    for ch in ["red", "green", "blue"] {
        header.push_str(&format!("property {color_ty} {ch}\n"));
    }
    for (name, _) in extras {
        for suffix in ["r", "g", "b"] {
            header.push_str(&format!("property float {name}_{suffix}\n"));
        }
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    for i in 0..n {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i];
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        match options.encoding {
            Encoding::Ascii => {
                let mut line = format!("{} {} {}", xyz[0], xyz[1], xyz[2]);
                for v in c {
                    match options.colors {
                        ColorStorage::Uchar => line.push_str(&format!(" {}", quantize(v))),
                        ColorStorage::Float => line.push_str(&format!(" {}", v as f32)),
                    }
                }
                for (_, data) in extras {
                    for v in data[i] {
                        line.push_str(&format!(" {}", v as f32));
                    }
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            Encoding::BinaryLe => {
                for v in xyz {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in c {
                    match options.colors {
                        ColorStorage::Uchar => out.push(quantize(v)),
                        ColorStorage::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    }
                }
                for (_, data) in extras {
                    for v in data[i] {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes `cloud` with optional named RGB channels stored as float triples.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>, options: WriteOptions, extras: &[(&str, &[Rgb])]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(cloud, options, extras).map_err(|m| IpcdError::format(path, m))?;
    let mut f = fs::File::create(path).map_err(|e| IpcdError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| IpcdError::io(path, e))
}
