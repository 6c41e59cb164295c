//! Point cloud readers (KITTI velodyne `.bin`, ASCII XYZ, ASCII/binary PLY)
//! and the 4×4 transform text format.
//!
//! Parse failures report the byte offset of the offending token.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Point3};

use super::{PointCloud, RigidTransform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    KittiBin,
    Ply,
    Xyz,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "bin" => Some(CloudFormat::KittiBin),
            "ply" => Some(CloudFormat::Ply),
            "xyz" | "txt" | "pts" => Some(CloudFormat::Xyz),
            _ => None,
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti-bin" | "bin" => Ok(CloudFormat::KittiBin),
            "ply" => Ok(CloudFormat::Ply),
            "xyz" => Ok(CloudFormat::Xyz),
            other => Err(Error::InvalidInput(format!("unknown cloud format '{other}'"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: Option<CloudFormat>) -> Result<PointCloud> {
    let format = format
        .or_else(|| CloudFormat::from_path(path))
        .ok_or_else(|| Error::InvalidInput(format!("cannot infer format of {}", path.display())))?;
    let bytes = fs::read(path)?;
    match format {
        CloudFormat::KittiBin => read_kitti_bin(&bytes),
        CloudFormat::Ply => read_ply(&bytes),
        CloudFormat::Xyz => read_xyz(&bytes),
    }
}

/// Little-endian `f32` quadruples `x y z intensity`; intensity is dropped.
pub fn read_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::parse(
            bytes.len() - bytes.len() % 16,
            format!("trailing {} bytes do not form a full x,y,z,intensity record", bytes.len() % 16),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (rec, chunk) in bytes.chunks_exact(16).enumerate() {
        let mut xyz = [0f64; 3];
        for (a, v) in xyz.iter_mut().enumerate() {
            let f = f32::from_le_bytes(chunk[a * 4..a * 4 + 4].try_into().expect("4 bytes"));
            if !f.is_finite() {
                return Err(Error::parse(rec * 16 + a * 4, "non-finite coordinate"));
            }
            *v = f as f64;
        }
        points.push(Point3::from(xyz));
    }
    PointCloud::new(points)
}

pub fn write_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Whitespace-separated tokens with their starting byte offsets.
fn tokens_with_offsets(line: &str, base: usize) -> impl Iterator<Item = (usize, &str)> {
    let start = line.as_ptr() as usize;
    line.split_whitespace()
        .map(move |tok| (base + (tok.as_ptr() as usize - start), tok))
}

fn parse_f64(tok: &str, offset: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(offset, format!("expected a number, found '{tok}'")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(offset, format!("non-finite value '{tok}'")))
    }
}

/// One point per line, first three whitespace-separated columns are x y z.
/// Blank lines and `#` comments are skipped; extra columns are ignored.
pub fn read_xyz(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "invalid UTF-8"))?;
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let base = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        let toks: Vec<_> = tokens_with_offsets(body, base).take(3).collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::parse(base, "expected at least 3 columns (x y z)"));
        }
        let mut xyz = [0.0; 3];
        for (v, (off, tok)) in xyz.iter_mut().zip(&toks) {
            *v = parse_f64(tok, *off)?;
        }
        points.push(Point3::from(xyz));
    }
    PointCloud::new(points)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = b[..std::mem::size_of::<$t>()].try_into().expect("sized");
                (if big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => num!(i16),
            ScalarType::U16 => num!(u16),
            ScalarType::I32 => num!(i32),
            ScalarType::U32 => num!(u32),
            ScalarType::F32 => num!(f32),
            ScalarType::F64 => num!(f64),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar(String, ScalarType),
    List(ScalarType, ScalarType),
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

/// Vertex `x y z` from an ASCII or binary PLY file. Other elements and
/// properties are skipped.
pub fn read_ply(bytes: &[u8]) -> Result<PointCloud> {
    let (encoding, elements, body) = parse_ply_header(bytes)?;
    let mut points = Vec::new();
    match encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(&bytes[body..])
                .map_err(|e| Error::parse(body + e.valid_up_to(), "invalid UTF-8 in PLY body"))?;
            let mut toks = tokens_with_offsets(text, body);
            let mut next = |what: &str| {
                toks.next()
                    .ok_or_else(|| Error::parse(bytes.len(), format!("unexpected end of file reading {what}")))
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut xyz = [None; 3];
                    for prop in &el.properties {
                        match prop {
                            PlyProperty::Scalar(name, _) => {
                                let (off, tok) = next(name)?;
                                let v = parse_f64(tok, off)?;
                                if el.name == "vertex" {
                                    match name.as_str() {
                                        "x" => xyz[0] = Some(v),
                                        "y" => xyz[1] = Some(v),
                                        "z" => xyz[2] = Some(v),
                                        _ => {}
                                    }
                                }
                            }
                            PlyProperty::List(_, _) => {
                                let (off, tok) = next("list length")?;
                                let n: usize = tok
                                    .parse()
                                    .map_err(|_| Error::parse(off, format!("bad list length '{tok}'")))?;
                                for _ in 0..n {
                                    next("list item")?;
                                }
                            }
                        }
                    }
                    if el.name == "vertex" {
                        points.push(Point3::new(
                            xyz[0].unwrap_or(0.0),
                            xyz[1].unwrap_or(0.0),
                            xyz[2].unwrap_or(0.0),
                        ));
                    }
                }
            }
        }
        PlyEncoding::LittleEndian | PlyEncoding::BigEndian => {
            let big = encoding == PlyEncoding::BigEndian;
            let mut pos = body;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = bytes
                    .get(*pos..*pos + n)
                    .ok_or_else(|| Error::parse(*pos, "unexpected end of binary PLY body"))?;
                *pos += n;
                Ok(s)
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut xyz = [0.0; 3];
                    for prop in &el.properties {
                        match prop {
                            PlyProperty::Scalar(name, ty) => {
                                let at = pos;
                                let v = ty.decode(take(&mut pos, ty.size())?, big);
                                if el.name == "vertex" {
                                    let slot = match name.as_str() {
                                        "x" => Some(0),
                                        "y" => Some(1),
                                        "z" => Some(2),
                                        _ => None,
                                    };
                                    if let Some(a) = slot {
                                        if !v.is_finite() {
                                            return Err(Error::parse(at, "non-finite coordinate"));
                                        }
                                        xyz[a] = v;
                                    }
                                }
                            }
                            PlyProperty::List(len_ty, item_ty) => {
                                let n = len_ty.decode(take(&mut pos, len_ty.size())?, big) as usize;
                                take(&mut pos, n * item_ty.size())?;
                            }
                        }
                    }
                    if el.name == "vertex" {
                        points.push(Point3::from(xyz));
                    }
                }
            }
        }
    }
    PointCloud::new(points)
}

fn parse_ply_header(bytes: &[u8]) -> Result<(PlyEncoding, Vec<PlyElement>, usize)> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::parse(offset, "PLY header is not terminated by end_header"));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::parse(offset, "PLY header is not valid UTF-8"))?
            .trim_end_matches('\r');
        lines.push((offset, line));
        offset += nl + 1;
        if line.trim() == "end_header" {
            break;
        }
    }
    if lines.first().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(Error::parse(0, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for &(off, line) in &lines[1..] {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::LittleEndian,
                    "binary_big_endian" => PlyEncoding::BigEndian,
                    other => return Err(Error::parse(off, format!("unsupported PLY format '{other}'"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(off, format!("bad element count '{count}'")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", len_ty, item_ty, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(off, "property before any element"))?;
                let (Some(a), Some(b)) = (ScalarType::parse(len_ty), ScalarType::parse(item_ty)) else {
                    return Err(Error::parse(off, "unknown list property type"));
                };
                el.properties.push(PlyProperty::List(a, b));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(off, "property before any element"))?;
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::parse(off, format!("unknown property type '{ty}'")))?;
                el.properties.push(PlyProperty::Scalar(name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(Error::parse(off, format!("unrecognized PLY header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(0, "PLY header has no format line"))?;
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(0, "PLY file has no vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !vertex
            .properties
            .iter()
            .any(|p| matches!(p, PlyProperty::Scalar(n, _) if n == axis))
        {
            return Err(Error::parse(0, format!("vertex element lacks property '{axis}'")));
        }
    }
    Ok((encoding, elements, offset))
}

/// Binary little-endian PLY with float `x y z` vertices.
pub fn write_ply_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    for p in cloud.points() {
        for v in [p.x as f32, p.y as f32, p.z as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Four lines of four whitespace-separated numbers, row-major.
pub fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_homogeneous();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let values: Vec<(usize, &str)> = tokens_with_offsets(text, 0).collect();
    if values.len() != 16 {
        return Err(Error::parse(
            text.len(),
            format!("expected 16 numbers for a 4×4 transform, found {}", values.len()),
        ));
    }
    let mut m = Matrix4::zeros();
    for (k, (off, tok)) in values.iter().enumerate() {
        m[(k / 4, k % 4)] = parse_f64(tok, *off)?;
    }
    RigidTransform::from_homogeneous(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn kitti_roundtrip_and_truncation() {
        let cloud = PointCloud::new(vec![Point3::new(1.5, -2.0, 0.25), Point3::new(3.0, 4.0, 5.0)]).unwrap();
        let bytes = write_kitti_bin(&cloud);
        assert_eq!(read_kitti_bin(&bytes).unwrap(), cloud);
        match read_kitti_bin(&bytes[..20]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn xyz_reports_offset_of_bad_token() {
        let text = b"0 0 0\n1 2 3 # comment\n\n4 five 6\n";
        match read_xyz(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 25),
            other => panic!("{other:?}"),
        }
        let ok = read_xyz(b"0 0 0 9\n# header\n1 2 3\n").unwrap();
        assert_eq!(ok.len(), 2);
        assert!(read_xyz(b"1 2\n").is_err());
    }

    #[test]
    fn ply_ascii_with_faces_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0.5 7\n3 0 1 2\n";
        let c = read_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points()[2], Point3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn ply_binary_roundtrip() {
        let cloud = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-0.5, 0.25, 8.0)]).unwrap();
        let bytes = write_ply_binary(&cloud);
        assert_eq!(read_ply(&bytes).unwrap(), cloud);
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(read_ply(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn ply_big_endian_double() {
        let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        for v in [1.25f64, -2.0, 3.5] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(read_ply(&bytes).unwrap().points()[0], Point3::new(1.25, -2.0, 3.5));
    }

    #[test]
    fn transform_text_roundtrip() {
        let t = RigidTransform::from_axis_angle(Vector3::new(0.3, -1.0, 0.2), 0.7, Vector3::new(1.0, -2.0, 0.125));
        let text = format_transform(&t);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(parse_transform(&text).unwrap(), t);
        assert!(parse_transform("1 0 0 0\n0 1 0 0\n").is_err());
    }
}
