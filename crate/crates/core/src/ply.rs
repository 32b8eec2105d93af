//! PLY point-cloud reader and writer (ASCII and binary little-endian).
//!
//! Only the `vertex` element is materialized. Other elements (faces, custom
//! records) are parsed and skipped so files exported by mesh tools load too.
//! Positions are written as `double` so binary round trips are bit-exact.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let mut lines = Vec::new();
    loop {
        let rest = &data[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(offset as u64, "header is not terminated by end_header"))?;
        let raw = &rest[..end];
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse(offset as u64, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        lines.push((offset, line.to_string()));
        offset += end + 1;
        if line == "end_header" {
            break;
        }
    }

    if lines.first().map(|(_, l)| l.as_str()) != Some("ply") {
        return Err(Error::parse(0, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for (at, line) in &lines[1..] {
        let at = *at as u64;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(Error::parse(at, format!("unsupported format '{other}'"))),
                    None => return Err(Error::parse(at, "format line without a format")),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::parse(at, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(at, "element count is not a nonnegative integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at, "property before any element"))?;
                let first = tok.next().ok_or_else(|| Error::parse(at, "property without a type"))?;
                if first == "list" {
                    let count = tok.next().and_then(ScalarType::parse);
                    let item = tok.next().and_then(ScalarType::parse);
                    match (count, item, tok.next()) {
                        (Some(count), Some(item), Some(_)) if !count.is_float() => {
                            el.properties.push(Property::List { count, item })
                        }
                        _ => return Err(Error::parse(at, "unsupported list property")),
                    }
                } else {
                    let ty = ScalarType::parse(first)
                        .ok_or_else(|| Error::parse(at, format!("unsupported property type '{first}'")))?;
                    let name = tok.next().ok_or_else(|| Error::parse(at, "property without a name"))?;
                    el.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some("comment") | Some("obj_info") | Some("end_header") | None => {}
            Some(other) => return Err(Error::parse(at, format!("unknown header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(0, "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

/// Column indices of the vertex attributes we understand.
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
    color: Option<([usize; 3], bool)>,
}

impl VertexLayout {
    fn from_element(el: &Element) -> Result<Self> {
        let find = |n: &str| {
            el.properties.iter().position(|p| match p {
                Property::Scalar { name, .. } => name == n,
                _ => false,
            })
        };
        let xyz = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => [x, y, z],
            _ => return Err(Error::parse(0, "vertex element lacks x, y, z properties")),
        };
        let normal = match (find("nx"), find("ny"), find("nz")) {
            (Some(x), Some(y), Some(z)) => Some([x, y, z]),
            _ => None,
        };
        let color = match (find("red"), find("green"), find("blue")) {
            (Some(r), Some(g), Some(b)) => {
                let float = matches!(el.properties[r], Property::Scalar { ty, .. } if ty.is_float());
                Some(([r, g, b], float))
            }
            _ => None,
        };
        Ok(Self { xyz, normal, color })
    }
}

#[derive(Default)]
struct VertexSink {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
}

impl VertexSink {
    fn push(&mut self, layout: &VertexLayout, row: &[f64]) {
        let [x, y, z] = layout.xyz;
        self.points.push(Vec3::new(row[x], row[y], row[z]));
        if let Some([a, b, c]) = layout.normal {
            self.normals.push(Vec3::new(row[a], row[b], row[c]));
        }
        if let Some(([r, g, b], float)) = layout.color {
            let conv = |v: f64| {
                let v = if float { v * 255.0 } else { v };
                v.round().clamp(0.0, 255.0) as u8
            };
            self.colors.push([conv(row[r]), conv(row[g]), conv(row[b])]);
        }
    }

    fn finish(self, layout: Option<&VertexLayout>) -> Result<PointCloud> {
        let Some(layout) = layout else {
            return Ok(PointCloud::empty());
        };
        let normals = if layout.normal.is_some() {
            let mut ok = true;
            let n: Vec<Vec3> = self
                .normals
                .into_iter()
                .map(|v| {
                    let len = v.norm();
                    if len > 1e-12 && len.is_finite() {
                        v / len
                    } else {
                        ok = false;
                        v
                    }
                })
                .collect();
            if ok {
                Some(n)
            } else {
                log::warn!("PLY normals contain zero vectors; dropping normals");
                None
            }
        } else {
            None
        };
        let colors = layout.color.map(|_| self.colors);
        PointCloud::with_attributes(self.points, normals, colors)
    }
}

/// Parses a PLY file held in memory.
pub fn parse_ply(data: &[u8]) -> Result<PointCloud> {
    let header = parse_header(data)?;
    match header.format {
        PlyFormat::Ascii => parse_ascii_body(data, &header),
        PlyFormat::BinaryLittleEndian => parse_binary_body(data, &header),
    }
}

fn parse_ascii_body(data: &[u8], header: &Header) -> Result<PointCloud> {
    let mut offset = header.body_offset;
    let mut sink = VertexSink::default();
    let mut vertex_layout = None;
    let mut row = Vec::new();
    for el in &header.elements {
        let layout = if el.name == "vertex" {
            Some(VertexLayout::from_element(el)?)
        } else {
            None
        };
        for _ in 0..el.count {
            // Skip blank lines between records.
            let (line_start, line) = loop {
                if offset >= data.len() {
                    return Err(Error::parse(
                        offset as u64,
                        format!("unexpected end of file in element '{}'", el.name),
                    ));
                }
                let rest = &data[offset..];
                let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
                let start = offset;
                offset += (end + 1).min(rest.len());
                let text = std::str::from_utf8(&rest[..end])
                    .map_err(|_| Error::parse(start as u64, "body is not valid UTF-8"))?;
                if !text.trim().is_empty() {
                    break (start, text);
                }
            };
            let mut tokens = line.split_whitespace();
            let mut next = |what: &str| -> Result<f64> {
                tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_start as u64, format!("missing {what}")))?
                    .parse::<f64>()
                    .map_err(|_| Error::parse(line_start as u64, format!("malformed {what}")))
            };
            row.clear();
            for prop in &el.properties {
                match prop {
                    Property::Scalar { .. } => row.push(next("scalar value")?),
                    Property::List { .. } => {
                        let n = next("list count")?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(Error::parse(line_start as u64, "invalid list count"));
                        }
                        for _ in 0..n as usize {
                            next("list item")?;
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            if let Some(layout) = &layout {
                sink.push(layout, &row);
            }
        }
        if layout.is_some() {
            vertex_layout = layout;
        }
    }
    sink.finish(vertex_layout.as_ref())
}

fn parse_binary_body(data: &[u8], header: &Header) -> Result<PointCloud> {
    let mut offset = header.body_offset;
    let mut sink = VertexSink::default();
    let mut vertex_layout = None;
    let mut row = Vec::new();
    let truncated = |at: usize, el: &str| Error::parse(at as u64, format!("truncated body in element '{el}'"));
    for el in &header.elements {
        let layout = if el.name == "vertex" {
            Some(VertexLayout::from_element(el)?)
        } else {
            None
        };
        for _ in 0..el.count {
            row.clear();
            for prop in &el.properties {
                match *prop {
                    Property::Scalar { ty, .. } => {
                        let sz = ty.size();
                        let bytes = data
                            .get(offset..offset + sz)
                            .ok_or_else(|| truncated(offset, &el.name))?;
                        row.push(ty.read_le(bytes));
                        offset += sz;
                    }
                    Property::List { count, item } => {
                        let sz = count.size();
                        let bytes = data
                            .get(offset..offset + sz)
                            .ok_or_else(|| truncated(offset, &el.name))?;
                        let n = count.read_le(bytes);
                        if n < 0.0 {
                            return Err(Error::parse(offset as u64, "negative list count"));
                        }
                        offset += sz + n as usize * item.size();
                        if offset > data.len() {
                            return Err(truncated(data.len(), &el.name));
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            if let Some(layout) = &layout {
                sink.push(layout, &row);
            }
        }
        if layout.is_some() {
            vertex_layout = layout;
        }
    }
    sink.finish(vertex_layout.as_ref())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&data)
}

/// Serializes a cloud to PLY bytes.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + cloud.len() * 24);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if cloud.normals().is_some() {
        out.extend_from_slice(b"property double nx\nproperty double ny\nproperty double nz\n");
    }
    if cloud.colors().is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");

    for i in 0..cloud.len() {
        let p = cloud.points()[i];
        let n = cloud.normals().map(|n| n[i]);
        let c = cloud.colors().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
                if let Some(n) = n {
                    let _ = write!(out, " {} {} {}", n.x, n.y, n.z);
                }
                if let Some(c) = c {
                    let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(n) = n {
                    for v in n.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                if let Some(c) = c {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    out
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_ply(cloud, format))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_three_point_ascii() {
        let src = b"ply\nformat ascii 1.0\ncomment tiny\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1.5 -2\n";
        let cloud = parse_ply(src).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.points()[2], Vec3::new(0.0, 1.5, -2.0));
    }

    #[test]
    fn empty_vertex_element() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(parse_ply(src).unwrap().is_empty());
    }

    #[test]
    fn skips_face_elements_and_reads_colors() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n3 0 1 2\n";
        let cloud = parse_ply(src).unwrap();
        assert_eq!(cloud.colors().unwrap()[1], [0, 255, 0]);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 4]).unwrap();
        let bytes = encode_ply(&cloud, PlyFormat::BinaryLittleEndian);
        let cut = &bytes[..bytes.len() - 5];
        match parse_ply(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize >= cut.len() - 24),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(matches!(parse_ply(b"plx\nend_header\n"), Err(Error::Parse { .. })));
        let unterminated = b"ply\nformat ascii 1.0\nelement vertex 1\n";
        assert!(matches!(parse_ply(unterminated), Err(Error::Parse { .. })));
        let bad_type = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n";
        assert!(matches!(parse_ply(bad_type), Err(Error::Parse { offset: 38, .. })));
        let big_endian = b"ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(parse_ply(big_endian).is_err());
    }

    #[test]
    fn ascii_round_trip_with_attributes() {
        let cloud = PointCloud::with_attributes(
            vec![Vec3::new(0.1, -2.5e-7, 1e5), Vec3::new(3.0, 4.0, 5.0)],
            Some(vec![Vec3::z(), Vec3::new(0.6, 0.8, 0.0)]),
            Some(vec![[1, 2, 3], [250, 251, 252]]),
        )
        .unwrap();
        let back = parse_ply(&encode_ply(&cloud, PlyFormat::Ascii)).unwrap();
        assert_eq!(back, cloud);
    }
}
