//! PLY reader and writer for labeled point clouds.
//!
//! Only the `vertex` element is interpreted: `x`, `y`, `z` positions, optional
//! `red`/`green`/`blue` colors and an optional integer `instance_id`. Elements
//! declared after `vertex` are ignored; elements declared before it are
//! skipped (list properties included).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Location;
use crate::scene_io::{InstanceLabeling, PointCloud, Scene};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
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
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the first data byte.
    data_start: usize,
    /// Line number (1-based) of the first data line.
    data_line: usize,
}

/// Column positions of the recognised vertex properties.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    instance: Option<usize>,
    types: Vec<Scalar>,
}

fn header_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: Location::Line(line),
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();

    loop {
        let Some(rel_end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(header_error(line_no + 1, "missing end_header"));
        };
        let raw = &bytes[offset..offset + rel_end];
        offset += rel_end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| header_error(line_no, "header is not valid text"))?
            .trim_end_matches('\r')
            .trim();

        if line_no == 1 {
            if line != "ply" {
                return Err(header_error(1, "missing 'ply' magic"));
            }
            continue;
        }

        let mut words = line.split_whitespace();
        match words.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                encoding = Some(match (words.next(), words.next()) {
                    (Some("ascii"), Some("1.0")) => PlyEncoding::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyEncoding::BinaryLittleEndian,
                    (Some(other), _) => {
                        return Err(header_error(
                            line_no,
                            format!("unsupported encoding '{other}'"),
                        ))
                    }
                    _ => return Err(header_error(line_no, "malformed format line")),
                });
            }
            Some("element") => {
                let name = words
                    .next()
                    .ok_or_else(|| header_error(line_no, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_error(line_no, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_error(line_no, "property before any element"))?;
                let ty = words
                    .next()
                    .ok_or_else(|| header_error(line_no, "property without type"))?;
                let property = if ty == "list" {
                    let count = words.next().and_then(Scalar::parse);
                    let item = words.next().and_then(Scalar::parse);
                    match (count, item, words.next()) {
                        (Some(count), Some(item), Some(_)) if !count.is_float() => {
                            Property::List { count, item }
                        }
                        _ => return Err(header_error(line_no, "malformed list property")),
                    }
                } else {
                    let ty = Scalar::parse(ty)
                        .ok_or_else(|| header_error(line_no, format!("unknown type '{ty}'")))?;
                    let name = words
                        .next()
                        .ok_or_else(|| header_error(line_no, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                element.properties.push(property);
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(header_error(
                    line_no,
                    format!("unexpected header keyword '{other}'"),
                ))
            }
        }
    }

    let encoding = encoding.ok_or_else(|| header_error(line_no, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        data_start: offset,
        data_line: line_no + 1,
    })
}

fn vertex_layout(element: &Element, line: usize) -> Result<VertexLayout> {
    let mut types = Vec::new();
    let find = |name: &str| {
        element
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
    };
    for property in &element.properties {
        match property {
            Property::Scalar { ty, .. } => types.push(*ty),
            Property::List { .. } => {
                return Err(header_error(
                    line,
                    "list properties on vertex are not supported",
                ))
            }
        }
    }
    let axis = |name: &str| {
        find(name).ok_or_else(|| header_error(line, format!("vertex has no '{name}' property")))
    };
    let xyz = [axis("x")?, axis("y")?, axis("z")?];
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(header_error(line, "incomplete red/green/blue properties")),
    };
    let instance = find("instance_id");
    if let Some(col) = instance {
        if types[col].is_float() {
            return Err(header_error(
                line,
                "instance_id must be an integer property",
            ));
        }
    }
    Ok(VertexLayout {
        xyz,
        rgb,
        instance,
        types,
    })
}

struct VertexSink {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f32; 3]>>,
    ids: Option<Vec<u32>>,
}

impl VertexSink {
    fn new(layout: &VertexLayout, count: usize) -> Self {
        Self {
            positions: Vec::with_capacity(count),
            colors: layout.rgb.map(|_| Vec::with_capacity(count)),
            ids: layout.instance.map(|_| Vec::with_capacity(count)),
        }
    }

    fn push(&mut self, layout: &VertexLayout, values: &[f64], location: Location) -> Result<()> {
        let err = |message: String| Error::Parse {
            location: location.clone(),
            message,
        };
        let position = layout.xyz.map(|col| values[col]);
        if position.iter().any(|c| !c.is_finite()) {
            return Err(err(format!(
                "non-finite coordinate in vertex {}",
                self.positions.len()
            )));
        }
        self.positions.push(position);
        if let (Some(cols), Some(colors)) = (layout.rgb, self.colors.as_mut()) {
            let mut color = [0.0f32; 3];
            for (c, col) in color.iter_mut().zip(cols) {
                let v = values[col];
                *c = if layout.types[col] == Scalar::U8 {
                    (v / 255.0) as f32
                } else if layout.types[col].is_float() && (0.0..=1.0).contains(&v) {
                    v as f32
                } else {
                    return Err(err(format!("color value {v} out of range")));
                };
            }
            colors.push(color);
        }
        if let (Some(col), Some(ids)) = (layout.instance, self.ids.as_mut()) {
            let v = values[col];
            if v < 0.0 || v > u32::MAX as f64 {
                return Err(err(format!("instance_id {v} out of range")));
            }
            ids.push(v as u32);
        }
        Ok(())
    }
}

/// Parses a PLY document held in memory.
pub fn read_ply(bytes: &[u8], scene_id: &str) -> Result<Scene> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_error(header.data_line - 1, "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    let layout = vertex_layout(vertex, header.data_line - 1)?;
    let mut sink = VertexSink::new(&layout, vertex.count);

    match header.encoding {
        PlyEncoding::Ascii => read_ascii(bytes, &header, vertex_pos, &layout, &mut sink)?,
        PlyEncoding::BinaryLittleEndian => {
            read_binary(bytes, &header, vertex_pos, &layout, &mut sink)?
        }
    }

    if sink.positions.is_empty() {
        return Err(header_error(
            header.data_line - 1,
            "vertex element is empty",
        ));
    }
    let cloud = PointCloud::new(sink.positions, sink.colors)?;
    let labels = sink.ids.map(InstanceLabeling::new);
    Scene::new(scene_id, cloud, labels)
}

fn read_ascii(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
    sink: &mut VertexSink,
) -> Result<()> {
    let text = std::str::from_utf8(&bytes[header.data_start..]).map_err(|e| Error::Parse {
        location: Location::Byte((header.data_start + e.valid_up_to()) as u64),
        message: "ASCII body is not valid text".into(),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header.data_line + i, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    for (e_idx, element) in header.elements.iter().enumerate().take(vertex_pos + 1) {
        for k in 0..element.count {
            let Some((line_no, line)) = lines.next() else {
                return Err(header_error(
                    header.data_line + text.lines().count(),
                    format!(
                        "expected {} '{}' entries, found {k}",
                        element.count, element.name
                    ),
                ));
            };
            if e_idx != vertex_pos {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| header_error(line_no, "non-numeric vertex value"))?;
            if values.len() != layout.types.len() {
                return Err(header_error(
                    line_no,
                    format!(
                        "vertex has {} values, header declares {}",
                        values.len(),
                        layout.types.len()
                    ),
                ));
            }
            sink.push(layout, &values, Location::Line(line_no))?;
        }
    }
    Ok(())
}

fn read_binary(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
    sink: &mut VertexSink,
) -> Result<()> {
    let mut offset = header.data_start;
    let truncated = |offset: usize, element: &Element, k: usize| Error::Parse {
        location: Location::Byte(offset as u64),
        message: format!(
            "truncated data: expected {} '{}' entries, found {k}",
            element.count, element.name
        ),
    };
    let mut values = vec![0.0; layout.types.len()];

    for (e_idx, element) in header.elements.iter().enumerate().take(vertex_pos + 1) {
        for k in 0..element.count {
            let entry_start = offset;
            for (p_idx, property) in element.properties.iter().enumerate() {
                match property {
                    Property::Scalar { ty, .. } => {
                        let end = offset + ty.size();
                        if end > bytes.len() {
                            return Err(truncated(offset, element, k));
                        }
                        if e_idx == vertex_pos {
                            values[p_idx] = ty.read_le(&bytes[offset..end]);
                        }
                        offset = end;
                    }
                    Property::List { count, item } => {
                        let end = offset + count.size();
                        if end > bytes.len() {
                            return Err(truncated(offset, element, k));
                        }
                        let n = count.read_le(&bytes[offset..end]);
                        if n < 0.0 {
                            return Err(Error::Parse {
                                location: Location::Byte(offset as u64),
                                message: "negative list length".into(),
                            });
                        }
                        offset = end + n as usize * item.size();
                        if offset > bytes.len() {
                            return Err(truncated(end, element, k));
                        }
                    }
                }
            }
            if e_idx == vertex_pos {
                sink.push(layout, &values, Location::Byte(entry_start as u64))?;
            }
        }
    }
    Ok(())
}

/// Loads a PLY file; the scene id is the file stem.
pub fn load_ply(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path)?;
    let scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_ply(&bytes, &scene_id)
}

/// Writes positions as doubles, colors as 8-bit channels and labels as `int
/// instance_id`.
pub fn write_ply<W: Write>(scene: &Scene, encoding: PlyEncoding, out: &mut W) -> Result<()> {
    let cloud = &scene.cloud;
    writeln!(out, "ply")?;
    match encoding {
        PlyEncoding::Ascii => writeln!(out, "format ascii 1.0")?,
        PlyEncoding::BinaryLittleEndian => writeln!(out, "format binary_little_endian 1.0")?,
    }
    writeln!(out, "comment scene {}", scene.scene_id)?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}")?;
    }
    if cloud.has_color() {
        for channel in ["red", "green", "blue"] {
            writeln!(out, "property uchar {channel}")?;
        }
    }
    if scene.labels.is_some() {
        writeln!(out, "property int instance_id")?;
    }
    writeln!(out, "end_header")?;

    let to_u8 = |c: f32| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let rgb = cloud.colors().map(|c| c[i].map(to_u8));
        let id = scene.labels.as_ref().map(|l| l.ids()[i]);
        match encoding {
            PlyEncoding::Ascii => {
                // `{:?}` prints the shortest representation that parses back exactly.
                write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2])?;
                if let Some([r, g, b]) = rgb {
                    write!(out, " {r} {g} {b}")?;
                }
                if let Some(id) = id {
                    write!(out, " {id}")?;
                }
                writeln!(out)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for c in p {
                    out.write_all(&c.to_le_bytes())?;
                }
                if let Some(rgb) = rgb {
                    out.write_all(&rgb)?;
                }
                if let Some(id) = id {
                    let id = i32::try_from(id)
                        .map_err(|_| Error::arg(format!("instance id {id} exceeds int32")))?;
                    out.write_all(&id.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_ply(scene: &Scene, path: &Path, encoding: PlyEncoding) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_ply(scene, encoding, &mut out)?;
    out.flush()?;
    Ok(())
}
