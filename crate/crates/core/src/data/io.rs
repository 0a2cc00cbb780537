//! PLY (ascii and binary little-endian) and whitespace XYZ point files.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// PLY body encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Reads a `.ply` or `.xyz` file.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match extension(path).as_deref() {
        Some("ply") => {
            let bytes = std::fs::read(path)?;
            parse_ply(&bytes, path)
        }
        Some("xyz") => {
            let text = std::fs::read(path)?;
            let text = String::from_utf8(text)
                .map_err(|e| parse_err(path, format!("byte {}", e.utf8_error().valid_up_to()), "invalid UTF-8"))?;
            parse_xyz(&text, path)
        }
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Writes `.ply` (binary little-endian) or `.xyz` depending on the extension.
pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    match extension(path).as_deref() {
        Some("ply") => write_ply(cloud, path, PlyEncoding::default()),
        Some("xyz") => {
            let mut out = String::with_capacity(cloud.len() * 32);
            for p in cloud {
                out.push_str(&format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32));
            }
            std::fs::write(path, out)?;
            Ok(())
        }
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

pub fn write_ply(cloud: &PointCloud, path: &Path, encoding: PlyEncoding) -> Result<()> {
    let mut out = Vec::with_capacity(128 + cloud.len() * 12);
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    for p in cloud {
        let v = [p.x as f32, p.y as f32, p.z as f32];
        match encoding {
            PlyEncoding::Ascii => writeln!(out, "{} {} {}", v[0], v[1], v[2])?,
            PlyEncoding::BinaryLittleEndian => {
                for c in v {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Header {
    ascii: bool,
    vertices: usize,
    props: Vec<(String, Scalar)>,
    body_start: usize,
    body_line: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.is_empty() {
        return Err(parse_err(path, "byte 0".into(), "empty file"));
    }
    let mut at = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut vertices = None;
    let mut in_vertex = false;
    let mut props = Vec::new();
    loop {
        let Some(len) = bytes[at..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(path, format!("line {}", line_no + 1), "header is not terminated by end_header"));
        };
        line_no += 1;
        let line = std::str::from_utf8(&bytes[at..at + len])
            .map_err(|_| parse_err(path, format!("line {line_no}"), "header is not UTF-8"))?
            .trim_end_matches('\r');
        at += len + 1;
        let loc = || format!("line {line_no}");
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(path, loc(), "missing 'ply' magic"));
            }
            continue;
        }
        match words.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => return Err(parse_err(path, loc(), format!("unsupported format '{other}'"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if vertices.is_some() {
                    // later elements are not read
                    in_vertex = false;
                    continue;
                }
                if *name != "vertex" {
                    return Err(parse_err(path, loc(), "vertex element must come first"));
                }
                vertices = Some(count.parse::<usize>().map_err(|_| parse_err(path, loc(), "bad vertex count"))?);
                in_vertex = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, loc(), "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| parse_err(path, loc(), format!("unknown type '{ty}'")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_err(path, loc(), format!("unexpected header line '{line}'"))),
        }
    }
    let ascii = format.ok_or_else(|| parse_err(path, format!("line {line_no}"), "missing format line"))?;
    let vertices = vertices.ok_or_else(|| parse_err(path, format!("line {line_no}"), "missing vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !props.iter().any(|(n, _)| n == axis) {
            return Err(parse_err(path, format!("line {line_no}"), format!("missing vertex property '{axis}'")));
        }
    }
    Ok(Header {
        ascii,
        vertices,
        props,
        body_start: at,
        body_line: line_no + 1,
    })
}

fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let h = parse_header(bytes, path)?;
    let col = |axis: &str| h.props.iter().position(|(n, _)| n == axis).expect("checked in header");
    let (ix, iy, iz) = (col("x"), col("y"), col("z"));
    let mut points = Vec::with_capacity(h.vertices);
    if h.ascii {
        let body = std::str::from_utf8(&bytes[h.body_start..])
            .map_err(|_| parse_err(path, format!("line {}", h.body_line), "body is not UTF-8"))?;
        let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for v in 0..h.vertices {
            let Some((k, line)) = lines.next() else {
                return Err(parse_err(
                    path,
                    format!("line {}", h.body_line + body.lines().count()),
                    format!("expected {} vertices, found {v}", h.vertices),
                ));
            };
            let loc = || format!("line {}", h.body_line + k);
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|w| w.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(path, loc(), "non-numeric vertex value"))?;
            if vals.len() < h.props.len() {
                return Err(parse_err(path, loc(), format!("expected {} values", h.props.len())));
            }
            // a `float` property holds single precision whatever digits the text carries
            let coord = |i: usize| match h.props[i].1 {
                Scalar::F32 => vals[i] as f32 as f64,
                _ => vals[i],
            };
            points.push(Point3::new(coord(ix), coord(iy), coord(iz)));
        }
    } else {
        let stride: usize = h.props.iter().map(|(_, s)| s.size()).sum();
        let offsets: Vec<usize> = h
            .props
            .iter()
            .scan(0, |acc, (_, s)| {
                let o = *acc;
                *acc += s.size();
                Some(o)
            })
            .collect();
        let need = h.vertices * stride;
        let body = &bytes[h.body_start..];
        if body.len() < need {
            return Err(parse_err(
                path,
                format!("byte {}", bytes.len()),
                format!("binary body holds {} bytes, need {need}", body.len()),
            ));
        }
        for rec in body[..need].chunks_exact(stride) {
            let get = |i: usize| h.props[i].1.read_le(&rec[offsets[i]..]);
            points.push(Point3::new(get(ix), get(iy), get(iz)));
        }
    }
    PointCloud::new(points).map_err(|e| parse_err(path, "body".into(), e.to_string()))
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let loc = || format!("line {}", k + 1);
        let vals: Vec<f64> = t
            .split_whitespace()
            .take(3)
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, loc(), "non-numeric coordinate"))?;
        if vals.len() < 3 {
            return Err(parse_err(path, loc(), "expected three coordinates"));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    if points.is_empty() {
        return Err(parse_err(path, "line 1".into(), "no points"));
    }
    PointCloud::new(points).map_err(|e| parse_err(path, "body".into(), e.to_string()))
}

/// `dir/name` with the extension replaced by `suffix` appended to the stem.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("ply");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}
