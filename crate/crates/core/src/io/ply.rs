//! Minimal PLY point clouds: one `vertex` element with `x y z` and an optional
//! `intensity` property. Reads `ascii` and `binary_little_endian` with float or
//! double properties; writes `binary_little_endian` floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A point and its return intensity.
pub type ScanPoint = ([f64; 3], f64);

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            other => return Err(Error::Ply(format!("unsupported property type `{other}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::F32 | Scalar::I32 | Scalar::U32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
            Scalar::U8 => b[0] as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
        }
    }
}

pub fn write_ply(path: &Path, points: &[ScanPoint]) -> Result<()> {
    fs::write(path, encode_ply(points))?;
    Ok(())
}

pub fn encode_ply(points: &[ScanPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(200 + points.len() * 16);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        points.len()
    )
    .expect("write to vec");
    for (p, i) in points {
        for v in [p[0], p[1], p[2], *i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<Vec<ScanPoint>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    decode_ply(&bytes)
}

pub fn decode_ply(bytes: &[u8]) -> Result<Vec<ScanPoint>> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Ply("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("header is not utf-8".into()))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Ply("missing `ply` signature".into()));
    }
    let mut binary = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(Error::Ply(format!("unsupported format `{other}`"))),
            ["element", name, n] => {
                if count.is_some() {
                    return Err(Error::Ply(format!("unexpected element `{name}`; only `vertex` is supported")));
                }
                if *name != "vertex" {
                    return Err(Error::Ply(format!("unexpected element `{name}` before vertex")));
                }
                in_vertex = true;
                count = Some(n.parse::<usize>().map_err(|_| Error::Ply(format!("bad vertex count `{n}`")))?);
            }
            ["property", "list", ..] => return Err(Error::Ply("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => props.push((name.to_string(), Scalar::parse(ty)?)),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(Error::Ply(format!("unrecognized header line `{line}`"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::Ply("missing format line".into()))?;
    let count = count.ok_or_else(|| Error::Ply("missing vertex element".into()))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Ply("vertex needs x, y and z".into())),
    };
    let ii = find("intensity");

    let mut values = vec![0.0; props.len()];
    let mut out = Vec::with_capacity(count);
    let mut push = |v: &[f64]| out.push(([v[ix], v[iy], v[iz]], ii.map_or(0.0, |i| v[i])));
    if binary {
        let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
        if body.len() < stride * count {
            return Err(Error::Truncated(format!(
                "ply body has {} bytes, {} vertices need {}",
                body.len(),
                count,
                stride * count
            )));
        }
        for row in body.chunks_exact(stride).take(count) {
            let mut off = 0;
            for (v, (_, t)) in values.iter_mut().zip(&props) {
                *v = t.read(&row[off..off + t.size()]);
                off += t.size();
            }
            push(&values);
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| Error::Ply("ascii body is not utf-8".into()))?;
        let mut rows = text.lines().filter(|l| !l.trim().is_empty());
        for i in 0..count {
            let row = rows.next().ok_or_else(|| Error::Truncated(format!("ply has {i} of {count} vertices")))?;
            let mut words = row.split_whitespace();
            for v in values.iter_mut() {
                let w = words.next().ok_or_else(|| Error::Ply(format!("vertex {i} has too few values")))?;
                *v = w.parse().map_err(|_| Error::Ply(format!("vertex {i}: bad number `{w}`")))?;
            }
            push(&values);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let pts = vec![([1.0, -2.5, 3.25], 0.5), ([0.0, 0.0, 1e3], 0.0)];
        assert_eq!(decode_ply(&encode_ply(&pts)).unwrap(), pts);
    }

    #[test]
    fn ascii_with_doubles_and_extra_props() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nend_header\n1 2 3 255\n-1 0.5 7 0\n";
        let pts = decode_ply(text.as_bytes()).unwrap();
        assert_eq!(pts, vec![([1.0, 2.0, 3.0], 0.0), ([-1.0, 0.5, 7.0], 0.0)]);
    }

    #[test]
    fn truncated_binary() {
        let bytes = encode_ply(&[([1.0, 2.0, 3.0], 0.1); 3]);
        assert!(matches!(decode_ply(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
    }

    #[test]
    fn rejects_missing_coordinates() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        assert!(decode_ply(text.as_bytes()).unwrap_err().to_string().contains("x, y and z"));
    }
}
