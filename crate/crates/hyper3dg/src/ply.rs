//! Binary PLY persistence for Gaussian clouds.
//!
//! Layout: `binary_little_endian 1.0`, a single `element vertex M`, and 14
//! float properties per vertex in the fixed order
//! x, y, z, opacity, scale_0..2, rot_0..3, f_dc_0..2 — i.e. exactly the
//! attribute-matrix layout. Opacity is stored as a logit and scales as logs,
//! matching the in-memory representation; values are quantized to f32.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gs::{Gaussian, GaussianCloud, ATTR_DIM};

/// Property names in file order; index i maps to attribute column i.
const PROPS: [&str; ATTR_DIM] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::PlyParse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Save `cloud` as binary little-endian PLY.
pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::Config(
            "M >= 1 required: refusing to save an empty cloud".into(),
        ));
    }
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str("format binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in PROPS {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let mut payload = Vec::with_capacity(cloud.len() * ATTR_DIM * 4);
    for g in &cloud.gaussians {
        for v in g.attributes() {
            payload
                .write_all(&(v as f32).to_le_bytes())
                .expect("vec write cannot fail");
        }
    }

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Header scanner that tracks the byte offset of each line.
struct Lines<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next header line as UTF-8 along with the offset of its first byte.
    fn next_line(&mut self, path: &Path) -> Result<(u64, &'a str)> {
        let start = self.pos;
        let rest = &self.data[start..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
            parse_err(
                path,
                start as u64,
                "unterminated header line (no end_header?)",
            )
        })?;
        self.pos = start + nl + 1;
        let mut line = &rest[..nl];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        let text = std::str::from_utf8(line)
            .map_err(|_| parse_err(path, start as u64, "header line is not UTF-8"))?;
        Ok((start as u64, text))
    }
}

/// Load a Gaussian cloud from binary PLY written by [`save_ply`] (or any file
/// matching the documented schema). Parse failures report the byte offset.
pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut lines = Lines {
        data: &data,
        pos: 0,
    };

    let (off, magic) = lines.next_line(path)?;
    if magic.trim() != "ply" {
        return Err(parse_err(
            path,
            off,
            format!("expected 'ply' magic, got '{magic}'"),
        ));
    }
    let (off, format) = lines.next_line(path)?;
    if format.trim() != "format binary_little_endian 1.0" {
        return Err(parse_err(
            path,
            off,
            format!("unsupported format line '{format}' (need binary_little_endian 1.0)"),
        ));
    }

    // element vertex M (comments may appear before it)
    let count;
    loop {
        let (off, line) = lines.next_line(path)?;
        let line = line.trim();
        if line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("element"), Some("vertex"), Some(n)) => {
                count = n
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, off, format!("bad vertex count '{n}'")))?;
                break;
            }
            _ => {
                return Err(parse_err(
                    path,
                    off,
                    format!("expected 'element vertex <count>', got '{line}'"),
                ))
            }
        }
    }
    if count == 0 {
        return Err(parse_err(
            path,
            0,
            "M >= 1 required: element vertex count is 0",
        ));
    }

    // The 14 float properties, in exact order.
    let mut prop_idx = 0;
    loop {
        let (off, line) = lines.next_line(path)?;
        let line = line.trim();
        if line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        if line == "end_header" {
            if prop_idx != PROPS.len() {
                return Err(parse_err(
                    path,
                    off,
                    format!(
                        "missing property '{}' (got only {prop_idx} of {})",
                        PROPS[prop_idx],
                        PROPS.len()
                    ),
                ));
            }
            break;
        }
        if prop_idx == PROPS.len() {
            return Err(parse_err(
                path,
                off,
                format!("unexpected extra header line '{line}'"),
            ));
        }
        let expected = format!("property float {}", PROPS[prop_idx]);
        if line != expected {
            return Err(parse_err(
                path,
                off,
                format!("expected '{expected}', got '{line}'"),
            ));
        }
        prop_idx += 1;
    }

    let payload = &data[lines.pos..];
    let need = count * ATTR_DIM * 4;
    if payload.len() < need {
        return Err(parse_err(
            path,
            data.len() as u64,
            format!(
                "element count mismatch: header promises {count} vertices ({need} payload bytes), found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > need {
        return Err(parse_err(
            path,
            (lines.pos + need) as u64,
            format!(
                "trailing data: {} bytes after the last vertex",
                payload.len() - need
            ),
        ));
    }

    let mut gaussians = Vec::with_capacity(count);
    let mut row = [0.0f64; ATTR_DIM];
    for v in 0..count {
        for (j, slot) in row.iter_mut().enumerate() {
            let at = (v * ATTR_DIM + j) * 4;
            let bytes: [u8; 4] = payload[at..at + 4].try_into().expect("bounds checked");
            *slot = f32::from_le_bytes(bytes) as f64;
        }
        gaussians.push(Gaussian::from_attributes(&row)?);
    }
    GaussianCloud::new(gaussians)
}
