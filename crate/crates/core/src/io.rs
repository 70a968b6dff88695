//! Plain-text point cloud formats.
//!
//! * XYZ / XY text: one point per line, whitespace separated; `#` lines are
//!   comments. Lines hold `dim` coordinates, optionally followed by `dim`
//!   normal components (so 2, 3, 4 or 6 columns).
//! * ASCII PLY: an `element vertex` with `x`, `y`, optional `z` and optional
//!   `nx`, `ny`, `nz` properties. Other elements are skipped.
//!
//! Floats are written with 17 significant digits so files round-trip exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid number {tok:?}")))
}

/// Parses XYZ/XY text.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut columns = None;
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| parse_f64(t, idx + 1))
            .collect::<Result<Vec<f64>>>()?;
        match columns {
            None => {
                if ![2, 3, 4, 6].contains(&row.len()) {
                    return Err(parse_err(idx + 1, format!("unsupported column count {}", row.len())));
                }
                columns = Some(row.len());
            }
            Some(c) if c != row.len() => {
                return Err(parse_err(idx + 1, format!("expected {c} columns, found {}", row.len())));
            }
            _ => {}
        }
        values.push(row);
    }
    let Some(columns) = columns else {
        return Err(Error::EmptyCloud);
    };
    let (dim, with_normals) = match columns {
        2 => (2, false),
        3 => (3, false),
        4 => (2, true),
        _ => (3, true),
    };
    let mut coords = Vec::with_capacity(values.len() * dim);
    let mut normals = Vec::new();
    for row in &values {
        coords.extend_from_slice(&row[..dim]);
        if with_normals {
            normals.extend_from_slice(&row[dim..]);
        }
    }
    let cloud = PointCloud::new(dim, coords)?;
    if with_normals {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

/// Parses ASCII PLY.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "missing ply magic")),
    }

    // (name, count, properties) per element, in header order.
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    for (idx, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", f, _] => return Err(parse_err(idx + 1, format!("unsupported PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(idx + 1, "invalid element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(idx + 1, "property before element"))?;
                el.2.push(String::from("<list>"));
            }
            ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(idx + 1, "property before element"))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(parse_err(idx + 1, format!("unrecognized header line {raw:?}"))),
        }
    }
    if !ascii {
        return Err(parse_err(1, "missing format line"));
    }

    let mut coords = Vec::new();
    let mut normals = Vec::new();
    let mut dim = 0;
    let mut has_normals = false;
    for (name, count, props) in &elements {
        if name != "vertex" {
            // Skip the rows of other elements.
            for _ in 0..*count {
                lines.next();
            }
            continue;
        }
        let find = |p: &str| props.iter().position(|q| q == p);
        let (Some(ix), Some(iy)) = (find("x"), find("y")) else {
            return Err(parse_err(1, "vertex element lacks x/y"));
        };
        let iz = find("z");
        dim = if iz.is_some() { 3 } else { 2 };
        let normal_idx: Vec<usize> = ["nx", "ny", "nz"][..dim]
            .iter()
            .filter_map(|p| find(p))
            .collect();
        has_normals = normal_idx.len() == dim;
        let mut pos: Vec<usize> = vec![ix, iy];
        pos.extend(iz);
        for _ in 0..*count {
            let (idx, raw) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of vertex data"))?;
            let row = raw
                .split_whitespace()
                .map(|t| parse_f64(t, idx + 1))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() < props.len() {
                return Err(parse_err(idx + 1, "short vertex row"));
            }
            coords.extend(pos.iter().map(|&p| row[p]));
            if has_normals {
                normals.extend(normal_idx.iter().map(|&p| row[p]));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let cloud = PointCloud::new(dim, coords)?;
    if has_normals {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads a cloud, choosing the format from the extension (`.ply` or text).
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if is_ply(path) {
        parse_ply(&text)
    } else {
        parse_xyz(&text)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_xyz(cloud: &PointCloud, mut out: impl Write) -> Result<()> {
    let d = cloud.dim();
    for i in 0..cloud.len() {
        let mut fields: Vec<String> = cloud.point(i).iter().map(|&v| fmt(v)).collect();
        if let Some(n) = cloud.normal(i) {
            fields.extend(n.iter().map(|&v| fmt(v)));
        }
        debug_assert!(fields.len() == d || fields.len() == 2 * d);
        writeln!(out, "{}", fields.join(" "))?;
    }
    Ok(())
}

pub fn write_ply(cloud: &PointCloud, mut out: impl Write) -> Result<()> {
    let axes = &["x", "y", "z"][..cloud.dim()];
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    for a in axes {
        writeln!(out, "property double {a}")?;
    }
    if cloud.normals().is_some() {
        for a in axes {
            writeln!(out, "property double n{a}")?;
        }
    }
    writeln!(out, "end_header")?;
    write_xyz(cloud, out)
}

/// Writes a cloud, choosing the format from the extension.
pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path)?);
    if is_ply(path) {
        write_ply(cloud, &mut w)?;
    } else {
        write_xyz(cloud, &mut w)?;
    }
    w.flush()?;
    Ok(())
}
