//! Point-cloud file formats.
//!
//! `xyzrgbl-text` is the read/write interchange format:
//!
//! ```text
//! # comment lines start with '#'
//! xyzrgbl <N> <class_count> <has_labels:0|1>
//! x y z r g b [label]
//! ```
//!
//! Colors are reals in `[0, 1]`. Values are written in shortest round-trip
//! decimal form, so a write/read cycle reproduces every field bit for bit.
//!
//! PLY (ascii or binary little-endian) is read-only: the `vertex` element
//! with `x y z red green blue` and an optional `label` (or `class`)
//! property. Integer colors are divided by 255.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

use crate::{CloudError, LabeledPointCloud, Result};

pub const XYZRGBL_MAGIC: &str = "xyzrgbl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    XyzrgblText,
    /// PLY vertex data; labels are validated against `class_count`.
    Ply { class_count: usize },
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<LabeledPointCloud> {
    let file = File::open(path)?;
    match format {
        CloudFormat::XyzrgblText => parse_xyzrgbl(BufReader::new(file)),
        CloudFormat::Ply { class_count } => parse_ply(&mut BufReader::new(file), class_count),
    }
}

pub fn write_cloud(cloud: &LabeledPointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::XyzrgblText => {
            let mut w = BufWriter::new(File::create(path)?);
            write_xyzrgbl(cloud, &mut w)?;
            w.flush()?;
            Ok(())
        }
        CloudFormat::Ply { .. } => Err(CloudError::Unsupported("PLY output".into())),
    }
}

pub fn write_xyzrgbl<W: Write>(cloud: &LabeledPointCloud, w: &mut W) -> Result<()> {
    let labels = cloud.labels();
    writeln!(w, "{XYZRGBL_MAGIC} {} {} {}", cloud.len(), cloud.class_count(), labels.is_some() as u8)?;
    for (i, (p, c)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
        write!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
        match labels {
            Some(l) => writeln!(w, " {}", l[i])?,
            None => writeln!(w)?,
        }
    }
    Ok(())
}

fn parse_error(line: usize, message: impl Into<String>) -> CloudError {
    CloudError::Parse { line, message: message.into() }
}

pub fn parse_xyzrgbl<R: BufRead>(reader: R) -> Result<LabeledPointCloud> {
    let mut header: Option<(usize, usize, bool)> = None;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let Some((n, class_count, has_labels)) = header else {
            header = Some(parse_header(&fields, lineno)?);
            let (n, _, _) = header.unwrap();
            positions.reserve(n);
            colors.reserve(n);
            continue;
        };
        let record = positions.len();
        if record >= n {
            return Err(parse_error(lineno, format!("more than the {n} records declared in the header")));
        }
        let expected = if has_labels { 7 } else { 6 };
        if fields.len() != expected {
            return Err(parse_error(lineno, format!("expected {expected} fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 6];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| parse_error(lineno, format!("invalid number `{f}`")))?;
        }
        if v[..3].iter().any(|x| !x.is_finite()) {
            return Err(CloudError::NonFinite { record, line: Some(lineno) });
        }
        if v[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(parse_error(lineno, "color components must lie in [0, 1]"));
        }
        positions.push([v[0], v[1], v[2]]);
        colors.push([v[3], v[4], v[5]]);
        if has_labels {
            let label: usize =
                fields[6].parse().map_err(|_| parse_error(lineno, format!("invalid label `{}`", fields[6])))?;
            if label >= class_count {
                return Err(CloudError::LabelOutOfRange { record, line: Some(lineno), label, class_count });
            }
            labels.push(label);
        }
    }
    let (n, class_count, has_labels) = header.ok_or_else(|| parse_error(last_line, "missing xyzrgbl header"))?;
    if positions.len() != n {
        return Err(parse_error(last_line, format!("header declares {n} records, found {}", positions.len())));
    }
    LabeledPointCloud::new(positions, colors, has_labels.then_some(labels), class_count)
}

fn parse_header(fields: &[&str], lineno: usize) -> Result<(usize, usize, bool)> {
    match fields {
        [magic, n, classes, flag] if *magic == XYZRGBL_MAGIC => {
            let n = n.parse().map_err(|_| parse_error(lineno, format!("invalid point count `{n}`")))?;
            let classes =
                classes.parse().map_err(|_| parse_error(lineno, format!("invalid class count `{classes}`")))?;
            let flag = match *flag {
                "0" => false,
                "1" => true,
                other => return Err(parse_error(lineno, format!("has_labels must be 0 or 1, got `{other}`"))),
            };
            Ok((n, classes, flag))
        }
        _ => Err(parse_error(lineno, "malformed header, expected `xyzrgbl <N> <class_count> <0|1>`")),
    }
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn is_integer(p: &Property) -> bool {
    !matches!(p, Property::Float(_) | Property::Double(_))
}

pub fn parse_ply<R: std::io::Read>(reader: &mut R, class_count: usize) -> Result<LabeledPointCloud> {
    let ply = Parser::<DefaultElement>::new().read_ply(reader).map_err(|e| CloudError::Ply(e.to_string()))?;
    let vertices = ply.payload.get("vertex").ok_or_else(|| CloudError::Ply("no `vertex` element".into()))?;
    let mut positions = Vec::with_capacity(vertices.len());
    let mut colors = Vec::with_capacity(vertices.len());
    let mut labels = Vec::with_capacity(vertices.len());
    let mut has_labels = None;
    for (record, v) in vertices.iter().enumerate() {
        let get = |name: &str| -> Result<&Property> {
            v.get(name).ok_or_else(|| CloudError::Ply(format!("vertex {record} lacks property `{name}`")))
        };
        let num = |name: &str| -> Result<f64> {
            scalar(get(name)?).ok_or_else(|| CloudError::Ply(format!("vertex property `{name}` is a list")))
        };
        let p = [num("x")?, num("y")?, num("z")?];
        if p.iter().any(|x| !x.is_finite()) {
            return Err(CloudError::NonFinite { record, line: None });
        }
        let mut c = [0.0; 3];
        for (slot, name) in c.iter_mut().zip(["red", "green", "blue"]) {
            let prop = get(name)?;
            let x = scalar(prop).ok_or_else(|| CloudError::Ply(format!("vertex property `{name}` is a list")))?;
            *slot = if is_integer(prop) { x / 255.0 } else { x };
        }
        if c.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(CloudError::Ply(format!("vertex {record}: color outside [0, 1] after normalisation")));
        }
        let label = v.get("label").or_else(|| v.get("class"));
        match (has_labels, label) {
            (None, l) => has_labels = Some(l.is_some()),
            (Some(true), None) | (Some(false), Some(_)) => {
                return Err(CloudError::Ply(format!("vertex {record}: inconsistent label property")))
            }
            _ => {}
        }
        if let Some(l) = label {
            let x = scalar(l).filter(|x| *x >= 0.0 && x.fract() == 0.0);
            let x = x.ok_or_else(|| CloudError::Ply(format!("vertex {record}: label is not a class index")))?;
            let label = x as usize;
            if label >= class_count {
                return Err(CloudError::LabelOutOfRange { record, line: None, label, class_count });
            }
            labels.push(label);
        }
        positions.push(p);
        colors.push(c);
    }
    let has_labels = has_labels.unwrap_or_else(|| {
        ply.header.elements.get("vertex").is_some_and(|e| e.properties.contains_key("label") || e.properties.contains_key("class"))
    });
    LabeledPointCloud::new(positions, colors, has_labels.then_some(labels), class_count)
}
