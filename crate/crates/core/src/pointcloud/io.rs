//! XYZ point files and the dataset manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Domain, Point, PointCloud};
use crate::error::{Error, Result};

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        message: message.into(),
    }
}

/// One point per line as `x y z`; values print in shortest round-trip form.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_xyz(path: &Path, label: Option<usize>, domain: Domain) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points: Vec<Point> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f32> = line
            .split(' ')
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", n + 1)))?;
        let [x, y, z] = vals[..] else {
            return Err(parse_err(path, format!("line {}: expected 3 values, got {}", n + 1, vals.len())));
        };
        points.push([x, y, z]);
    }
    PointCloud::new(points, label, domain).map_err(|e| parse_err(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    /// `None` is written as `-1`.
    pub label: Option<usize>,
    pub domain: Domain,
    pub split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["path", "label", "domain", "split"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let label = r.label.map_or("-1".to_string(), |l| l.to_string());
        w.write_record([r.path.as_str(), &label, &r.domain.to_string(), &r.split])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header != vec!["path", "label", "domain", "split"] {
        return Err(parse_err(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let label: i64 = rec[1]
            .parse()
            .map_err(|e| parse_err(path, format!("label {:?}: {e}", &rec[1])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(path, format!("label {l} below -1"))),
        };
        rows.push(ManifestRow {
            path: rec[0].to_string(),
            label,
            domain: rec[2].parse()?,
            split: rec[3].to_string(),
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        parse_err(path, e.to_string())
    }
}
