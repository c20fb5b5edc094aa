//! On-disk formats: numeric CSV matrices, images as CSV or 16-bit PGM with a
//! scale sidecar, and flat `key=value` text files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cluster::Clustering;
use crate::error::{Error, Result};
use crate::image::{Image, PoseEstimate, Projection};
use crate::simulate::{GroundTruth, Label, Source};

/// Fails with [`Error::MissingArtifact`] unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    require(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().flexible(true).from_path(path)?)
}

fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("{}:{line}: bad value '{field}'", path.display())))
}

/// Rows of numbers; rows may differ in length.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, rec) in reader(path, false)?.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| parse_field(path, i + 1, f))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_matrix<R: AsRef<[f64]>>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.write_record(row.as_ref().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One projection per row.
pub fn read_projections(path: &Path) -> Result<Vec<Projection>> {
    let rows = read_matrix(path)?;
    let len = rows.first().map_or(0, Vec::len);
    rows.into_iter()
        .map(|r| {
            if r.len() != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    actual: r.len(),
                });
            }
            Projection::new(r)
        })
        .collect()
}

pub fn write_projections(path: &Path, projections: &[Projection]) -> Result<()> {
    let rows: Vec<&[f64]> = projections.iter().map(Projection::bins).collect();
    write_matrix(path, &rows)
}

/// Row-major, one image row per line.
pub fn read_image_csv(path: &Path) -> Result<Image> {
    let rows = read_matrix(path)?;
    let side = rows.len();
    if rows.iter().any(|r| r.len() != side) {
        return Err(Error::InvalidImage(format!("{} is not square", path.display())));
    }
    Image::new(side, rows.concat())
}

pub fn write_image_csv(path: &Path, image: &Image) -> Result<()> {
    let rows: Vec<&[f64]> = image.pixels().chunks(image.side()).collect();
    write_matrix(path, &rows)
}

/// `foo.pgm` -> `foo.scale.txt`.
pub fn scale_sidecar(pgm: &Path) -> PathBuf {
    pgm.with_extension("scale.txt")
}

/// Writes a 16-bit big-endian binary PGM, mapping `[min, max]` linearly
/// onto `[0, 65535]`, and records the range in the sidecar file.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let (min, max) = image
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let span = max - min;
    let side = image.side();
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{side} {side}\n65535\n")?;
    for &v in image.pixels() {
        let level = if span > 0.0 {
            ((v - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        w.write_all(&level.to_be_bytes())?;
    }
    w.flush()?;
    fs::write(scale_sidecar(path), format!("scale={min},{max}\n"))?;
    Ok(())
}

/// Reads a PGM written by [`write_pgm`], restoring the linear scale from the
/// sidecar when present (otherwise levels map to `[0, 1]`).
pub fn read_pgm(path: &Path) -> Result<Image> {
    require(path)?;
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    // header: magic, width, height, maxval, separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
    if width != height {
        return Err(bad("image is not square"));
    }
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let levels: Vec<f64> = if wide {
        data.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64).collect()
    } else {
        data.iter().map(|&b| b as f64).collect()
    };
    let sidecar = scale_sidecar(path);
    let (min, max) = if sidecar.is_file() {
        let kv = read_key_values(&sidecar)?;
        let scale = kv.get("scale").ok_or_else(|| bad("sidecar has no scale"))?;
        let (a, b) = scale.split_once(',').ok_or_else(|| bad("bad scale"))?;
        (
            parse_field::<f64>(&sidecar, 1, a.trim())?,
            parse_field::<f64>(&sidecar, 1, b.trim())?,
        )
    } else {
        (0.0, 1.0)
    };
    let m = maxval as f64;
    Image::new(width, levels.into_iter().map(|l| min + l / m * (max - min)).collect())
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    require(path)?;
    parse_key_values(&fs::read_to_string(path)?)
}

pub fn write_key_values<K: AsRef<str>, V: AsRef<str>>(path: &Path, pairs: &[(K, V)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k.as_ref());
        s.push('=');
        s.push_str(v.as_ref());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Header `angle_deg,shift`, one pose per row.
pub fn write_poses(path: &Path, poses: &[PoseEstimate]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["angle_deg", "shift"])?;
    for p in poses {
        w.write_record([p.angle_degrees().to_string(), p.shift.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseEstimate>> {
    let mut out = Vec::new();
    for (i, rec) in reader(path, true)?.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        out.push(PoseEstimate::from_degrees(
            parse_field(path, i + 2, field(0))?,
            parse_field(path, i + 2, field(1))?,
        ));
    }
    Ok(out)
}

/// Header `angle_deg,shift,label,source`.
pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["angle_deg", "shift", "label", "source"])?;
    for i in 0..truth.len() {
        w.write_record([
            truth.angles[i].to_degrees().to_string(),
            truth.shifts[i].to_string(),
            truth.labels[i].as_str().to_string(),
            truth.sources[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let mut t = GroundTruth {
        angles: Vec::new(),
        shifts: Vec::new(),
        labels: Vec::new(),
        sources: Vec::new(),
    };
    for (i, rec) in reader(path, true)?.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("");
        t.angles.push(parse_field::<f64>(path, line, field(0))?.to_radians());
        t.shifts.push(parse_field(path, line, field(1))?);
        t.labels.push(field(2).parse::<Label>()?);
        t.sources.push(field(3).parse::<Source>()?);
    }
    Ok(t)
}

/// Header `assignment,discarded`, one row per projection.
pub fn write_clusters(path: &Path, clustering: &Clustering) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["assignment", "discarded"])?;
    for (a, d) in clustering.assignments.iter().zip(&clustering.discarded) {
        w.write_record([a.to_string(), (*d as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Assignments and discard flags.
pub fn read_clusters(path: &Path) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut assignments = Vec::new();
    let mut discarded = Vec::new();
    for (i, rec) in reader(path, true)?.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        assignments.push(parse_field(path, line, rec.get(0).unwrap_or(""))?);
        discarded.push(match rec.get(1).unwrap_or("") {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Parse(format!("{}:{line}: bad flag '{other}'", path.display()))),
        });
    }
    Ok((assignments, discarded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::head_phantom;

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![vec![0.1 + 0.2, -1e-300, 12345.678901234567], vec![f64::MIN_POSITIVE, 3.0]];
        write_matrix(&p, &rows).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), rows);
    }

    #[test]
    fn image_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        let z = head_phantom(16);
        write_image_csv(&p, &z).unwrap();
        assert_eq!(read_image_csv(&p).unwrap(), z);
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        let z = head_phantom(16).combine(1.0, &Image::zeros(16), 0.0);
        write_pgm(&p, &z).unwrap();
        let back = read_pgm(&p).unwrap();
        let (lo, hi) = z.pixels().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let step = (hi - lo) / 65535.0;
        for (a, b) in z.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= step);
        }
        let header = &fs::read(&p).unwrap()[..15];
        assert_eq!(header, b"P5\n16 16\n65535\n");
        assert!(fs::read_to_string(scale_sidecar(&p)).unwrap().starts_with("scale="));
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values("# c\n\na = 1\nb=x=y\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x=y");
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_matrix(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn poses_and_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses = vec![PoseEstimate::from_degrees(12.5, -1.5), PoseEstimate::from_degrees(179.0, 0.0)];
        let p = dir.path().join("poses.csv");
        write_poses(&p, &poses).unwrap();
        let back = read_poses(&p).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.angle - b.angle).abs() < 1e-12);
            assert_eq!(a.shift, b.shift);
        }
        let truth = GroundTruth {
            angles: vec![0.3, 1.2],
            shifts: vec![0.5, -2.0],
            labels: vec![Label::Inlier, Label::Class1],
            sources: vec![Source::Object, Source::Pool(7)],
        };
        let t = dir.path().join("truth.csv");
        write_truth(&t, &truth).unwrap();
        let back = read_truth(&t).unwrap();
        assert_eq!(back.labels, truth.labels);
        assert_eq!(back.sources, truth.sources);
        assert!((back.angles[1] - 1.2).abs() < 1e-12);
    }
}
